use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

/// One parameter handed to [`Adam::step`] together with its gradient.
pub struct ParamRef<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a [f64],
}

/// Bias-corrected Adam over a fixed, ordered list of parameters.
///
/// Moment buffers are created on the first step and must keep matching the
/// parameter shapes afterwards.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [ParamRef<'_>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(DiffError::shape(
                "adam",
                format!("state tracks {} parameters, got {}", self.first.len(), params.len()),
            ));
        }
        for (k, p) in params.iter().enumerate() {
            if p.grad.len() != p.value.numel() || self.first[k].len() != p.value.numel() {
                return Err(DiffError::shape(
                    "adam",
                    format!("parameter `{}` does not match its gradient or state", p.name),
                ));
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(DiffError::NonFiniteGradient {
                    name: p.name.to_string(),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for (((x, &g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
