//! Recorded computation graph with reverse-mode gradients.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward rule. Nodes are stored in execution order, so walking
//! the record backwards is already a reverse topological order.

use crate::error::{DiffError, Result};
use crate::linalg::{col2im_add, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Sigmoid {
        input: Var,
    },
    Bce {
        logit: Var,
        target: Tensor,
        weight: Option<Tensor>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a logit against a target in `[0, 1]`.
pub fn bce_scalar(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite { op })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn permuted_strides(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = axes.iter().map(|&a| strides[a]).collect();
    (out_shape, src_strides)
}

/// Calls `f(dst_index, src_index)` for every element of the permuted array.
fn for_each_permuted(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..numel {
        f(dst, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward root with respect to `v`.
    ///
    /// After [`Graph::backward`], every `requires_grad` leaf has a gradient;
    /// leaves with no path to the root hold exact zeros.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Records a leaf. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", value.data())?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Cross-correlation of `input[C_in,H,W]` with `kernel[C_out,C_in,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.value(input).shape();
        let ks = self.value(kernel).shape();
        let bs = self.value(bias).shape();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(DiffError::shape(
                OP,
                format!("expected input [C,H,W] and kernel [O,C,kh,kw], got {xs:?} and {ks:?}"),
            ));
        }
        if ks[1] != xs[0] {
            return Err(DiffError::shape(
                OP,
                format!("kernel expects {} input channels, input has {}", ks[1], xs[0]),
            ));
        }
        if bs != [ks[0]] {
            return Err(DiffError::shape(OP, format!("bias {bs:?} for {} outputs", ks[0])));
        }
        if ks[2].is_multiple_of(2) || ks[3].is_multiple_of(2) {
            return Err(DiffError::shape(OP, format!("kernel extents must be odd, got {ks:?}")));
        }
        if stride == 0 {
            return Err(DiffError::shape(OP, "stride must be positive"));
        }
        let (h, w) = (xs[1], xs[2]);
        let (kh, kw) = (ks[2], ks[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(DiffError::shape(OP, format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        let geom = ConvGeom {
            c_in: xs[0],
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        };
        let c_out = ks[0];
        let cols = im2col(self.value(input).data(), &geom);
        let out_len = geom.out_len();
        let mut out = vec![0.0; c_out * out_len];
        for (co, &b) in self.value(bias).data().iter().enumerate() {
            out[co * out_len..(co + 1) * out_len].fill(b);
        }
        gemm(
            c_out,
            geom.patch_len(),
            out_len,
            self.value(kernel).data(),
            false,
            &cols,
            false,
            1.0,
            &mut out,
        );
        check_finite(OP, &out)?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        let value = Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Elementwise `max(x, slope·x)`; the derivative at 0 is taken as 1.
    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(DiffError::Domain {
                op: "leaky_relu",
                detail: format!("slope {slope} outside (0,1)"),
            });
        }
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(input);
        Ok(self.push(value, Op::LeakyRelu { input, slope }, rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(input);
        Ok(self.push(value, Op::Sigmoid { input }, rg))
    }

    /// Summed binary cross-entropy of logits against targets in `[0,1]`.
    pub fn bce(&mut self, logit: Var, target: &Tensor) -> Result<Var> {
        self.bce_inner(logit, target, None)
    }

    /// Like [`Graph::bce`], with a nonnegative constant weight per element.
    pub fn bce_weighted(&mut self, logit: Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        self.bce_inner(logit, target, Some(weight))
    }

    fn bce_inner(&mut self, logit: Var, target: &Tensor, weight: Option<&Tensor>) -> Result<Var> {
        const OP: &str = "bce";
        let z = self.value(logit);
        if target.shape() != z.shape() {
            return Err(DiffError::shape(
                OP,
                format!("target {:?} vs logits {:?}", target.shape(), z.shape()),
            ));
        }
        if let Some(&t) = target.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(DiffError::Domain {
                op: OP,
                detail: format!("target {t} outside [0,1]"),
            });
        }
        if let Some(w) = weight {
            if w.shape() != z.shape() {
                return Err(DiffError::shape(OP, format!("weight {:?} vs logits {:?}", w.shape(), z.shape())));
            }
            if w.data().iter().any(|&v| v < 0.0) {
                return Err(DiffError::Domain {
                    op: OP,
                    detail: "negative weight".into(),
                });
            }
        }
        let mut total = 0.0;
        for (i, (&zi, &ti)) in z.data().iter().zip(target.data()).enumerate() {
            let wi = weight.map_or(1.0, |w| w.data()[i]);
            if wi != 0.0 {
                total += wi * bce_scalar(zi, ti);
            }
        }
        check_finite(OP, &[total])?;
        let rg = self.rg(logit);
        Ok(self.push(
            Tensor::from_parts(Vec::new(), vec![total]),
            Op::Bce {
                logit,
                target: target.clone(),
                weight: weight.cloned(),
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DiffError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &data)?;
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        check_finite("mul", &data)?;
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let x = self.value(a);
        let data: Vec<f64> = x.data().iter().map(|v| v * factor).collect();
        check_finite("scale", &data)?;
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Scale(a, factor), rg))
    }

    /// Sum of all elements, accumulated sequentially in row-major order.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        check_finite("sum", &[total])?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(Vec::new(), vec![total]), Op::Sum(a), rg))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let rank = x.ndim();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(DiffError::shape("permute", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let (out_shape, src_strides) = permuted_strides(x.shape(), axes);
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for_each_permuted(&out_shape, &src_strides, |d, s| out[d] = src[s]);
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                input,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over the spatial axes of `[C,H,W]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 3 {
            return Err(DiffError::shape("global_avg_pool", format!("expected [C,H,W], got {:?}", x.shape())));
        }
        let c = x.shape()[0];
        let plane = x.shape()[1] * x.shape()[2];
        let data = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(input);
        Ok(self.push(Tensor::from_parts(vec![c], data), Op::GlobalAvgPool { input }, rg))
    }

    /// Affine map `weight[out,in] · input[in] + bias[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(DiffError::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let data: Vec<f64> = (0..n_out)
            .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        check_finite("linear", &data)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(vec![n_out], data),
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// May run once per graph; build a fresh graph for the next step.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(DiffError::Usage("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(DiffError::Usage(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        if self.rg(loss) {
            self.grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grad.is_none() {
                *grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, grad) {
                check_finite("backward", g)?;
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Split borrows: the op is read while other nodes' grads are written.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        let rg = |v: Var| nodes[v.0].requires_grad;
        let mut grads = std::mem::take(&mut self.grads);
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if rg(v) {
                let n = nodes[v.0].value.numel();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let c_out = nodes[kernel.0].value.shape()[0];
                let out_len = geom.out_len();
                let patch = geom.patch_len();
                acc(*bias, &mut |gb| {
                    for (co, b) in gb.iter_mut().enumerate() {
                        *b += g[co * out_len..(co + 1) * out_len].iter().sum::<f64>();
                    }
                });
                acc(*kernel, &mut |gk| {
                    gemm(c_out, out_len, patch, g, false, cols, true, 1.0, gk);
                });
                acc(*input, &mut |gx| {
                    let mut dcols = vec![0.0; patch * out_len];
                    gemm(patch, c_out, out_len, val(*kernel), true, g, false, 0.0, &mut dcols);
                    col2im_add(&dcols, geom, gx);
                });
            }
            Op::LeakyRelu { input, slope } => {
                let x = val(*input);
                acc(*input, &mut |gx| {
                    for ((d, &xi), &gi) in gx.iter_mut().zip(x).zip(g) {
                        *d += if xi >= 0.0 { gi } else { slope * gi };
                    }
                });
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                acc(*input, &mut |gx| {
                    for ((d, &yi), &gi) in gx.iter_mut().zip(y).zip(g) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Bce {
                logit,
                target,
                weight,
            } => {
                let z = val(*logit);
                acc(*logit, &mut |gz| {
                    for (k, d) in gz.iter_mut().enumerate() {
                        let w = weight.as_ref().map_or(1.0, |w| w.data()[k]);
                        if w != 0.0 {
                            *d += g[0] * w * (sigmoid_scalar(z[k]) - target.data()[k]);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((d, &y), &gi) in ga.iter_mut().zip(xb).zip(g) {
                        *d += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, &x), &gi) in gb.iter_mut().zip(xa).zip(g) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(a, factor) => {
                acc(*a, &mut |ga| {
                    for (d, &gi) in ga.iter_mut().zip(g) {
                        *d += factor * gi;
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Permute { input, axes } => {
                let (out_shape, src_strides) = permuted_strides(nodes[input.0].value.shape(), axes);
                acc(*input, &mut |gx| {
                    for_each_permuted(&out_shape, &src_strides, |d, s| gx[s] += g[d]);
                });
            }
            Op::GlobalAvgPool { input } => {
                let s = nodes[input.0].value.shape();
                let plane = s[1] * s[2];
                acc(*input, &mut |gx| {
                    for (c, chunk) in gx.chunks_mut(plane).enumerate() {
                        let share = g[c] / plane as f64;
                        chunk.iter_mut().for_each(|d| *d += share);
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = val(*input);
                let w = val(*weight);
                let n_in = x.len();
                acc(*bias, &mut |gb| add_into(gb, g));
                acc(*weight, &mut |gw| {
                    for (o, &go) in g.iter().enumerate() {
                        for (d, &xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                            *d += go * xi;
                        }
                    }
                });
                acc(*input, &mut |gx| {
                    for (o, &go) in g.iter().enumerate() {
                        for (d, &wi) in gx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *d += go * wi;
                        }
                    }
                });
            }
        }
        self.nodes = nodes;
        self.grads = grads;
    }
}
