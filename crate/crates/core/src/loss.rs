//! Training loss over candidate grids.
//!
//! `obj = Σ_c BCE(c_obj, ĉ_obj)` over every candidate of every head, and
//! `cls = Σ_c Σ_n ĉ_obj · BCE(c_cls n, ĉ_cls n)`, so class logits only
//! learn where the ground truth marks an object. Both are plain sums.

use diffcore::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::assign::TargetGrids;
use crate::error::{Error, Result};
use crate::net::CandidateGrids;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
}

/// Graph nodes of the three loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub obj: Var,
    pub cls: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().expect("scalar loss");
        LossBreakdown {
            obj_loss: v(self.obj),
            cls_loss: v(self.cls),
            total: v(self.total),
        }
    }
}

/// Full-layout target and the two weight masks for one head.
fn head_masks(head_shape: &[usize], obj: &Tensor, cls: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (w, h, c) = (head_shape[0], head_shape[1], head_shape[2]);
    let nc = c - 1;
    if obj.shape() != [w, h] || cls.shape() != [w, h, nc] {
        return Err(diffcore::DiffError::Shape {
            op: "loss",
            detail: format!(
                "head {head_shape:?} vs targets {:?} / {:?}",
                obj.shape(),
                cls.shape()
            ),
        }
        .into());
    }
    let cells = w * h;
    let mut target = vec![0.0; cells * c];
    let mut w_obj = vec![0.0; cells * c];
    let mut w_cls = vec![0.0; cells * c];
    for cell in 0..cells {
        let o = obj.data()[cell];
        target[cell * c] = o;
        w_obj[cell * c] = 1.0;
        for n in 0..nc {
            target[cell * c + 1 + n] = cls.data()[cell * nc + n];
            w_cls[cell * c + 1 + n] = o;
        }
    }
    let shape = head_shape.to_vec();
    Ok((
        Tensor::new(shape.clone(), target)?,
        Tensor::new(shape.clone(), w_obj)?,
        Tensor::new(shape, w_cls)?,
    ))
}

/// Records the loss of `heads` (`[W_k, H_k, 1 + N_c]` nodes) on `g`.
pub fn loss_graph(g: &mut Graph, heads: &[Var], targets: &TargetGrids) -> Result<LossVars> {
    if heads.len() != targets.heads.len() {
        return Err(Error::Usage(format!(
            "{} heads but {} target grids",
            heads.len(),
            targets.heads.len()
        )));
    }
    let mut obj_terms = Vec::with_capacity(heads.len());
    let mut cls_terms = Vec::with_capacity(heads.len());
    for (&head, t) in heads.iter().zip(&targets.heads) {
        let shape = g.value(head).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Usage(format!("head output must be rank 3, got {shape:?}")));
        }
        let (target, w_obj, w_cls) = head_masks(&shape, &t.obj, &t.cls)?;
        obj_terms.push(g.bce_weighted(head, &target, &w_obj)?);
        cls_terms.push(g.bce_weighted(head, &target, &w_cls)?);
    }
    let mut sum = |terms: Vec<Var>| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    };
    let obj = sum(obj_terms)?;
    let cls = sum(cls_terms)?;
    let total = g.add(obj, cls)?;
    Ok(LossVars { obj, cls, total })
}

pub fn total_loss(grids: &CandidateGrids, targets: &TargetGrids) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let heads = grids
        .heads
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<diffcore::Result<Vec<_>>>()?;
    Ok(loss_graph(&mut g, &heads, targets)?.breakdown(&g))
}

pub fn objectness_loss(grids: &CandidateGrids, targets: &TargetGrids) -> Result<f64> {
    Ok(total_loss(grids, targets)?.obj_loss)
}

pub fn class_loss(grids: &CandidateGrids, targets: &TargetGrids) -> Result<f64> {
    Ok(total_loss(grids, targets)?.cls_loss)
}
