//! Objectness and class targets from box annotations.
//!
//! For head `k` with a `W_k × H_k` grid, an object with normalized size
//! `(W_o, H_o)` spans `(W_r, H_r) = (W_o·W_k, H_o·H_k)` cells. Cell
//! `(i, j)` is responsible for it when
//!
//! ```text
//! x_c − p_k·W_r/2 ≤ i ≤ x_c + p_k·W_r/2   and   y_c − p_k·H_r/2 ≤ j ≤ y_c + p_k·H_r/2
//! ```
//!
//! where `(x_c, y_c)` is the integer index of the cell holding the object's
//! center. `p_k = 0` keeps only the center cell; `p_k = 1` covers the box.

use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::NetworkConfig;
use crate::scenes::{Scene, SceneObject};

/// Per-head expansion fractions, head 1 = stride 32.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResponsibilityConfig {
    pub p: [f64; 3],
}

impl Default for ResponsibilityConfig {
    fn default() -> Self {
        ResponsibilityConfig { p: [0.0, 0.1, 0.5] }
    }
}

impl ResponsibilityConfig {
    pub fn new(p: [f64; 3]) -> Result<Self> {
        let cfg = ResponsibilityConfig { p };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config(format!("p values {:?} must lie in [0,1]", self.p)));
        }
        Ok(())
    }
}

/// Index of the cell containing the object's center, clamped to the grid.
pub fn center_cell(obj: &SceneObject, w: usize, h: usize) -> (usize, usize) {
    let idx = |c: f64, n: usize| ((c * n as f64).floor().max(0.0) as usize).min(n - 1);
    (idx(obj.center.0, w), idx(obj.center.1, h))
}

/// Inclusive integer range `[lo, hi]` of cells within `margin` of `center`,
/// clipped to `[0, n)`.
fn span(center: usize, margin: f64, n: usize) -> (usize, usize) {
    let lo = (center as f64 - margin).ceil().max(0.0) as usize;
    let hi = ((center as f64 + margin).floor() as usize).min(n - 1);
    (lo, hi)
}

/// Responsible cells `(i, j)` in row-major `i`-then-`j` order.
pub fn responsible_cells(obj: &SceneObject, w: usize, h: usize, p: f64) -> Vec<(usize, usize)> {
    let (xc, yc) = center_cell(obj, w, h);
    let w_r = obj.size.0 * w as f64;
    let h_r = obj.size.1 * h as f64;
    let (i0, i1) = span(xc, p * w_r / 2.0, w);
    let (j0, j1) = span(yc, p * h_r / 2.0, h);
    (i0..=i1).flat_map(|i| (j0..=j1).map(move |j| (i, j))).collect()
}

/// Targets of one head: `obj` is `[W, H]`, `cls` is `[W, H, N_c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTargets {
    pub obj: Tensor,
    pub cls: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrids {
    pub heads: Vec<HeadTargets>,
}

impl TargetGrids {
    pub fn positives(&self) -> usize {
        self.heads
            .iter()
            .map(|h| h.obj.data().iter().filter(|&&v| v == 1.0).count())
            .sum()
    }
}

/// Union over annotated objects of their responsible cells. Foreign shapes
/// (negative class id) produce no targets.
pub fn build_targets(scene: &Scene, config: &NetworkConfig, p: &ResponsibilityConfig) -> TargetGrids {
    let nc = config.num_classes;
    let heads = config
        .grid_sizes()
        .iter()
        .zip(p.p)
        .map(|(&n, pk)| {
            let mut obj = vec![0.0; n * n];
            let mut cls = vec![0.0; n * n * nc];
            for o in scene.objects.iter().filter(|o| o.is_in_distribution()) {
                let class = o.class_id as usize;
                for (i, j) in responsible_cells(o, n, n, pk) {
                    obj[i * n + j] = 1.0;
                    cls[(i * n + j) * nc + class] = 1.0;
                }
            }
            HeadTargets {
                obj: Tensor::new(vec![n, n], obj).expect("binary targets"),
                cls: Tensor::new(vec![n, n, nc], cls).expect("binary targets"),
            }
        })
        .collect();
    TargetGrids { heads }
}
