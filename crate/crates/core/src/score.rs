//! Inference-time scores: class probabilities, grid OOD scores and their
//! ablations, energy fusion and flat-classifier baselines.
//!
//! Higher scores mean "more in-distribution" for every method; the decision
//! rule accepts a sample as in-distribution when `score ≥ τ`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use diffcore::{sigmoid_scalar, softplus, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::CandidateGrids;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassAgg {
    Max,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAgg {
    Max,
    Multiply,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AggregationChoice {
    pub class_agg: ClassAgg,
    pub head_agg: HeadAgg,
}

impl AggregationChoice {
    pub const DEFAULT: AggregationChoice = AggregationChoice {
        class_agg: ClassAgg::Max,
        head_agg: HeadAgg::Sum,
    };

    pub fn all() -> Vec<AggregationChoice> {
        let mut out = Vec::with_capacity(6);
        for class_agg in [ClassAgg::Max, ClassAgg::Sum] {
            for head_agg in [HeadAgg::Max, HeadAgg::Multiply, HeadAgg::Sum] {
                out.push(AggregationChoice { class_agg, head_agg });
            }
        }
        out
    }
}

impl fmt::Display for ClassAgg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassAgg::Max => "max",
            ClassAgg::Sum => "sum",
        })
    }
}

impl fmt::Display for HeadAgg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadAgg::Max => "max",
            HeadAgg::Multiply => "multiply",
            HeadAgg::Sum => "sum",
        })
    }
}

impl FromStr for ClassAgg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(ClassAgg::Max),
            "sum" => Ok(ClassAgg::Sum),
            other => Err(Error::config(format!("unknown class aggregator `{other}`"))),
        }
    }
}

impl FromStr for HeadAgg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(HeadAgg::Max),
            "multiply" => Ok(HeadAgg::Multiply),
            "sum" => Ok(HeadAgg::Sum),
            other => Err(Error::config(format!("unknown head aggregator `{other}`"))),
        }
    }
}

/// Every scoring method known to the evaluator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Yolood,
    YoloodObj,
    YoloodCls,
    YoloodAgg(AggregationChoice),
    YoloodJointEnergy,
    FlatMaxLogit,
    FlatMsp,
    FlatJointEnergy,
}

impl Method {
    pub const GRID: [Method; 4] = [Method::Yolood, Method::YoloodObj, Method::YoloodCls, Method::YoloodJointEnergy];
    pub const FLAT: [Method; 3] = [Method::FlatMaxLogit, Method::FlatMsp, Method::FlatJointEnergy];

    /// True for baselines that read the pooled classifier rather than the grids.
    pub fn is_flat(self) -> bool {
        matches!(self, Method::FlatMaxLogit | Method::FlatMsp | Method::FlatJointEnergy)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Yolood => f.write_str("yolood"),
            Method::YoloodObj => f.write_str("yolood_obj"),
            Method::YoloodCls => f.write_str("yolood_cls"),
            Method::YoloodAgg(c) => write!(f, "yolood_agg({},{})", c.class_agg, c.head_agg),
            Method::YoloodJointEnergy => f.write_str("yolood_joint_energy"),
            Method::FlatMaxLogit => f.write_str("flat_maxlogit"),
            Method::FlatMsp => f.write_str("flat_msp"),
            Method::FlatJointEnergy => f.write_str("flat_joint_energy"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "yolood" => Method::Yolood,
            "yolood_obj" => Method::YoloodObj,
            "yolood_cls" => Method::YoloodCls,
            "yolood_joint_energy" => Method::YoloodJointEnergy,
            "flat_maxlogit" => Method::FlatMaxLogit,
            "flat_msp" => Method::FlatMsp,
            "flat_joint_energy" => Method::FlatJointEnergy,
            _ => {
                let inner = s
                    .strip_prefix("yolood_agg(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::config(format!("unknown scoring method `{s}`")))?;
                let (c, h) = inner
                    .split_once(',')
                    .ok_or_else(|| Error::config(format!("expected yolood_agg(<class>,<head>), got `{s}`")))?;
                Method::YoloodAgg(AggregationChoice {
                    class_agg: c.trim().parse()?,
                    head_agg: h.trim().parse()?,
                })
            }
        })
    }
}

/// `[k][n]`: best joint score `max_c σ(obj)·σ(cls_n)` of head `k` for class `n`.
fn best_joint(grids: &CandidateGrids) -> Vec<Vec<f64>> {
    let nc = grids.num_classes();
    (0..grids.heads.len())
        .map(|k| {
            let mut best = vec![f64::NEG_INFINITY; nc];
            for c in grids.candidates(k) {
                let obj = sigmoid_scalar(c[0]);
                for (b, &z) in best.iter_mut().zip(&c[1..]) {
                    *b = b.max(obj * sigmoid_scalar(z));
                }
            }
            best
        })
        .collect()
}

/// `y_n = max_c σ(c_obj)·σ(c_cls n)` over all candidates of all heads.
pub fn class_probabilities(grids: &CandidateGrids) -> Vec<f64> {
    let per_head = best_joint(grids);
    (0..grids.num_classes())
        .map(|n| per_head.iter().map(|h| h[n]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn score_agg(grids: &CandidateGrids, choice: AggregationChoice) -> f64 {
    let per_head = best_joint(grids);
    let per_class = (0..grids.num_classes()).map(|n| {
        let vals = per_head.iter().map(|h| h[n]);
        match choice.head_agg {
            HeadAgg::Max => vals.fold(f64::NEG_INFINITY, f64::max),
            HeadAgg::Multiply => vals.product(),
            HeadAgg::Sum => vals.sum(),
        }
    });
    match choice.class_agg {
        ClassAgg::Max => per_class.fold(f64::NEG_INFINITY, f64::max),
        ClassAgg::Sum => per_class.sum(),
    }
}

/// Strongest per-class detection summed across heads, in `(0, 3)`.
pub fn yolood_score(grids: &CandidateGrids) -> f64 {
    score_agg(grids, AggregationChoice::DEFAULT)
}

/// `Σ_k max_c σ(c_obj)`.
pub fn score_obj_only(grids: &CandidateGrids) -> f64 {
    (0..grids.heads.len())
        .map(|k| {
            grids
                .candidates(k)
                .map(|c| sigmoid_scalar(c[0]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

/// `max_n Σ_k max_c σ(c_cls n)`.
pub fn score_cls_only(grids: &CandidateGrids) -> f64 {
    let nc = grids.num_classes();
    let mut totals = vec![0.0; nc];
    for k in 0..grids.heads.len() {
        let mut best = vec![f64::NEG_INFINITY; nc];
        for c in grids.candidates(k) {
            for (b, &z) in best.iter_mut().zip(&c[1..]) {
                *b = b.max(sigmoid_scalar(z));
            }
        }
        for (t, b) in totals.iter_mut().zip(best) {
            *t += b;
        }
    }
    totals.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// `Σ_n Σ_k −max_c E(c_obj)·E(c_cls n)` with `E(z) = −softplus(z)`.
pub fn yolood_joint_energy(grids: &CandidateGrids) -> f64 {
    let nc = grids.num_classes();
    let mut total = 0.0;
    for k in 0..grids.heads.len() {
        let mut best = vec![f64::NEG_INFINITY; nc];
        for c in grids.candidates(k) {
            let e_obj = -softplus(c[0]);
            for (b, &z) in best.iter_mut().zip(&c[1..]) {
                *b = b.max(e_obj * -softplus(z));
            }
        }
        total -= best.iter().sum::<f64>();
    }
    total
}

/// `Σ_n softplus(f_n)`.
pub fn joint_energy_flat(logits: &[f64]) -> f64 {
    logits.iter().map(|&z| softplus(z)).sum()
}

pub fn maxlogit(logits: &[f64]) -> f64 {
    logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Largest softmax probability, evaluated with the max logit shifted to 0.
pub fn msp(logits: &[f64]) -> f64 {
    let m = maxlogit(logits);
    1.0 / logits.iter().map(|&z| (z - m).exp()).sum::<f64>()
}

/// Per-cell `σ(c_obj)·max_n σ(c_cls n)` for head `head_index ∈ {1,2,3}`, shaped `[W, H]`.
pub fn heatmap(grids: &CandidateGrids, head_index: usize) -> Result<Tensor> {
    if head_index == 0 || head_index > grids.heads.len() {
        return Err(Error::Usage(format!(
            "head index {head_index} outside 1..={}",
            grids.heads.len()
        )));
    }
    let t = &grids.heads[head_index - 1];
    let values = grids
        .candidates(head_index - 1)
        .map(|c| {
            let cls = c[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            sigmoid_scalar(c[0]) * sigmoid_scalar(cls)
        })
        .collect();
    Ok(Tensor::new(vec![t.shape()[0], t.shape()[1]], values)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    InDistribution,
    OutOfDistribution,
}

pub fn decide(score: f64, tau: f64) -> Decision {
    if score >= tau {
        Decision::InDistribution
    } else {
        Decision::OutOfDistribution
    }
}

/// Largest `τ` with `fraction(id_scores ≥ τ) ≥ target_tpr`: the `k`-th largest
/// score for the smallest `k` with `k / n ≥ target_tpr`.
pub fn calibrate_tau(id_scores: &[f64], target_tpr: f64) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::Usage("cannot calibrate a threshold on an empty score list".into()));
    }
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::Usage(format!("target TPR {target_tpr} outside (0, 1]")));
    }
    if id_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Usage("ID scores must be finite".into()));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let k = (1..=n).find(|&k| k as f64 / n as f64 >= target_tpr).unwrap_or(n);
    Ok(sorted[k - 1])
}

/// Class probabilities plus the requested OOD scores of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub class_probs: Vec<f64>,
    pub ood_scores: BTreeMap<String, f64>,
}

/// Scores one grid-mode sample. Flat methods are rejected.
pub fn score_grids(grids: &CandidateGrids, methods: &[Method]) -> Result<ScoredSample> {
    let mut ood_scores = BTreeMap::new();
    for &m in methods {
        let v = match m {
            Method::Yolood => yolood_score(grids),
            Method::YoloodObj => score_obj_only(grids),
            Method::YoloodCls => score_cls_only(grids),
            Method::YoloodAgg(c) => score_agg(grids, c),
            Method::YoloodJointEnergy => yolood_joint_energy(grids),
            flat => return Err(Error::Usage(format!("`{flat}` needs a flat-mode checkpoint"))),
        };
        ood_scores.insert(m.to_string(), v);
    }
    Ok(ScoredSample {
        class_probs: class_probabilities(grids),
        ood_scores,
    })
}

/// Scores one flat-mode sample from its classifier logits.
pub fn score_flat(logits: &[f64], methods: &[Method]) -> Result<ScoredSample> {
    let mut ood_scores = BTreeMap::new();
    for &m in methods {
        let v = match m {
            Method::FlatMaxLogit => maxlogit(logits),
            Method::FlatMsp => msp(logits),
            Method::FlatJointEnergy => joint_energy_flat(logits),
            grid => return Err(Error::Usage(format!("`{grid}` needs a grid-mode checkpoint"))),
        };
        ood_scores.insert(m.to_string(), v);
    }
    Ok(ScoredSample {
        class_probs: logits.iter().map(|&z| sigmoid_scalar(z)).collect(),
        ood_scores,
    })
}
