//! Evaluation of a checkpoint on the ID/OOD test splits and the report
//! artifacts derived from it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use diffcore::Tensor;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Mode};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::net::Network;
use crate::scenes::{to_byte, Scene};
use crate::score::{score_flat, score_grids, Method, ScoredSample};

/// Methods reported by default for a checkpoint of the given mode.
pub fn default_methods(mode: Mode) -> Vec<Method> {
    match mode {
        Mode::Yolood => Method::GRID.to_vec(),
        Mode::Flat => Method::FLAT.to_vec(),
    }
}

pub fn check_methods(mode: Mode, methods: &[Method]) -> Result<()> {
    if methods.is_empty() {
        return Err(Error::Usage("no scoring methods requested".into()));
    }
    for m in methods {
        if m.is_flat() != (mode == Mode::Flat) {
            return Err(Error::Usage(format!(
                "method `{m}` does not apply to a {mode:?} checkpoint"
            )));
        }
    }
    Ok(())
}

/// Scores every scene with one forward pass each.
pub fn score_scenes(network: &Network, mode: Mode, scenes: &[Scene], methods: &[Method]) -> Result<Vec<ScoredSample>> {
    check_methods(mode, methods)?;
    scenes
        .iter()
        .map(|s| match mode {
            Mode::Yolood => score_grids(&network.forward(&s.image)?, methods),
            Mode::Flat => score_flat(&network.forward_flat(&s.image)?, methods),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    pub id: Vec<f64>,
    pub ood: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub epoch: usize,
    pub metrics: Vec<MetricReport>,
}

impl EvalReport {
    pub fn get(&self, method: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.method == method)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub scores: Vec<MethodScores>,
}

pub fn evaluate(checkpoint: &Checkpoint, test_id: &[Scene], test_ood: &[Scene], methods: &[Method]) -> Result<Evaluation> {
    let mode = checkpoint.meta.mode;
    let network = Network::from_params(checkpoint.config.clone(), checkpoint.params.clone())?;
    let id = score_scenes(&network, mode, test_id, methods)?;
    let ood = score_scenes(&network, mode, test_ood, methods)?;
    let scores: Vec<MethodScores> = methods
        .iter()
        .map(|m| {
            let name = m.to_string();
            let pick = |v: &[ScoredSample]| v.iter().map(|s| s.ood_scores[&name]).collect();
            MethodScores {
                id: pick(&id),
                ood: pick(&ood),
                method: name,
            }
        })
        .collect();
    let report = report_from_scores(mode, checkpoint.meta.epoch, &scores)?;
    Ok(Evaluation { report, scores })
}

pub fn report_from_scores(mode: Mode, epoch: usize, scores: &[MethodScores]) -> Result<EvalReport> {
    let metrics = scores
        .iter()
        .map(|s| MetricReport::compute(s.method.clone(), &s.id, &s.ood))
        .collect::<Result<_>>()?;
    Ok(EvalReport { mode, epoch, metrics })
}

/// `method,fpr95,auroc,aupr,n_id,n_ood` with round-trip float formatting.
pub fn metrics_csv(report: &EvalReport) -> String {
    let mut out = String::from("method,fpr95,auroc,aupr,n_id,n_ood\n");
    for m in &report.metrics {
        let _ = writeln!(
            out,
            "\"{}\",{},{},{},{},{}",
            m.method, m.fpr95, m.auroc, m.aupr, m.n_id, m.n_ood
        );
    }
    out
}

/// Per-sample scores: `method,split,index,score`.
pub fn scores_csv(scores: &[MethodScores]) -> String {
    let mut out = String::from("method,split,index,score\n");
    for s in scores {
        for (split, list) in [("test_id", &s.id), ("test_ood", &s.ood)] {
            for (i, v) in list.iter().enumerate() {
                let _ = writeln!(out, "\"{}\",{split},{i},{v}", s.method);
            }
        }
    }
    out
}

/// `(index, score)` rows of one split, in file order.
type IndexedScores = Vec<(usize, f64)>;

pub fn parse_scores_csv(text: &str) -> Result<Vec<MethodScores>> {
    let mut by_method: BTreeMap<String, (IndexedScores, IndexedScores)> = BTreeMap::new();
    let mut order = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Usage(format!("malformed score line {}: `{line}`", ln + 1));
        let rest = line.strip_prefix('"').ok_or_else(bad)?;
        let (method, rest) = rest.split_once("\",").ok_or_else(bad)?;
        let mut fields = rest.split(',');
        let (Some(split), Some(index), Some(score), None) = (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(bad());
        };
        let index: usize = index.parse().map_err(|_| bad())?;
        let score: f64 = score.parse().map_err(|_| bad())?;
        if !by_method.contains_key(method) {
            order.push(method.to_string());
        }
        let entry = by_method.entry(method.to_string()).or_default();
        match split {
            "test_id" => entry.0.push((index, score)),
            "test_ood" => entry.1.push((index, score)),
            _ => return Err(bad()),
        }
    }
    Ok(order
        .into_iter()
        .map(|method| {
            let (mut id, mut ood) = by_method.remove(&method).expect("recorded method");
            id.sort_by_key(|x| x.0);
            ood.sort_by_key(|x| x.0);
            MethodScores {
                method,
                id: id.into_iter().map(|x| x.1).collect(),
                ood: ood.into_iter().map(|x| x.1).collect(),
            }
        })
        .collect())
}

/// Writes `report.json`, `metrics.csv` and `scores.csv` into `dir`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut json = serde_json::to_string_pretty(&eval.report)?;
    json.push('\n');
    write_file(&dir.join("report.json"), json.as_bytes())?;
    write_file(&dir.join("metrics.csv"), metrics_csv(&eval.report).as_bytes())?;
    write_file(&dir.join("scores.csv"), scores_csv(&eval.scores).as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Binary PGM (P5, maxval 255) of a `[W, H]` map in `[0,1]`; image row `j`
/// holds cells `(·, j)`.
pub fn encode_pgm(map: &Tensor) -> Vec<u8> {
    let (w, h) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for j in 0..h {
        for i in 0..w {
            out.push(to_byte(map.at(&[i, j])));
        }
    }
    out
}

/// Nearest-neighbour upsampling of a `[W, H]` map onto the `[3,S,S]` image,
/// blended with weight ½.
pub fn overlay(image: &Tensor, map: &Tensor) -> Tensor {
    let (s_h, s_w) = (image.shape()[1], image.shape()[2]);
    let (w, h) = (map.shape()[0], map.shape()[1]);
    let plane = s_h * s_w;
    let mut data = image.data().to_vec();
    for y in 0..s_h {
        for x in 0..s_w {
            let v = map.at(&[x * w / s_w, y * h / s_h]);
            for c in 0..3 {
                let d = &mut data[c * plane + y * s_w + x];
                *d = 0.5 * *d + 0.5 * v;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), data).expect("blend of finite values")
}
