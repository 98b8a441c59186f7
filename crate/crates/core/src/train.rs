//! Deterministic mini-batch training with two Adam groups and a plateau
//! learning-rate schedule.

use diffcore::{Adam, DiffError, Graph, ParamRef, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::assign::{build_targets, ResponsibilityConfig};
use crate::checkpoint::{Checkpoint, Mode, TrainingMeta};
use crate::error::{Error, Result};
use crate::loss::{loss_graph, LossBreakdown};
use crate::metrics::{macro_ap, MacroAp};
use crate::net::{param_group, Network, NetworkConfig, ParamGroup};
use crate::scenes::{Dataset, Scene};
use crate::score::class_probabilities;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub p: ResponsibilityConfig,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 42,
            lr_backbone: 1e-4,
            lr_heads: 1e-3,
            plateau_factor: 0.1,
            plateau_patience: 2,
            p: ResponsibilityConfig::default(),
            mode: Mode::Yolood,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("train.epochs and train.batch_size must be positive"));
        }
        if !(self.lr_backbone > 0.0 && self.lr_heads > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.lr_backbone > self.lr_heads {
            return Err(Error::config(format!(
                "train.lr_backbone {} exceeds train.lr_heads {}",
                self.lr_backbone, self.lr_heads
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("train.plateau_factor must lie in (0,1)"));
        }
        self.p.validate()
    }
}

/// Reduce-on-plateau: after `patience` consecutive epochs without a strictly
/// better metric, scale the learning rates by `factor` and start counting again.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch's metric; returns true when the rates should shrink.
    pub fn observe(&mut self, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            return true;
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub train_loss: LossBreakdown,
    pub val_macro_ap: f64,
    pub lr_backbone: f64,
    pub lr_heads: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { records })
    }
}

/// Epoch permutation of `0..n` (Fisher–Yates driven by SplitMix64).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = SplitMix64::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

/// Network plus optimizer state. `step` consumes one mini-batch.
#[derive(Debug, Clone)]
pub struct Trainer {
    network: Network,
    config: TrainConfig,
    backbone: Vec<usize>,
    heads: Vec<usize>,
    opt_backbone: Adam,
    opt_heads: Adam,
}

impl Trainer {
    pub fn new(network: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let head_group = match config.mode {
            Mode::Yolood => ParamGroup::GridHeads,
            Mode::Flat => ParamGroup::FlatHead,
        };
        let mut backbone = Vec::new();
        let mut heads = Vec::new();
        for (i, name) in network.params.names().iter().enumerate() {
            match param_group(name) {
                ParamGroup::Backbone => backbone.push(i),
                g if g == head_group => heads.push(i),
                _ => {}
            }
        }
        Ok(Trainer {
            opt_backbone: Adam::new(config.lr_backbone),
            opt_heads: Adam::new(config.lr_heads),
            network,
            config,
            backbone,
            heads,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn learning_rates(&self) -> (f64, f64) {
        (self.opt_backbone.lr, self.opt_heads.lr)
    }

    pub fn scale_learning_rates(&mut self, factor: f64) {
        self.opt_backbone.lr *= factor;
        self.opt_heads.lr *= factor;
    }

    pub fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            config: self.network.config.clone(),
            params: self.network.params.clone(),
            meta: TrainingMeta {
                mode: self.config.mode,
                epoch,
                seed: self.config.seed,
                p: self.config.p.p,
            },
        }
    }

    /// Loss and parameter gradients of one sample. Gradients of parameters
    /// outside the trained groups are left empty.
    fn sample_gradients(&self, scene: &Scene) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        let net = &self.network;
        let mut g = Graph::new();
        let bound = net.bind(&mut g, true)?;
        let image = g.constant(scene.image.clone())?;
        let stages = net.backbone_graph(&mut g, &bound, image)?;
        let (loss, breakdown) = match self.config.mode {
            Mode::Yolood => {
                let heads = net.heads_from_stages(&mut g, &bound, &stages)?;
                let targets = build_targets(scene, &net.config, &self.config.p);
                let vars = loss_graph(&mut g, &heads, &targets)?;
                (vars.total, vars.breakdown(&g))
            }
            Mode::Flat => {
                let logits = net.flat_from_stages(&mut g, &bound, &stages)?;
                let labels: Vec<f64> = scene
                    .labels(net.config.num_classes)
                    .into_iter()
                    .map(|b| if b { 1.0 } else { 0.0 })
                    .collect();
                let target = Tensor::new(vec![labels.len()], labels)?;
                let loss = g.bce(logits, &target)?;
                let v = g.value(loss).item().expect("scalar loss");
                (
                    loss,
                    LossBreakdown {
                        obj_loss: 0.0,
                        cls_loss: v,
                        total: v,
                    },
                )
            }
        };
        if !breakdown.total.is_finite() {
            return Err(DiffError::NonFinite { op: "loss" }.into());
        }
        g.backward(loss)?;
        let mut grads = vec![Vec::new(); net.params.len()];
        for &i in self.backbone.iter().chain(&self.heads) {
            let v = bound.vars()[i];
            grads[i] = g.grad(v).expect("trainable leaf").to_vec();
        }
        Ok((breakdown, grads))
    }

    /// One Adam update on the batch-mean loss; returns that mean loss.
    pub fn step(&mut self, batch: &[&Scene]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let mut acc: Vec<Vec<f64>> = vec![Vec::new(); self.network.params.len()];
        let mut loss = LossBreakdown::default();
        for scene in batch {
            let (l, grads) = self.sample_gradients(scene)?;
            loss.obj_loss += l.obj_loss;
            loss.cls_loss += l.cls_loss;
            loss.total += l.total;
            for (a, g) in acc.iter_mut().zip(grads) {
                if a.is_empty() {
                    *a = g;
                } else {
                    a.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for a in &mut acc {
            a.iter_mut().for_each(|x| *x *= inv);
        }
        loss.obj_loss *= inv;
        loss.cls_loss *= inv;
        loss.total *= inv;

        let names = self.network.params.names().to_vec();
        let tensors = self.network.params.tensors_mut();
        let mut bb = Vec::with_capacity(self.backbone.len());
        let mut hd = Vec::with_capacity(self.heads.len());
        for (i, t) in tensors.iter_mut().enumerate() {
            let group = if self.backbone.contains(&i) {
                &mut bb
            } else if self.heads.contains(&i) {
                &mut hd
            } else {
                continue;
            };
            group.push(ParamRef {
                name: &names[i],
                value: t,
                grad: &acc[i],
            });
        }
        // both groups are validated before either one moves
        for p in bb.iter().chain(&hd) {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(DiffError::NonFiniteGradient { name: p.name.to_string() }.into());
            }
        }
        self.opt_backbone.step(&mut bb)?;
        self.opt_heads.step(&mut hd)?;
        Ok(loss)
    }

    /// Per-sample class probabilities from the trained head.
    pub fn predict(&self, scene: &Scene) -> Result<Vec<f64>> {
        predict(&self.network, self.config.mode, scene)
    }

    pub fn validation_map(&self, scenes: &[Scene]) -> Result<MacroAp> {
        let nc = self.network.config.num_classes;
        let probs = scenes.iter().map(|s| self.predict(s)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<Vec<bool>> = scenes.iter().map(|s| s.labels(nc)).collect();
        macro_ap(&probs, &labels)
    }
}

/// Multi-label class probabilities for the head selected by `mode`.
pub fn predict(network: &Network, mode: Mode, scene: &Scene) -> Result<Vec<f64>> {
    Ok(match mode {
        Mode::Yolood => class_probabilities(&network.forward(&scene.image)?),
        Mode::Flat => network
            .forward_flat(&scene.image)?
            .into_iter()
            .map(diffcore::sigmoid_scalar)
            .collect(),
    })
}

/// Non-finite values anywhere in an epoch abort training with the last
/// checkpoint whose weights were still usable.
fn diverged(e: Error, epoch: usize, last_good: &Checkpoint) -> Error {
    match e {
        Error::Diff(d @ (DiffError::NonFinite { .. } | DiffError::NonFiniteGradient { .. })) => Error::Diverged {
            epoch,
            reason: d.to_string(),
            last_good: Box::new(last_good.clone()),
        },
        other => other,
    }
}

/// Trains a freshly initialized network (seeded by `config.seed`).
pub fn train(dataset: &Dataset, net_config: &NetworkConfig, config: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    let network = Network::init(net_config.clone(), config.seed)?;
    train_from(network, &dataset.train, &dataset.val, config)
}

/// Continues training `network` on `train_set`, validating on `val_set`.
pub fn train_from(
    network: Network,
    train_set: &[Scene],
    val_set: &[Scene],
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Usage("training needs nonempty train and val splits".into()));
    }
    let mut trainer = Trainer::new(network, config.clone())?;
    let mut scheduler = PlateauScheduler::new(config.plateau_factor, config.plateau_patience);
    let mut log = TrainLog::default();
    let mut last_good = trainer.checkpoint(0);
    for epoch in 1..=config.epochs {
        let order = epoch_order(train_set.len(), config.seed, epoch);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &train_set[i]).collect();
            let l = trainer.step(&batch).map_err(|e| diverged(e, epoch, &last_good))?;
            let w = chunk.len() as f64;
            sum.obj_loss += l.obj_loss * w;
            sum.cls_loss += l.cls_loss * w;
            sum.total += l.total * w;
        }
        let n = train_set.len() as f64;
        let train_loss = LossBreakdown {
            obj_loss: sum.obj_loss / n,
            cls_loss: sum.cls_loss / n,
            total: sum.total / n,
        };
        let val = trainer
            .validation_map(val_set)
            .map_err(|e| diverged(e, epoch, &last_good))?;
        let (lr_backbone, lr_heads) = trainer.learning_rates();
        log::info!(
            "epoch {epoch}/{}: loss {:.4} (obj {:.4}, cls {:.4}), val mAP {:.4}, lr {:.1e}/{:.1e}",
            config.epochs,
            train_loss.total,
            train_loss.obj_loss,
            train_loss.cls_loss,
            val.value,
            lr_backbone,
            lr_heads
        );
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_macro_ap: val.value,
            lr_backbone,
            lr_heads,
        });
        if scheduler.observe(val.value) {
            trainer.scale_learning_rates(config.plateau_factor);
        }
        last_good = trainer.checkpoint(epoch);
    }
    Ok((last_good, log))
}
