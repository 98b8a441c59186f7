//! Grid-based out-of-distribution detection on synthetic multi-object scenes.
//!
//! A small convolutional backbone feeds three candidate grids (strides 32,
//! 16 and 8). Each candidate carries an objectness logit and per-class
//! logits; the OOD score of an image is the strongest per-class detection
//! summed across grids. A pooled linear head over the same backbone serves
//! as the classification baseline.

pub mod assign;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod report;
pub mod scenes;
pub mod score;
pub mod train;

pub use assign::{build_targets, responsible_cells, ResponsibilityConfig, TargetGrids};
pub use checkpoint::{Checkpoint, Mode, TrainingMeta};
pub use error::{CheckpointError, Error, Result};
pub use loss::{total_loss, LossBreakdown};
pub use metrics::{auroc, aupr, fpr_at_tpr, macro_ap, MetricReport};
pub use net::{CandidateGrids, Network, NetworkConfig, Params};
pub use scenes::{generate_dataset, Dataset, DatasetSpec, Scene, SceneObject, ShapeKind, Split};
pub use score::{calibrate_tau, decide, AggregationChoice, Decision, Method, ScoredSample};
pub use train::{train, train_from, TrainConfig, TrainLog, Trainer};
pub use config::RunConfig;
