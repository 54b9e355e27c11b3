//! Desk-scale laboratory for multi-task semi-supervised domain
//! generalization.
//!
//! Everything runs on the CPU with `f64` and fixed seeds: a small autodiff
//! engine ([`tensor`]), a synthetic multi-domain data generator ([`data`]),
//! a shared-backbone model with per-task batch normalization and classifier
//! heads ([`model`]), prediction-fusion rules for pseudo-labeling and test
//! inference ([`fusion`]), the training loop ([`trainer`]), quality metrics
//! and a numeric generalization-bound evaluator ([`eval`]), and a run/grid
//! harness ([`harness`]).
//!
//! The `examples/` directory has one runnable program per capability; the
//! `multimatch` binary drives single runs and ablation grids from a config
//! file.

pub mod config;
pub mod data;
pub mod eval;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use data::MultiDomainDataset;
pub use fusion::{FusionScheme, PredictionMatrix, TestRule, TrainRule};
pub use model::{BnMode, HeadMode, MultiTaskModel};
pub use tensor::{finite_diff_check, sgd_step, Graph, Tensor, TensorError};
pub use trainer::{train, ExperimentConfig, MetricsRecord};
