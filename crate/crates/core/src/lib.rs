//! Uncertainty correction for language-model answers.
//!
//! Vanilla uncertainty scores (predictive entropy, semantic entropy, SAR,
//! lexical similarity, elicited confidence) are min-max normalized and fused
//! with the probability, predicted by a lightweight corrector trained on the
//! question alone, that the target model answers unreliably. The fusion
//! weight is picked by grid search on a development split and the result is
//! evaluated with AUROC, F1, ECE and cost-weighted decision risk.
//!
//! Modules follow the pipeline order: [`judge`] labels answers, [`corrector`]
//! trains on those labels, [`estimators`] computes vanilla scores, [`fusion`]
//! combines them, [`metrics`] evaluates, and [`pipeline`] runs everything.

pub mod corrector;
pub mod error;
pub mod estimators;
pub mod fusion;
pub mod io;
pub mod judge;
pub mod metrics;
pub mod pipeline;
pub mod synthetic;
pub mod types;

pub use error::{Error, IoError, Result};
pub use types::{
    DatasetSplit, Generation, GenerationRecord, Judgment, Method, Sample, ScoreLine, ScoreSet,
};
