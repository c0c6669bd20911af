//! The corrector: a linear classifier over hashed word n-grams of the
//! question, trained with binary cross-entropy to predict whether the target
//! model answers unreliably.
//!
//! # Model file
//!
//! `corrector.model` is a JSON document:
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "extractor": {"n_buckets": 262144, "ngram_orders": [1, 2], "hash_seed": 0},
//!   "bias": -0.01,
//!   "weights": [[bucket, weight], ...],   // non-zero weights, ascending bucket
//!   "training_meta": {...}
//! }
//! ```
//!
//! Buckets are `FNV-1a(order byte, 0x1f-separated lowercased n-gram) & (n_buckets - 1)`
//! with the FNV state keyed by `hash_seed`.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_json, write_json};
use crate::judge::{tokenize, CorrectionExample};
use crate::types::{GenerationRecord, Method, Sample, ScoreSet};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Clamp for log arguments and predicted probabilities.
pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CorrectorError {
    #[error("cannot train on an empty correction dataset")]
    EmptyDataset,
    #[error("invalid feature extractor: {0}")]
    BadExtractor(String),
    #[error("invalid training setting: {0}")]
    BadHyperparameter(String),
    #[error("{predictions} predictions but {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("external corrector prob missing: {0}")]
    MissingExternal(String),
    #[error("external corrector prob out of range ({value}): {id}")]
    OutOfRange { id: String, value: f64 },
    #[error("unsupported model format version {0}")]
    UnsupportedFormat(u32),
    #[error("weight bucket {bucket} outside {n_buckets} buckets")]
    BadBucket { bucket: u32, n_buckets: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureExtractor {
    pub n_buckets: usize,
    pub ngram_orders: Vec<usize>,
    pub hash_seed: u64,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self {
            n_buckets: 1 << 18,
            ngram_orders: vec![1, 2],
            hash_seed: 0,
        }
    }
}

/// Sparse feature vector: `(bucket, count)` pairs in ascending bucket order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector(pub Vec<(u32, f64)>);

impl SparseVector {
    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.0.iter().map(|&(i, v)| dense[i as usize] * v).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }
}

impl FeatureExtractor {
    pub fn validate(&self) -> Result<(), CorrectorError> {
        if self.n_buckets < 2 || !self.n_buckets.is_power_of_two() {
            return Err(CorrectorError::BadExtractor(format!(
                "n_buckets must be a power of two ≥ 2 (got {})",
                self.n_buckets
            )));
        }
        if self.n_buckets > 1 << 32 {
            return Err(CorrectorError::BadExtractor(
                "n_buckets exceeds 2^32".into(),
            ));
        }
        if self.ngram_orders.is_empty() || self.ngram_orders.contains(&0) {
            return Err(CorrectorError::BadExtractor(
                "ngram_orders must be non-empty positive integers".into(),
            ));
        }
        Ok(())
    }

    fn bucket(&self, order: usize, gram: &[String]) -> u32 {
        let mut hasher = FnvHasher::with_key(
            0xcbf2_9ce4_8422_2325 ^ self.hash_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        hasher.write(&[order as u8]);
        for (k, word) in gram.iter().enumerate() {
            if k > 0 {
                hasher.write(&[0x1f]);
            }
            hasher.write(word.as_bytes());
        }
        (hasher.finish() & (self.n_buckets as u64 - 1)) as u32
    }

    /// Hashed n-gram counts of the lowercased word tokens of `text`.
    pub fn featurize(&self, text: &str) -> SparseVector {
        let words = tokenize(text);
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for &order in &self.ngram_orders {
            for gram in words.windows(order) {
                *counts.entry(self.bucket(order, gram)).or_default() += 1.0;
            }
        }
        SparseVector(counts.into_iter().collect())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// Summed binary cross-entropy `-sum[y ln p + (1 - y) ln(1 - p)]`, with
/// predictions clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(predictions: &[f64], targets: &[f64]) -> Result<f64, CorrectorError> {
    if predictions.len() != targets.len() {
        return Err(CorrectorError::LengthMismatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            epochs: 10,
            learning_rate: 0.1,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub examples: usize,
    /// Mean BCE over the training set before the first update.
    pub initial_loss: f64,
    /// Mean BCE over the training set after each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Gradient of the summed BCE with respect to the weights and bias.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradient {
    pub weights: BTreeMap<u32, f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorModel {
    pub extractor: FeatureExtractor,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub training_meta: Option<TrainingMeta>,
}

impl CorrectorModel {
    /// All-zero model: predicts 0.5 everywhere.
    pub fn zeros(extractor: FeatureExtractor) -> Result<Self, CorrectorError> {
        extractor.validate()?;
        Ok(Self {
            weights: vec![0.0; extractor.n_buckets],
            extractor,
            bias: 0.0,
            training_meta: None,
        })
    }

    pub fn logit(&self, features: &SparseVector) -> f64 {
        features.dot(&self.weights) + self.bias
    }

    pub fn predict_features(&self, features: &SparseVector) -> f64 {
        clamp_prob(sigmoid(self.logit(features)))
    }

    /// Correction score: probability that the question is answered unreliably.
    pub fn predict(&self, question: &str) -> f64 {
        self.predict_features(&self.extractor.featurize(question))
    }

    /// Summed BCE and its analytic gradient over `batch` of `(features, target)`.
    pub fn loss_and_gradient(&self, batch: &[(SparseVector, f64)]) -> (f64, Gradient) {
        let mut grad = Gradient::default();
        let mut loss = 0.0;
        for (x, y) in batch {
            let p = sigmoid(self.logit(x));
            let cp = clamp_prob(p);
            loss -= y * cp.ln() + (1.0 - y) * (1.0 - cp).ln();
            let residual = p - y;
            for &(i, v) in &x.0 {
                *grad.weights.entry(i).or_default() += residual * v;
            }
            grad.bias += residual;
        }
        (loss, grad)
    }

    fn mean_loss(&self, data: &[(SparseVector, f64)]) -> f64 {
        let preds: Vec<f64> = data.iter().map(|(x, _)| self.predict_features(x)).collect();
        let targets: Vec<f64> = data.iter().map(|(_, y)| *y).collect();
        bce_loss(&preds, &targets).unwrap_or(f64::NAN) / data.len() as f64
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        write_json(path, &ModelFile::from(self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let file: ModelFile = read_json(path)?;
        Ok(file.into_model()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    extractor: FeatureExtractor,
    bias: f64,
    weights: Vec<(u32, f64)>,
    training_meta: Option<TrainingMeta>,
}

impl From<&CorrectorModel> for ModelFile {
    fn from(model: &CorrectorModel) -> Self {
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            extractor: model.extractor.clone(),
            bias: model.bias,
            weights: model
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i as u32, *w))
                .collect(),
            training_meta: model.training_meta.clone(),
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<CorrectorModel, CorrectorError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(CorrectorError::UnsupportedFormat(self.format_version));
        }
        let mut model = CorrectorModel::zeros(self.extractor)?;
        model.bias = self.bias;
        model.training_meta = self.training_meta;
        for (bucket, w) in self.weights {
            let slot = model
                .weights
                .get_mut(bucket as usize)
                .ok_or(CorrectorError::BadBucket {
                    bucket,
                    n_buckets: model.extractor.n_buckets,
                })?;
            *slot = w;
        }
        Ok(model)
    }
}

/// Mini-batch gradient descent on mean-per-batch BCE, starting from zero
/// weights. The example order is reshuffled every epoch from a single
/// generator seeded with `config.seed`, so training is fully deterministic.
pub fn train(
    dataset: &[CorrectionExample],
    extractor: &FeatureExtractor,
    config: &TrainConfig,
) -> Result<CorrectorModel, CorrectorError> {
    if dataset.is_empty() {
        return Err(CorrectorError::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(CorrectorError::BadHyperparameter(
            "batch_size must be ≥ 1".into(),
        ));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate >= 0.0) {
        return Err(CorrectorError::BadHyperparameter(format!(
            "learning_rate must be finite and ≥ 0 (got {})",
            config.learning_rate
        )));
    }
    let mut model = CorrectorModel::zeros(extractor.clone())?;
    let data: Vec<(SparseVector, f64)> = dataset
        .iter()
        .map(|e| (extractor.featurize(&e.question), f64::from(e.target)))
        .collect();

    let mut warnings = Vec::new();
    let positives = dataset.iter().filter(|e| e.target == 1).count();
    if positives == 0 || positives == dataset.len() {
        let msg = format!(
            "single-class correction dataset ({} examples, all target {})",
            dataset.len(),
            u8::from(positives > 0)
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let initial_loss = model.mean_loss(&data);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut batch: Vec<(SparseVector, f64)> = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let (_, grad) = model.loss_and_gradient(&batch);
            let step = config.learning_rate / chunk.len() as f64;
            for (i, g) in grad.weights {
                model.weights[i as usize] -= step * g;
            }
            model.bias -= step * grad.bias;
        }
        epoch_losses.push(model.mean_loss(&data));
    }
    let final_loss = epoch_losses.last().copied().unwrap_or(initial_loss);
    model.training_meta = Some(TrainingMeta {
        seed: config.seed,
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        examples: dataset.len(),
        initial_loss,
        epoch_losses,
        final_loss,
        warnings,
    });
    Ok(model)
}

/// Corrector scores for every sample's question.
pub fn score_samples(model: &CorrectorModel, samples: &[Sample]) -> ScoreSet {
    let mut set = ScoreSet::new(
        Method::Corrector,
        samples
            .iter()
            .map(|s| (s.id.clone(), model.predict(&s.question)))
            .collect(),
    );
    set.normalized = true;
    set
}

/// Pass-through of externally trained corrector probabilities.
pub fn scores_from_external(records: &[GenerationRecord]) -> Result<ScoreSet, CorrectorError> {
    let scores = records
        .iter()
        .map(|r| match r.external_corrector_prob {
            None => Err(CorrectorError::MissingExternal(r.id.clone())),
            Some(p) if !(0.0..=1.0).contains(&p) => Err(CorrectorError::OutOfRange {
                id: r.id.clone(),
                value: p,
            }),
            Some(p) => Ok((r.id.clone(), p)),
        })
        .collect::<Result<_, _>>()?;
    let mut set = ScoreSet::new(Method::Corrector, scores);
    set.normalized = true;
    Ok(set)
}
