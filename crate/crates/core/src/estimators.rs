//! Vanilla uncertainty estimators over sampled generations.
//!
//! Every estimator maps one [`GenerationRecord`] to a real score where higher
//! means less reliable. Logit-based estimators (PE, LN-PE, SE and the SAR
//! family) need token logprobs; LS works on text alone; VC and P(True) are
//! read from elicited fields.
//!
//! The SAR variants use the following concrete forms:
//!
//! * token relevance `r_l` comes from the similarity oracle and is normalized
//!   to weights `w_l = r_l / sum(r)` (uniform when all relevances are zero);
//!   SAR-t of one generation is `-sum_l w_l * logprob_l`.
//! * the sentence shift is `P'(y_b) = p(y_b) + (1/t) * sum_{j != b} sim(b, j) * p(y_j)`
//!   and SAR-s is `-(1/B) * sum_b ln P'(y_b)`. Its value may be negative when
//!   `P' > 1`.
//! * SAR applies the sentence shift to token-reweighted probabilities
//!   `exp(sum_l w_l * logprob_l)`.
//!
//! All sums of probabilities are evaluated in log space.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{lcs_len, rouge_l, tokenize};
use crate::types::{GenerationRecord, Method, ScoreSet};

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("method requires token logprobs: {0}")]
    MissingLogprobs(String),
    #[error("empty generation: {id} generation {generation}")]
    EmptyGeneration { id: String, generation: usize },
    #[error("cluster probability underflow: {0}")]
    ClusterUnderflow(String),
    #[error("clusters do not partition the generations: {0}")]
    BadClusters(String),
    #[error("LS needs ≥2 generations: {0}")]
    TooFewGenerations(String),
    #[error("{method} needs field {field}, missing for {id}")]
    MissingField {
        method: Method,
        field: &'static str,
        id: String,
    },
    #[error("similarity sidecar for {id}: {message}")]
    Similarity { id: String, message: String },
    #[error("sentence temperature must be positive (got {0})")]
    BadTemperature(f64),
    #[error("{0} is not a vanilla estimator")]
    NotAnEstimator(Method),
}

/// One line of `similarities.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub id: String,
    /// B x B generation-pair similarities in [0,1].
    #[serde(default)]
    pub pairwise: Option<Vec<Vec<f64>>>,
    /// One row per generation, one relevance in [0,1] per token.
    #[serde(default)]
    pub token_relevance: Option<Vec<Vec<f64>>>,
}

impl SimilarityEntry {
    pub const FIELDS: &'static [&'static str] = &["id", "pairwise", "token_relevance"];
}

/// Where pairwise similarities and token relevances come from.
#[derive(Debug, Clone, Copy)]
pub enum SimilarityOracle<'a> {
    /// Word-level ROUGE-L between generation texts. Token relevance is the
    /// fraction of the generation's words lost when the token is removed.
    RougeL,
    Precomputed(&'a SimilarityEntry),
}

impl SimilarityOracle<'_> {
    pub fn pair_similarity(
        &self,
        record: &GenerationRecord,
        i: usize,
        j: usize,
    ) -> Result<f64, EstimatorError> {
        match self {
            SimilarityOracle::RougeL => Ok(rouge_l(
                &record.generations[i].text,
                &record.generations[j].text,
            )),
            SimilarityOracle::Precomputed(entry) => {
                let b = record.generations.len();
                let matrix = entry
                    .pairwise
                    .as_ref()
                    .ok_or_else(|| EstimatorError::Similarity {
                        id: record.id.clone(),
                        message: "no pairwise matrix".into(),
                    })?;
                if matrix.len() != b || matrix.iter().any(|row| row.len() != b) {
                    return Err(EstimatorError::Similarity {
                        id: record.id.clone(),
                        message: format!("pairwise matrix is not {b}x{b}"),
                    });
                }
                Ok(matrix[i][j])
            }
        }
    }

    pub fn token_relevance(
        &self,
        record: &GenerationRecord,
        generation: usize,
    ) -> Result<Vec<f64>, EstimatorError> {
        let tokens = &record.generations[generation].tokens;
        match self {
            SimilarityOracle::RougeL => Ok(lexical_token_relevance(tokens)),
            SimilarityOracle::Precomputed(entry) => {
                let row = entry
                    .token_relevance
                    .as_ref()
                    .and_then(|rows| rows.get(generation))
                    .ok_or_else(|| EstimatorError::Similarity {
                        id: record.id.clone(),
                        message: format!("no token relevance row for generation {generation}"),
                    })?;
                if row.len() != tokens.len() {
                    return Err(EstimatorError::Similarity {
                        id: record.id.clone(),
                        message: format!(
                            "token relevance row {generation} has {} values for {} tokens",
                            row.len(),
                            tokens.len()
                        ),
                    });
                }
                Ok(row.clone())
            }
        }
    }
}

/// `1 - LCS(words(full), words(without token l)) / |words(full)|`.
/// Tokens are concatenated as emitted, so they carry their own whitespace.
pub fn lexical_token_relevance(tokens: &[String]) -> Vec<f64> {
    let full = tokenize(&tokens.concat());
    if full.is_empty() {
        return vec![0.0; tokens.len()];
    }
    (0..tokens.len())
        .map(|l| {
            let removed: String = tokens
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != l)
                .map(|(_, t)| t.as_str())
                .collect();
            let kept = lcs_len(&full, &tokenize(&removed));
            1.0 - kept as f64 / full.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SarConfig {
    pub sentence_temperature: f64,
    pub use_length_normalized_probs: bool,
}

impl Default for SarConfig {
    fn default() -> Self {
        Self {
            sentence_temperature: 0.001,
            use_length_normalized_probs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Similarity at or above which two generations share a semantic cluster.
    pub equivalence_threshold: f64,
    pub sar: SarConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            equivalence_threshold: 0.7,
            sar: SarConfig::default(),
        }
    }
}

/// `ln(sum(exp(x)))`, stable for large negative inputs.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn logprobs(record: &GenerationRecord) -> Result<Vec<&[f64]>, EstimatorError> {
    if record.generations.is_empty() {
        return Err(EstimatorError::MissingLogprobs(record.id.clone()));
    }
    record
        .generations
        .iter()
        .map(|g| {
            g.token_logprobs
                .as_deref()
                .ok_or_else(|| EstimatorError::MissingLogprobs(record.id.clone()))
        })
        .collect()
}

fn non_empty_logprobs(record: &GenerationRecord) -> Result<Vec<&[f64]>, EstimatorError> {
    let lps = logprobs(record)?;
    if let Some(generation) = lps.iter().position(|lp| lp.is_empty()) {
        return Err(EstimatorError::EmptyGeneration {
            id: record.id.clone(),
            generation,
        });
    }
    Ok(lps)
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

/// Monte Carlo predictive entropy: `-(1/B) * sum_b ln P(y_b | x)`.
pub fn predictive_entropy(record: &GenerationRecord) -> Result<f64, EstimatorError> {
    let lps = logprobs(record)?;
    Ok(-mean(lps.iter().map(|lp| lp.iter().sum::<f64>())))
}

pub fn length_normalized_pe(record: &GenerationRecord) -> Result<f64, EstimatorError> {
    let lps = non_empty_logprobs(record)?;
    Ok(-mean(
        lps.iter()
            .map(|lp| lp.iter().sum::<f64>() / lp.len() as f64),
    ))
}

/// Greedy first-fit clustering in input order. A generation joins the first
/// cluster whose representative (first member) is similar to it at or above
/// `threshold` in both directions.
pub fn cluster_generations(
    record: &GenerationRecord,
    oracle: &SimilarityOracle<'_>,
    threshold: f64,
) -> Result<Vec<Vec<usize>>, EstimatorError> {
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    'outer: for i in 0..record.generations.len() {
        for cluster in clusters.iter_mut() {
            let rep = cluster[0];
            if oracle.pair_similarity(record, i, rep)? >= threshold
                && oracle.pair_similarity(record, rep, i)? >= threshold
            {
                cluster.push(i);
                continue 'outer;
            }
        }
        clusters.push(vec![i]);
    }
    Ok(clusters)
}

/// `-(1/C) * sum_c ln P(c | x)` with `P(c) = sum_{b in c} P(y_b | x)`.
pub fn semantic_entropy(
    record: &GenerationRecord,
    clusters: &[Vec<usize>],
) -> Result<f64, EstimatorError> {
    let lps = logprobs(record)?;
    let mut seen = vec![false; lps.len()];
    for &i in clusters.iter().flatten() {
        if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
            return Err(EstimatorError::BadClusters(record.id.clone()));
        }
    }
    if clusters.is_empty() || clusters.iter().any(Vec::is_empty) || seen.contains(&false) {
        return Err(EstimatorError::BadClusters(record.id.clone()));
    }
    let seq: Vec<f64> = lps.iter().map(|lp| lp.iter().sum()).collect();
    let mut total = 0.0;
    for cluster in clusters {
        let members: Vec<f64> = cluster.iter().map(|&i| seq[i]).collect();
        let ln_p = log_sum_exp(&members);
        if !ln_p.is_finite() {
            return Err(EstimatorError::ClusterUnderflow(record.id.clone()));
        }
        total += ln_p;
    }
    Ok(-total / clusters.len() as f64)
}

/// Relevance-normalized token weights for one generation.
fn token_weights(relevance: &[f64]) -> Vec<f64> {
    let sum: f64 = relevance.iter().sum();
    if sum > 0.0 {
        relevance.iter().map(|r| r / sum).collect()
    } else {
        vec![1.0 / relevance.len() as f64; relevance.len()]
    }
}

/// Token-reweighted log probability `sum_l w_l * logprob_l` per generation.
fn token_shifted_logprobs(
    record: &GenerationRecord,
    oracle: &SimilarityOracle<'_>,
) -> Result<Vec<f64>, EstimatorError> {
    let lps = non_empty_logprobs(record)?;
    lps.iter()
        .enumerate()
        .map(|(b, lp)| {
            let weights = token_weights(&oracle.token_relevance(record, b)?);
            Ok(weights.iter().zip(lp.iter()).map(|(w, l)| w * l).sum())
        })
        .collect()
}

pub fn sar_token(
    record: &GenerationRecord,
    oracle: &SimilarityOracle<'_>,
) -> Result<f64, EstimatorError> {
    let shifted = token_shifted_logprobs(record, oracle)?;
    Ok(-mean(shifted.into_iter()))
}

/// Sentence shift over per-generation log probabilities.
fn sentence_shift(
    record: &GenerationRecord,
    oracle: &SimilarityOracle<'_>,
    log_probs: &[f64],
    temperature: f64,
) -> Result<f64, EstimatorError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(EstimatorError::BadTemperature(temperature));
    }
    let ln_t = temperature.ln();
    let mut total = 0.0;
    for (b, &own) in log_probs.iter().enumerate() {
        let mut terms = vec![own];
        for (j, &other) in log_probs.iter().enumerate() {
            if j == b {
                continue;
            }
            let sim = oracle.pair_similarity(record, b, j)?;
            if sim > 0.0 {
                terms.push(sim.ln() - ln_t + other);
            }
        }
        total += log_sum_exp(&terms);
    }
    Ok(-total / log_probs.len() as f64)
}

pub fn sar_sentence(
    record: &GenerationRecord,
    oracle: &SimilarityOracle<'_>,
    config: &SarConfig,
) -> Result<f64, EstimatorError> {
    let log_probs: Vec<f64> = if config.use_length_normalized_probs {
        non_empty_logprobs(record)?
            .iter()
            .map(|lp| lp.iter().sum::<f64>() / lp.len() as f64)
            .collect()
    } else {
        logprobs(record)?
            .iter()
            .map(|lp| lp.iter().sum::<f64>())
            .collect()
    };
    sentence_shift(record, oracle, &log_probs, config.sentence_temperature)
}

pub fn sar_combined(
    record: &GenerationRecord,
    oracle: &SimilarityOracle<'_>,
    config: &SarConfig,
) -> Result<f64, EstimatorError> {
    let shifted = token_shifted_logprobs(record, oracle)?;
    sentence_shift(record, oracle, &shifted, config.sentence_temperature)
}

/// One minus the mean ROUGE-L over all unordered generation pairs.
pub fn lexical_similarity_uncertainty(record: &GenerationRecord) -> Result<f64, EstimatorError> {
    let b = record.generations.len();
    if b < 2 {
        return Err(EstimatorError::TooFewGenerations(record.id.clone()));
    }
    let tokens: Vec<Vec<String>> = record
        .generations
        .iter()
        .map(|g| tokenize(&g.text))
        .collect();
    let mut sum = 0.0;
    for i in 0..b {
        for j in i + 1..b {
            sum += crate::judge::rouge_l_tokens(&tokens[i], &tokens[j]);
        }
    }
    let pairs = (b * (b - 1) / 2) as f64;
    Ok(1.0 - sum / pairs)
}

pub fn verbal_confidence_uncertainty(record: &GenerationRecord) -> Result<f64, EstimatorError> {
    record
        .verbal_confidence
        .map(|vc| 1.0 - vc / 100.0)
        .ok_or_else(|| EstimatorError::MissingField {
            method: Method::Vc,
            field: "verbal_confidence",
            id: record.id.clone(),
        })
}

pub fn ptrue_uncertainty(record: &GenerationRecord) -> Result<f64, EstimatorError> {
    record
        .p_true
        .map(|p| 1.0 - p)
        .ok_or_else(|| EstimatorError::MissingField {
            method: Method::PTrue,
            field: "p_true",
            id: record.id.clone(),
        })
}

/// Score one record with a vanilla estimator.
pub fn score_record(
    method: Method,
    record: &GenerationRecord,
    oracle: &SimilarityOracle<'_>,
    config: &EstimatorConfig,
) -> Result<f64, EstimatorError> {
    match method {
        Method::Pe => predictive_entropy(record),
        Method::LnPe => length_normalized_pe(record),
        Method::Se => {
            let clusters = cluster_generations(record, oracle, config.equivalence_threshold)?;
            semantic_entropy(record, &clusters)
        }
        Method::SarT => sar_token(record, oracle),
        Method::SarS => sar_sentence(record, oracle, &config.sar),
        Method::Sar => sar_combined(record, oracle, &config.sar),
        Method::Ls => lexical_similarity_uncertainty(record),
        Method::Vc => verbal_confidence_uncertainty(record),
        Method::PTrue => ptrue_uncertainty(record),
        Method::Corrector | Method::Fused => Err(EstimatorError::NotAnEstimator(method)),
    }
}

/// Score every record. Records with a sidecar entry use it as the similarity
/// oracle, the rest fall back to ROUGE-L. Work fans out over the rayon pool;
/// the result does not depend on scheduling.
pub fn score_records(
    method: Method,
    records: &[GenerationRecord],
    similarities: &HashMap<String, SimilarityEntry>,
    config: &EstimatorConfig,
) -> Result<ScoreSet, EstimatorError> {
    let scored: Vec<Result<(String, f64), EstimatorError>> = records
        .par_iter()
        .map(|record| {
            let oracle = similarities
                .get(&record.id)
                .map_or(SimilarityOracle::RougeL, SimilarityOracle::Precomputed);
            score_record(method, record, &oracle, config).map(|s| (record.id.clone(), s))
        })
        .collect();
    let scores = scored.into_iter().collect::<Result<_, _>>()?;
    Ok(ScoreSet::new(method, scores))
}
