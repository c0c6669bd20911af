//! Shared domain model: samples, generations, judgments, score sets and
//! dataset splits, plus dataset validation and seeded splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A question with its reference answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub reference_answer: String,
}

impl Sample {
    pub const FIELDS: &'static [&'static str] = &["id", "question", "reference_answer"];
}

/// One sampled response of the target model.
///
/// `token_logprobs` are natural-log probabilities of each emitted token. They
/// may be absent entirely, in which case only the text-based and elicited
/// methods can score the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

impl Generation {
    /// Sum of token logprobs, i.e. `ln P(y | x)`.
    pub fn sequence_logprob(&self) -> Option<f64> {
        self.token_logprobs.as_ref().map(|lp| lp.iter().sum())
    }
}

/// All generations sampled for one question, with optional elicited signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub generations: Vec<Generation>,
    #[serde(default)]
    pub primary_index: usize,
    #[serde(default)]
    pub verbal_confidence: Option<f64>,
    #[serde(default)]
    pub p_true: Option<f64>,
    #[serde(default)]
    pub llm_judge: Option<bool>,
    #[serde(default)]
    pub external_corrector_prob: Option<f64>,
}

impl GenerationRecord {
    pub const FIELDS: &'static [&'static str] = &[
        "id",
        "generations",
        "primary_index",
        "verbal_confidence",
        "p_true",
        "llm_judge",
        "external_corrector_prob",
    ];

    pub fn primary(&self) -> Option<&Generation> {
        self.generations.get(self.primary_index)
    }

    pub fn has_logprobs(&self) -> bool {
        !self.generations.is_empty() && self.generations.iter().all(|g| g.token_logprobs.is_some())
    }
}

/// Correctness verdict for the primary response of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub id: String,
    pub rouge_l: f64,
    pub rule_correct: bool,
    pub llm_correct: Option<bool>,
    pub correct: bool,
    /// `1 - correct`: 1 marks an unreliable answer.
    pub corrector_target: u8,
}

impl Judgment {
    pub const FIELDS: &'static [&'static str] = &[
        "id",
        "rouge_l",
        "rule_correct",
        "llm_correct",
        "correct",
        "corrector_target",
    ];

    pub fn is_unreliable(&self) -> bool {
        self.corrector_target == 1
    }
}

/// Source of a score set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "pe", alias = "PE")]
    Pe,
    #[serde(rename = "ln-pe", alias = "LN_PE")]
    LnPe,
    #[serde(rename = "se", alias = "SE")]
    Se,
    #[serde(rename = "sar-t", alias = "SAR_T")]
    SarT,
    #[serde(rename = "sar-s", alias = "SAR_S")]
    SarS,
    #[serde(rename = "sar", alias = "SAR")]
    Sar,
    #[serde(rename = "ls", alias = "LS")]
    Ls,
    #[serde(rename = "vc", alias = "VC")]
    Vc,
    #[serde(rename = "ptrue", alias = "PTRUE")]
    PTrue,
    #[serde(rename = "corrector", alias = "CORRECTOR")]
    Corrector,
    #[serde(rename = "fused", alias = "FUSED")]
    Fused,
}

impl Method {
    /// Vanilla estimators that the pipeline can score and fuse.
    pub const ESTIMATORS: [Method; 9] = [
        Method::Pe,
        Method::LnPe,
        Method::Se,
        Method::SarT,
        Method::SarS,
        Method::Sar,
        Method::Ls,
        Method::Vc,
        Method::PTrue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pe => "pe",
            Method::LnPe => "ln-pe",
            Method::Se => "se",
            Method::SarT => "sar-t",
            Method::SarS => "sar-s",
            Method::Sar => "sar",
            Method::Ls => "ls",
            Method::Vc => "vc",
            Method::PTrue => "ptrue",
            Method::Corrector => "corrector",
            Method::Fused => "fused",
        }
    }

    /// Methods whose scores are already probabilities in [0,1] and are
    /// evaluated without min-max normalization.
    pub fn is_probability(self) -> bool {
        matches!(self, Method::Corrector | Method::Fused)
    }

    pub fn needs_logprobs(self) -> bool {
        matches!(
            self,
            Method::Pe | Method::LnPe | Method::Se | Method::SarT | Method::SarS | Method::Sar
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lowered = s.to_ascii_lowercase().replace('_', "-");
        [
            Method::Pe,
            Method::LnPe,
            Method::Se,
            Method::SarT,
            Method::SarS,
            Method::Sar,
            Method::Ls,
            Method::Vc,
            Method::PTrue,
            Method::Corrector,
            Method::Fused,
        ]
        .into_iter()
        .find(|m| m.as_str() == lowered)
        .ok_or_else(|| format!("unknown method '{s}'"))
    }
}

/// Per-sample scores from one method. Higher means less reliable.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub method: Method,
    pub scores: BTreeMap<String, f64>,
    pub normalized: bool,
}

impl ScoreSet {
    pub fn new(method: Method, scores: BTreeMap<String, f64>) -> Self {
        Self {
            method,
            scores,
            normalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.scores.get(id).copied()
    }

    /// Keep only the given ids.
    pub fn restrict<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> ScoreSet {
        let scores = ids
            .into_iter()
            .filter_map(|id| self.scores.get(id).map(|s| (id.clone(), *s)))
            .collect();
        ScoreSet {
            method: self.method,
            scores,
            normalized: self.normalized,
        }
    }

    pub fn to_lines(&self) -> Vec<ScoreLine> {
        self.scores
            .iter()
            .map(|(id, score)| ScoreLine {
                id: id.clone(),
                method: self.method,
                score: *score,
            })
            .collect()
    }

    /// Rebuild a score set from `scores.jsonl` lines. All lines must carry the
    /// same method; ids must be unique.
    pub fn from_lines(lines: Vec<ScoreLine>) -> Result<ScoreSet, String> {
        let method = match lines.first() {
            Some(line) => line.method,
            None => return Err("score file is empty".into()),
        };
        let mut scores = BTreeMap::new();
        for line in lines {
            if line.method != method {
                return Err(format!(
                    "mixed methods in score file: {} and {}",
                    method, line.method
                ));
            }
            if scores.insert(line.id.clone(), line.score).is_some() {
                return Err(format!("duplicate score id: {}", line.id));
            }
        }
        Ok(ScoreSet {
            method,
            scores,
            normalized: method.is_probability(),
        })
    }
}

/// One line of `scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub id: String,
    pub method: Method,
    pub score: f64,
}

impl ScoreLine {
    pub const FIELDS: &'static [&'static str] = &["id", "method", "score"];
}

/// Development / test partition of the evaluation set.
///
/// `train_ids` is only filled when the pipeline carves a corrector training
/// portion out of a single input dataset; it is disjoint from dev and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub dev_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub train_ids: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn evaluation_ids(&self) -> impl Iterator<Item = &String> {
        self.dev_ids.iter().chain(self.test_ids.iter())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("split needs ≥2 samples (got {0})")]
    TooFewSamples(usize),
    #[error("dev fraction must lie strictly between 0 and 1 (got {0})")]
    BadFraction(f64),
}

/// Sorted, deduplicated ids shuffled by a seeded Fisher-Yates pass.
pub fn shuffled_ids<'a>(ids: impl IntoIterator<Item = &'a String>, seed: u64) -> Vec<String> {
    let mut sorted: Vec<String> = ids
        .into_iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    sorted
}

/// Deterministic dev/test split. `|dev| = round(dev_fraction * n)`, clamped so
/// that both sides are non-empty.
pub fn split_dataset<'a>(
    ids: impl IntoIterator<Item = &'a String>,
    seed: u64,
    dev_fraction: f64,
) -> Result<DatasetSplit, SplitError> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(SplitError::BadFraction(dev_fraction));
    }
    let order = shuffled_ids(ids, seed);
    let n = order.len();
    if n < 2 {
        return Err(SplitError::TooFewSamples(n));
    }
    let n_dev = ((dev_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (dev, test) = order.split_at(n_dev);
    Ok(DatasetSplit {
        dev_ids: dev.iter().cloned().collect(),
        test_ids: test.iter().cloned().collect(),
        seed,
        train_ids: BTreeSet::new(),
    })
}

/// A single problem found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptySampleId {
        line: usize,
    },
    DuplicateSampleId {
        id: String,
    },
    EmptyQuestion {
        id: String,
    },
    DuplicateRecordId {
        id: String,
    },
    OrphanRecord {
        id: String,
    },
    MissingRecord {
        id: String,
    },
    NoGenerations {
        id: String,
    },
    PrimaryIndexOutOfRange {
        id: String,
        index: usize,
        len: usize,
    },
    LengthMismatch {
        id: String,
        generation: usize,
        tokens: usize,
        logprobs: usize,
    },
    InvalidLogprob {
        id: String,
        generation: usize,
        value: f64,
    },
    OutOfRange {
        id: String,
        field: &'static str,
        value: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptySampleId { line } => write!(f, "sample {line}: empty id"),
            Violation::DuplicateSampleId { id } => write!(f, "duplicate sample id: {id}"),
            Violation::EmptyQuestion { id } => write!(f, "empty question: {id}"),
            Violation::DuplicateRecordId { id } => write!(f, "duplicate record id: {id}"),
            Violation::OrphanRecord { id } => write!(f, "orphan record: {id}"),
            Violation::MissingRecord { id } => write!(f, "missing record: {id}"),
            Violation::NoGenerations { id } => write!(f, "record without generations: {id}"),
            Violation::PrimaryIndexOutOfRange { id, index, len } => {
                write!(f, "primary_index {index} out of range for {len} generations: {id}")
            }
            Violation::LengthMismatch {
                id,
                generation,
                tokens,
                logprobs,
            } => write!(
                f,
                "length mismatch in {id} generation {generation}: {tokens} tokens, {logprobs} logprobs"
            ),
            Violation::InvalidLogprob {
                id,
                generation,
                value,
            } => write!(f, "invalid logprob {value} in {id} generation {generation}"),
            Violation::OutOfRange { id, field, value } => {
                write!(f, "{field} out of range ({value}): {id}")
            }
        }
    }
}

/// Outcome of [`validate_dataset`]: violations plus, per method, how many
/// records carry what that method needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub records: usize,
    pub availability: BTreeMap<Method, usize>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    /// Methods every record can be scored with.
    pub fn fully_available(&self) -> Vec<Method> {
        self.availability
            .iter()
            .filter(|(_, &n)| self.records > 0 && n == self.records)
            .map(|(m, _)| *m)
            .collect()
    }
}

fn in_range(value: f64, lo: f64, hi: f64) -> bool {
    value.is_finite() && value >= lo && value <= hi
}

pub fn validate_dataset(samples: &[Sample], records: &[GenerationRecord]) -> ValidationReport {
    let mut violations = Vec::new();

    let mut sample_ids = HashSet::new();
    for (line, sample) in samples.iter().enumerate() {
        if sample.id.is_empty() {
            violations.push(Violation::EmptySampleId { line: line + 1 });
            continue;
        }
        if !sample_ids.insert(sample.id.as_str()) {
            violations.push(Violation::DuplicateSampleId {
                id: sample.id.clone(),
            });
        }
        if sample.question.trim().is_empty() {
            violations.push(Violation::EmptyQuestion {
                id: sample.id.clone(),
            });
        }
    }

    let mut record_ids = HashSet::new();
    let mut availability: BTreeMap<Method, usize> = Method::ESTIMATORS
        .into_iter()
        .chain([Method::Corrector])
        .map(|m| (m, 0))
        .collect();

    for record in records {
        let id = &record.id;
        if !record_ids.insert(id.as_str()) {
            violations.push(Violation::DuplicateRecordId { id: id.clone() });
        }
        if !sample_ids.contains(id.as_str()) {
            violations.push(Violation::OrphanRecord { id: id.clone() });
        }
        if record.generations.is_empty() {
            violations.push(Violation::NoGenerations { id: id.clone() });
        } else if record.primary_index >= record.generations.len() {
            violations.push(Violation::PrimaryIndexOutOfRange {
                id: id.clone(),
                index: record.primary_index,
                len: record.generations.len(),
            });
        }
        let mut logprobs_ok = true;
        for (g, generation) in record.generations.iter().enumerate() {
            if let Some(lps) = &generation.token_logprobs {
                if lps.len() != generation.tokens.len() {
                    logprobs_ok = false;
                    violations.push(Violation::LengthMismatch {
                        id: id.clone(),
                        generation: g,
                        tokens: generation.tokens.len(),
                        logprobs: lps.len(),
                    });
                }
                // -inf is a legitimate zero-probability token.
                if let Some(&value) = lps.iter().find(|&&v| v.is_nan() || v > 0.0) {
                    logprobs_ok = false;
                    violations.push(Violation::InvalidLogprob {
                        id: id.clone(),
                        generation: g,
                        value,
                    });
                }
            }
        }
        let checks: [(&'static str, Option<f64>, f64); 3] = [
            ("verbal_confidence", record.verbal_confidence, 100.0),
            ("p_true", record.p_true, 1.0),
            (
                "external_corrector_prob",
                record.external_corrector_prob,
                1.0,
            ),
        ];
        for (field, value, hi) in checks {
            if let Some(value) = value {
                if !in_range(value, 0.0, hi) {
                    violations.push(Violation::OutOfRange {
                        id: id.clone(),
                        field,
                        value,
                    });
                }
            }
        }

        let b = record.generations.len();
        let logit = logprobs_ok && record.has_logprobs();
        let non_empty = record.generations.iter().all(|g| !g.tokens.is_empty());
        let mut bump = |m: Method, ok: bool| {
            if ok {
                *availability.entry(m).or_default() += 1;
            }
        };
        bump(Method::Pe, logit);
        bump(Method::Se, logit);
        bump(Method::SarS, logit);
        bump(Method::LnPe, logit && non_empty);
        bump(Method::SarT, logit && non_empty);
        bump(Method::Sar, logit && non_empty);
        bump(Method::Ls, b >= 2);
        bump(Method::Vc, record.verbal_confidence.is_some());
        bump(Method::PTrue, record.p_true.is_some());
        bump(Method::Corrector, true);
    }

    for sample in samples {
        if !sample.id.is_empty() && !record_ids.contains(sample.id.as_str()) {
            violations.push(Violation::MissingRecord {
                id: sample.id.clone(),
            });
        }
    }

    ValidationReport {
        violations,
        records: records.len(),
        availability,
    }
}
