//! Answer-equivalence judging and construction of the correction dataset.
//!
//! A primary response counts as correct when its word-level ROUGE-L against
//! the reference is strictly above the threshold, or when an externally
//! supplied LLM-judge verdict says so.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{GenerationRecord, Judgment, Sample};

#[derive(Debug, Error, PartialEq)]
pub enum JudgeError {
    #[error("missing record: {0}")]
    MissingRecord(String),
    #[error("missing judgment: {0}")]
    MissingJudgment(String),
    #[error("primary_index {index} out of range for {len} generations: {id}")]
    BadPrimaryIndex {
        id: String,
        index: usize,
        len: usize,
    },
    #[error("rouge threshold must lie in (0, 1] (got {0})")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextNormalization {
    /// Lowercase, split on whitespace, trim punctuation at token edges.
    #[default]
    LowercaseWhitespace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub rouge_threshold: f64,
    pub use_llm_judge: bool,
    pub normalization: TextNormalization,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            rouge_threshold: 0.7,
            use_llm_judge: true,
            normalization: TextNormalization::LowercaseWhitespace,
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<(), JudgeError> {
        if self.rouge_threshold > 0.0 && self.rouge_threshold <= 1.0 {
            Ok(())
        } else {
            Err(JudgeError::BadThreshold(self.rouge_threshold))
        }
    }
}

fn is_edge_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{00AB}'
                | '\u{00BB}'
                | '\u{2026}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{00BF}'
                | '\u{00A1}'
        )
}

/// Word tokens used for ROUGE-L and for corrector features.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(is_edge_punctuation).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Length of the longest common subsequence, two-row dynamic program.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `LCS / min(len)` over already-tokenized sequences; 0 if either is empty.
pub fn rouge_l_tokens<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let shorter = a.len().min(b.len());
    if shorter == 0 {
        return 0.0;
    }
    lcs_len(a, b) as f64 / shorter as f64
}

pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

pub fn judge_sample(
    sample: &Sample,
    record: &GenerationRecord,
    config: &JudgeConfig,
) -> Result<Judgment, JudgeError> {
    let primary = record
        .primary()
        .ok_or_else(|| JudgeError::BadPrimaryIndex {
            id: record.id.clone(),
            index: record.primary_index,
            len: record.generations.len(),
        })?;
    let score = rouge_l(&primary.text, &sample.reference_answer);
    let rule_correct = score > config.rouge_threshold;
    let llm_correct = if config.use_llm_judge {
        record.llm_judge
    } else {
        None
    };
    let correct = rule_correct || llm_correct == Some(true);
    Ok(Judgment {
        id: sample.id.clone(),
        rouge_l: score,
        rule_correct,
        llm_correct,
        correct,
        corrector_target: u8::from(!correct),
    })
}

/// Judge every sample, in sample order.
pub fn judge_all(
    samples: &[Sample],
    records: &[GenerationRecord],
    config: &JudgeConfig,
) -> Result<Vec<Judgment>, JudgeError> {
    config.validate()?;
    let by_id: HashMap<&str, &GenerationRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    samples
        .iter()
        .map(|sample| {
            let record = by_id
                .get(sample.id.as_str())
                .ok_or_else(|| JudgeError::MissingRecord(sample.id.clone()))?;
            judge_sample(sample, record, config)
        })
        .collect()
}

/// One entry of the correction dataset: a question and whether the target
/// model answered it unreliably.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionExample {
    pub question: String,
    pub target: u8,
}

pub fn build_correction_dataset(
    samples: &[Sample],
    records: &[GenerationRecord],
    config: &JudgeConfig,
) -> Result<Vec<CorrectionExample>, JudgeError> {
    let judgments = judge_all(samples, records, config)?;
    Ok(samples
        .iter()
        .zip(judgments)
        .map(|(s, j)| CorrectionExample {
            question: s.question.clone(),
            target: j.corrector_target,
        })
        .collect())
}

/// Pair already-computed judgments with their questions, in sample order.
pub fn correction_dataset_from_judgments(
    samples: &[Sample],
    judgments: &[Judgment],
) -> Result<Vec<CorrectionExample>, JudgeError> {
    let by_id: HashMap<&str, &Judgment> = judgments.iter().map(|j| (j.id.as_str(), j)).collect();
    samples
        .iter()
        .map(|s| {
            let j = by_id
                .get(s.id.as_str())
                .ok_or_else(|| JudgeError::MissingJudgment(s.id.clone()))?;
            Ok(CorrectionExample {
                question: s.question.clone(),
                target: j.corrector_target,
            })
        })
        .collect()
}
