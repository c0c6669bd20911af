//! Seeded synthetic datasets for demos and tests.
//!
//! Each question carries a cue word that predicts whether the target model
//! gets it wrong, so a question-only corrector can learn the pattern. The
//! sampled generations and their token logprobs only weakly track
//! correctness, which keeps the vanilla estimators mildly informative.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::{Generation, GenerationRecord, Sample};

const HARD_CUES: [&str; 3] = ["obscure", "medieval", "forgotten"];
const EASY_CUES: [&str; 3] = ["famous", "capital", "popular"];
const NOUNS: [&str; 8] = [
    "river", "painter", "city", "treaty", "battle", "novel", "island", "composer",
];
const ANSWERS: [&str; 16] = [
    "amber", "basalt", "cobalt", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "jasper",
    "kelp", "lumen", "marble", "nectar", "onyx", "quartz",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOptions {
    pub generations: usize,
    /// Probability that a hard (resp. easy) question is answered wrongly.
    pub hard_error_rate: f64,
    pub easy_error_rate: f64,
    /// Extra negative logprob mass on the answer token of wrong answers.
    pub logprob_gap: f64,
    /// Force every primary answer to be correct.
    pub all_correct: bool,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            generations: 5,
            hard_error_rate: 0.8,
            easy_error_rate: 0.2,
            logprob_gap: 0.3,
            all_correct: false,
        }
    }
}

fn answer_generation(answer: &str, wrong: bool, gap: f64, rng: &mut ChaCha8Rng) -> Generation {
    let tokens = vec![
        " It".to_string(),
        " is".to_string(),
        format!(" {answer}"),
        ".".to_string(),
    ];
    let mut noise = |scale: f64| -(rng.gen::<f64>() * scale);
    let answer_lp = noise(1.6) - if wrong { gap } else { 0.0 } - 0.05;
    let logprobs = vec![noise(0.3), noise(0.2), answer_lp, noise(0.1)];
    Generation {
        text: tokens.concat().trim_start().to_string(),
        tokens,
        token_logprobs: Some(logprobs),
    }
}

/// `n` samples with ids `q000`, `q001`, ... and one generation record each.
pub fn dataset(
    n: usize,
    seed: u64,
    options: &SyntheticOptions,
) -> (Vec<Sample>, Vec<GenerationRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("q{i:03}");
        let hard = rng.gen_bool(0.5);
        let cue = if hard {
            HARD_CUES.choose(&mut rng)
        } else {
            EASY_CUES.choose(&mut rng)
        }
        .copied()
        .unwrap_or_default();
        let noun = NOUNS.choose(&mut rng).copied().unwrap_or_default();
        let reference = ANSWERS.choose(&mut rng).copied().unwrap_or_default();
        let error_rate = if hard {
            options.hard_error_rate
        } else {
            options.easy_error_rate
        };
        let wrong = !options.all_correct && rng.gen_bool(error_rate);

        let wrong_answer = |rng: &mut ChaCha8Rng| loop {
            let a = *ANSWERS.choose(rng).unwrap_or(&"x");
            if a != reference {
                return a;
            }
        };
        let primary = if wrong {
            wrong_answer(&mut rng)
        } else {
            reference
        };
        let agree = if wrong { 0.45 } else { 0.6 };
        let mut generations = vec![answer_generation(
            primary,
            wrong,
            options.logprob_gap,
            &mut rng,
        )];
        for _ in 1..options.generations.max(1) {
            let text = if rng.gen_bool(agree) {
                primary
            } else {
                wrong_answer(&mut rng)
            };
            let off = text != reference;
            generations.push(answer_generation(text, off, options.logprob_gap, &mut rng));
        }

        let shift: f64 = if wrong { 0.1 } else { 0.0 };
        let p_true = (0.6 - shift + rng.gen_range(-0.3..0.3)).clamp(0.0, 1.0);
        let verbal: f64 = (rng.gen_range(50.0..100.0f64)).round();

        samples.push(Sample {
            id: id.clone(),
            question: format!("Which {cue} {noun} is described in entry {i}?"),
            reference_answer: reference.to_string(),
        });
        records.push(GenerationRecord {
            id,
            generations,
            primary_index: 0,
            verbal_confidence: Some(verbal),
            p_true: Some(p_true),
            llm_judge: None,
            external_corrector_prob: None,
        });
    }
    (samples, records)
}
