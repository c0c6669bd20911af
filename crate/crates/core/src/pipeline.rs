//! End-to-end orchestration: judge, split, train the corrector, score every
//! method, fuse and evaluate. Each stage is also exposed on its own so the CLI
//! subcommands produce the same artifacts as a full run.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corrector::{self, CorrectorModel, FeatureExtractor, TrainConfig};
use crate::error::{Error, Result};
use crate::estimators::{self, EstimatorConfig, SimilarityEntry};
use crate::fusion::{fuse_with_split, FusionConfig, FusionReport};
use crate::io::{read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use crate::judge::{self, correction_dataset_from_judgments, JudgeConfig};
use crate::metrics::{evaluate, labels_from_judgments, EvalConfig, EvalReport, Labels, Summary};
use crate::types::{
    shuffled_ids, split_dataset, validate_dataset, DatasetSplit, GenerationRecord, Judgment,
    Method, Sample, ScoreLine, ScoreSet, SplitError,
};

pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    Ok(read_jsonl(path, Sample::FIELDS)?)
}

pub fn load_records(path: &Path) -> Result<Vec<GenerationRecord>> {
    Ok(read_jsonl(path, GenerationRecord::FIELDS)?)
}

pub fn load_judgments(path: &Path) -> Result<Vec<Judgment>> {
    Ok(read_jsonl(path, Judgment::FIELDS)?)
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    Ok(read_json(path)?)
}

pub fn load_similarities(path: &Path) -> Result<HashMap<String, SimilarityEntry>> {
    let entries: Vec<SimilarityEntry> = read_jsonl(path, SimilarityEntry::FIELDS)?;
    Ok(entries.into_iter().map(|e| (e.id.clone(), e)).collect())
}

pub fn load_scores(path: &Path) -> Result<ScoreSet> {
    let lines: Vec<ScoreLine> = read_jsonl(path, ScoreLine::FIELDS)?;
    ScoreSet::from_lines(lines).map_err(|message| {
        crate::error::IoError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message,
        }
        .into()
    })
}

pub fn write_scores(path: &Path, set: &ScoreSet) -> Result<()> {
    Ok(write_jsonl(path, &set.to_lines())?)
}

/// Read and validate a dataset; any violation fails the load.
pub fn load_dataset(
    samples: &Path,
    generations: &Path,
) -> Result<(Vec<Sample>, Vec<GenerationRecord>)> {
    let samples = load_samples(samples)?;
    let records = load_records(generations)?;
    let report = validate_dataset(&samples, &records);
    if !report.is_valid() {
        return Err(Error::Validation(report.violations));
    }
    Ok((samples, records))
}

/// Dev/test split of `ids`, optionally carving a corrector training portion
/// off the front of the seeded shuffle first.
pub fn make_split<'a>(
    ids: impl IntoIterator<Item = &'a String>,
    seed: u64,
    dev_fraction: f64,
    train_fraction: f64,
) -> Result<DatasetSplit> {
    if train_fraction == 0.0 {
        return Ok(split_dataset(ids, seed, dev_fraction)?);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in [0, 1) (got {train_fraction})"
        )));
    }
    let order = shuffled_ids(ids, seed);
    let n = order.len();
    if n < 3 {
        return Err(SplitError::TooFewSamples(n).into());
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 2);
    let (train, rest) = order.split_at(n_train);
    let mut split = split_dataset(rest, seed, dev_fraction)?;
    split.train_ids = train.iter().cloned().collect();
    Ok(split)
}

/// Train the corrector on the judged samples, restricted to `train_ids` when
/// that set is non-empty.
pub fn train_corrector(
    samples: &[Sample],
    judgments: &[Judgment],
    train_ids: &BTreeSet<String>,
    extractor: &FeatureExtractor,
    config: &TrainConfig,
) -> Result<CorrectorModel> {
    let selected: Vec<Sample> = samples
        .iter()
        .filter(|s| train_ids.is_empty() || train_ids.contains(&s.id))
        .cloned()
        .collect();
    let dataset = correction_dataset_from_judgments(&selected, judgments)?;
    Ok(corrector::train(&dataset, extractor, config)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub samples: PathBuf,
    pub generations: PathBuf,
    pub similarities: Option<PathBuf>,
    /// Separate corrector training data. When absent, `train_fraction` of
    /// the main dataset is held out for training.
    pub train_samples: Option<PathBuf>,
    pub train_generations: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Methods to score; defaults to every estimator all records support.
    pub methods: Option<Vec<Method>>,
    pub seed: u64,
    pub dev_fraction: f64,
    pub train_fraction: f64,
    /// Use `external_corrector_prob` from the generations file instead of
    /// training the hashed n-gram corrector.
    pub use_external_corrector: bool,
    pub judge: JudgeConfig,
    pub extractor: FeatureExtractor,
    pub training: TrainConfig,
    pub estimators: EstimatorConfig,
    pub fusion: FusionConfig,
    pub evaluation: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            samples: PathBuf::from("samples.jsonl"),
            generations: PathBuf::from("generations.jsonl"),
            similarities: None,
            train_samples: None,
            train_generations: None,
            out_dir: PathBuf::from("cue_out"),
            methods: None,
            seed: 42,
            dev_fraction: 0.5,
            train_fraction: 0.5,
            use_external_corrector: false,
            judge: JudgeConfig::default(),
            extractor: FeatureExtractor::default(),
            training: TrainConfig::default(),
            estimators: EstimatorConfig::default(),
            fusion: FusionConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Load a JSON config; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: PipelineConfig = read_json(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.samples);
        resolve(&mut config.generations);
        resolve(&mut config.out_dir);
        for p in [
            &mut config.similarities,
            &mut config.train_samples,
            &mut config.train_generations,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub w_star: f64,
    pub stable_range: (f64, f64),
    pub vanilla: Summary,
    pub corrected: Summary,
    pub improvement: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub corrector: Summary,
    pub methods: Vec<MethodSummary>,
}

/// Paths of the artifacts a pipeline run writes under `out_dir`.
pub struct Artifacts<'a>(pub &'a Path);

impl Artifacts<'_> {
    pub fn judgments(&self) -> PathBuf {
        self.0.join("judgments.jsonl")
    }
    pub fn train_judgments(&self) -> PathBuf {
        self.0.join("train_judgments.jsonl")
    }
    pub fn split(&self) -> PathBuf {
        self.0.join("split.json")
    }
    pub fn model(&self) -> PathBuf {
        self.0.join("corrector.model")
    }
    pub fn corrector_scores(&self) -> PathBuf {
        self.0.join("corrector_scores.jsonl")
    }
    pub fn scores(&self, m: Method) -> PathBuf {
        self.0.join("scores").join(format!("{m}.jsonl"))
    }
    pub fn fused(&self, m: Method) -> PathBuf {
        self.0.join("fused").join(format!("{m}.jsonl"))
    }
    pub fn fusion_report(&self, m: Method) -> PathBuf {
        self.0.join("fusion").join(format!("{m}.json"))
    }
    pub fn eval(&self, name: &str) -> PathBuf {
        self.0.join("eval").join(format!("{name}.json"))
    }
    pub fn calibration(&self, name: &str) -> PathBuf {
        self.0.join("eval").join(format!("{name}.csv"))
    }
    pub fn summary(&self) -> PathBuf {
        self.0.join("summary.json")
    }
}

fn write_eval(out: &Artifacts<'_>, name: &str, report: &EvalReport) -> Result<()> {
    write_json(&out.eval(name), report)?;
    write_atomic(&out.calibration(name), report.ece.to_csv().as_bytes())?;
    Ok(())
}

/// Fuse one vanilla score set with the corrector and evaluate both.
pub fn fuse_and_evaluate(
    vanilla: &ScoreSet,
    corrector_scores: &ScoreSet,
    labels: &Labels,
    split: &DatasetSplit,
    fusion: &FusionConfig,
    evaluation: &EvalConfig,
) -> Result<(ScoreSet, FusionReport, EvalReport, EvalReport)> {
    let (fused, report) = fuse_with_split(vanilla, corrector_scores, labels, split, fusion)?;
    let vanilla_eval = evaluate(vanilla, labels, split, evaluation)?;
    let fused_eval = evaluate(&fused, labels, split, evaluation)?.with_baseline(&vanilla_eval);
    Ok((fused, report, vanilla_eval, fused_eval))
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineSummary> {
    let out = Artifacts(&config.out_dir);
    let (samples, records) = load_dataset(&config.samples, &config.generations)?;
    let similarities = match &config.similarities {
        Some(path) => load_similarities(path)?,
        None => HashMap::new(),
    };

    let judgments = judge::judge_all(&samples, &records, &config.judge)?;
    write_jsonl(&out.judgments(), &judgments)?;
    let labels = labels_from_judgments(&judgments);

    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let separate_train = match (&config.train_samples, &config.train_generations) {
        (Some(s), Some(g)) => Some((s, g)),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "train_samples and train_generations must be given together".into(),
            ))
        }
    };
    let train_fraction = if separate_train.is_some() || config.use_external_corrector {
        0.0
    } else {
        config.train_fraction
    };
    let split = make_split(&ids, config.seed, config.dev_fraction, train_fraction)?;
    write_json(&out.split(), &split)?;

    let corrector_scores = if config.use_external_corrector {
        corrector::scores_from_external(&records)?
    } else {
        let model = match separate_train {
            Some((s, g)) => {
                let (train_samples, train_records) = load_dataset(s, g)?;
                let train_judgments =
                    judge::judge_all(&train_samples, &train_records, &config.judge)?;
                write_jsonl(&out.train_judgments(), &train_judgments)?;
                train_corrector(
                    &train_samples,
                    &train_judgments,
                    &BTreeSet::new(),
                    &config.extractor,
                    &config.training,
                )?
            }
            None => train_corrector(
                &samples,
                &judgments,
                &split.train_ids,
                &config.extractor,
                &config.training,
            )?,
        };
        model.save(&out.model())?;
        corrector::score_samples(&model, &samples)
    };
    write_scores(&out.corrector_scores(), &corrector_scores)?;
    let corrector_eval = evaluate(&corrector_scores, &labels, &split, &config.evaluation)?;
    write_eval(&out, "corrector", &corrector_eval)?;

    let methods = match &config.methods {
        Some(m) => m.clone(),
        None => validate_dataset(&samples, &records)
            .fully_available()
            .into_iter()
            .filter(|m| Method::ESTIMATORS.contains(m))
            .collect(),
    };

    let mut summaries = Vec::new();
    for method in methods {
        log::info!("scoring {method}");
        let vanilla =
            estimators::score_records(method, &records, &similarities, &config.estimators)?;
        write_scores(&out.scores(method), &vanilla)?;
        let (fused, report, vanilla_eval, fused_eval) = fuse_and_evaluate(
            &vanilla,
            &corrector_scores,
            &labels,
            &split,
            &config.fusion,
            &config.evaluation,
        )?;
        write_scores(&out.fused(method), &fused)?;
        write_json(&out.fusion_report(method), &report)?;
        write_eval(&out, &format!("{method}_vanilla"), &vanilla_eval)?;
        write_eval(&out, method.as_str(), &fused_eval)?;
        let deltas = fused_eval.deltas.expect("baseline attached");
        summaries.push(MethodSummary {
            method,
            w_star: report.w_star,
            stable_range: report.stable_range,
            vanilla: deltas.vanilla,
            corrected: deltas.corrected,
            improvement: deltas.improvement,
        });
    }

    let summary = PipelineSummary {
        seed: config.seed,
        n_train: split.train_ids.len(),
        n_dev: split.dev_ids.len(),
        n_test: split.test_ids.len(),
        corrector: corrector_eval.summary(),
        methods: summaries,
    };
    write_json(&out.summary(), &summary)?;
    Ok(summary)
}
