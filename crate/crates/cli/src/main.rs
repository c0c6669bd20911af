use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cue_core::corrector::{self, CorrectorModel, FeatureExtractor, TrainConfig};
use cue_core::estimators::{self, EstimatorConfig, SarConfig};
use cue_core::fusion::{FusionConfig, WeightChoice};
use cue_core::io::{write_atomic, write_json, write_jsonl};
use cue_core::judge::{self, JudgeConfig};
use cue_core::metrics::{evaluate, labels_from_judgments, EvalConfig, ThresholdChoice};
use cue_core::pipeline::{self, PipelineConfig};
use cue_core::types::validate_dataset;
use cue_core::{Error, Method, Result};

#[derive(Parser)]
#[command(
    name = "cue",
    version,
    about = "Uncertainty correction for language-model answers"
)]
struct Cli {
    /// Worker threads for scoring and grid search (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check samples and generations files against the schema.
    Validate(ValidateArgs),
    /// Judge each primary response against its reference answer.
    Judge(JudgeArgs),
    /// Split sample ids into development and test sets.
    Split(SplitArgs),
    /// Compute vanilla uncertainty scores.
    Score(ScoreArgs),
    /// Train the hashed n-gram corrector on judged questions.
    TrainCorrector(TrainArgs),
    /// Score questions with a trained (or external) corrector.
    CorrectorScore(CorrectorScoreArgs),
    /// Normalize vanilla scores and fuse them with corrector scores.
    Fuse(FuseArgs),
    /// Compute AUROC, F1, ECE and decision risk on the test split.
    Evaluate(EvaluateArgs),
    /// Run every stage from a JSON config.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    generations: PathBuf,
    /// Write the full report (violations and per-method availability) as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct JudgeArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    generations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    rouge_threshold: f64,
    /// Ignore the llm_judge field.
    #[arg(long)]
    no_llm_judge: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    dev_fraction: f64,
    /// Fraction held out for corrector training before the dev/test split.
    #[arg(long, default_value_t = 0.0)]
    train_fraction: f64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    method: Method,
    #[arg(long)]
    generations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    similarities: Option<PathBuf>,
    /// Equivalence threshold for semantic clustering.
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    #[arg(long, default_value_t = 0.001)]
    sar_temp: f64,
    /// Use length-normalized sequence probabilities in the sentence shift.
    #[arg(long)]
    length_normalized: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    judgments: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Restrict training to the split's train_ids.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1 << 18)]
    buckets: usize,
    #[arg(long, default_value_t = 0)]
    hash_seed: u64,
}

#[derive(Args)]
struct CorrectorScoreArgs {
    #[arg(long, required_unless_present = "external", requires = "samples")]
    model: Option<PathBuf>,
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Read external_corrector_prob from this generations file instead.
    #[arg(long, conflicts_with = "model")]
    external: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_weight(s: &str) -> std::result::Result<WeightChoice, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(WeightChoice::Auto);
    }
    let w: f64 = s
        .parse()
        .map_err(|_| format!("expected 'auto' or a number, got '{s}'"))?;
    if (0.0..=1.0).contains(&w) {
        Ok(WeightChoice::Fixed(w))
    } else {
        Err(format!("weight must lie in [0,1], got {w}"))
    }
}

fn parse_tau(s: &str) -> std::result::Result<ThresholdChoice, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(ThresholdChoice::Auto);
    }
    s.parse()
        .map(ThresholdChoice::Fixed)
        .map_err(|_| format!("expected 'auto' or a number, got '{s}'"))
}

fn parse_costs(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected LAMBDA_01,LAMBDA_10, got '{s}'"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| *x >= 0.0)
            .ok_or_else(|| format!("bad cost '{v}'"))
    };
    Ok((parse(a)?, parse(b)?))
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    corrector: PathBuf,
    #[arg(long)]
    judgments: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value = "auto", value_parser = parse_weight)]
    w: WeightChoice,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    grid_step: f64,
    /// Absolute AUROC drop allowed inside the stable range.
    #[arg(long, default_value_t = 0.01)]
    tolerance: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    judgments: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value = "auto", value_parser = parse_tau)]
    tau: ThresholdChoice,
    /// LAMBDA_01,LAMBDA_10
    #[arg(long, default_value = "1,1", value_parser = parse_costs)]
    costs: (f64, f64),
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    calibration_csv: Option<PathBuf>,
    /// Vanilla scores to report deltas against.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    generations: Option<PathBuf>,
    #[arg(long)]
    similarities: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated methods, e.g. pe,se,sar.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    grid_step: Option<f64>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate(a) => {
            let samples = pipeline::load_samples(&a.samples)?;
            let records = pipeline::load_records(&a.generations)?;
            let report = validate_dataset(&samples, &records);
            if let Some(path) = &a.report {
                write_json(path, &report)?;
            }
            for (method, n) in &report.availability {
                eprintln!("{method}: {n}/{} records", report.records);
            }
            if !report.is_valid() {
                return Err(Error::Validation(report.violations));
            }
        }
        Command::Judge(a) => {
            let (samples, records) = pipeline::load_dataset(&a.samples, &a.generations)?;
            let config = JudgeConfig {
                rouge_threshold: a.rouge_threshold,
                use_llm_judge: !a.no_llm_judge,
                ..JudgeConfig::default()
            };
            let judgments = judge::judge_all(&samples, &records, &config)?;
            write_jsonl(&a.out, &judgments)?;
        }
        Command::Split(a) => {
            let samples = pipeline::load_samples(&a.samples)?;
            let ids: Vec<String> = samples.into_iter().map(|s| s.id).collect();
            let split = pipeline::make_split(&ids, a.seed, a.dev_fraction, a.train_fraction)?;
            write_json(&a.out, &split)?;
        }
        Command::Score(a) => {
            let records = pipeline::load_records(&a.generations)?;
            let sims = match &a.similarities {
                Some(p) => pipeline::load_similarities(p)?,
                None => Default::default(),
            };
            let config = EstimatorConfig {
                equivalence_threshold: a.threshold,
                sar: SarConfig {
                    sentence_temperature: a.sar_temp,
                    use_length_normalized_probs: a.length_normalized,
                },
            };
            let set = estimators::score_records(a.method, &records, &sims, &config)?;
            pipeline::write_scores(&a.out, &set)?;
        }
        Command::TrainCorrector(a) => {
            let samples = pipeline::load_samples(&a.samples)?;
            let judgments = pipeline::load_judgments(&a.judgments)?;
            let train_ids = match &a.split {
                Some(p) => pipeline::load_split(p)?.train_ids,
                None => Default::default(),
            };
            let extractor = FeatureExtractor {
                n_buckets: a.buckets,
                hash_seed: a.hash_seed,
                ..FeatureExtractor::default()
            };
            let config = TrainConfig {
                seed: a.seed,
                epochs: a.epochs,
                learning_rate: a.lr,
                batch_size: a.batch,
            };
            let model =
                pipeline::train_corrector(&samples, &judgments, &train_ids, &extractor, &config)?;
            model.save(&a.out)?;
        }
        Command::CorrectorScore(a) => {
            let set = match (&a.external, &a.model, &a.samples) {
                (Some(g), _, _) => corrector::scores_from_external(&pipeline::load_records(g)?)?,
                (None, Some(m), Some(s)) => {
                    let model = CorrectorModel::load(m)?;
                    corrector::score_samples(&model, &pipeline::load_samples(s)?)
                }
                _ => {
                    return Err(Error::Config(
                        "need --model and --samples, or --external".into(),
                    ))
                }
            };
            pipeline::write_scores(&a.out, &set)?;
        }
        Command::Fuse(a) => {
            let vanilla = pipeline::load_scores(&a.scores)?;
            let corrector_scores = pipeline::load_scores(&a.corrector)?;
            let labels = labels_from_judgments(&pipeline::load_judgments(&a.judgments)?);
            let split = pipeline::load_split(&a.split)?;
            let config = FusionConfig {
                w: a.w,
                grid_step: a.grid_step,
                tolerance: a.tolerance,
                ..FusionConfig::default()
            };
            let (fused, report) = cue_core::fusion::fuse_with_split(
                &vanilla,
                &corrector_scores,
                &labels,
                &split,
                &config,
            )?;
            pipeline::write_scores(&a.out, &fused)?;
            write_json(&a.report, &report)?;
        }
        Command::Evaluate(a) => {
            let scores = pipeline::load_scores(&a.scores)?;
            let labels = labels_from_judgments(&pipeline::load_judgments(&a.judgments)?);
            let split = pipeline::load_split(&a.split)?;
            let config = EvalConfig {
                bins: a.bins,
                tau: a.tau,
                lambda_01: a.costs.0,
                lambda_10: a.costs.1,
            };
            let mut report = evaluate(&scores, &labels, &split, &config)?;
            if let Some(path) = &a.baseline {
                let baseline = evaluate(&pipeline::load_scores(path)?, &labels, &split, &config)?;
                report = report.with_baseline(&baseline);
            }
            write_json(&a.out, &report)?;
            if let Some(path) = &a.calibration_csv {
                write_atomic(path, report.ece.to_csv().as_bytes())?;
            }
            println!(
                "{}: AUROC {:.4}  F1 {:.4}  ECE {:.4}  risk {:.4}",
                report.method, report.auroc, report.f1.f1, report.ece.value, report.risk.value
            );
        }
        Command::Pipeline(a) => {
            let mut config = match &a.config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(v) = a.samples {
                config.samples = v;
            }
            if let Some(v) = a.generations {
                config.generations = v;
            }
            if let Some(v) = a.similarities {
                config.similarities = Some(v);
            }
            if let Some(v) = a.out_dir {
                config.out_dir = v;
            }
            if let Some(v) = a.seed {
                config.seed = v;
                config.training.seed = v;
            }
            if let Some(v) = a.methods {
                config.methods = Some(v);
            }
            if let Some(v) = a.grid_step {
                config.fusion.grid_step = v;
            }
            let summary = pipeline::run_pipeline(&config)?;
            println!(
                "corrector: AUROC {:.4}  ECE {:.4}",
                summary.corrector.auroc, summary.corrector.ece
            );
            for m in &summary.methods {
                println!(
                    "{:<6} w*={:.3}  AUROC {:.4} -> {:.4}  ECE {:.4} -> {:.4}",
                    m.method.as_str(),
                    m.w_star,
                    m.vanilla.auroc,
                    m.corrected.auroc,
                    m.vanilla.ece,
                    m.corrected.ece
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .parse_default_env()
        .init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            log::warn!("could not size worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
