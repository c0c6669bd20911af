//! Acceptance suite. Every check compares library output with an oracle
//! written independently here, and prints one PASS/FAIL line.
//!
//! Run alone with `cargo test -p cue-core --test acceptance`. Set
//! `CUE_BLESS=1` to rewrite the golden end-to-end summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cue_core::corrector::{CorrectorModel, FeatureExtractor, SparseVector};
use cue_core::estimators::{
    cluster_generations, length_normalized_pe, predictive_entropy, sar_combined, sar_sentence,
    sar_token, semantic_entropy, SarConfig, SimilarityEntry, SimilarityOracle,
};
use cue_core::fusion::{grid_search_w, stable_range, FusionConfig};
use cue_core::io::write_jsonl;
use cue_core::judge::{judge_sample, lcs_len, rouge_l_tokens, JudgeConfig};
use cue_core::metrics::{auroc, ece};
use cue_core::pipeline::{run_pipeline, PipelineConfig};
use cue_core::synthetic::{dataset, SyntheticOptions};
use cue_core::{Generation, GenerationRecord, Method, Sample, ScoreSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || {
        format!("{name}: got {got}, want {want} (tol {tol:e})")
    })
}

// ---------------------------------------------------------------------------
// Estimators

struct Fixture {
    record: GenerationRecord,
    sim: Vec<Vec<f64>>,
    relevance: Vec<Vec<f64>>,
}

impl Fixture {
    fn entry(&self) -> SimilarityEntry {
        SimilarityEntry {
            id: self.record.id.clone(),
            pairwise: Some(self.sim.clone()),
            token_relevance: Some(self.relevance.clone()),
        }
    }

    fn logprobs(&self) -> Vec<Vec<f64>> {
        self.record
            .generations
            .iter()
            .map(|g| g.token_logprobs.clone().unwrap())
            .collect()
    }
}

fn random_fixture(rng: &mut ChaCha8Rng, id: usize) -> Fixture {
    let b = rng.gen_range(1..=5);
    let mut generations = Vec::new();
    let mut relevance = Vec::new();
    for _ in 0..b {
        let len = rng.gen_range(1..=4);
        let tokens: Vec<String> = (0..len).map(|k| format!(" t{k}")).collect();
        let lps: Vec<f64> = (0..len).map(|_| -rng.gen_range(0.0..3.0)).collect();
        let rel: Vec<f64> = (0..len)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    0.0
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        generations.push(Generation {
            text: tokens.concat(),
            tokens,
            token_logprobs: Some(lps),
        });
        relevance.push(rel);
    }
    // Coarse values so that some pairs land on the 0.7 threshold.
    let levels = [0.0, 0.3, 0.69, 0.7, 0.71, 0.9, 1.0];
    let sim = (0..b)
        .map(|i| {
            (0..b)
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        levels[rng.gen_range(0..levels.len())]
                    }
                })
                .collect()
        })
        .collect();
    Fixture {
        record: GenerationRecord {
            id: format!("f{id}"),
            generations,
            primary_index: 0,
            verbal_confidence: None,
            p_true: None,
            llm_judge: None,
            external_corrector_prob: None,
        },
        sim,
        relevance,
    }
}

fn brute_clusters(sim: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (i, row) in sim.iter().enumerate() {
        let home = clusters
            .iter()
            .position(|c| row[c[0]] >= threshold && sim[c[0]][i] >= threshold);
        match home {
            Some(k) => clusters[k].push(i),
            None => clusters.push(vec![i]),
        }
    }
    clusters
}

/// Direct-probability versions of every logit-based estimator.
struct Brute {
    pe: f64,
    ln_pe: f64,
    se: f64,
    sar_t: f64,
    sar_s: f64,
    sar: f64,
}

fn brute_force(f: &Fixture, t: f64) -> Brute {
    let lps = f.logprobs();
    let b = lps.len() as f64;
    let p: Vec<f64> = lps.iter().map(|lp| lp.iter().sum::<f64>().exp()).collect();
    let pe = -p.iter().map(|x| x.ln()).sum::<f64>() / b;
    let ln_pe = -lps
        .iter()
        .map(|lp| lp.iter().sum::<f64>() / lp.len() as f64)
        .sum::<f64>()
        / b;
    let clusters = brute_clusters(&f.sim, 0.7);
    let se = -clusters
        .iter()
        .map(|c| c.iter().map(|&i| p[i]).sum::<f64>().ln())
        .sum::<f64>()
        / clusters.len() as f64;
    let token_lp: Vec<f64> = lps
        .iter()
        .zip(&f.relevance)
        .map(|(lp, rel)| {
            let total: f64 = rel.iter().sum();
            lp.iter()
                .zip(rel)
                .map(|(l, r)| {
                    let w = if total > 0.0 {
                        r / total
                    } else {
                        1.0 / rel.len() as f64
                    };
                    w * l
                })
                .sum()
        })
        .collect();
    let sar_t = -token_lp.iter().sum::<f64>() / b;
    let shift = |probs: &[f64]| {
        let mut acc = 0.0;
        for (i, &own) in probs.iter().enumerate() {
            let mut shifted = own;
            for (j, &other) in probs.iter().enumerate() {
                if j != i {
                    shifted += f.sim[i][j] * other / t;
                }
            }
            acc += shifted.ln();
        }
        -acc / probs.len() as f64
    };
    let sar_s = shift(&p);
    let token_p: Vec<f64> = token_lp.iter().map(|x| x.exp()).collect();
    let sar = shift(&token_p);
    Brute {
        pe,
        ln_pe,
        se,
        sar_t,
        sar_s,
        sar,
    }
}

fn estimator_suite() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sar = SarConfig::default();
    let tol = 1e-9;
    for n in 0..200 {
        let f = random_fixture(&mut rng, n);
        let entry = f.entry();
        let oracle = SimilarityOracle::Precomputed(&entry);
        let r = &f.record;
        let want = brute_force(&f, sar.sentence_temperature);
        let clusters = cluster_generations(r, &oracle, 0.7).map_err(|e| e.to_string())?;
        ensure(clusters == brute_clusters(&f.sim, 0.7), || {
            format!("fixture {n}: clusters differ")
        })?;
        let got = [
            ("PE", predictive_entropy(r), want.pe),
            ("LN-PE", length_normalized_pe(r), want.ln_pe),
            ("SE", semantic_entropy(r, &clusters), want.se),
            ("SAR-t", sar_token(r, &oracle), want.sar_t),
            ("SAR-s", sar_sentence(r, &oracle, &sar), want.sar_s),
            ("SAR", sar_combined(r, &oracle, &sar), want.sar),
        ];
        for (name, value, expected) in got {
            let value = value.map_err(|e| format!("fixture {n} {name}: {e}"))?;
            close(&format!("fixture {n} {name}"), value, expected, tol)?;
        }
    }

    // Reduction identities.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 0..100 {
        let mut f = random_fixture(&mut rng, n);
        let b = f.record.generations.len();
        let r = &f.record;
        let pe = predictive_entropy(r).map_err(|e| e.to_string())?;
        let singletons: Vec<Vec<usize>> = (0..b).map(|i| vec![i]).collect();
        let se = semantic_entropy(r, &singletons).map_err(|e| e.to_string())?;
        ensure(se == pe, || {
            format!("fixture {n}: SE over singletons {se} != PE {pe}")
        })?;

        for i in 0..b {
            for j in 0..b {
                if i != j {
                    f.sim[i][j] = 0.0;
                }
            }
        }
        let zero = f.entry();
        let sar_s = sar_sentence(&f.record, &SimilarityOracle::Precomputed(&zero), &sar)
            .map_err(|e| e.to_string())?;
        ensure(sar_s == pe, || {
            format!("fixture {n}: zero-similarity SAR-s {sar_s} != PE {pe}")
        })?;

        let c = rng.gen_range(0.1..1.0);
        for row in f.relevance.iter_mut() {
            row.iter_mut().for_each(|v| *v = c);
        }
        let uniform = f.entry();
        let sar_t = sar_token(&f.record, &SimilarityOracle::Precomputed(&uniform))
            .map_err(|e| e.to_string())?;
        let ln_pe = length_normalized_pe(&f.record).map_err(|e| e.to_string())?;
        close(
            &format!("fixture {n}: uniform SAR-t vs LN-PE"),
            sar_t,
            ln_pe,
            1e-12,
        )?;
    }

    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "200 fixtures at 1e-9, 100 reduction fixtures, {elapsed:.2?}"
    ))
}

// ---------------------------------------------------------------------------
// ROUGE-L

/// Every sequence over {0,1,2} of length <= `max_len`, shortest first. A
/// sequence's prefix (itself minus the last token) always has a lower index.
fn all_sequences(max_len: usize) -> (Vec<Vec<u8>>, Vec<usize>) {
    let mut seqs: Vec<Vec<u8>> = vec![vec![]];
    let mut parent = vec![usize::MAX];
    let mut start = 0;
    for _ in 0..max_len {
        let end = seqs.len();
        for i in start..end {
            for t in 0..3 {
                let mut s = seqs[i].clone();
                s.push(t);
                seqs.push(s);
                parent.push(i);
            }
        }
        start = end;
    }
    (seqs, parent)
}

struct LcsMemo<'a> {
    seqs: &'a [Vec<u8>],
    parent: &'a [usize],
    table: Vec<u8>,
}

impl LcsMemo<'_> {
    const UNSET: u8 = u8::MAX;

    fn get(&mut self, a: usize, b: usize) -> u8 {
        let n = self.seqs.len();
        let slot = a * n + b;
        if self.table[slot] != Self::UNSET {
            return self.table[slot];
        }
        let (sa, sb) = (&self.seqs[a], &self.seqs[b]);
        let value = if sa.is_empty() || sb.is_empty() {
            0
        } else if sa.last() == sb.last() {
            self.get(self.parent[a], self.parent[b]) + 1
        } else {
            self.get(self.parent[a], b).max(self.get(a, self.parent[b]))
        };
        self.table[slot] = value;
        value
    }
}

fn rouge_suite() -> Check {
    let (seqs, parent) = all_sequences(8);
    let n = seqs.len();
    let mut memo = LcsMemo {
        seqs: &seqs,
        parent: &parent,
        table: vec![LcsMemo::UNSET; n * n],
    };
    for a in 0..n {
        for b in 0..n {
            let want = memo.get(a, b) as usize;
            let got = lcs_len(&seqs[a], &seqs[b]);
            if got != want {
                return Err(format!(
                    "LCS({:?}, {:?}) = {got}, oracle {want}",
                    seqs[a], seqs[b]
                ));
            }
            if seqs[a].len() > 6 || seqs[b].len() > 6 {
                continue;
            }
            let shorter = seqs[a].len().min(seqs[b].len());
            let want_rouge = if shorter == 0 {
                0.0
            } else {
                want as f64 / shorter as f64
            };
            let got_rouge = rouge_l_tokens(&seqs[a], &seqs[b]);
            if got_rouge != want_rouge {
                return Err(format!(
                    "ROUGE-L({:?}, {:?}) = {got_rouge}, oracle {want_rouge}",
                    seqs[a], seqs[b]
                ));
            }
        }
    }

    // Judge: correct = (ROUGE-L > 0.7) OR llm_judge, across every combination.
    let sample = |reference: &str| Sample {
        id: "j".into(),
        question: "q".into(),
        reference_answer: reference.into(),
    };
    let record = |text: &str, llm: Option<bool>| GenerationRecord {
        id: "j".into(),
        generations: vec![Generation {
            text: text.into(),
            tokens: vec![],
            token_logprobs: None,
        }],
        primary_index: 0,
        verbal_confidence: None,
        p_true: None,
        llm_judge: llm,
        external_corrector_prob: None,
    };
    // 10 words, 7 shared in order: ROUGE-L exactly 0.7, which is not above the threshold.
    let reference = "a b c d e f g h i j";
    let texts = [
        ("a b c d e f g h i j", true),
        ("a b c d e f g x y z", false),
        ("a b c d e f g h x y", true),
        ("unrelated", false),
    ];
    let mut rows = 0;
    for (text, rule) in texts {
        for llm in [None, Some(false), Some(true)] {
            for use_llm in [false, true] {
                let config = JudgeConfig {
                    use_llm_judge: use_llm,
                    ..JudgeConfig::default()
                };
                let j = judge_sample(&sample(reference), &record(text, llm), &config)
                    .map_err(|e| e.to_string())?;
                let llm_vote = use_llm && llm == Some(true);
                let want = rule || llm_vote;
                ensure(
                    j.rule_correct == rule
                        && j.correct == want
                        && j.corrector_target == u8::from(!want),
                    || format!("judge row {text:?} llm={llm:?} use_llm={use_llm}: {j:?}"),
                )?;
                rows += 1;
            }
        }
    }
    Ok(format!(
        "{} ordered LCS pairs exhaustive, {rows} judge rows",
        n * n
    ))
}

// ---------------------------------------------------------------------------
// AUROC

fn pairwise_auroc(scores: &[f64], unreliable: &[bool]) -> f64 {
    let mut doubled = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if unreliable[i] && !unreliable[j] {
                pairs += 1;
                doubled += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    doubled as f64 / (2 * pairs) as f64
}

fn auroc_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let n = rng.gen_range(2..=200);
        let levels = if k % 2 == 0 {
            rng.gen_range(1..=4)
        } else {
            1000
        };
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / 4.0)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = pairwise_auroc(&scores, &labels);
        close(&format!("instance {k} (n={n})"), got, want, 1e-9)?;
        worst = worst.max((got - want).abs());
    }
    Ok(format!("50 instances, max |diff| {worst:e}"))
}

// ---------------------------------------------------------------------------
// ECE

fn ece_suite() -> Check {
    let value =
        |u: &[f64], bad: &[bool]| ece(u, bad, 10).map(|t| t.value).map_err(|e| e.to_string());

    close(
        "two samples at confidence 0.95",
        value(&[0.05, 0.05], &[false, true])?,
        0.45,
        1e-12,
    )?;
    let bad: Vec<bool> = (0..10).map(|i| i >= 7).collect();
    close(
        "calibrated constant 0.7",
        value(&[0.3; 10], &bad)?,
        0.0,
        1e-12,
    )?;
    close(
        "all confident, all right",
        value(&[0.0; 4], &[false; 4])?,
        0.0,
        1e-12,
    )?;
    close(
        "all confident, all wrong",
        value(&[0.0; 4], &[true; 4])?,
        1.0,
        1e-12,
    )?;
    // Confidence 0 and just under 0.1 both fall in the first bin.
    let t = ece(&[1.0, 0.9], &[true, true], 10).map_err(|e| e.to_string())?;
    ensure(t.bins[0].count == 2, || {
        format!("edge binning: {:?}", t.bins[0])
    })?;
    close("edge binning", t.value, 0.05, 1e-12)?;

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for k in 0..200 {
        let n = rng.gen_range(1..60);
        let bins = rng.gen_range(1..=15);
        let u: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    rng.gen_range(0..=10) as f64 / 10.0
                } else {
                    rng.gen()
                }
            })
            .collect();
        let bad: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let t = ece(&u, &bad, bins).map_err(|e| e.to_string())?;
        ensure((0.0..=1.0).contains(&t.value), || {
            format!("instance {k}: ECE {} out of range", t.value)
        })?;
        ensure(t.bins.len() == bins, || {
            format!("instance {k}: {} bins", t.bins.len())
        })?;
        ensure(t.bins.iter().map(|b| b.count).sum::<usize>() == n, || {
            format!("instance {k}: bin counts do not sum to {n}")
        })?;
        let mut recomputed = 0.0;
        for b in &t.bins {
            if b.count == 0 {
                ensure(b.conf == 0.0 && b.acc == 0.0, || {
                    format!("instance {k}: empty bin {b:?}")
                })?;
            } else {
                ensure(b.conf >= b.lo - 1e-12 && b.conf <= b.hi + 1e-12, || {
                    format!("instance {k}: bin confidence outside its edges {b:?}")
                })?;
            }
            recomputed += b.count as f64 / n as f64 * (b.acc - b.conf).abs();
        }
        close(
            &format!("instance {k}: table sum"),
            t.value,
            recomputed,
            1e-12,
        )?;
        if bins == 1 {
            let conf = u.iter().map(|x| 1.0 - x).sum::<f64>() / n as f64;
            let acc = bad.iter().filter(|&&b| !b).count() as f64 / n as f64;
            close(
                &format!("instance {k}: one bin"),
                t.value,
                (acc - conf).abs(),
                1e-12,
            )?;
        }
    }
    ensure(ece(&[0.5], &[true], 0).is_err(), || {
        "zero bins accepted".into()
    })?;
    ensure(ece(&[1.5], &[true], 10).is_err(), || {
        "uncertainty above 1 accepted".into()
    })?;
    Ok("hand fixtures at 1e-12, 200 invariant instances".into())
}

// ---------------------------------------------------------------------------
// Corrector gradient

fn reference_loss(weights: &[f64], bias: f64, batch: &[(SparseVector, f64)]) -> f64 {
    batch
        .iter()
        .map(|(x, y)| {
            let z: f64 =
                x.0.iter()
                    .map(|&(i, v)| weights[i as usize] * v)
                    .sum::<f64>()
                    + bias;
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

fn gradient_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for m in 0..20 {
        let extractor = FeatureExtractor {
            n_buckets: 16,
            ..FeatureExtractor::default()
        };
        let mut model = CorrectorModel::zeros(extractor).map_err(|e| e.to_string())?;
        model
            .weights
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-1.0..1.0));
        model.bias = rng.gen_range(-0.5..0.5);
        let batch: Vec<(SparseVector, f64)> = (0..rng.gen_range(1..8))
            .map(|_| {
                let mut buckets: Vec<u32> = (0..16).filter(|_| rng.gen_bool(0.3)).collect();
                buckets.dedup();
                let x = SparseVector(
                    buckets
                        .into_iter()
                        .map(|i| (i, rng.gen_range(1..3) as f64))
                        .collect(),
                );
                (x, if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            })
            .collect();
        let (_, grad) = model.loss_and_gradient(&batch);
        let rel = |analytic: f64, numeric: f64| {
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
        };
        for i in 0..16 {
            let mut plus = model.weights.clone();
            let mut minus = model.weights.clone();
            plus[i] += h;
            minus[i] -= h;
            let numeric = (reference_loss(&plus, model.bias, &batch)
                - reference_loss(&minus, model.bias, &batch))
                / (2.0 * h);
            let analytic = grad.weights.get(&(i as u32)).copied().unwrap_or(0.0);
            if analytic == 0.0 && numeric.abs() < 1e-9 {
                continue;
            }
            let e = rel(analytic, numeric);
            worst = worst.max(e);
            ensure(e < 1e-4, || {
                format!("model {m} weight {i}: {analytic} vs {numeric}")
            })?;
        }
        let numeric = (reference_loss(&model.weights, model.bias + h, &batch)
            - reference_loss(&model.weights, model.bias - h, &batch))
            / (2.0 * h);
        let e = rel(grad.bias, numeric);
        worst = worst.max(e);
        ensure(e < 1e-4, || {
            format!("model {m} bias: {} vs {numeric}", grad.bias)
        })?;
    }
    Ok(format!("20 models, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// Fusion

fn score_set(method: Method, values: &[f64]) -> ScoreSet {
    let scores: BTreeMap<String, f64> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (format!("s{i:03}"), v))
        .collect();
    ScoreSet {
        method,
        scores,
        normalized: true,
    }
}

fn labels(values: &[bool]) -> BTreeMap<String, bool> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| (format!("s{i:03}"), v))
        .collect()
}

fn linear_scan_range(curve: &[(f64, f64)], centre: usize, tol: f64) -> (f64, f64) {
    let floor = curve[centre].1 - tol;
    let mut run_start = 0;
    for (k, &(_, v)) in curve.iter().enumerate() {
        if v < floor {
            run_start = k + 1;
        }
        if k >= centre && (k + 1 == curve.len() || curve[k + 1].1 < floor) {
            return (curve[run_start].0, curve[k].0);
        }
    }
    unreachable!()
}

fn fusion_suite() -> Check {
    let config = FusionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for k in 0..10 {
        let n = rng.gen_range(4..40);
        let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut bad: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        bad[0] = true;
        bad[1] = false;
        let search = grid_search_w(
            &score_set(Method::Pe, &u),
            &score_set(Method::Corrector, &c),
            &labels(&bad),
            &config,
        )
        .map_err(|e| e.to_string())?;
        ensure(search.curve.len() == 1001, || {
            format!("instance {k}: {} grid points", search.curve.len())
        })?;
        let mut best = (f64::NAN, f64::NEG_INFINITY);
        for (g, &(w, got)) in search.curve.iter().enumerate() {
            close(
                &format!("instance {k}: grid w"),
                w,
                g as f64 / 1000.0,
                1e-12,
            )?;
            let fused: Vec<f64> = u
                .iter()
                .zip(&c)
                .map(|(a, b)| w * a + (1.0 - w) * b)
                .collect();
            let want = pairwise_auroc(&fused, &bad);
            close(&format!("instance {k}: AUROC at w={w}"), got, want, 1e-12)?;
            if want > best.1 {
                best = (w, want);
            }
        }
        ensure(search.w_star == best.0, || {
            format!(
                "instance {k}: w* {} but exhaustive maximizer {}",
                search.w_star, best.0
            )
        })?;
    }

    // Both inputs separate the classes perfectly, so every w ties at 1.
    let u = [0.1, 0.2, 0.8, 0.9];
    let c = [0.0, 0.3, 0.7, 1.0];
    let bad = [false, false, true, true];
    let search = grid_search_w(
        &score_set(Method::Pe, &u),
        &score_set(Method::Corrector, &c),
        &labels(&bad),
        &config,
    )
    .map_err(|e| e.to_string())?;
    ensure(search.curve.iter().all(|p| p.1 == 1.0), || {
        "tie fixture is not flat".into()
    })?;
    ensure(search.w_star == 0.0, || {
        format!("all-tie fixture picked w* = {}", search.w_star)
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for k in 0..500 {
        let len = rng.gen_range(1..30);
        let curve: Vec<(f64, f64)> = (0..len)
            .map(|i| (i as f64 / 10.0, rng.gen_range(0..20) as f64 / 100.0 + 0.5))
            .collect();
        let centre = rng.gen_range(0..len);
        let tol = [0.0, 0.01, 0.03, 0.1][k % 4];
        let got = stable_range(&curve, curve[centre].0, tol);
        let want = linear_scan_range(&curve, centre, tol);
        ensure(got == want, || {
            format!("curve {k}: stable range {got:?}, linear scan {want:?}")
        })?;
    }
    Ok("10 grid searches x 1001 points, all-tie fixture, 500 stable ranges".into())
}

// ---------------------------------------------------------------------------
// End to end

fn write_fixture(dir: &Path, n: usize, seed: u64) -> Result<PipelineConfig, String> {
    let (samples, records) = dataset(n, seed, &SyntheticOptions::default());
    let samples_path = dir.join("samples.jsonl");
    let generations_path = dir.join("generations.jsonl");
    write_jsonl(&samples_path, &samples).map_err(|e| e.to_string())?;
    write_jsonl(&generations_path, &records).map_err(|e| e.to_string())?;
    Ok(PipelineConfig {
        samples: samples_path,
        generations: generations_path,
        out_dir: dir.join("out"),
        seed: 42,
        ..PipelineConfig::default()
    })
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/synthetic200_summary.json")
}

fn same_json(a: &serde_json::Value, b: &serde_json::Value, tol: f64) -> bool {
    use serde_json::Value;
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            (x.as_f64().unwrap() - y.as_f64().unwrap()).abs() <= tol
        }
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| same_json(p, q, tol))
        }
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len()
                && x.iter()
                    .all(|(k, v)| y.get(k).is_some_and(|w| same_json(v, w, tol)))
        }
        _ => a == b,
    }
}

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = write_fixture(dir.path(), 200, 42)?;
    let started = Instant::now();
    let summary = run_pipeline(&config).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    ensure(!summary.methods.is_empty(), || "no methods scored".into())?;
    let mut margins = Vec::new();
    for m in &summary.methods {
        let margin = m.corrected.auroc - m.vanilla.auroc;
        ensure(margin > 0.0, || {
            format!(
                "{}: fused {} <= vanilla {}",
                m.method, m.corrected.auroc, m.vanilla.auroc
            )
        })?;
        margins.push(format!("{} {:+.3}", m.method, margin));
    }

    let written =
        std::fs::read_to_string(config.out_dir.join("summary.json")).map_err(|e| e.to_string())?;
    let golden = golden_path();
    if std::env::var_os("CUE_BLESS").is_some() {
        std::fs::write(&golden, &written).map_err(|e| e.to_string())?;
    }
    let expected =
        std::fs::read_to_string(&golden).map_err(|e| format!("{}: {e}", golden.display()))?;
    let parse = |s: &str| serde_json::from_str::<serde_json::Value>(s).map_err(|e| e.to_string());
    ensure(
        same_json(&parse(&written)?, &parse(&expected)?, 1e-9),
        || "summary differs from the golden file".into(),
    )?;
    Ok(format!(
        "test AUROC gain: {}; {elapsed:.2?}",
        margins.join(", ")
    ))
}

fn collect_files(
    root: &Path,
    dir: &Path,
    out: &mut BTreeMap<PathBuf, Vec<u8>>,
) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.insert(
                path.strip_prefix(root).unwrap().to_path_buf(),
                std::fs::read(&path)?,
            );
        }
    }
    Ok(())
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = write_fixture(dir.path(), 200, 42)?;
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        config.out_dir = dir.path().join(name);
        run_pipeline(&config).map_err(|e| e.to_string())?;
        let mut files = BTreeMap::new();
        collect_files(&config.out_dir, &config.out_dir, &mut files).map_err(|e| e.to_string())?;
        runs.push(files);
    }
    ensure(runs[0].keys().eq(runs[1].keys()), || {
        "artifact sets differ".into()
    })?;
    for (path, bytes) in &runs[0] {
        ensure(&runs[1][path] == bytes, || {
            format!("{} differs between runs", path.display())
        })?;
    }
    Ok(format!("{} artifacts byte-identical", runs[0].len()))
}

fn main() -> ExitCode {
    let checks: [Criterion; 8] = [
        ("estimators match brute force", estimator_suite),
        ("ROUGE-L/LCS exhaustive and judge truth table", rouge_suite),
        ("AUROC matches pairwise oracle", auroc_suite),
        ("ECE fixtures and invariants", ece_suite),
        ("BCE gradient matches finite differences", gradient_suite),
        ("grid search and stable range", fusion_suite),
        ("end-to-end synthetic benchmark", end_to_end),
        ("whole-pipeline determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason}");
            }
        }
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
