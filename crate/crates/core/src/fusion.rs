//! Min-max normalization of vanilla scores, convex fusion with corrector
//! probabilities, and the dev-set grid search over the fusion weight.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{aligned, auroc, Labels, MetricError};
use crate::types::{DatasetSplit, Method, ScoreSet};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("cannot normalize an empty score set")]
    Empty,
    #[error("non-finite score for id: {0}")]
    NonFinite(String),
    #[error("score ids differ; only in vanilla: {only_vanilla:?}, only in corrector: {only_corrector:?}")]
    IdMismatch {
        only_vanilla: Vec<String>,
        only_corrector: Vec<String>,
    },
    #[error("fusion weight must lie in [0,1] (got {0})")]
    BadWeight(f64),
    #[error("grid step must lie in (0, 0.5] (got {0})")]
    BadStep(f64),
    #[error("{0} score missing for evaluation id: {1}")]
    MissingScore(Method, String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: f64,
    pub max: f64,
}

/// `(U - min) / (max - min)`; a constant set maps to 0.5 everywhere.
pub fn min_max_normalize(set: &ScoreSet) -> Result<(ScoreSet, NormalizationStats), FusionError> {
    if set.is_empty() {
        return Err(FusionError::Empty);
    }
    if let Some((id, _)) = set.scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(FusionError::NonFinite(id.clone()));
    }
    let min = set.scores.values().copied().fold(f64::INFINITY, f64::min);
    let max = set
        .scores
        .values()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let scores = set
        .scores
        .iter()
        .map(|(id, &s)| {
            let v = if range > 0.0 {
                ((s - min) / range).clamp(0.0, 1.0)
            } else {
                0.5
            };
            (id.clone(), v)
        })
        .collect();
    Ok((
        ScoreSet {
            method: set.method,
            scores,
            normalized: true,
        },
        NormalizationStats { min, max },
    ))
}

fn check_ids(vanilla: &ScoreSet, corrector: &ScoreSet) -> Result<(), FusionError> {
    let a: BTreeSet<&String> = vanilla.scores.keys().collect();
    let b: BTreeSet<&String> = corrector.scores.keys().collect();
    if a == b {
        return Ok(());
    }
    Err(FusionError::IdMismatch {
        only_vanilla: a.difference(&b).map(|s| (*s).clone()).collect(),
        only_corrector: b.difference(&a).map(|s| (*s).clone()).collect(),
    })
}

#[inline]
fn combine(w: f64, normalized: f64, corrector: f64) -> f64 {
    w * normalized + (1.0 - w) * corrector
}

/// `w * U_norm + (1 - w) * C`, elementwise over identical id sets.
pub fn fuse(normalized: &ScoreSet, corrector: &ScoreSet, w: f64) -> Result<ScoreSet, FusionError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(FusionError::BadWeight(w));
    }
    check_ids(normalized, corrector)?;
    let scores = normalized
        .scores
        .iter()
        .map(|(id, &u)| (id.clone(), combine(w, u, corrector.scores[id])))
        .collect();
    Ok(ScoreSet {
        method: Method::Fused,
        scores,
        normalized: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightChoice {
    /// Grid search on the development split.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Auroc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub w: WeightChoice,
    pub grid_step: f64,
    pub objective: Objective,
    /// Absolute objective drop tolerated inside the stable range.
    pub tolerance: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            w: WeightChoice::Auto,
            grid_step: 0.001,
            objective: Objective::Auroc,
            tolerance: 0.01,
        }
    }
}

/// `{0, step, 2*step, ..., 1}`. When `1/step` is not an integer the last
/// point is 1 itself.
pub fn weight_grid(step: f64) -> Result<Vec<f64>, FusionError> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(FusionError::BadStep(step));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() < 1e-9 {
        let n = n as usize;
        return Ok((0..=n).map(|k| k as f64 / n as f64).collect());
    }
    let mut grid: Vec<f64> = (0..)
        .map(|k| k as f64 * step)
        .take_while(|w| *w < 1.0)
        .collect();
    grid.push(1.0);
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub w_star: f64,
    pub objective: f64,
    /// `(w, AUROC)` at every grid point, ascending in `w`.
    pub curve: Vec<(f64, f64)>,
}

/// AUROC of the fused dev scores at every grid weight; `w*` is the first
/// (smallest) maximizer.
pub fn grid_search_w(
    normalized: &ScoreSet,
    corrector: &ScoreSet,
    dev_labels: &Labels,
    config: &FusionConfig,
) -> Result<GridSearch, FusionError> {
    let grid = weight_grid(config.grid_step)?;
    let ids: Vec<&String> = dev_labels.keys().collect();
    let (u, labels) = aligned(normalized, dev_labels, ids.iter().copied())?;
    let (c, _) = aligned(corrector, dev_labels, ids.iter().copied())?;
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(MetricError::SingleClass.into());
    }
    let curve = grid
        .par_iter()
        .map(|&w| {
            let fused: Vec<f64> = u.iter().zip(&c).map(|(&u, &c)| combine(w, u, c)).collect();
            auroc(&fused, &labels).map(|a| (w, a))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = curve[0];
    for &point in &curve[1..] {
        if point.1 > best.1 {
            best = point;
        }
    }
    Ok(GridSearch {
        w_star: best.0,
        objective: best.1,
        curve,
    })
}

/// Maximal contiguous run of grid points around `w_star` whose objective is
/// at least `objective(w_star) - tolerance`. `w_star` snaps to the nearest
/// grid point.
pub fn stable_range(curve: &[(f64, f64)], w_star: f64, tolerance: f64) -> (f64, f64) {
    if curve.is_empty() {
        return (w_star, w_star);
    }
    let centre = curve
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 .0 - w_star).abs().total_cmp(&(b.1 .0 - w_star).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let floor = curve[centre].1 - tolerance;
    let mut lo = centre;
    while lo > 0 && curve[lo - 1].1 >= floor {
        lo -= 1;
    }
    let mut hi = centre;
    while hi + 1 < curve.len() && curve[hi + 1].1 >= floor {
        hi += 1;
    }
    (curve[lo].0, curve[hi].0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub method: Method,
    pub w_star: f64,
    pub objective: f64,
    pub curve: Vec<(f64, f64)>,
    pub stable_range: (f64, f64),
    pub stable_range_width: f64,
    pub normalization: NormalizationStats,
}

/// Normalize `vanilla` over the evaluation ids of `split`, pick the weight
/// (grid search on dev or fixed), and fuse every evaluation sample.
pub fn fuse_with_split(
    vanilla: &ScoreSet,
    corrector: &ScoreSet,
    labels: &Labels,
    split: &DatasetSplit,
    config: &FusionConfig,
) -> Result<(ScoreSet, FusionReport), FusionError> {
    for id in split.evaluation_ids() {
        if vanilla.get(id).is_none() {
            return Err(FusionError::MissingScore(vanilla.method, id.clone()));
        }
        if corrector.get(id).is_none() {
            return Err(FusionError::MissingScore(Method::Corrector, id.clone()));
        }
    }
    let (normalized, stats) = min_max_normalize(&vanilla.restrict(split.evaluation_ids()))?;
    let corrector = corrector.restrict(split.evaluation_ids());

    let dev_labels: Labels = split
        .dev_ids
        .iter()
        .map(|id| {
            labels
                .get(id)
                .map(|&l| (id.clone(), l))
                .ok_or_else(|| MetricError::MissingLabel(id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let search = grid_search_w(&normalized, &corrector, &dev_labels, config)?;
    let (w, objective) = match config.w {
        WeightChoice::Auto => (search.w_star, search.objective),
        WeightChoice::Fixed(w) => {
            if !(0.0..=1.0).contains(&w) {
                return Err(FusionError::BadWeight(w));
            }
            let dev_fused = fuse(
                &normalized.restrict(&split.dev_ids),
                &corrector.restrict(&split.dev_ids),
                w,
            )?;
            let (s, l) = aligned(&dev_fused, &dev_labels, dev_labels.keys())?;
            (w, auroc(&s, &l)?)
        }
    };
    let range = stable_range(&search.curve, w, config.tolerance);
    let fused = fuse(&normalized, &corrector, w)?;
    Ok((
        fused,
        FusionReport {
            method: vanilla.method,
            w_star: w,
            objective,
            curve: search.curve,
            stable_range: range,
            stable_range_width: range.1 - range.0,
            normalization: stats,
        },
    ))
}
