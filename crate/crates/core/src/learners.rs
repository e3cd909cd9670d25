//! Small deterministic learners: ridge, logistic regression and
//! gradient-boosted decision stumps.
//!
//! None of them draws random numbers, so a fit is a pure function of the
//! spec and the data.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_same_len, GediError, Result};
use crate::indicators::Task;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerKind {
    Ridge { l2: f64 },
    Logistic { lr: f64, epochs: usize, l2: f64 },
    GbStumps { n_trees: usize, learning_rate: f64, max_bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    /// Each input column is expanded to its powers `1..=feature_degree`.
    pub feature_degree: usize,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind) -> Self {
        Self { kind, feature_degree: 1 }
    }

    pub fn ridge(l2: f64) -> Self {
        Self::new(LearnerKind::Ridge { l2 })
    }

    pub fn logistic(lr: f64, epochs: usize) -> Self {
        Self::new(LearnerKind::Logistic { lr, epochs, l2: 0.0 })
    }

    pub fn gb(n_trees: usize, learning_rate: f64) -> Self {
        Self::new(LearnerKind::GbStumps {
            n_trees,
            learning_rate,
            max_bins: 32,
        })
    }

    pub fn with_feature_degree(mut self, degree: usize) -> Self {
        self.feature_degree = degree;
        self
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self.kind, LearnerKind::GbStumps { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GediError::InvalidSpec(msg.into()));
        if self.feature_degree == 0 {
            return bad("feature degree must be at least 1");
        }
        match self.kind {
            LearnerKind::Ridge { l2 } if !(l2 >= 0.0 && l2.is_finite()) => bad("ridge penalty must be non-negative"),
            LearnerKind::Logistic { lr, epochs, l2 } if !lr.is_finite() || lr <= 0.0 || epochs == 0 || l2.is_nan() || l2 < 0.0 => {
                bad("logistic needs lr > 0, epochs >= 1 and l2 >= 0")
            }
            LearnerKind::GbStumps {
                n_trees,
                learning_rate,
                max_bins,
            } if n_trees == 0 || !(learning_rate > 0.0 && learning_rate.is_finite()) || max_bins < 2 => {
                bad("gb needs n_trees >= 1, lr > 0 and max_bins >= 2")
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LearnerKind::Ridge { l2 } => write!(f, "ridge:{l2}"),
            LearnerKind::Logistic { lr, epochs, .. } => write!(f, "logistic:{lr},{epochs}"),
            LearnerKind::GbStumps { n_trees, learning_rate, .. } => write!(f, "gb:{n_trees},{learning_rate}"),
        }
    }
}

impl FromStr for LearnerSpec {
    type Err = GediError;

    /// `ridge:<l2>`, `logistic:<lr>,<epochs>`, `gb:<n_trees>,<lr>`. Bare names
    /// take defaults.
    fn from_str(s: &str) -> Result<Self> {
        let invalid = || GediError::InvalidSpec(format!("bad learner '{s}'"));
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let parts: Vec<&str> = if args.is_empty() { vec![] } else { args.split(',').map(str::trim).collect() };
        let num = |i: usize, default: f64| -> Result<f64> {
            parts.get(i).map_or(Ok(default), |p| p.parse::<f64>().map_err(|_| invalid()))
        };
        let count = |i: usize, default: usize| -> Result<usize> {
            parts.get(i).map_or(Ok(default), |p| p.parse::<usize>().map_err(|_| invalid()))
        };
        let spec = match name.trim() {
            "ridge" if parts.len() <= 1 => LearnerSpec::ridge(num(0, 1e-6)?),
            "logistic" if parts.len() <= 2 => LearnerSpec::logistic(num(0, 0.5)?, count(1, 2000)?),
            "gb" if parts.len() <= 2 => LearnerSpec::gb(count(0, 100)?, num(1, 0.1)?),
            _ => return Err(invalid()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Powers `1..=degree` of every column, grouped by column.
pub fn polynomial_features(x: &DMatrix<f64>, degree: usize) -> DMatrix<f64> {
    if degree <= 1 {
        return x.clone();
    }
    let (n, m) = x.shape();
    DMatrix::from_fn(n, m * degree, |i, j| x[(i, j / degree)].powi((j % degree + 1) as i32))
}

#[derive(Debug, Clone, Serialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    /// Output when `x[feature] <= threshold`.
    pub left: f64,
    pub right: f64,
}

impl Stump {
    pub fn eval(&self, row: &[f64]) -> f64 {
        if row[self.feature] <= self.threshold {
            self.left
        } else {
            self.right
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Params {
    /// `y = X w + b` on expanded features.
    Linear { weights: Vec<f64>, intercept: f64 },
    /// `p = sigmoid(((X - mean) / scale) w + b)`.
    Logistic {
        weights: Vec<f64>,
        intercept: f64,
        mean: Vec<f64>,
        scale: Vec<f64>,
    },
    Boosted {
        base: f64,
        learning_rate: f64,
        stumps: Vec<Stump>,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct LearnerModel {
    pub params: Params,
    pub n_features: usize,
    pub feature_degree: usize,
    pub task: Task,
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn check_matrix(x: &DMatrix<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GediError::NonFiniteInput);
    }
    if x.nrows() == 0 {
        return Err(GediError::EmptyInput(0));
    }
    Ok(())
}

pub fn fit(spec: &LearnerSpec, x: &DMatrix<f64>, y: &[f64], task: Task) -> Result<LearnerModel> {
    spec.validate()?;
    check_matrix(x)?;
    check_same_len(x.nrows(), y.len())?;
    crate::error::check_finite(y)?;
    let features = polynomial_features(x, spec.feature_degree);
    let params = match spec.kind {
        LearnerKind::Ridge { l2 } => fit_ridge(&features, y, l2),
        LearnerKind::Logistic { lr, epochs, l2 } => {
            if task != Task::Classification {
                return Err(GediError::InvalidSpec("logistic regression needs a classification task".into()));
            }
            fit_logistic(&features, y, lr, epochs, l2)?
        }
        LearnerKind::GbStumps {
            n_trees,
            learning_rate,
            max_bins,
        } => fit_boosted(&features, y, task, n_trees, learning_rate, max_bins),
    };
    Ok(LearnerModel {
        params,
        n_features: x.ncols(),
        feature_degree: spec.feature_degree,
        task,
    })
}

/// `min 1/2 ||y - X w - b||^2 + 1/2 l2 ||w||^2`, intercept unpenalized.
fn fit_ridge(x: &DMatrix<f64>, y: &[f64], l2: f64) -> Params {
    let (n, m) = x.shape();
    let means: Vec<f64> = (0..m).map(|j| x.column(j).mean()).collect();
    let xc = DMatrix::from_fn(n, m, |i, j| x[(i, j)] - means[j]);
    let ym = stats::mean(y);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ym));
    let mut gram = xc.tr_mul(&xc);
    for j in 0..m {
        gram[(j, j)] += l2;
    }
    let rhs = xc.tr_mul(&yc);
    let w = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        // singular normal equations: minimum-norm least squares instead
        None => xc
            .svd(true, true)
            .solve(&yc, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(m)),
    };
    let intercept = ym - w.iter().zip(&means).map(|(a, b)| a * b).sum::<f64>();
    Params::Linear {
        weights: w.iter().copied().collect(),
        intercept,
    }
}

pub(crate) fn standardization(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let m = x.ncols();
    let mean: Vec<f64> = (0..m).map(|j| x.column(j).mean()).collect();
    let scale = (0..m)
        .map(|j| {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let sd = stats::variance(&col).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

pub(crate) fn standardize(x: &DMatrix<f64>, mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - mean[j]) / scale[j])
}

/// Full-batch gradient descent on mean cross-entropy; labels may be soft.
fn fit_logistic(x: &DMatrix<f64>, y: &[f64], lr: f64, epochs: usize, l2: f64) -> Result<Params> {
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(GediError::InvalidSpec("logistic labels must lie in [0, 1]".into()));
    }
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if lo == hi {
        return Err(GediError::DegenerateLabels);
    }
    let (mean, scale) = standardization(x);
    let xs = standardize(x, &mean, &scale);
    let n = xs.nrows() as f64;
    let target = DVector::from_column_slice(y);
    let mut w = DVector::zeros(xs.ncols());
    let mut b = 0.0;
    for _ in 0..epochs {
        let p = (&xs * &w).map(|t| sigmoid(t + b));
        let resid = (p - &target) / n;
        let gw = xs.tr_mul(&resid) + &w * l2;
        let gb = resid.sum();
        if (gw.norm_squared() + gb * gb).sqrt() <= 1e-6 {
            break;
        }
        w -= gw * lr;
        b -= gb * lr;
    }
    Ok(Params::Logistic {
        weights: w.iter().copied().collect(),
        intercept: b,
        mean,
        scale,
    })
}

/// Candidate split points: midpoints between distinct values, thinned to
/// quantiles when there are more than `max_bins` of them.
fn candidate_thresholds(column: &[f64], max_bins: usize) -> Vec<f64> {
    let mut values = column.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    if values.len() < 2 {
        return Vec::new();
    }
    let mids: Vec<f64> = values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    if mids.len() <= max_bins {
        return mids;
    }
    let mut out: Vec<f64> = (1..max_bins)
        .map(|j| {
            let target = stats::quantile_sorted(&values, j as f64 / max_bins as f64);
            // snap to the nearest midpoint so splits fall between samples
            let idx = mids.partition_point(|m| *m < target).min(mids.len() - 1);
            mids[idx]
        })
        .collect();
    out.dedup();
    out
}

/// Best single split under the Newton criterion `G^2 / H` for gradients
/// `g` and weights `h`, returning `(stump, gain)`.
fn best_stump(x: &DMatrix<f64>, g: &[f64], h: &[f64], thresholds: &[Vec<f64>]) -> Option<(Stump, f64)> {
    let eps = 1e-12;
    let (gt, ht): (f64, f64) = (g.iter().sum(), h.iter().sum());
    let base = gt * gt / (ht + eps);
    let mut best: Option<(Stump, f64)> = None;
    for (j, cuts) in thresholds.iter().enumerate() {
        if cuts.is_empty() {
            continue;
        }
        // per-bin sums of g and h, bins delimited by the sorted cuts
        let mut gs = vec![0.0; cuts.len() + 1];
        let mut hs = vec![0.0; cuts.len() + 1];
        for i in 0..x.nrows() {
            let bin = cuts.partition_point(|c| *c < x[(i, j)]);
            gs[bin] += g[i];
            hs[bin] += h[i];
        }
        let (mut gl, mut hl) = (0.0, 0.0);
        for (c, cut) in cuts.iter().enumerate() {
            gl += gs[c];
            hl += hs[c];
            let (gr, hr) = (gt - gl, ht - hl);
            if hl <= eps || hr <= eps {
                continue;
            }
            let gain = gl * gl / hl + gr * gr / hr - base;
            if best.as_ref().is_none_or(|(_, b)| gain > *b + 1e-12) {
                best = Some((
                    Stump {
                        feature: j,
                        threshold: *cut,
                        left: gl / hl,
                        right: gr / hr,
                    },
                    gain,
                ));
            }
        }
    }
    best
}

fn fit_boosted(x: &DMatrix<f64>, y: &[f64], task: Task, n_trees: usize, learning_rate: f64, max_bins: usize) -> Params {
    let n = y.len();
    let base = match task {
        Task::Regression => stats::mean(y),
        Task::Classification => {
            let p = stats::mean(y).clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        }
    };
    let thresholds: Vec<Vec<f64>> = (0..x.ncols())
        .map(|j| candidate_thresholds(&x.column(j).iter().copied().collect::<Vec<_>>(), max_bins))
        .collect();
    let mut score = vec![base; n];
    let mut stumps = Vec::with_capacity(n_trees);
    let mut g = vec![0.0; n];
    let mut h = vec![1.0; n];
    for _ in 0..n_trees {
        for i in 0..n {
            match task {
                Task::Regression => g[i] = y[i] - score[i],
                Task::Classification => {
                    let p = sigmoid(score[i]);
                    g[i] = y[i] - p;
                    h[i] = (p * (1.0 - p)).max(1e-12);
                }
            }
        }
        let Some((stump, _)) = best_stump(x, &g, &h, &thresholds) else {
            break;
        };
        for (i, s) in score.iter_mut().enumerate() {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            *s += learning_rate * stump.eval(&row);
        }
        stumps.push(stump);
    }
    Params::Boosted {
        base,
        learning_rate,
        stumps,
    }
}

impl LearnerModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(GediError::SchemaMismatch {
                expected: self.n_features,
                found: x.ncols(),
            });
        }
        check_matrix(x)?;
        let raw = self.decision(x);
        Ok(match (&self.params, self.task) {
            (Params::Logistic { .. }, _) | (Params::Boosted { .. }, Task::Classification) => {
                raw.into_iter().map(sigmoid).collect()
            }
            (Params::Linear { .. }, Task::Classification) => raw.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            _ => raw,
        })
    }

    /// Model output before any link function.
    pub fn decision(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let features = polynomial_features(x, self.feature_degree);
        match &self.params {
            Params::Linear { weights, intercept } => {
                (&features * DVector::from_column_slice(weights)).iter().map(|v| v + intercept).collect()
            }
            Params::Logistic {
                weights,
                intercept,
                mean,
                scale,
            } => (standardize(&features, mean, scale) * DVector::from_column_slice(weights))
                .iter()
                .map(|v| v + intercept)
                .collect(),
            Params::Boosted {
                base,
                learning_rate,
                stumps,
            } => (0..features.nrows())
                .map(|i| {
                    let row: Vec<f64> = features.row(i).iter().copied().collect();
                    base + learning_rate * stumps.iter().map(|s| s.eval(&row)).sum::<f64>()
                })
                .collect(),
        }
    }

    /// Hard labels `1{p >= 0.5}` for classification models.
    pub fn predict_labels(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self.predict(x)?.into_iter().map(|p| if p >= 0.5 { 1.0 } else { 0.0 }).collect())
    }
}
