//! Training under a fairness constraint.
//!
//! [`moving_targets`] alternates a projection of the targets (the master
//! step) with an ordinary refit of the learner. [`sbr_train`] adds the
//! violation, weighted by multipliers that grow by gradient ascent, to the
//! loss of a linear or logistic model and descends on both together.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::constraints::{ConstraintOperator, ConstraintSpec};
use crate::error::{check_same_len, GediError, Result};
use crate::indicators::{gedi, Task};
use crate::learners::{self, fit, polynomial_features, LearnerKind, LearnerModel, LearnerSpec, Params};
use crate::projection::Projector;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    /// `alpha_i = 1 / i`.
    Harmonic,
    Constant(f64),
}

impl AlphaSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        match self {
            AlphaSchedule::Harmonic => 1.0 / iteration as f64,
            AlphaSchedule::Constant(a) => *a,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MtConfig {
    pub iterations: usize,
    pub alpha: AlphaSchedule,
    pub learner: LearnerSpec,
    pub task: Task,
}

impl MtConfig {
    pub fn new(learner: LearnerSpec, task: Task) -> Self {
        Self {
            iterations: 10,
            alpha: AlphaSchedule::Harmonic,
            learner,
            task,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MtStep {
    pub iteration: usize,
    pub alpha: f64,
    /// `(||z - p||^2 + alpha ||z - y||^2) / n`; zero for the pretraining row.
    pub master_objective: f64,
    /// Constraint violation of the master output.
    pub master_violation: f64,
    /// R^2 or accuracy of the learner on the original targets.
    pub metric: f64,
    /// Indicator of the learner's predictions with the constraint's kernel.
    pub gedi: f64,
    pub violation: f64,
}

#[derive(Debug, Clone)]
pub struct MtResult {
    pub model: LearnerModel,
    pub trace: Vec<MtStep>,
    /// The constraint with absolute bounds, as enforced.
    pub constraint: ConstraintSpec,
}

pub fn score(task: Task, truth: &[f64], pred: &[f64]) -> f64 {
    match task {
        Task::Regression => stats::r2_score(truth, pred),
        Task::Classification => stats::accuracy(truth, pred),
    }
}

fn check_inputs(x: &DMatrix<f64>, x_prot: &[f64], y: &[f64]) -> Result<()> {
    check_same_len(x.nrows(), y.len())?;
    check_same_len(x.nrows(), x_prot.len())?;
    crate::error::check_finite(x_prot)?;
    crate::error::check_finite(y)
}

/// Relative bounds are resolved against `(x_prot, y)` before training.
pub fn moving_targets(
    x: &DMatrix<f64>,
    x_prot: &[f64],
    y: &[f64],
    cs: &ConstraintSpec,
    mt: &MtConfig,
) -> Result<MtResult> {
    check_inputs(x, x_prot, y)?;
    if mt.iterations == 0 {
        return Err(GediError::InvalidSpec("moving targets needs at least one iteration".into()));
    }
    let cs = cs.resolve(x_prot, y)?;
    let projector = Projector::new(x_prot, &cs)?;
    let n = y.len() as f64;

    let mut model = fit(&mt.learner, x, y, mt.task)?;
    let mut trace = Vec::with_capacity(mt.iterations + 1);
    let record = |model: &LearnerModel, iteration: usize, alpha: f64, master: (f64, f64)| -> Result<MtStep> {
        let pred = model.predict(x)?;
        let report = projector.operator().report(&pred, 0.0, projector.feasibility_tol);
        Ok(MtStep {
            iteration,
            alpha,
            master_objective: master.0,
            master_violation: master.1,
            metric: score(mt.task, y, &pred),
            gedi: gedi(x_prot, &pred, &cs.kernel)?.value,
            violation: report.violation.max(),
        })
    };
    trace.push(record(&model, 0, 0.0, (0.0, 0.0))?);

    for i in 1..=mt.iterations {
        let alpha = mt.alpha.at(i);
        let p = model.predict(x)?;
        // argmin ||z - p||^2 + alpha ||z - y||^2 is the projection of the blend
        let anchor: Vec<f64> = p.iter().zip(y).map(|(pi, yi)| (pi + alpha * yi) / (1.0 + alpha)).collect();
        let master = match mt.task {
            Task::Regression => projector.project(&anchor)?,
            Task::Classification => projector.project_relaxed(&anchor)?,
        };
        let z = &master.z;
        let objective = z
            .iter()
            .zip(&p)
            .zip(y)
            .map(|((zi, pi), yi)| (zi - pi).powi(2) + alpha * (zi - yi).powi(2))
            .sum::<f64>()
            / n;
        model = fit(&mt.learner, x, z, mt.task)?;
        let step = record(&model, i, alpha, (objective, master.violation.max()))?;
        debug!(
            "mt iteration {i}: master objective {objective:.6}, metric {:.4}, gedi {:.6}",
            step.metric, step.gedi
        );
        trace.push(step);
    }
    Ok(MtResult {
        model,
        trace,
        constraint: cs,
    })
}

#[derive(Debug, Clone)]
pub struct SbrConfig {
    /// Multiplier step size.
    pub rho: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Learning rate at epoch t is `lr / (1 + decay * t)`.
    pub lr_decay: f64,
    /// Violation below which the run counts as converged.
    pub tol: f64,
    pub learner: LearnerSpec,
    pub task: Task,
}

impl SbrConfig {
    pub fn new(learner: LearnerSpec, task: Task) -> Self {
        Self {
            rho: 1.0,
            lr: 0.1,
            epochs: 1000,
            // with a constant step the multiplier feeds the oscillation
            // around the kink and both grow geometrically
            lr_decay: 1.0,
            tol: 1e-3,
            learner,
            task,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SbrStep {
    pub epoch: usize,
    pub loss: f64,
    pub violations: Vec<f64>,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SbrResult {
    pub model: LearnerModel,
    pub trace: Vec<SbrStep>,
    pub converged: bool,
    pub constraint: ConstraintSpec,
}

/// Gradient of `sum_j max(0, violation_j)` with respect to the predictions.
/// Zero on the inactive side and at kinks.
pub fn penalty_gradient(yhat: &[f64], x_prot: &[f64], cs: &ConstraintSpec) -> Result<Vec<f64>> {
    check_same_len(x_prot.len(), yhat.len())?;
    let op = ConstraintOperator::from_data(x_prot, cs)?;
    let jac = op.violation_jacobian(yhat);
    Ok(jac.row_sum().iter().copied().collect())
}

/// `sum_j max(0, violation_j)`, the scalar matched by [`penalty_gradient`].
pub fn penalty_value(yhat: &[f64], x_prot: &[f64], cs: &ConstraintSpec) -> Result<f64> {
    check_same_len(x_prot.len(), yhat.len())?;
    let op = ConstraintOperator::from_data(x_prot, cs)?;
    Ok(op.violations(yhat).iter().sum())
}

/// Full-batch penalized descent with one multiplier ascent step per epoch.
/// Relative bounds are resolved against `(x_prot, y)` first.
pub fn sbr_train(
    x: &DMatrix<f64>,
    x_prot: &[f64],
    y: &[f64],
    cs: &ConstraintSpec,
    sc: &SbrConfig,
) -> Result<SbrResult> {
    check_inputs(x, x_prot, y)?;
    if !sc.learner.is_differentiable() {
        return Err(GediError::NonDifferentiableLearner(sc.learner.to_string()));
    }
    let bad = |v: f64| v.is_nan() || v <= 0.0;
    if bad(sc.rho) || bad(sc.lr) || sc.epochs == 0 || sc.lr_decay.is_nan() || sc.lr_decay < 0.0 {
        return Err(GediError::InvalidSpec("sbr needs rho > 0, lr > 0, epochs >= 1".into()));
    }
    sc.learner.validate()?;
    let cs = cs.resolve(x_prot, y)?;
    let op = ConstraintOperator::from_data(x_prot, &cs)?;

    let (logistic, l2) = match (&sc.learner.kind, sc.task) {
        (LearnerKind::Ridge { l2 }, _) => (false, *l2),
        (LearnerKind::Logistic { l2, .. }, Task::Classification) => (true, *l2),
        (LearnerKind::Logistic { .. }, Task::Regression) => {
            return Err(GediError::InvalidSpec("logistic regression needs a classification task".into()))
        }
        _ => unreachable!("checked differentiable above"),
    };
    if logistic {
        let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        if lo == hi {
            return Err(GediError::DegenerateLabels);
        }
    }

    // descend in standardized feature space, convert back at the end
    let features = polynomial_features(x, sc.learner.feature_degree);
    let (mean, scale) = learners::standardization(&features);
    let xs = learners::standardize(&features, &mean, &scale);
    let n = y.len() as f64;
    let target = DVector::from_column_slice(y);
    let mut w = DVector::zeros(xs.ncols());
    let mut b = if logistic { 0.0 } else { stats::mean(y) };
    let k = op.violations(y).len();
    let mut lambda = vec![0.0; k];
    let mut trace = Vec::with_capacity(sc.epochs);

    let outputs = |w: &DVector<f64>, b: f64| -> DVector<f64> {
        let t = &xs * w;
        if logistic {
            t.map(|v| learners::sigmoid(v + b))
        } else {
            t.add_scalar(b)
        }
    };

    let mut yhat = outputs(&w, b);
    for epoch in 0..sc.epochs {
        let pred: Vec<f64> = yhat.iter().copied().collect();
        // d(loss)/d(logit) and d(yhat)/d(logit)
        let (dloss, dlink) = if logistic {
            ((&yhat - &target) / n, yhat.map(|p| p * (1.0 - p)))
        } else {
            ((&yhat - &target) / n, DVector::from_element(y.len(), 1.0))
        };
        let jac = op.violation_jacobian(&pred);
        let dpen = jac.tr_mul(&DVector::from_column_slice(&lambda));
        let g = dloss + dpen.component_mul(&dlink);
        let penalty_scale = if logistic { 1.0 } else { 1.0 / n };
        let gw = xs.tr_mul(&g) + &w * (l2 * penalty_scale);
        let gb = g.sum();
        let step = sc.lr / (1.0 + sc.lr_decay * epoch as f64);
        w -= gw * step;
        b -= gb * step;

        yhat = outputs(&w, b);
        let pred: Vec<f64> = yhat.iter().copied().collect();
        let violations = op.violations(&pred);
        for (l, v) in lambda.iter_mut().zip(&violations) {
            *l += sc.rho * v;
        }
        trace.push(SbrStep {
            epoch: epoch + 1,
            loss: loss(&pred, y, logistic),
            violations,
            lambda: lambda.clone(),
        });
    }

    let last = trace.last().map_or(0.0, |s| s.violations.iter().copied().fold(0.0, f64::max));
    let converged = last <= sc.tol;
    if converged {
        info!("sbr converged, final violation {last:e}");
    } else {
        info!("sbr did not reach the violation tolerance: {last:e} > {:e}", sc.tol);
    }

    let params = if logistic {
        Params::Logistic {
            weights: w.iter().copied().collect(),
            intercept: b,
            mean,
            scale,
        }
    } else {
        let weights: Vec<f64> = w.iter().zip(&scale).map(|(wi, s)| wi / s).collect();
        let intercept = b - weights.iter().zip(&mean).map(|(wi, m)| wi * m).sum::<f64>();
        Params::Linear { weights, intercept }
    };
    Ok(SbrResult {
        model: LearnerModel {
            params,
            n_features: x.ncols(),
            feature_degree: sc.learner.feature_degree,
            task: sc.task,
        },
        trace,
        converged,
        constraint: cs,
    })
}

fn loss(pred: &[f64], y: &[f64], logistic: bool) -> f64 {
    let n = y.len() as f64;
    if logistic {
        pred.iter()
            .zip(y)
            .map(|(p, t)| {
                let p = p.clamp(1e-12, 1.0 - 1e-12);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n
    } else {
        pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n
    }
}
