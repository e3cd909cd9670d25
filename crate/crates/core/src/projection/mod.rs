//! Minimal adjustment of targets so that they satisfy a constraint.
//!
//! Regression targets are projected in the Euclidean sense. Binary targets go
//! through the box relaxation, then greedy rounding and repair; the outcome
//! is approximate and the residual violation is always reported.

pub mod qp;

use log::{debug, warn};
use nalgebra::DVector;
use serde::Serialize;

pub use qp::{solve, solve_constrained_ls, Backend, QpProblem, QpSolution, SolverOptions};

use crate::constraints::{ConstraintMode, ConstraintOperator, ConstraintSpec, Violation, DEFAULT_FEASIBILITY_TOL};
use crate::error::{check_finite, check_same_len, GediError, Result};
use crate::kernel::{build_kernel, KernelMatrix};
use crate::stats;

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionResult {
    pub z: Vec<f64>,
    /// Mean squared adjustment, `||z - y||^2 / n`.
    pub objective: f64,
    pub violation: Violation,
    pub satisfied: bool,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub backend: Backend,
    /// Number of flipped labels (classification only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hamming: Option<usize>,
    /// Violation accepted after rounding (classification only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounding_tolerance: Option<f64>,
}

/// A constraint bound to a fixed protected attribute, reusable across many
/// projections (the moving-targets master step calls it once per iteration).
#[derive(Debug, Clone)]
pub struct Projector {
    kernel: KernelMatrix,
    operator: ConstraintOperator,
    spec: ConstraintSpec,
    pub options: SolverOptions,
    pub feasibility_tol: f64,
}

impl Projector {
    /// `cs` must carry absolute bounds; see [`ConstraintSpec::resolve`].
    pub fn new(x: &[f64], cs: &ConstraintSpec) -> Result<Self> {
        check_finite(x)?;
        let kernel = build_kernel(x, &cs.kernel)?;
        let operator = ConstraintOperator::new(&kernel, cs)?;
        Ok(Self {
            kernel,
            operator,
            spec: cs.clone(),
            options: SolverOptions::default(),
            feasibility_tol: DEFAULT_FEASIBILITY_TOL,
        })
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.options.backend = backend;
        self
    }

    pub fn operator(&self) -> &ConstraintOperator {
        &self.operator
    }

    pub fn len(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The quadratic program `min 1/2 ||z - anchor||^2` over the feasible set.
    pub fn problem(&self, anchor: &[f64]) -> QpProblem {
        let n = anchor.len();
        let mut p = QpProblem::new(DVector::from_column_slice(anchor));
        let map = &self.operator.map;
        match &self.spec.mode {
            ConstraintMode::Coarse(q) => {
                p = p.with_l1_bound(map.clone(), DVector::zeros(map.nrows()), *q);
            }
            ConstraintMode::Fine(qs) => {
                for (j, q) in qs.iter().enumerate() {
                    let row = map.row(j).transpose();
                    p = p.with_inequality(row.clone(), *q).with_inequality(-row, *q);
                }
            }
            ConstraintMode::Exclusive(q) => {
                // Residual of z on the first basis column is orthogonal to the
                // others, and the remaining slope is bounded.
                let f = &self.kernel.centered;
                let inv_n = 1.0 / n as f64;
                let f1 = f.column(0).into_owned();
                let var1 = f1.norm_squared() * inv_n;
                for j in 1..f.ncols() {
                    let fj = f.column(j);
                    let cov_j1 = fj.dot(&f1) * inv_n;
                    let row = (&f1 * cov_j1 - fj * var1) * inv_n;
                    p = p.with_equality(row, 0.0);
                }
                let row = &f1 * inv_n;
                p = p.with_inequality(row.clone(), q * var1).with_inequality(-row, q * var1);
            }
        }
        p
    }

    /// Euclidean projection of real-valued targets.
    pub fn project(&self, y: &[f64]) -> Result<ProjectionResult> {
        check_same_len(self.len(), y.len())?;
        check_finite(y)?;
        let problem = self.problem(y);
        let sol = match solve(&problem, &self.options) {
            Err(GediError::Infeasible) => {
                // The constant vector at mean(y) has zero covariance with every
                // basis column, so infeasibility means a solver fault.
                let m = stats::mean(y);
                let anchor = vec![m; y.len()];
                debug_assert!(self.operator.report(&anchor, 0.0, self.feasibility_tol).satisfied);
                warn!("solver reported infeasible although the mean vector is feasible");
                return Err(GediError::Infeasible);
            }
            other => other?,
        };
        let z: Vec<f64> = sol.z.iter().copied().collect();
        let report = self.operator.report(&z, 0.0, self.feasibility_tol);
        debug!(
            "projection: {} iterations via {:?}, violation {:e}",
            sol.iterations,
            sol.backend,
            report.violation.max()
        );
        Ok(ProjectionResult {
            objective: mse(&z, y),
            satisfied: report.satisfied,
            violation: report.violation,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
            backend: sol.backend,
            hamming: None,
            rounding_tolerance: None,
            z,
        })
    }

    /// Projection onto the feasible set intersected with the box `[0, 1]^n`,
    /// without rounding.
    pub fn project_relaxed(&self, y: &[f64]) -> Result<ProjectionResult> {
        check_same_len(self.len(), y.len())?;
        check_finite(y)?;
        let problem = self.problem(y).with_box(0.0, 1.0);
        let sol = solve(&problem, &self.options)?;
        let z: Vec<f64> = sol.z.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let report = self.operator.report(&z, 0.0, self.feasibility_tol);
        Ok(ProjectionResult {
            objective: mse(&z, y),
            satisfied: report.satisfied,
            violation: report.violation,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
            backend: sol.backend,
            hamming: None,
            rounding_tolerance: None,
            z,
        })
    }

    /// Largest change of the constraint measure caused by flipping one label.
    pub fn flip_granularity(&self) -> f64 {
        self.operator
            .map
            .column_iter()
            .map(|c| match self.spec.mode {
                ConstraintMode::Coarse(_) => c.lp_norm(1),
                _ => c.amax(),
            })
            .fold(0.0, f64::max)
    }

    /// Projection of binary labels: box relaxation, rounding, repair.
    pub fn project_binary(&self, y: &[f64]) -> Result<ProjectionResult> {
        check_same_len(self.len(), y.len())?;
        if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(GediError::InvalidSpec("classification targets must be 0 or 1".into()));
        }
        let n = y.len();
        let rounding_tol = self.flip_granularity().max(self.feasibility_tol);

        if self.operator.report(y, 0.0, self.feasibility_tol).satisfied {
            return Ok(self.binary_result(y.to_vec(), y, 0, 0.0, Backend::Auto, rounding_tol));
        }

        let problem = self.problem(y).with_box(0.0, 1.0);
        let relaxed = solve(&problem, &self.options)?;
        let r = relaxed.z;

        let mut z: Vec<f64> = r.iter().map(|v| if *v >= 0.5 { 1.0 } else { 0.0 }).collect();
        let map = &self.operator.map;
        let mut alpha = map * DVector::from_column_slice(&z);
        let measure = |a: &DVector<f64>| self.operator.violations_of(a).iter().copied().fold(0.0, f64::max);

        // Repair: take the single flip that lowers the violation most, until
        // nothing helps. Ties prefer moving back toward y.
        let mut flips = 0;
        let mut current = measure(&alpha);
        while current > self.feasibility_tol && flips < n {
            let mut best: Option<(usize, f64, bool)> = None;
            for i in 0..n {
                let delta = if z[i] == 1.0 { -1.0 } else { 1.0 };
                let trial = &alpha + map.column(i) * delta;
                let v = measure(&trial);
                let toward_y = z[i] != y[i];
                let better = match best {
                    None => v < current,
                    Some((_, bv, bt)) => v < bv - 1e-15 || ((v - bv).abs() <= 1e-15 && toward_y && !bt),
                };
                if better {
                    best = Some((i, v, toward_y));
                }
            }
            let Some((i, v, _)) = best else {
                break;
            };
            let delta = if z[i] == 1.0 { -1.0 } else { 1.0 };
            alpha += map.column(i) * delta;
            z[i] += delta;
            current = v;
            flips += 1;
        }

        // Cleanup: undo flips, least confident first, while feasibility holds.
        let target = current.max(self.feasibility_tol);
        let mut changed: Vec<usize> = (0..n).filter(|&i| z[i] != y[i]).collect();
        changed.sort_by(|&a, &b| (r[a] - 0.5).abs().total_cmp(&(r[b] - 0.5).abs()).then(a.cmp(&b)));
        for i in changed {
            let delta = y[i] - z[i];
            let trial = &alpha + map.column(i) * delta;
            let v = measure(&trial);
            if v <= target {
                alpha = trial;
                z[i] = y[i];
                current = v;
            }
        }

        if current > 10.0 * rounding_tol {
            return Err(GediError::RepairFailed {
                violation: current,
                limit: 10.0 * rounding_tol,
            });
        }
        if current > rounding_tol {
            warn!("rounded labels violate the constraint by {current:e}, above the one-flip granularity {rounding_tol:e}");
        }
        Ok(self.binary_result(z, y, relaxed.iterations, relaxed.kkt_residual, relaxed.backend, rounding_tol))
    }

    fn binary_result(
        &self,
        z: Vec<f64>,
        y: &[f64],
        iterations: usize,
        kkt_residual: f64,
        backend: Backend,
        rounding_tol: f64,
    ) -> ProjectionResult {
        let report = self.operator.report(&z, 0.0, rounding_tol);
        let hamming = z.iter().zip(y).filter(|(a, b)| a != b).count();
        ProjectionResult {
            objective: mse(&z, y),
            satisfied: report.satisfied,
            violation: report.violation,
            iterations,
            kkt_residual,
            backend,
            hamming: Some(hamming),
            rounding_tolerance: Some(rounding_tol),
            z,
        }
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

pub fn project_regression(x: &[f64], y: &[f64], cs: &ConstraintSpec) -> Result<ProjectionResult> {
    check_same_len(x.len(), y.len())?;
    Projector::new(x, cs)?.project(y)
}

pub fn project_classification(x: &[f64], y: &[f64], cs: &ConstraintSpec) -> Result<ProjectionResult> {
    check_same_len(x.len(), y.len())?;
    Projector::new(x, cs)?.project_binary(y)
}
