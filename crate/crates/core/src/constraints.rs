//! Coarse, fine-grained and exclusive GeDI constraints.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_same_len, GediError, Result};
use crate::indicators::{gedi, gedi_v1};
use crate::kernel::{build_kernel, rank_check, KernelMatrix, KernelSpec, DEFAULT_RANK_RTOL};

/// Absolute tolerance on violations for a constraint to count as satisfied.
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintMode {
    /// `||alpha~||_1 <= q`.
    Coarse(f64),
    /// `|alpha~_j| <= q_j` for every kernel column.
    Fine(Vec<f64>),
    /// First column bounded by `q1`, every other column forced to zero.
    Exclusive(f64),
}

impl ConstraintMode {
    fn bounds(&self) -> Vec<f64> {
        match self {
            ConstraintMode::Coarse(q) | ConstraintMode::Exclusive(q) => vec![*q],
            ConstraintMode::Fine(qs) => qs.clone(),
        }
    }

    fn scaled(&self, factor: f64) -> Self {
        match self {
            ConstraintMode::Coarse(q) => ConstraintMode::Coarse(q * factor),
            ConstraintMode::Exclusive(q) => ConstraintMode::Exclusive(q * factor),
            ConstraintMode::Fine(qs) => ConstraintMode::Fine(qs.iter().map(|q| q * factor).collect()),
        }
    }

    /// Replaces the scalar bound; `Fine` gets it on the first coefficient and
    /// zero elsewhere.
    pub fn with_bound(&self, q: f64, order: usize) -> Self {
        match self {
            ConstraintMode::Coarse(_) => ConstraintMode::Coarse(q),
            ConstraintMode::Exclusive(_) => ConstraintMode::Exclusive(q),
            ConstraintMode::Fine(_) => {
                let mut qs = vec![0.0; order];
                qs[0] = q;
                ConstraintMode::Fine(qs)
            }
        }
    }
}

impl fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintMode::Coarse(q) => write!(f, "coarse:{q}"),
            ConstraintMode::Exclusive(q) => write!(f, "exclusive:{q}"),
            ConstraintMode::Fine(qs) => {
                let parts: Vec<String> = qs.iter().map(|q| q.to_string()).collect();
                write!(f, "fine:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for ConstraintMode {
    type Err = GediError;

    /// Parses `coarse:<q>`, `fine:<q1,...,qk>` or `exclusive:<q1>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| GediError::InvalidSpec(format!("bad constraint `{s}`: {why}"));
        let (kind, rest) = s.trim().split_once(':').ok_or_else(|| bad("missing `:`"))?;
        let values: Vec<f64> = rest
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bounds must be numbers"))?;
        if values.iter().any(|q| !q.is_finite() || *q < 0.0) {
            return Err(bad("bounds must be finite and non-negative"));
        }
        match (kind.trim(), values.as_slice()) {
            ("coarse", [q]) => Ok(ConstraintMode::Coarse(*q)),
            ("exclusive", [q]) => Ok(ConstraintMode::Exclusive(*q)),
            ("fine", qs) if !qs.is_empty() => Ok(ConstraintMode::Fine(qs.to_vec())),
            ("coarse" | "exclusive", _) => Err(bad("expected a single bound")),
            _ => Err(bad("unknown mode")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub mode: ConstraintMode,
    pub kernel: KernelSpec,
    /// Bounds are fractions of the reference data's linear indicator.
    pub threshold_is_relative: bool,
}

impl ConstraintSpec {
    pub fn new(mode: ConstraintMode, kernel: KernelSpec) -> Self {
        Self {
            mode,
            kernel,
            threshold_is_relative: false,
        }
    }

    pub fn relative(mut self) -> Self {
        self.threshold_is_relative = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        let bounds = self.mode.bounds();
        if bounds.iter().any(|q| !q.is_finite() || *q < 0.0) {
            return Err(GediError::InvalidSpec("constraint bounds must be non-negative".into()));
        }
        if let ConstraintMode::Fine(qs) = &self.mode {
            if qs.len() != self.kernel.order {
                return Err(GediError::InvalidSpec(format!(
                    "fine constraint has {} bounds but kernel order is {}",
                    qs.len(),
                    self.kernel.order
                )));
            }
        }
        Ok(())
    }

    /// Turns relative bounds into absolute ones, scaling by
    /// `gedi_v1(x, reference)`. Absolute specs are returned unchanged.
    pub fn resolve(&self, x: &[f64], reference: &[f64]) -> Result<ConstraintSpec> {
        self.validate()?;
        if !self.threshold_is_relative {
            return Ok(self.clone());
        }
        let base = gedi_v1(x, reference)?;
        Ok(ConstraintSpec {
            mode: self.mode.scaled(base),
            kernel: self.kernel.clone(),
            threshold_is_relative: false,
        })
    }

    /// Per-coefficient bounds for fine and exclusive modes, `None` for coarse.
    pub fn coefficient_bounds(&self) -> Option<Vec<f64>> {
        match &self.mode {
            ConstraintMode::Coarse(_) => None,
            ConstraintMode::Fine(qs) => Some(qs.clone()),
            ConstraintMode::Exclusive(q) => {
                let mut qs = vec![0.0; self.kernel.order];
                qs[0] = *q;
                Some(qs)
            }
        }
    }

    fn require_absolute(&self) -> Result<()> {
        if self.threshold_is_relative {
            Err(GediError::UnresolvedRelativeThreshold)
        } else {
            self.validate()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Violation {
    Scalar(f64),
    PerCoefficient(Vec<f64>),
}

impl Violation {
    pub fn total(&self) -> f64 {
        match self {
            Violation::Scalar(v) => *v,
            Violation::PerCoefficient(vs) => vs.iter().sum(),
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            Violation::Scalar(v) => *v,
            Violation::PerCoefficient(vs) => vs.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstraintReport {
    pub satisfied: bool,
    pub violation: Violation,
    pub penalty: f64,
    pub alpha_tilde: Vec<f64>,
}

/// Linear view of a resolved constraint: `alpha~ = M y` with the bounds.
#[derive(Debug, Clone)]
pub struct ConstraintOperator {
    pub map: DMatrix<f64>,
    pub mode: ConstraintMode,
    bounds: Option<Vec<f64>>,
}

impl ConstraintOperator {
    pub fn new(km: &KernelMatrix, cs: &ConstraintSpec) -> Result<Self> {
        cs.require_absolute()?;
        rank_check(km, DEFAULT_RANK_RTOL)?;
        Ok(Self {
            map: km.factorize().coefficient_map(),
            mode: cs.mode.clone(),
            bounds: cs.coefficient_bounds(),
        })
    }

    pub fn from_data(x: &[f64], cs: &ConstraintSpec) -> Result<Self> {
        let km = build_kernel(x, &cs.kernel)?;
        Self::new(&km, cs)
    }

    pub fn order(&self) -> usize {
        self.map.nrows()
    }

    pub fn coefficients(&self, y: &[f64]) -> DVector<f64> {
        &self.map * DVector::from_column_slice(y)
    }

    /// Violation terms: one for coarse mode, one per coefficient otherwise.
    pub fn violations_of(&self, alpha: &DVector<f64>) -> Vec<f64> {
        match (&self.mode, &self.bounds) {
            (ConstraintMode::Coarse(q), _) => vec![(alpha.lp_norm(1) - q).max(0.0)],
            (_, Some(qs)) => alpha.iter().zip(qs).map(|(a, q)| (a.abs() - q).max(0.0)).collect(),
            _ => unreachable!("non-coarse modes carry coefficient bounds"),
        }
    }

    pub fn violations(&self, y: &[f64]) -> Vec<f64> {
        self.violations_of(&self.coefficients(y))
    }

    /// Gradient of each violation term with respect to `y` (rows of the
    /// returned matrix). Subgradient zero at kinks and on the inactive side.
    pub fn violation_jacobian(&self, y: &[f64]) -> DMatrix<f64> {
        let alpha = self.coefficients(y);
        let sgn = |a: f64| if a > 0.0 { 1.0 } else if a < 0.0 { -1.0 } else { 0.0 };
        let n = self.map.ncols();
        match (&self.mode, &self.bounds) {
            (ConstraintMode::Coarse(q), _) => {
                let mut jac = DMatrix::zeros(1, n);
                if alpha.lp_norm(1) > *q {
                    for (j, a) in alpha.iter().enumerate() {
                        let s = sgn(*a);
                        if s != 0.0 {
                            let row = self.map.row(j) * s;
                            let mut out = jac.row_mut(0);
                            out += row;
                        }
                    }
                }
                jac
            }
            (_, Some(qs)) => {
                let k = self.order();
                let mut jac = DMatrix::zeros(k, n);
                for j in 0..k {
                    if alpha[j].abs() > qs[j] {
                        jac.row_mut(j).copy_from(&(self.map.row(j) * sgn(alpha[j])));
                    }
                }
                jac
            }
            _ => unreachable!("non-coarse modes carry coefficient bounds"),
        }
    }

    pub fn report(&self, y: &[f64], lambda: f64, tol: f64) -> ConstraintReport {
        let alpha = self.coefficients(y);
        let v = self.violations_of(&alpha);
        let violation = match self.mode {
            ConstraintMode::Coarse(_) => Violation::Scalar(v[0]),
            _ => Violation::PerCoefficient(v),
        };
        ConstraintReport {
            satisfied: violation.max() <= tol,
            penalty: lambda * violation.total(),
            violation,
            alpha_tilde: alpha.iter().copied().collect(),
        }
    }
}

pub fn evaluate_constraint_with_tol(
    x: &[f64],
    y: &[f64],
    cs: &ConstraintSpec,
    lambda: f64,
    tol: f64,
) -> Result<ConstraintReport> {
    cs.require_absolute()?;
    check_same_len(x.len(), y.len())?;
    if lambda.is_nan() || lambda < 0.0 {
        return Err(GediError::InvalidSpec("penalty weight must be non-negative".into()));
    }
    let km = build_kernel(x, &cs.kernel)?;
    rank_check(&km, DEFAULT_RANK_RTOL)?;
    // Evaluate through the factorized solve rather than the materialized map.
    let result = crate::indicators::gedi_with_kernel(&km, y)?;
    let alpha = DVector::from_vec(result.alpha_tilde);
    let violation = match &cs.mode {
        ConstraintMode::Coarse(q) => Violation::Scalar((alpha.lp_norm(1) - q).max(0.0)),
        _ => {
            let qs = cs.coefficient_bounds().expect("fine bounds");
            Violation::PerCoefficient(alpha.iter().zip(&qs).map(|(a, q)| (a.abs() - q).max(0.0)).collect())
        }
    };
    Ok(ConstraintReport {
        satisfied: violation.max() <= tol,
        penalty: lambda * violation.total(),
        violation,
        alpha_tilde: alpha.iter().copied().collect(),
    })
}

pub fn evaluate_constraint(x: &[f64], y: &[f64], cs: &ConstraintSpec, lambda: f64) -> Result<ConstraintReport> {
    evaluate_constraint_with_tol(x, y, cs, lambda, DEFAULT_FEASIBILITY_TOL)
}

/// Whether the order-`k` polynomial indicator collapses onto the linear one.
pub fn exclusive_equivalence(x: &[f64], y: &[f64], k: usize, tol: f64) -> Result<bool> {
    let full = gedi(x, y, &KernelSpec::polynomial(k))?.value;
    let linear = gedi(x, y, &KernelSpec::polynomial(1))?.value;
    Ok((full - linear).abs() <= tol)
}
