//! Kernel (basis) matrices over the protected attribute.
//!
//! A kernel maps the protected attribute `x` to an `n x k` matrix whose
//! columns are basis functions evaluated at `x`. No constant column is ever
//! added: every consumer works with the column-centered matrix, which absorbs
//! the intercept.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_finite, GediError, Result};

/// Default relative cutoff for the numerical rank of the centered kernel.
pub const DEFAULT_RANK_RTOL: f64 = 1e-9;

/// A named scalar basis function for programmatic kernels.
#[derive(Clone)]
pub struct BasisFunction {
    pub name: String,
    func: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl BasisFunction {
    pub fn new(name: impl Into<String>, func: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            func: Arc::new(func),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.func)(x)
    }
}

impl fmt::Debug for BasisFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BasisFunction").field("name", &self.name).finish()
    }
}

#[derive(Debug, Clone)]
pub enum KernelFamily {
    /// `f_j(x) = x^j`, `j = 1..k`.
    Polynomial,
    /// Alternating `sin(j*pi*u)`, `cos(j*pi*u)` over `u` = x rescaled to [-1, 1].
    Fourier,
    CustomBasis(Vec<BasisFunction>),
}

#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub order: usize,
    /// Standardize `x` before evaluating the basis. This changes the units of
    /// the indicator, since its value is scale dependent.
    pub standardize: bool,
}

impl KernelSpec {
    pub fn polynomial(order: usize) -> Self {
        Self {
            family: KernelFamily::Polynomial,
            order,
            standardize: false,
        }
    }

    pub fn fourier(order: usize) -> Self {
        Self {
            family: KernelFamily::Fourier,
            order,
            standardize: false,
        }
    }

    pub fn custom(functions: Vec<BasisFunction>) -> Self {
        let order = functions.len();
        Self {
            family: KernelFamily::CustomBasis(functions),
            order,
            standardize: false,
        }
    }

    pub fn with_standardize(mut self, standardize: bool) -> Self {
        self.standardize = standardize;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(GediError::InvalidSpec("kernel order must be >= 1".into()));
        }
        if let KernelFamily::CustomBasis(fs) = &self.family {
            if fs.is_empty() || fs.len() != self.order {
                return Err(GediError::InvalidSpec(format!(
                    "custom basis has {} functions but order {}",
                    fs.len(),
                    self.order
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            KernelFamily::Polynomial => write!(f, "poly:{}", self.order)?,
            KernelFamily::Fourier => write!(f, "fourier:{}", self.order)?,
            KernelFamily::CustomBasis(fs) => {
                let names: Vec<&str> = fs.iter().map(|b| b.name.as_str()).collect();
                write!(f, "custom:[{}]", names.join(","))?
            }
        }
        if self.standardize {
            write!(f, "+std")?;
        }
        Ok(())
    }
}

impl FromStr for KernelSpec {
    type Err = GediError;

    /// Parses `poly:<k>` or `fourier:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || GediError::InvalidSpec(format!("bad kernel `{s}` (expected poly:<k> or fourier:<k>)"));
        let (family, order) = s.trim().split_once(':').ok_or_else(bad)?;
        let order: usize = order.trim().parse().map_err(|_| bad())?;
        let spec = match family.trim() {
            "poly" => KernelSpec::polynomial(order),
            "fourier" => KernelSpec::fourier(order),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub raw: DMatrix<f64>,
    pub centered: DMatrix<f64>,
    pub column_means: Vec<f64>,
    pub spec: KernelSpec,
}

impl KernelMatrix {
    pub fn nrows(&self) -> usize {
        self.raw.nrows()
    }

    pub fn order(&self) -> usize {
        self.raw.ncols()
    }

    /// Factorizes the centered kernel for least-squares solves.
    pub fn factorize(&self) -> LeastSquares {
        LeastSquares::new(&self.centered)
    }
}

pub fn build_kernel(x: &[f64], spec: &KernelSpec) -> Result<KernelMatrix> {
    spec.validate()?;
    if x.len() < 2 {
        return Err(GediError::EmptyInput(x.len()));
    }
    check_finite(x)?;

    let n = x.len();
    let k = spec.order;
    let xs: Vec<f64> = if spec.standardize {
        let m = crate::stats::mean(x);
        let sd = crate::stats::variance(x).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        x.iter().map(|v| (v - m) / sd).collect()
    } else {
        x.to_vec()
    };

    let raw = match &spec.family {
        KernelFamily::Polynomial => DMatrix::from_fn(n, k, |i, j| xs[i].powi(j as i32 + 1)),
        KernelFamily::Fourier => {
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            let u: Vec<f64> = xs
                .iter()
                .map(|v| if span > 0.0 { 2.0 * (v - lo) / span - 1.0 } else { 0.0 })
                .collect();
            DMatrix::from_fn(n, k, |i, j| {
                let freq = (j / 2 + 1) as f64 * std::f64::consts::PI;
                if j % 2 == 0 {
                    (freq * u[i]).sin()
                } else {
                    (freq * u[i]).cos()
                }
            })
        }
        KernelFamily::CustomBasis(fs) => DMatrix::from_fn(n, k, |i, j| fs[j].eval(xs[i])),
    };
    check_finite(raw.as_slice())?;

    let column_means: Vec<f64> = raw.column_iter().map(|c| c.mean()).collect();
    let mut centered = raw.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-column_means[j]);
    }

    Ok(KernelMatrix {
        raw,
        centered,
        column_means,
        spec: spec.clone(),
    })
}

/// Singular values of the centered kernel, descending.
pub fn singular_values(km: &KernelMatrix) -> Vec<f64> {
    let mut sv: Vec<f64> = km.centered.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical rank of the centered kernel; errors unless it equals the order.
pub fn rank_check(km: &KernelMatrix, rtol: f64) -> Result<usize> {
    let sv = singular_values(km);
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = if top > 0.0 {
        sv.iter().filter(|s| **s > rtol * top).count()
    } else {
        0
    };
    if rank < km.order() {
        Err(GediError::RankDeficientKernel {
            rank,
            order: km.order(),
        })
    } else {
        Ok(rank)
    }
}

/// Ratio of largest to smallest singular value of the centered kernel.
pub fn condition_number(km: &KernelMatrix) -> f64 {
    let sv = singular_values(km);
    match (sv.first(), sv.last()) {
        (Some(hi), Some(lo)) if *lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Householder QR of a column-equilibrated centered kernel.
///
/// `coefficients(y)` returns the minimizer of `||F~ a - y~||^2`. The map is
/// linear in `y` and annihilates constant vectors, so centering `y` is
/// optional.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    scales: Vec<f64>,
}

impl LeastSquares {
    pub fn new(centered: &DMatrix<f64>) -> Self {
        let scales: Vec<f64> = centered
            .column_iter()
            .map(|c| {
                let s = c.norm();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        let mut scaled = centered.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col /= scales[j];
        }
        let qr = scaled.qr();
        Self {
            q: qr.q(),
            r: qr.r(),
            scales,
        }
    }

    pub fn order(&self) -> usize {
        self.scales.len()
    }

    pub fn coefficients(&self, y: &[f64]) -> DVector<f64> {
        let yv = DVector::from_column_slice(y);
        let ym = yv.mean();
        let centered = yv.add_scalar(-ym);
        let qty = self.q.tr_mul(&centered);
        let mut beta = self
            .r
            .solve_upper_triangular(&qty)
            .unwrap_or_else(|| DVector::zeros(self.order()));
        for (b, s) in beta.iter_mut().zip(&self.scales) {
            *b /= s;
        }
        beta
    }

    /// The `k x n` matrix `M` with `coefficients(y) = M y`.
    pub fn coefficient_map(&self) -> DMatrix<f64> {
        let mut m = self
            .r
            .solve_upper_triangular(&self.q.transpose())
            .unwrap_or_else(|| DMatrix::zeros(self.order(), self.q.nrows()));
        for (j, mut row) in m.row_iter_mut().enumerate() {
            row /= self.scales[j];
        }
        m
    }
}
