//! GeDI, DIDI and related dependency indicators.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{check_finite, check_same_len, GediError, Result};
use crate::kernel::{build_kernel, rank_check, KernelMatrix, KernelSpec, DEFAULT_RANK_RTOL};
use crate::stats;

#[derive(Debug, Clone, Serialize)]
pub struct GediResult {
    /// Indicator value `|d*| = ||alpha~*||_1`.
    pub value: f64,
    pub alpha_tilde: Vec<f64>,
    pub d_star_abs: f64,
    /// Mean squared residual of the unconstrained least-squares fit.
    pub residual_mse: f64,
    pub per_basis: Vec<f64>,
}

impl GediResult {
    fn from_alpha(alpha: Vec<f64>, residual_mse: f64) -> Self {
        let per_basis: Vec<f64> = alpha.iter().map(|a| a.abs()).collect();
        let value = per_basis.iter().sum();
        Self {
            value,
            alpha_tilde: alpha,
            d_star_abs: value,
            residual_mse,
            per_basis,
        }
    }

    /// The normalized coefficients `alpha* = alpha~ / ||alpha~||_1`, undefined
    /// when the indicator is zero.
    pub fn alpha_star(&self) -> Option<Vec<f64>> {
        if self.value > 0.0 {
            Some(self.alpha_tilde.iter().map(|a| a / self.value).collect())
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DidiResult {
    pub value: f64,
    /// `(group value, deviation)` pairs in ascending group order.
    pub per_group: Vec<(f64, f64)>,
    /// Number of non-empty groups (bins, for the binned variant).
    pub groups: usize,
}

impl DidiResult {
    pub fn per_group_map(&self) -> BTreeMap<String, f64> {
        self.per_group.iter().map(|(g, d)| (format!("{g}"), *d)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl std::str::FromStr for Task {
    type Err = GediError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reg" | "regression" => Ok(Task::Regression),
            "clf" | "classification" => Ok(Task::Classification),
            other => Err(GediError::InvalidSpec(format!("unknown task `{other}`"))),
        }
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    check_same_len(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(GediError::EmptyInput(x.len()));
    }
    check_finite(x)?;
    check_finite(y)
}

/// GeDI over an already built kernel. The kernel must be full rank.
pub fn gedi_with_kernel(km: &KernelMatrix, y: &[f64]) -> Result<GediResult> {
    check_same_len(km.nrows(), y.len())?;
    check_finite(y)?;
    rank_check(km, DEFAULT_RANK_RTOL)?;
    let alpha = km.factorize().coefficients(y);
    let yc = stats::centered(y);
    let fitted = &km.centered * &alpha;
    let residual_mse = fitted
        .iter()
        .zip(&yc)
        .map(|(f, t)| (f - t).powi(2))
        .sum::<f64>()
        / y.len() as f64;
    Ok(GediResult::from_alpha(alpha.iter().copied().collect(), residual_mse))
}

pub fn gedi(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<GediResult> {
    check_pair(x, y)?;
    let km = build_kernel(x, spec)?;
    gedi_with_kernel(&km, y)
}

/// `|cov(F a*, y) / var(F a*)|` for the normalized optimal coefficients; the
/// closed form of the indicator, zero when `alpha~* = 0`.
pub fn gedi_closed_form(km: &KernelMatrix, result: &GediResult, y: &[f64]) -> f64 {
    let Some(alpha_star) = result.alpha_star() else {
        return 0.0;
    };
    let a = nalgebra::DVector::from_vec(alpha_star);
    let projected: Vec<f64> = (&km.raw * a).iter().copied().collect();
    (stats::covariance(&projected, y) / stats::variance(&projected)).abs()
}

/// Linear-kernel GeDI, `|cov(x, y) / var(x)|`.
pub fn gedi_v1(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let var = stats::variance(x);
    if var <= 0.0 {
        return Err(GediError::ZeroVariance);
    }
    Ok((stats::covariance(x, y) / var).abs())
}

/// Indices of each distinct value of `x`, in ascending value order.
/// Number of distinct values of `x`.
pub fn group_count(x: &[f64]) -> usize {
    group_indices(x).len()
}

pub(crate) fn group_indices(x: &[f64]) -> Vec<(f64, Vec<usize>)> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|a, b| x[*a].total_cmp(&x[*b]).then(a.cmp(b)));
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for i in order {
        // -0.0 and 0.0 are the same group
        match groups.last_mut() {
            Some((v, idx)) if *v == x[i] => idx.push(i),
            _ => groups.push((x[i], vec![i])),
        }
    }
    groups
}

pub fn didi_regression(x: &[f64], y: &[f64]) -> Result<DidiResult> {
    check_pair(x, y)?;
    let groups = group_indices(x);
    if groups.len() < 2 {
        return Err(GediError::SingleGroup);
    }
    let overall = stats::mean(y);
    let per_group: Vec<(f64, f64)> = groups
        .iter()
        .map(|(v, idx)| {
            let gm = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
            (*v, (gm - overall).abs())
        })
        .collect();
    Ok(DidiResult {
        value: per_group.iter().map(|(_, d)| d).sum(),
        groups: per_group.len(),
        per_group,
    })
}

pub fn didi_classification(x: &[f64], y: &[f64]) -> Result<DidiResult> {
    check_pair(x, y)?;
    let groups = group_indices(x);
    if groups.len() < 2 {
        return Err(GediError::SingleGroup);
    }
    let classes = group_indices(y);
    if classes.len() < 2 {
        return Err(GediError::SingleClass);
    }
    let n = y.len() as f64;
    let per_group: Vec<(f64, f64)> = groups
        .iter()
        .map(|(v, idx)| {
            let dev: f64 = classes
                .iter()
                .map(|(u, members)| {
                    let overall = members.len() as f64 / n;
                    let within = idx.iter().filter(|&&i| y[i] == *u).count() as f64 / idx.len() as f64;
                    (within - overall).abs()
                })
                .sum();
            (*v, dev)
        })
        .collect();
    Ok(DidiResult {
        value: per_group.iter().map(|(_, d)| d).sum(),
        groups: per_group.len(),
        per_group,
    })
}

/// Assigns each `x` to a quantile bin.
///
/// Interior edges sit at the linear-interpolation quantiles `j / n_bins`;
/// bins are right-closed, so `x` lands in the bin counting the edges strictly
/// below it. Attributes with at most `n_bins` distinct values keep their
/// native groups. Returned labels are bin indices; empty bins simply do not
/// appear.
pub fn quantile_bins(x: &[f64], n_bins: usize) -> Result<Vec<f64>> {
    if n_bins < 2 {
        return Err(GediError::InvalidSpec(format!("n_bins must be >= 2, got {n_bins}")));
    }
    check_finite(x)?;
    let distinct = group_indices(x);
    if distinct.len() <= n_bins {
        let mut labels = vec![0.0; x.len()];
        for (b, (_, idx)) in distinct.iter().enumerate() {
            for &i in idx {
                labels[i] = b as f64;
            }
        }
        return Ok(labels);
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..n_bins)
        .map(|j| stats::quantile_sorted(&sorted, j as f64 / n_bins as f64))
        .collect();
    Ok(x.iter()
        .map(|v| edges.iter().filter(|e| v > e).count() as f64)
        .collect())
}

/// DIDI after quantile discretization of the protected attribute.
pub fn didi_binned(x: &[f64], y: &[f64], n_bins: usize, task: Task) -> Result<DidiResult> {
    check_pair(x, y)?;
    let labels = quantile_bins(x, n_bins)?;
    let groups = group_indices(&labels).len();
    if groups < 2 {
        return Err(GediError::DegenerateBinning(groups));
    }
    match task {
        Task::Regression => didi_regression(&labels, y),
        Task::Classification => didi_classification(&labels, y),
    }
}

/// Pearson correlation recovered as the slope of a one-dimensional least
/// squares fit between the standardized vectors.
pub fn pearson_via_least_squares(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let (va, vb) = (stats::variance(a), stats::variance(b));
    if va <= 0.0 || vb <= 0.0 {
        return Err(GediError::ZeroVariance);
    }
    let (ma, mb) = (stats::mean(a), stats::mean(b));
    let (sa, sb) = (va.sqrt(), vb.sqrt());
    let za: Vec<f64> = a.iter().map(|v| (v - ma) / sa).collect();
    let zb: Vec<f64> = b.iter().map(|v| (v - mb) / sb).collect();
    let design = nalgebra::DMatrix::from_column_slice(za.len(), 1, &za);
    let km = crate::kernel::LeastSquares::new(&design);
    Ok(km.coefficients(&zb)[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn gedi_on_identity_data() {
        let x = [0.0, 0.0, 1.0, 1.0];
        let r = gedi(&x, &x, &KernelSpec::polynomial(1)).unwrap();
        assert!(close(r.value, 1.0, 1e-12));
        assert!(r.residual_mse < 1e-24);
    }

    #[test]
    fn gedi_of_constant_target_is_zero() {
        let x = [0.3, -1.2, 2.5, 0.9, 1.7];
        let r = gedi(&x, &[4.0; 5], &KernelSpec::polynomial(3)).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.alpha_star().is_none());
    }

    #[test]
    fn gedi_of_affine_target() {
        let x = [0.3, -1.2, 2.5, 0.9, 1.7, -0.4];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 7.0).collect();
        let r = gedi(&x, &y, &KernelSpec::polynomial(1)).unwrap();
        assert!(close(r.value, 3.0, 1e-12));
    }

    #[test]
    fn gedi_errors() {
        assert!(matches!(
            gedi(&[1.0, 2.0], &[1.0], &KernelSpec::polynomial(1)),
            Err(GediError::LengthMismatch { .. })
        ));
        assert!(matches!(
            gedi(&[0.0, 1.0, 0.0, 1.0], &[1.0, 2.0, 3.0, 4.0], &KernelSpec::polynomial(2)),
            Err(GediError::RankDeficientKernel { .. })
        ));
    }

    #[test]
    fn linear_closed_form() {
        assert!(close(gedi_v1(&[0.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 3.0, 3.0]).unwrap(), 2.0, 1e-15));
        assert!(close(gedi_v1(&[-1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap(), 0.0, 1e-15));
        assert!(matches!(gedi_v1(&[1.0, 1.0], &[0.0, 1.0]), Err(GediError::ZeroVariance)));
    }

    #[test]
    fn didi_regression_examples() {
        let r = didi_regression(&[0.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 3.0, 3.0]).unwrap();
        assert_eq!(r.value, 2.0);
        assert_eq!(r.per_group, vec![(0.0, 1.0), (1.0, 1.0)]);
        let c = didi_regression(&[0.0, 1.0, 2.0], &[5.0; 3]).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(matches!(didi_regression(&[1.0; 3], &[0.0, 1.0, 2.0]), Err(GediError::SingleGroup)));
    }

    #[test]
    fn didi_classification_examples() {
        let x = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(didi_classification(&x, &x).unwrap().value, 2.0);
        // identical conditional frequencies
        let y = [0.0, 1.0, 0.0, 1.0];
        assert_eq!(didi_classification(&x, &y).unwrap().value, 0.0);
        assert!(matches!(didi_classification(&x, &[1.0; 4]), Err(GediError::SingleClass)));
    }

    #[test]
    fn binned_median_split() {
        let x: Vec<f64> = (1..=100).map(f64::from).collect();
        let r = didi_binned(&x, &x, 2, Task::Regression).unwrap();
        assert!(close(r.value, 50.0, 1e-12));
        assert_eq!(r.groups, 2);
    }

    #[test]
    fn binned_binary_matches_native_groups() {
        // imbalanced, so the median coincides with a data value
        let x = [0.0, 0.0, 0.0, 1.0, 1.0];
        let y = [1.0, 2.0, 0.5, 4.0, 3.0];
        let native = didi_regression(&x, &y).unwrap().value;
        let binned = didi_binned(&x, &y, 2, Task::Regression).unwrap().value;
        assert_eq!(native, binned);
        let x = [0.0, 1.0, 1.0, 1.0, 1.0];
        let native = didi_regression(&x, &y).unwrap().value;
        assert_eq!(native, didi_binned(&x, &y, 2, Task::Regression).unwrap().value);
    }

    #[test]
    fn binned_constant_target_and_degenerate() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64).sqrt()).collect();
        for bins in [2, 3, 5, 10] {
            assert_eq!(didi_binned(&x, &[1.0; 20], bins, Task::Regression).unwrap().value, 0.0);
        }
        assert!(matches!(
            didi_binned(&[3.0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, Task::Regression),
            Err(GediError::DegenerateBinning(1))
        ));
        assert!(didi_binned(&x, &x, 1, Task::Regression).is_err());
    }

    #[test]
    fn ties_collapse_bins() {
        // 10 distinct values but heavy ties at zero collapse the lower bins
        let mut x = vec![0.0; 12];
        x.extend((1..=9).map(f64::from));
        let y: Vec<f64> = (0..x.len()).map(|i| i as f64).collect();
        let r = didi_binned(&x, &y, 5, Task::Regression).unwrap();
        assert!(r.groups < 5 && r.groups >= 2);
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!(close(pearson_via_least_squares(&a, &a).unwrap(), 1.0, 1e-15));
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(close(pearson_via_least_squares(&a, &neg).unwrap(), -1.0, 1e-15));
        assert!(close(pearson_via_least_squares(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8, 1e-14));
        assert!(matches!(pearson_via_least_squares(&a, &[2.0; 4]), Err(GediError::ZeroVariance)));
    }
}
