//! Population moments (divide by n) used throughout the crate.

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (ma, mb) = (mean(a), mean(b));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / a.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    covariance(v, v)
}

pub fn centered(v: &[f64]) -> Vec<f64> {
    let m = mean(v);
    v.iter().map(|x| x - m).collect()
}

/// Textbook sample Pearson correlation with population moments.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    covariance(a, b) / (variance(a).sqrt() * variance(b).sqrt())
}

/// Coefficient of determination of `pred` against `truth`.
pub fn r2_score(truth: &[f64], pred: &[f64]) -> f64 {
    let m = mean(truth);
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Fraction of positions where `pred >= 0.5` agrees with `truth >= 0.5`.
pub fn accuracy(truth: &[f64], pred: &[f64]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = truth
        .iter()
        .zip(pred)
        .filter(|(t, p)| (**t >= 0.5) == (**p >= 0.5))
        .count();
    hits as f64 / truth.len() as f64
}

/// Linear-interpolation empirical quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_moments() {
        let x = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(mean(&x), 0.5);
        assert_eq!(variance(&x), 0.25);
        assert_eq!(covariance(&x, &[1.0, 1.0, 3.0, 3.0]), 0.5);
    }

    #[test]
    fn quantiles_interpolate() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile_sorted(&v, 0.5), 50.5);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 100.0);
    }

    #[test]
    fn r2_of_perfect_fit() {
        assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
    }
}
