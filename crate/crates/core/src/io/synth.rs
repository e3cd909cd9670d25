use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{GediError, Result};
use crate::indicators::Task;

/// `x ~ U(-pi, pi)`, `y = 4 sin(x) + x^2 + eps` with standard normal noise.
/// The single feature is also the protected attribute.
pub fn synth_fig2(n: usize, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(GediError::InvalidSpec(format!("synthetic data needs n >= 10, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = rng.random_range(-PI..PI);
        let eps: f64 = rng.sample(StandardNormal);
        x.push(xi);
        y.push(4.0 * xi.sin() + xi * xi + eps);
    }
    Ok(Dataset {
        features: DMatrix::from_column_slice(n, 1, &x),
        feature_names: vec!["x".into()],
        protected: x,
        protected_name: "x".into(),
        target: y,
        target_name: "y".into(),
        task: Task::Regression,
        dropped_rows: 0,
    })
}
