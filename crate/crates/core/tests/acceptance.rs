//! Acceptance criteria, one PASS/FAIL line each. Reference values are
//! computed here from first principles rather than through the library.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gedi::constraints::{evaluate_constraint, exclusive_equivalence, ConstraintMode, ConstraintSpec};
use gedi::indicators::{didi_binned, didi_classification, didi_regression, gedi, gedi_v1, pearson_via_least_squares, Task};
use gedi::io::{kfold_split, synth_fig2};
use gedi::kernel::{BasisFunction, KernelSpec};
use gedi::learners::LearnerSpec;
use gedi::projection::project_regression;
use gedi::training::{moving_targets, penalty_gradient, penalty_value, sbr_train, MtConfig, SbrConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64
}

fn var(a: &[f64]) -> f64 {
    cov(a, a)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Centered raw powers `x^1..x^k`.
fn centered_powers(x: &[f64], k: usize) -> DMatrix<f64> {
    let mut f = DMatrix::from_fn(x.len(), k, |i, j| x[i].powi(j as i32 + 1));
    for mut col in f.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    f
}

/// Least-squares coefficient map of the centered design, by SVD.
fn coefficient_map(f: &DMatrix<f64>) -> DMatrix<f64> {
    f.clone().pseudo_inverse(1e-12).expect("pseudo inverse")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn binary_sample(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        if v.contains(&0.0) && v.contains(&1.0) {
            return v;
        }
    }
}

fn c1_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_r, mut worst_c) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(4..=200);
        let x = binary_sample(&mut rng, n);
        let y: Vec<f64> = (0..n).map(|_| 3.0 * normal(&mut rng)).collect();
        let v1 = gedi_v1(&x, &y).map_err(|e| e.to_string())?;
        let r = didi_regression(&x, &y).map_err(|e| e.to_string())?.value;
        // group-mean gap, written out directly
        let group_mean = |g: f64| {
            let s: Vec<f64> = x.iter().zip(&y).filter(|(a, _)| **a == g).map(|(_, b)| *b).collect();
            mean(&s)
        };
        let gap = (group_mean(1.0) - group_mean(0.0)).abs();
        worst_r = worst_r.max((r - v1).abs()).max((v1 - gap).abs());

        let yc = binary_sample(&mut rng, n);
        let v1c = gedi_v1(&x, &yc).map_err(|e| e.to_string())?;
        let c = didi_classification(&x, &yc).map_err(|e| e.to_string())?.value;
        worst_c = worst_c.max((c - 2.0 * v1c).abs());
    }
    check(
        worst_r <= 1e-9 && worst_c <= 1e-9,
        format!("max |didi_r - gedi_v1| = {worst_r:.1e}, max |didi_c - 2 gedi_v1| = {worst_c:.1e}"),
    )
}

fn c2_pearson() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(3..=300);
        let mix = rng.random_range(-1.0..1.0);
        let a: Vec<f64> = (0..n).map(|_| 10.0 * normal(&mut rng) + 4.0).collect();
        let b: Vec<f64> = a.iter().map(|v| mix * v + normal(&mut rng)).collect();
        let direct = cov(&a, &b) / (var(&a) * var(&b)).sqrt();
        let ls = pearson_via_least_squares(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((direct - ls).abs());
    }
    check(worst <= 1e-10, format!("max error {worst:.1e}"))
}

fn c3_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for _ in 0..40 {
        let n = rng.random_range(30..=200);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin() + 0.3 * v * v + 0.5 * normal(&mut rng)).collect();
        for k in 1..=5 {
            let r = gedi(&x, &y, &KernelSpec::polynomial(k)).map_err(|e| e.to_string())?;
            let Some(alpha) = r.alpha_star() else { continue };
            let f_alpha: Vec<f64> = x
                .iter()
                .map(|v| alpha.iter().enumerate().map(|(j, a)| a * v.powi(j as i32 + 1)).sum())
                .collect();
            let closed = (cov(&f_alpha, &y) / var(&f_alpha)).abs();
            worst = worst.max((closed - r.value).abs());
            cases += 1;
        }
    }
    check(worst <= 1e-9, format!("max error {worst:.1e} over {cases} cases"))
}

fn c4_scale_shift() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(20..=150);
        let k = rng.random_range(1..=4);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v - v + normal(&mut rng)).collect();
        let c = rng.random_range(-5.0..5.0);
        let b = rng.random_range(-10.0..10.0);
        let spec = KernelSpec::polynomial(k);
        let base = gedi(&x, &y, &spec).map_err(|e| e.to_string())?.value;
        let moved: Vec<f64> = y.iter().map(|v| c * v + b).collect();
        let scaled = gedi(&x, &moved, &spec).map_err(|e| e.to_string())?.value;
        worst = worst.max((scaled - c.abs() * base).abs());
    }
    check(worst <= 1e-9, format!("max |gedi(cy+b) - |c| gedi(y)| = {worst:.1e}"))
}

fn c5_preprocessing() -> Outcome {
    let d = synth_fig2(500, 5).map_err(|e| e.to_string())?;
    let (x, y) = (&d.protected, &d.target);
    let q = 0.2 * gedi_v1(x, y).map_err(|e| e.to_string())?;
    let mut worst_violation = 0.0f64;
    let mut worst_equiv = 0.0f64;
    for k in [2, 3, 5] {
        for mode in [ConstraintMode::Coarse(q), ConstraintMode::Exclusive(q)] {
            let exclusive = matches!(mode, ConstraintMode::Exclusive(_));
            let cs = ConstraintSpec::new(mode, KernelSpec::polynomial(k));
            let z = project_regression(x, y, &cs).map_err(|e| e.to_string())?.z;
            let v = evaluate_constraint(x, &z, &cs, 1.0).map_err(|e| e.to_string())?.violation.max();
            worst_violation = worst_violation.max(v);
            if exclusive {
                let gap = (gedi(x, &z, &KernelSpec::polynomial(k)).map_err(|e| e.to_string())?.value
                    - gedi_v1(x, &z).map_err(|e| e.to_string())?)
                .abs();
                worst_equiv = worst_equiv.max(gap);
                if !exclusive_equivalence(x, &z, k, 1e-6).map_err(|e| e.to_string())? {
                    return Err(format!("exclusive_equivalence false at k={k}"));
                }
            }
        }
    }
    check(
        worst_violation <= 1e-6 && worst_equiv <= 1e-6,
        format!("max violation {worst_violation:.1e}, max |gedi_k - gedi_v1| {worst_equiv:.1e}"),
    )
}

fn c6_quadratic_removal() -> Outcome {
    let d = synth_fig2(500, 6).map_err(|e| e.to_string())?;
    let (x, y) = (&d.protected, &d.target);
    let q = 0.2 * gedi_v1(x, y).map_err(|e| e.to_string())?;
    let square = KernelSpec::custom(vec![BasisFunction::new("x^2", |v| v * v)]);
    let noise_var = 1.0;
    let exclusive = |k| {
        let cs = ConstraintSpec::new(ConstraintMode::Exclusive(q), KernelSpec::polynomial(k));
        project_regression(x, y, &cs).map(|r| r.z).map_err(|e| e.to_string())
    };
    let z2 = exclusive(2)?;
    let z3 = exclusive(3)?;
    let before = gedi(x, y, &square).map_err(|e| e.to_string())?.value;
    let after = gedi(x, &z2, &square).map_err(|e| e.to_string())?.value;
    let ratio = after / before;
    let (v2, v3) = (var(&z2), var(&z3));
    check(
        ratio <= 0.05 && v2 > noise_var && v3 <= 2.0 * noise_var,
        format!("quadratic kept {:.2}%, var(z | k=2) = {v2:.3}, var(z | k=3) = {v3:.3}", 100.0 * ratio),
    )
}

fn c7_didi_trend() -> Outcome {
    let d = synth_fig2(500, 7).map_err(|e| e.to_string())?;
    let (x, y) = (&d.protected, &d.target);
    let q = 0.2 * gedi_v1(x, y).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, make) in [
        ("exclusive", Box::new(|_k: usize| ConstraintMode::Exclusive(q)) as Box<dyn Fn(usize) -> ConstraintMode>),
        // fine-grained as in the experiments: the linear term bounded, every
        // higher-order coefficient cancelled
        ("fine", Box::new(|k: usize| ConstraintMode::Fine(vec![0.0; k]).with_bound(q, k))),
    ] {
        let mut series = Vec::new();
        for k in 1..=5 {
            let cs = ConstraintSpec::new(make(k), KernelSpec::polynomial(k));
            let z = project_regression(x, y, &cs).map_err(|e| e.to_string())?.z;
            series.push(didi_binned(x, &z, 5, Task::Regression).map_err(|e| e.to_string())?.value);
        }
        ok &= series.windows(2).all(|w| w[1] <= 1.1 * w[0]);
        lines.push(format!("{name} {:?}", series.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()));
    }
    check(ok, format!("DIDI-5 for k=1..5: {}", lines.join("; ")))
}

fn c8_moving_targets() -> Outcome {
    let d = synth_fig2(500, 8).map_err(|e| e.to_string())?;
    let (train_idx, _) = kfold_split(d.len(), 5, 8).map_err(|e| e.to_string())?.remove(0);
    let train = d.subset(&train_idx);
    let kernel = KernelSpec::polynomial(5);
    let cs = ConstraintSpec::new(ConstraintMode::Coarse(0.2), kernel.clone()).relative();
    let cfg = MtConfig::new(LearnerSpec::ridge(1e-6).with_feature_degree(5), Task::Regression);
    let r = moving_targets(&train.features, &train.protected, &train.target, &cs, &cfg).map_err(|e| e.to_string())?;
    let q = 0.2 * gedi_v1(&train.protected, &train.target).map_err(|e| e.to_string())?;
    let pred = r.model.predict(&train.features).map_err(|e| e.to_string())?;
    let g = gedi(&train.protected, &pred, &kernel).map_err(|e| e.to_string())?.value;
    check(g <= 1.2 * q, format!("train gedi {g:.4} against q = {q:.4} ({:.2} q)", g / q))
}

fn c9_sbr() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let n = rng.random_range(10..=60);
        let k = rng.random_range(1..=3);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let yhat: Vec<f64> = x.iter().map(|v| 2.0 * v - v * v + normal(&mut rng)).collect();
        let base = gedi(&x, &yhat, &KernelSpec::polynomial(k)).map_err(|e| e.to_string())?;
        let mode = match done % 3 {
            0 => ConstraintMode::Coarse(0.3 * base.value),
            1 => ConstraintMode::Fine(base.per_basis.iter().map(|a| 0.5 * a).collect()),
            _ => ConstraintMode::Exclusive(0.5 * base.per_basis[0]),
        };
        // skip points near a kink of |.| or of max(0, .)
        let scale = base.value.max(1e-3);
        if base.per_basis.iter().any(|a| *a < 1e-3 * scale) {
            continue;
        }
        let cs = ConstraintSpec::new(mode, KernelSpec::polynomial(k));
        let g = penalty_gradient(&yhat, &x, &cs).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..n {
            let mut plus = yhat.clone();
            let mut minus = yhat.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (penalty_value(&plus, &x, &cs).map_err(|e| e.to_string())?
                - penalty_value(&minus, &x, &cs).map_err(|e| e.to_string())?)
                / (2.0 * h);
            num += (fd - g[i]).powi(2);
            den += g[i].powi(2);
        }
        worst = worst.max(num.sqrt() / den.sqrt());
        done += 1;
    }

    let n = 400;
    let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let w: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let y: Vec<f64> = (0..n).map(|i| 2.0 * x[i] + w[i] + 0.1 * normal(&mut rng)).collect();
    let features = DMatrix::from_fn(n, 2, |i, j| if j == 0 { x[i] } else { w[i] });
    let cs = ConstraintSpec::new(ConstraintMode::Coarse(0.0), KernelSpec::polynomial(1));
    let r = sbr_train(&features, &x, &y, &cs, &SbrConfig::new(LearnerSpec::ridge(1e-6), Task::Regression))
        .map_err(|e| e.to_string())?;
    let pred = r.model.predict(&features).map_err(|e| e.to_string())?;
    let c = cov(&x, &pred).abs();
    check(
        worst <= 1e-4 && c < 1e-3,
        format!("max relative gradient error {worst:.1e}; SBR at q=0 |cov(x, yhat)| = {c:.1e}"),
    )
}

fn c10_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_gap = f64::NEG_INFINITY;
    for inst in 0..50 {
        let n = rng.random_range(6..=20);
        let k = rng.random_range(1..=3);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.5 * v + v * v * v + 0.5 * normal(&mut rng)).collect();
        let f = centered_powers(&x, k);
        let m = coefficient_map(&f);
        let alpha = &m * DVector::from_column_slice(&y);
        let frac = rng.random_range(0.0..0.8);
        let bounds: Vec<f64> = match inst % 3 {
            0 => vec![frac * alpha.lp_norm(1)],
            1 => alpha.iter().map(|a| frac * a.abs()).collect(),
            _ => {
                let mut b = vec![0.0; k];
                b[0] = frac * alpha[0].abs();
                b
            }
        };
        let mode = match inst % 3 {
            0 => ConstraintMode::Coarse(bounds[0]),
            1 => ConstraintMode::Fine(bounds.clone()),
            _ => ConstraintMode::Exclusive(bounds[0]),
        };
        let cs = ConstraintSpec::new(mode, KernelSpec::polynomial(k));
        let ours = project_regression(&x, &y, &cs).map_err(|e| e.to_string())?;
        let yv = DVector::from_column_slice(&y);
        let ours_obj = (DVector::from_column_slice(&ours.z) - &yv).norm_squared() / n as f64;

        // feasible by construction: rewrite the basis component of a random
        // point so its coefficients satisfy the bounds
        let sd = var(&y).sqrt();
        let mut best = f64::INFINITY;
        for s in 0..100_000 {
            let sigma = sd * [0.0, 1e-3, 1e-2, 1e-1, 1.0][s % 5];
            let u = DVector::from_fn(n, |i, _| y[i] + sigma * normal(&mut rng));
            let a = &m * &u;
            let target = if inst % 3 == 0 {
                let t = (bounds[0] / a.lp_norm(1)).min(1.0);
                &a * t
            } else {
                DVector::from_fn(k, |j, _| a[j].clamp(-bounds[j], bounds[j]))
            };
            let z = &u - &f * (&a - target);
            best = best.min((z - &yv).norm_squared() / n as f64);
        }
        worst_gap = worst_gap.max(ours_obj - best);
        if ours_obj > best + 1e-12 {
            return Err(format!("instance {inst}: ours {ours_obj:.6e} > oracle {best:.6e}"));
        }
    }
    Ok(format!("ours never above the sampled optimum (max ours - oracle = {worst_gap:.2e})"))
}

fn run(bin: &str, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn c11_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_gedi");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).display().to_string();
    let data = p("synth.csv");
    let commands: Vec<Vec<String>> = vec![
        vec!["synth", "--rows", "200", "--seed", "11", "--out", &data],
        vec!["audit", "--data", &data, "--protected", "x", "--target", "y", "--kernel", "poly:3", "--out", &p("audit")],
        vec![
            "preprocess", "--data", &data, "--protected", "x", "--target", "y", "--kernel", "poly:3", "--constraint",
            "exclusive:0.2", "--relative", "--out", &p("pre"),
        ],
        vec![
            "train", "--data", &data, "--protected", "x", "--target", "y", "--kernel", "poly:2", "--constraint",
            "coarse:0.2", "--relative", "--method", "mt", "--feature-degree", "3", "--jobs", "3", "--seed", "11",
            "--out", &p("mt"),
        ],
        vec![
            "train", "--data", &data, "--protected", "x", "--target", "y", "--constraint", "coarse:0.2", "--relative",
            "--method", "sbr", "--epochs", "200", "--jobs", "2", "--seed", "11", "--out", &p("sbr"),
        ],
    ]
    .into_iter()
    .map(|c| c.into_iter().map(String::from).collect())
    .collect();
    let artifacts = ["synth.csv", "audit/audit.json", "pre/preprocess.json", "pre/adjusted.csv", "mt/train.json", "sbr/train.json"];
    let snapshot = || -> Result<Vec<Vec<u8>>, String> {
        let mut all = Vec::new();
        for c in &commands {
            let args: Vec<&str> = c.iter().map(String::as_str).collect();
            all.push(run(bin, &args)?);
        }
        for a in artifacts {
            all.push(std::fs::read(Path::new(&p(a))).map_err(|e| format!("{a}: {e}"))?);
        }
        Ok(all)
    };
    let first = snapshot()?;
    let second = snapshot()?;
    let differing: Vec<usize> = (0..first.len()).filter(|&i| first[i] != second[i]).collect();
    check(
        differing.is_empty(),
        format!("{} commands and {} artifacts compared, differing: {differing:?}", commands.len(), artifacts.len()),
    )
}

fn main() -> std::process::ExitCode {
    type Criterion = (usize, &'static str, Option<f64>, fn() -> Outcome);
    let criteria: [Criterion; 11] = [
        (1, "binary-x DIDI/GeDI equivalence", Some(5.0), c1_equivalence),
        (2, "Pearson via least squares", Some(1.0), c2_pearson),
        (3, "closed-form consistency", None, c3_closed_form),
        (4, "scale and shift laws", None, c4_scale_shift),
        (5, "preprocessing satisfaction", Some(30.0), c5_preprocessing),
        (6, "quadratic removal and Taylor residual", None, c6_quadratic_removal),
        (7, "DIDI-5 non-increasing in k", None, c7_didi_trend),
        (8, "moving targets train satisfaction", Some(60.0), c8_moving_targets),
        (9, "penalty gradient and SBR at q=0", None, c9_sbr),
        (10, "projection beats random-search oracle", None, c10_oracle),
        (11, "CLI determinism", None, c11_determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, limit, f) in criteria {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let over_time = limit.is_some_and(|l| secs > l);
        let (status, detail) = match &outcome {
            Ok(d) if !over_time => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; took {secs:.2} s, limit {:.0} s", limit.unwrap())),
            Err(d) => ("FAIL", d.clone()),
        };
        println!("{status} [{id:>2}] {name}: {detail} ({secs:.2} s)");
        if status == "FAIL" {
            failed.push(id);
        }
    }
    println!("acceptance: {} of 11 criteria passed", 11 - failed.len());
    if failed.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        std::process::ExitCode::FAILURE
    }
}
