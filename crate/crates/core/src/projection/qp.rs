//! Euclidean projection onto polyhedra and L1 balls.
//!
//! Every problem here has the form
//!
//! ```text
//!     minimize    1/2 ||z - a||^2
//!     subject to  C z  = d
//!                 A z <= b
//!                 ||M_l z - c_l||_1 <= r_l   for each L1 bound l
//!                 lo <= z <= hi              (optional)
//! ```
//!
//! Two backends are provided. [`Backend::ActiveSet`] is a dual active-set
//! method (Goldfarb-Idnani) specialized to the identity Hessian; L1 bounds
//! are handled through lazily separated sign cuts `s' M z <= r + s' c`. It is
//! exact and is the default when there are no box bounds. [`Backend::Admm`]
//! splits `K z` (all rows plus the box) into a product of simple sets, runs
//! over-relaxed ADMM, and then polishes by fixing the identified box-active
//! coordinates and re-solving the reduced problem with the active-set method.

use std::collections::HashMap;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::error::{GediError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Active set without box bounds, ADMM with polishing otherwise.
    Auto,
    ActiveSet,
    Admm,
}

#[derive(Debug, Clone)]
pub struct L1Bound {
    pub map: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub anchor: DVector<f64>,
    pub equalities: Vec<(DVector<f64>, f64)>,
    pub inequalities: Vec<(DVector<f64>, f64)>,
    pub l1_bounds: Vec<L1Bound>,
    pub bounds: Option<(DVector<f64>, DVector<f64>)>,
}

impl QpProblem {
    pub fn new(anchor: DVector<f64>) -> Self {
        Self {
            anchor,
            equalities: Vec::new(),
            inequalities: Vec::new(),
            l1_bounds: Vec::new(),
            bounds: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    pub fn with_equality(mut self, row: DVector<f64>, rhs: f64) -> Self {
        self.equalities.push((row, rhs));
        self
    }

    pub fn with_inequality(mut self, row: DVector<f64>, rhs: f64) -> Self {
        self.inequalities.push((row, rhs));
        self
    }

    /// `||map z - offset||_1 <= radius`.
    pub fn with_l1_bound(mut self, map: DMatrix<f64>, offset: DVector<f64>, radius: f64) -> Self {
        self.l1_bounds.push(L1Bound { map, offset, radius });
        self
    }

    pub fn with_box(mut self, lower: f64, upper: f64) -> Self {
        let n = self.dim();
        self.bounds = Some((DVector::from_element(n, lower), DVector::from_element(n, upper)));
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        let bad_dim = self.equalities.iter().chain(&self.inequalities).any(|(r, _)| r.len() != n)
            || self.l1_bounds.iter().any(|l| l.map.ncols() != n || l.offset.len() != l.map.nrows())
            || self.bounds.as_ref().is_some_and(|(lo, hi)| lo.len() != n || hi.len() != n);
        if bad_dim {
            return Err(GediError::InvalidSpec("QP dimensions are inconsistent".into()));
        }
        let finite = self.anchor.iter().all(|v| v.is_finite())
            && self
                .equalities
                .iter()
                .chain(&self.inequalities)
                .all(|(r, b)| b.is_finite() && r.iter().all(|v| v.is_finite()))
            && self.l1_bounds.iter().all(|l| {
                l.radius.is_finite() && l.map.iter().all(|v| v.is_finite()) && l.offset.iter().all(|v| v.is_finite())
            });
        if !finite {
            return Err(GediError::NonFiniteInput);
        }
        if self.l1_bounds.iter().any(|l| l.radius < 0.0) {
            return Err(GediError::Infeasible);
        }
        if let Some((lo, hi)) = &self.bounds {
            if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
                return Err(GediError::Infeasible);
            }
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (z - &self.anchor).norm_squared()
    }

    /// Largest constraint violation of `z`, in the units of each row.
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for (row, rhs) in &self.equalities {
            worst = worst.max((row.dot(z) - rhs).abs());
        }
        for (row, rhs) in &self.inequalities {
            worst = worst.max(row.dot(z) - rhs);
        }
        for l in &self.l1_bounds {
            worst = worst.max((&l.map * z - &l.offset).lp_norm(1) - l.radius);
        }
        if let Some((lo, hi)) = &self.bounds {
            for i in 0..z.len() {
                worst = worst.max(lo[i] - z[i]).max(z[i] - hi[i]);
            }
        }
        worst
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub backend: Backend,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 20_000,
            backend: Backend::Auto,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Max of stationarity, primal and dual infeasibility.
    pub kkt_residual: f64,
    pub backend: Backend,
}

pub fn solve_constrained_ls(problem: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    solve(
        problem,
        &SolverOptions {
            tol,
            max_iter,
            backend: Backend::Auto,
        },
    )
}

pub fn solve(problem: &QpProblem, opts: &SolverOptions) -> Result<QpSolution> {
    problem.validate()?;
    let backend = match opts.backend {
        Backend::Auto if problem.bounds.is_some() => Backend::Admm,
        Backend::Auto => Backend::ActiveSet,
        other => other,
    };
    match backend {
        Backend::ActiveSet => {
            if problem.bounds.is_some() {
                return Err(GediError::InvalidSpec(
                    "the active-set backend does not take box bounds; use ADMM".into(),
                ));
            }
            let sol = ActiveSet::new(problem, opts.tol).run(opts.max_iter)?;
            Ok(QpSolution {
                objective: problem.objective(&sol.z),
                kkt_residual: sol.kkt_residual,
                iterations: sol.iterations,
                z: sol.z,
                backend,
            })
        }
        _ => admm_with_polish(problem, opts),
    }
}

// ---------------------------------------------------------------------------
// Dual active set
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Equality,
    Inequality,
}

/// Which constraint of the problem a working row was derived from.
#[derive(Debug, Clone, PartialEq)]
enum Origin {
    Equality(usize),
    Inequality(usize),
    Cut(usize, Vec<i8>),
}

#[derive(Debug, Clone)]
struct Row {
    normal: DVector<f64>,
    bound: f64,
    kind: Kind,
    origin: Origin,
    /// Norm of the original row, so that `u / norm` is the multiplier of the
    /// unnormalized constraint.
    norm: f64,
}

struct ActiveSet<'a> {
    problem: &'a QpProblem,
    rows: Vec<Row>,
    cuts: HashMap<(usize, Vec<i8>), usize>,
    tol: f64,
}

struct ActiveSetResult {
    z: DVector<f64>,
    iterations: usize,
    kkt_residual: f64,
    /// Multipliers of the final active rows, per unnormalized constraint.
    multipliers: Vec<(Origin, f64)>,
}

fn unit_row(row: &DVector<f64>, rhs: f64, kind: Kind, origin: Origin) -> Result<Option<Row>> {
    let norm = row.norm();
    if norm == 0.0 {
        let ok = match kind {
            Kind::Equality => rhs == 0.0,
            Kind::Inequality => rhs >= 0.0,
        };
        return if ok { Ok(None) } else { Err(GediError::Infeasible) };
    }
    Ok(Some(Row {
        normal: row / norm,
        bound: rhs / norm,
        kind,
        origin,
        norm,
    }))
}

/// Thin QR of the active normals, recomputed whenever the set changes.
struct Factor {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Factor {
    fn new(rows: &[Row], active: &[usize], n: usize) -> Option<Self> {
        if active.is_empty() {
            return None;
        }
        let normals = DMatrix::from_fn(n, active.len(), |i, j| rows[active[j]].normal[i]);
        let qr = normals.qr();
        Some(Self { q: qr.q(), r: qr.r() })
    }

    /// Returns `(d, r)`: the component of `v` orthogonal to the active
    /// normals and the coefficients of its projection onto them.
    fn split(f: &Option<Self>, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match f {
            None => (v.clone(), DVector::zeros(0)),
            Some(f) => {
                let qtv = f.q.tr_mul(v);
                let d = v - &f.q * &qtv;
                let r = f.r.solve_upper_triangular(&qtv).unwrap_or_else(|| DVector::zeros(qtv.len()));
                (d, r)
            }
        }
    }
}

impl<'a> ActiveSet<'a> {
    fn new(problem: &'a QpProblem, tol: f64) -> Self {
        Self {
            problem,
            rows: Vec::new(),
            cuts: HashMap::new(),
            tol,
        }
    }

    fn scale(&self) -> f64 {
        1.0 + self.problem.anchor.amax()
    }

    /// Most violated inequality not in the active set, generating an L1 cut
    /// when an L1 bound is the worst offender.
    fn most_violated(&mut self, z: &DVector<f64>, active: &[usize], limit: f64) -> Result<Option<usize>> {
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in self.rows.iter().enumerate() {
            if row.kind != Kind::Inequality || active.contains(&i) {
                continue;
            }
            let s = row.normal.dot(z) - row.bound;
            if s > limit && best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        for (l, bound) in self.problem.l1_bounds.iter().enumerate() {
            let w = &bound.map * z - &bound.offset;
            let excess = w.lp_norm(1) - bound.radius;
            if excess <= 0.0 {
                continue;
            }
            let signs: Vec<i8> = w
                .iter()
                .map(|v| if *v > 0.0 { 1 } else if *v < 0.0 { -1 } else { 0 })
                .collect();
            let s = DVector::from_iterator(signs.len(), signs.iter().map(|v| f64::from(*v)));
            let normal = bound.map.tr_mul(&s);
            let norm = normal.norm();
            if norm == 0.0 {
                // zero subgradient: z minimizes the L1 term, which still exceeds the radius
                if excess > limit {
                    return Err(GediError::Infeasible);
                }
                continue;
            }
            let normalized = excess / norm;
            if normalized <= limit || best.is_some_and(|(_, b)| normalized <= b) {
                continue;
            }
            let idx = match self.cuts.get(&(l, signs.clone())) {
                Some(&idx) => idx,
                None => {
                    let rhs = bound.radius + s.dot(&bound.offset);
                    self.rows.push(Row {
                        normal: normal / norm,
                        bound: rhs / norm,
                        kind: Kind::Inequality,
                        origin: Origin::Cut(l, signs.clone()),
                        norm,
                    });
                    self.cuts.insert((l, signs), self.rows.len() - 1);
                    self.rows.len() - 1
                }
            };
            if !active.contains(&idx) {
                best = Some((idx, normalized));
            }
        }
        Ok(best.map(|(i, _)| i))
    }

    fn run(mut self, max_iter: usize) -> Result<ActiveSetResult> {
        let n = self.problem.dim();
        for (k, (row, rhs)) in self.problem.equalities.iter().enumerate() {
            if let Some(r) = unit_row(row, *rhs, Kind::Equality, Origin::Equality(k))? {
                self.rows.push(r);
            }
        }
        for (k, (row, rhs)) in self.problem.inequalities.iter().enumerate() {
            if let Some(r) = unit_row(row, *rhs, Kind::Inequality, Origin::Inequality(k))? {
                self.rows.push(r);
            }
        }
        let limit = self.tol * self.scale();
        let mut z = self.problem.anchor.clone();
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let mut factor: Option<Factor> = None;
        let mut iterations = 0;

        // Equalities first; they never leave the active set.
        let n_eq = self.rows.iter().filter(|r| r.kind == Kind::Equality).count();
        for p in 0..n_eq {
            let mut normal = self.rows[p].normal.clone();
            let mut s = normal.dot(&z) - self.rows[p].bound;
            let (d, r) = Factor::split(&factor, &normal);
            if d.norm() <= 1e-10 {
                if s.abs() > limit {
                    return Err(GediError::Infeasible);
                }
                warn!("dropping linearly dependent equality row {p}");
                continue;
            }
            let mut sign = 1.0;
            if s < 0.0 {
                sign = -1.0;
                normal = -normal;
                s = -s;
            }
            let (d, r) = (d * sign, r * sign);
            let t = s / d.norm_squared();
            z -= &d * t;
            for (uj, rj) in u.iter_mut().zip(r.iter()) {
                *uj -= t * rj;
            }
            // multiplier stored against the original orientation
            u.push(t * sign);
            active.push(p);
            factor = Factor::new(&self.rows, &active, n);
            iterations += 1;
        }

        loop {
            if iterations >= max_iter {
                let residual = self.kkt_residual(&z, &active, &u);
                return Err(GediError::MaxIterations { iterations, residual });
            }
            let Some(p) = self.most_violated(&z, &active, limit)? else {
                break;
            };
            let mut u_p = 0.0;
            loop {
                iterations += 1;
                if iterations > max_iter {
                    let residual = self.kkt_residual(&z, &active, &u);
                    return Err(GediError::MaxIterations { iterations, residual });
                }
                let normal = self.rows[p].normal.clone();
                let (d, r) = Factor::split(&factor, &normal);
                let s = normal.dot(&z) - self.rows[p].bound;
                let dd = d.norm_squared();
                let t2 = if dd > 1e-20 { s.max(0.0) / dd } else { f64::INFINITY };
                let mut t1 = f64::INFINITY;
                let mut blocking = None;
                for (j, &row_idx) in active.iter().enumerate() {
                    if self.rows[row_idx].kind == Kind::Inequality && r[j] > 0.0 {
                        let ratio = u[j] / r[j];
                        if ratio < t1 {
                            t1 = ratio;
                            blocking = Some(j);
                        }
                    }
                }
                if t1.is_infinite() && t2.is_infinite() {
                    return Err(GediError::Infeasible);
                }
                let t = t1.min(t2);
                if t2.is_finite() {
                    z -= &d * t;
                }
                for (uj, rj) in u.iter_mut().zip(r.iter()) {
                    *uj -= t * rj;
                }
                u_p += t;
                if t2 <= t1 {
                    active.push(p);
                    u.push(u_p);
                    factor = Factor::new(&self.rows, &active, n);
                    break;
                }
                let j = blocking.expect("finite partial step has a blocking row");
                active.remove(j);
                u.remove(j);
                factor = Factor::new(&self.rows, &active, n);
            }
        }

        let (z, u) = self.refine(z, &active, u);
        let kkt_residual = self.kkt_residual(&z, &active, &u);
        debug!("active set finished: {iterations} iterations, {} active, kkt {kkt_residual:e}", active.len());
        let multipliers = active
            .iter()
            .zip(&u)
            .map(|(&i, &m)| (self.rows[i].origin.clone(), m / self.rows[i].norm))
            .collect();
        Ok(ActiveSetResult {
            z,
            iterations,
            kkt_residual,
            multipliers,
        })
    }

    /// Re-solves the equality-constrained projection on the final active set
    /// to wash out drift accumulated over the incremental updates.
    fn refine(&self, z: DVector<f64>, active: &[usize], u: Vec<f64>) -> (DVector<f64>, Vec<f64>) {
        if active.is_empty() {
            return (self.problem.anchor.clone(), u);
        }
        let n = self.problem.dim();
        let normals = DMatrix::from_fn(n, active.len(), |i, j| self.rows[active[j]].normal[i]);
        let bounds = DVector::from_iterator(active.len(), active.iter().map(|&i| self.rows[i].bound));
        let r = normals.clone().qr().r();
        // N' z = b with z = a - N m  =>  (R'R) m = N'a - b
        let rhs = normals.tr_mul(&self.problem.anchor) - bounds;
        let Some(tmp) = r.tr_solve_upper_triangular(&rhs) else {
            return (z, u);
        };
        let Some(m) = r.solve_upper_triangular(&tmp) else {
            return (z, u);
        };
        let refined = &self.problem.anchor - &normals * &m;
        let refined_u: Vec<f64> = m.iter().copied().collect();
        if self.kkt_residual(&refined, active, &refined_u) <= self.kkt_residual(&z, active, &u) {
            (refined, refined_u)
        } else {
            (z, u)
        }
    }

    fn kkt_residual(&self, z: &DVector<f64>, active: &[usize], u: &[f64]) -> f64 {
        let mut grad = z - &self.problem.anchor;
        let mut dual: f64 = 0.0;
        for (&i, &m) in active.iter().zip(u) {
            let row = &self.rows[i];
            grad += &row.normal * m;
            if row.kind == Kind::Inequality {
                dual = dual.max(-m);
            }
            // complementarity: active rows are tight
            dual = dual.max((m * (row.normal.dot(z) - row.bound)).abs());
        }
        let mut primal: f64 = 0.0;
        for row in &self.rows {
            let s = row.normal.dot(z) - row.bound;
            primal = primal.max(match row.kind {
                Kind::Equality => s.abs(),
                Kind::Inequality => s,
            });
        }
        for l in &self.problem.l1_bounds {
            primal = primal.max((&l.map * z - &l.offset).lp_norm(1) - l.radius);
        }
        grad.amax().max(primal).max(dual)
    }
}

// ---------------------------------------------------------------------------
// ADMM
// ---------------------------------------------------------------------------

/// Euclidean projection onto `{w : ||w||_1 <= radius}` by sorting.
pub fn project_l1_ball(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    if v.lp_norm(1) <= radius {
        return v.clone();
    }
    if radius <= 0.0 {
        return DVector::zeros(v.len());
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, m) in mags.iter().enumerate() {
        cumulative += m;
        let candidate = (cumulative - radius) / (i + 1) as f64;
        if *m > candidate {
            theta = candidate;
        } else {
            break;
        }
    }
    v.map(|x| x.signum() * (x.abs() - theta).max(0.0))
}

enum Block {
    Equal(f64),
    Upper(f64),
    Ball { start: usize, len: usize, offset: DVector<f64>, radius: f64 },
}

struct AdmmSystem {
    g: DMatrix<f64>,
    blocks: Vec<Block>,
    has_box: bool,
}

impl AdmmSystem {
    fn new(problem: &QpProblem) -> Self {
        let n = problem.dim();
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut blocks = Vec::new();
        for (row, rhs) in &problem.equalities {
            let norm = row.norm().max(f64::MIN_POSITIVE);
            rows.push(row / norm);
            blocks.push(Block::Equal(rhs / norm));
        }
        for (row, rhs) in &problem.inequalities {
            let norm = row.norm().max(f64::MIN_POSITIVE);
            rows.push(row / norm);
            blocks.push(Block::Upper(rhs / norm));
        }
        for l in &problem.l1_bounds {
            let scale = l
                .map
                .row_iter()
                .map(|r| r.norm())
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE);
            let start = rows.len();
            for r in l.map.row_iter() {
                rows.push(r.transpose() / scale);
            }
            blocks.push(Block::Ball {
                start,
                len: l.map.nrows(),
                offset: &l.offset / scale,
                radius: l.radius / scale,
            });
        }
        let g = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        Self {
            g,
            blocks,
            has_box: problem.bounds.is_some(),
        }
    }

    fn m(&self) -> usize {
        self.g.nrows()
    }

    fn project_rows(&self, v: &mut DVector<f64>) {
        let mut idx = 0;
        for b in &self.blocks {
            match b {
                Block::Equal(rhs) => {
                    v[idx] = *rhs;
                    idx += 1;
                }
                Block::Upper(rhs) => {
                    v[idx] = v[idx].min(*rhs);
                    idx += 1;
                }
                Block::Ball {
                    start,
                    len,
                    offset,
                    radius,
                } => {
                    let seg = v.rows(*start, *len) - offset;
                    let proj = project_l1_ball(&seg.into_owned(), *radius) + offset;
                    v.rows_mut(*start, *len).copy_from(&proj);
                    idx = start + len;
                }
            }
        }
    }
}

/// `(c0 I + rho G'G)^{-1}` applied through the Woodbury identity.
struct Woodbury {
    c0: f64,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl Woodbury {
    fn new(sys: &AdmmSystem, rho: f64) -> Self {
        let c0 = 1.0 + if sys.has_box { rho } else { 0.0 };
        let chol = if sys.m() == 0 {
            None
        } else {
            let mut s = &sys.g * sys.g.transpose();
            for i in 0..sys.m() {
                s[(i, i)] += c0 / rho;
            }
            s.cholesky()
        };
        Self { c0, chol }
    }

    fn apply(&self, sys: &AdmmSystem, h: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            None => h / self.c0,
            Some(ch) => {
                let gh = &sys.g * h;
                let corr = sys.g.tr_mul(&ch.solve(&gh));
                (h - corr) / self.c0
            }
        }
    }
}

struct AdmmState {
    z: DVector<f64>,
    iterations: usize,
    converged: bool,
}

fn admm(problem: &QpProblem, sys: &AdmmSystem, eps: f64, max_iter: usize) -> AdmmState {
    let n = problem.dim();
    let m = sys.m();
    let a = &problem.anchor;
    let (lo, hi) = problem
        .bounds
        .clone()
        .unwrap_or_else(|| (DVector::zeros(0), DVector::zeros(0)));
    let nb = lo.len();
    let kz = |z: &DVector<f64>| -> DVector<f64> {
        let mut out = DVector::zeros(m + nb);
        if m > 0 {
            out.rows_mut(0, m).copy_from(&(&sys.g * z));
        }
        if nb > 0 {
            out.rows_mut(m, nb).copy_from(z);
        }
        out
    };
    let kt = |v: &DVector<f64>| -> DVector<f64> {
        let mut out = if m > 0 {
            sys.g.tr_mul(&v.rows(0, m).into_owned())
        } else {
            DVector::zeros(n)
        };
        if nb > 0 {
            out += v.rows(m, nb);
        }
        out
    };
    let project = |v: &mut DVector<f64>| {
        if m > 0 {
            let mut head = v.rows(0, m).into_owned();
            sys.project_rows(&mut head);
            v.rows_mut(0, m).copy_from(&head);
        }
        for i in 0..nb {
            v[m + i] = v[m + i].clamp(lo[i], hi[i]);
        }
    };

    let relax = 1.6;
    let mut rho = 1.0;
    let mut solver = Woodbury::new(sys, rho);
    let mut z = a.clone();
    let mut v = kz(&z);
    project(&mut v);
    let mut w = DVector::zeros(m + nb);
    let mut converged = false;
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let rhs = a + kt(&(&v - &w)) * rho;
        z = solver.apply(sys, &rhs);
        let kz_new = kz(&z);
        let blended = &kz_new * relax + &v * (1.0 - relax);
        let v_prev = v.clone();
        v = &blended + &w;
        project(&mut v);
        w += &blended - &v;

        if it % 10 == 0 {
            let prim = (&kz_new - &v).amax();
            let dual = (kt(&(&v - &v_prev)) * rho).amax();
            let eps_prim = eps * (1.0 + kz_new.amax().max(v.amax()));
            let eps_dual = eps * (1.0 + (kt(&w) * rho).amax());
            if prim <= eps_prim && dual <= eps_dual {
                converged = true;
                break;
            }
            if it % 50 == 0 {
                let ratio = ((prim / eps_prim) / (dual / eps_dual).max(1e-300)).sqrt();
                if !(0.2..=5.0).contains(&ratio) {
                    let new_rho = (rho * ratio).clamp(1e-6, 1e6);
                    w *= rho / new_rho;
                    rho = new_rho;
                    solver = Woodbury::new(sys, rho);
                }
            }
        }
    }
    AdmmState {
        z,
        iterations: it,
        converged,
    }
}

/// Gradient of the Lagrangian without the box terms,
/// `z - a + sum_j u_j row_j`, in the full space.
fn lagrangian_gradient(problem: &QpProblem, z: &DVector<f64>, multipliers: &[(Origin, f64)]) -> DVector<f64> {
    let mut g = z - &problem.anchor;
    for (origin, m) in multipliers {
        match origin {
            Origin::Equality(k) => g += &problem.equalities[*k].0 * *m,
            Origin::Inequality(k) => g += &problem.inequalities[*k].0 * *m,
            Origin::Cut(l, signs) => {
                let s = DVector::from_iterator(signs.len(), signs.iter().map(|v| f64::from(*v)));
                g += problem.l1_bounds[*l].map.tr_mul(&s) * *m;
            }
        }
    }
    g
}

fn admm_with_polish(problem: &QpProblem, opts: &SolverOptions) -> Result<QpSolution> {
    let sys = AdmmSystem::new(problem);
    let eps = opts.tol.max(1e-8);
    let state = admm(problem, &sys, eps, opts.max_iter);
    debug!("admm: {} iterations, converged {}", state.iterations, state.converged);

    let Some((lo, hi)) = problem.bounds.clone() else {
        // Without a box, polishing is a plain active-set solve.
        let sol = ActiveSet::new(problem, opts.tol).run(opts.max_iter)?;
        return Ok(QpSolution {
            objective: problem.objective(&sol.z),
            kkt_residual: sol.kkt_residual,
            iterations: state.iterations + sol.iterations,
            z: sol.z,
            backend: Backend::Admm,
        });
    };

    let n = problem.dim();
    let margin = (10.0 * eps).max(1e-7);
    // 0 = free, -1 = at lower, +1 = at upper
    let mut status: Vec<i8> = (0..n)
        .map(|i| {
            if state.z[i] <= lo[i] + margin * (1.0 + lo[i].abs()) {
                -1
            } else if state.z[i] >= hi[i] - margin * (1.0 + hi[i].abs()) {
                1
            } else {
                0
            }
        })
        .collect();

    let mut total_iter = state.iterations;
    let limit = opts.tol * (1.0 + problem.anchor.amax());
    for round in 0..100 {
        let free: Vec<usize> = (0..n).filter(|&i| status[i] == 0).collect();
        let fixed: Vec<usize> = (0..n).filter(|&i| status[i] != 0).collect();
        let mut zfull = DVector::zeros(n);
        for &i in &fixed {
            zfull[i] = if status[i] < 0 { lo[i] } else { hi[i] };
        }
        let reduced = restrict(problem, &free, &zfull);
        let sol = match ActiveSet::new(&reduced, opts.tol).run(opts.max_iter) {
            Ok(s) => s,
            Err(GediError::Infeasible) if !fixed.is_empty() => {
                // too many coordinates pinned; release them all and retry
                debug!("polish round {round}: reduced problem infeasible, releasing box");
                status.iter_mut().for_each(|s| *s = 0);
                continue;
            }
            Err(e) => return Err(e),
        };
        total_iter += sol.iterations;
        for (k, &i) in free.iter().enumerate() {
            zfull[i] = sol.z[k];
        }
        // restrict() keeps constraint order, so reduced origins index the
        // full problem directly
        let grad = lagrangian_gradient(problem, &zfull, &sol.multipliers);
        let mut changed = false;
        for &i in &free {
            if zfull[i] < lo[i] - limit {
                status[i] = -1;
                changed = true;
            } else if zfull[i] > hi[i] + limit {
                status[i] = 1;
                changed = true;
            }
        }
        // at the lower bound the multiplier is grad[i], at the upper -grad[i]
        for &i in &fixed {
            if (status[i] < 0 && grad[i] < -limit) || (status[i] > 0 && grad[i] > limit) {
                status[i] = 0;
                changed = true;
            }
        }
        if !changed {
            let stationarity = free.iter().map(|&i| grad[i].abs()).fold(0.0, f64::max);
            let kkt = problem.max_violation(&zfull).max(stationarity).max(sol.kkt_residual);
            debug!("polish converged after {} rounds, kkt {kkt:e}", round + 1);
            return Ok(QpSolution {
                objective: problem.objective(&zfull),
                z: zfull,
                iterations: total_iter,
                kkt_residual: kkt,
                backend: Backend::Admm,
            });
        }
    }
    let residual = problem.max_violation(&state.z);
    if state.converged && residual <= eps {
        warn!("polishing did not settle; returning the ADMM iterate");
        return Ok(QpSolution {
            objective: problem.objective(&state.z),
            z: state.z,
            iterations: total_iter,
            kkt_residual: residual,
            backend: Backend::Admm,
        });
    }
    Err(GediError::MaxIterations {
        iterations: total_iter,
        residual,
    })
}

/// The problem over the `free` coordinates with the rest fixed at `zfull`.
fn restrict(problem: &QpProblem, free: &[usize], zfull: &DVector<f64>) -> QpProblem {
    // zfull is zero on the free coordinates
    let fixed_part = |row: &DVector<f64>| row.dot(zfull);
    let pick = |row: &DVector<f64>| DVector::from_iterator(free.len(), free.iter().map(|&i| row[i]));
    let mut reduced = QpProblem::new(pick(&problem.anchor));
    for (row, rhs) in &problem.equalities {
        reduced.equalities.push((pick(row), rhs - fixed_part(row)));
    }
    for (row, rhs) in &problem.inequalities {
        reduced.inequalities.push((pick(row), rhs - fixed_part(row)));
    }
    for l in &problem.l1_bounds {
        let map = DMatrix::from_fn(l.map.nrows(), free.len(), |r, c| l.map[(r, free[c])]);
        let mut offset = l.offset.clone();
        for r in 0..l.map.nrows() {
            let row = l.map.row(r).transpose();
            offset[r] -= fixed_part(&row);
        }
        reduced.l1_bounds.push(L1Bound {
            map,
            offset,
            radius: l.radius,
        });
    }
    reduced
}
