//! Numerical checkers for the backward Gronwall-type inequalities used in the
//! stability estimates, in a continuous and a discrete form.
//!
//! Both take `K > 0`, nonnegative `a, b, c` and a nonnegative kernel `zeta`
//! over a finite measure space `(S, mu)` given by point masses `mu[x]`. If
//!
//! ```text
//! a(t)   <= K { b(t) + int_t^T a(s) ds + int_S ( int_t^T zeta(s,t,x) ds )^2 mu(dx) }
//! int_S int_0^t zeta(t,s,x)^2 ds mu(dx) <= K { a(t) + c(t) }
//! ```
//!
//! then, with `gamma = 2K(1+K)`,
//!
//! ```text
//! int_0^T e^{gamma t} a(t) dt <= 2K int_0^T e^{gamma t} b(t) dt + int_0^T e^{gamma t} c(t) dt
//! int_0^T a(t) dt <= (2K+1) e^{gamma T} int_0^T (b(t) + c(t)) dt
//! ```
//!
//! The continuous checker works with step functions on a uniform grid of `m`
//! cells. Its hypothesis test is conservative: the right-hand side of the
//! first condition drops the part of the integrals inside the current cell and
//! the left-hand side of the second takes the full current cell, so a case
//! that passes satisfies the hypotheses at every `t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::TimeMesh;

const REL_TOL: f64 = 1e-12;

/// Outcome of one checked case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GronwallOutcome {
    /// `int a`.
    pub lhs: f64,
    /// `(2K+1) e^{gamma T} int (b + c)`.
    pub rhs: f64,
    /// `int e^{gamma t} a`.
    pub weighted_lhs: f64,
    /// `2K int e^{gamma t} b + int e^{gamma t} c`.
    pub weighted_rhs: f64,
    pub holds: bool,
}

/// Step functions on `cells` uniform cells of `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousCase {
    pub horizon: f64,
    pub k: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    /// `zeta[i][j][x]` on the cell pair `(i, j)`, `j <= i`.
    pub zeta: Vec<Vec<Vec<f64>>>,
    pub mu: Vec<f64>,
}

/// Sequences on a time mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCase {
    pub mesh: TimeMesh<f64>,
    pub k: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    /// `zeta[k][l][x]` for `l < k`.
    pub zeta: Vec<Vec<Vec<f64>>>,
    pub mu: Vec<f64>,
}

fn le(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs * (1.0 + REL_TOL) + f64::MIN_POSITIVE
}

fn check_common(k: f64, seqs: [&[f64]; 3], n: usize, mu: &[f64]) -> Result<()> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::InvalidArgument(format!("K must be positive, got {k}")));
    }
    for s in seqs {
        if s.len() != n {
            return Err(Error::ShapeMismatch(format!("sequence of length {} on {n} cells", s.len())));
        }
        if s.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("a, b, c must be finite and nonnegative".into()));
        }
    }
    if mu.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("mu must be a finite nonnegative measure".into()));
    }
    Ok(())
}

fn check_kernel(zeta: &[Vec<Vec<f64>>], n: usize, points: usize, diagonal: bool) -> Result<()> {
    if zeta.len() != n {
        return Err(Error::ShapeMismatch(format!("kernel has {} rows for {n} cells", zeta.len())));
    }
    for (i, row) in zeta.iter().enumerate() {
        let width = if diagonal { i + 1 } else { i };
        if row.len() != width || row.iter().any(|v| v.len() != points) {
            return Err(Error::ShapeMismatch(format!("kernel row {i} has the wrong shape")));
        }
        if row.iter().flatten().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("zeta must be finite and nonnegative".into()));
        }
    }
    Ok(())
}

/// `int_S (sum_{j>i} w_j zeta[j][i])^2 mu`.
fn tail_square(zeta: &[Vec<Vec<f64>>], w: &[f64], i: usize, mu: &[f64]) -> f64 {
    mu.iter()
        .enumerate()
        .map(|(x, m)| {
            let s: f64 = (i + 1..zeta.len()).map(|j| w[j] * zeta[j][i][x]).sum();
            m * s * s
        })
        .sum()
}

/// `int_S sum_{j<=upto} w_j zeta[i][j]^2 mu`.
fn row_square(row: &[Vec<f64>], w: &[f64], mu: &[f64]) -> f64 {
    row.iter()
        .enumerate()
        .map(|(j, z)| w[j] * z.iter().zip(mu).map(|(v, m)| m * v * v).sum::<f64>())
        .sum()
}

fn conclusion(k: f64, points: &[f64], a: &[f64], b: &[f64], c: &[f64]) -> GronwallOutcome {
    let gamma = 2.0 * k * (1.0 + k);
    let horizon = points[points.len() - 1];
    let mut out = GronwallOutcome {
        lhs: 0.0,
        rhs: 0.0,
        weighted_lhs: 0.0,
        weighted_rhs: 0.0,
        holds: false,
    };
    let mut bc = 0.0;
    for i in 0..a.len() {
        let (t0, t1) = (points[i], points[i + 1]);
        let dt = t1 - t0;
        let g = ((gamma * t1).exp() - (gamma * t0).exp()) / gamma;
        out.lhs += dt * a[i];
        bc += dt * (b[i] + c[i]);
        out.weighted_lhs += g * a[i];
        out.weighted_rhs += 2.0 * k * g * b[i] + g * c[i];
    }
    out.rhs = (2.0 * k + 1.0) * (gamma * horizon).exp() * bc;
    out.holds = le(out.lhs, out.rhs) && le(out.weighted_lhs, out.weighted_rhs);
    out
}

/// Checks the hypotheses of the continuous inequality for a step-function case
/// and evaluates both conclusions.
pub fn gronwall_cont_check(case: &ContinuousCase) -> Result<GronwallOutcome> {
    let m = case.a.len();
    if m == 0 || !(case.horizon > 0.0 && case.horizon.is_finite()) {
        return Err(Error::InvalidArgument("need at least one cell and a positive horizon".into()));
    }
    check_common(case.k, [&case.a, &case.b, &case.c], m, &case.mu)?;
    check_kernel(&case.zeta, m, case.mu.len(), true)?;
    let h = case.horizon / m as f64;
    let w = vec![h; m];
    for i in 0..m {
        let tail: f64 = case.a[i + 1..].iter().sum::<f64>() * h;
        let rhs = case.k * (case.b[i] + tail + tail_square(&case.zeta, &w, i, &case.mu));
        if !le(case.a[i], rhs) {
            return Err(Error::HypothesisViolation(format!("first condition fails on cell {i}: {} > {rhs}", case.a[i])));
        }
        let lhs = row_square(&case.zeta[i], &w, &case.mu);
        let cap = case.k * (case.a[i] + case.c[i]);
        if !le(lhs, cap) {
            return Err(Error::HypothesisViolation(format!("second condition fails on cell {i}: {lhs} > {cap}")));
        }
    }
    let points: Vec<f64> = (0..=m).map(|i| case.horizon * i as f64 / m as f64).collect();
    Ok(conclusion(case.k, &points, &case.a, &case.b, &case.c))
}

/// Checks the hypotheses of the discrete inequality and evaluates both conclusions.
pub fn gronwall_disc_check(case: &DiscreteCase) -> Result<GronwallOutcome> {
    let n = case.mesh.cells();
    check_common(case.k, [&case.a, &case.b, &case.c], n, &case.mu)?;
    check_kernel(&case.zeta, n, case.mu.len(), false)?;
    let dt: Vec<f64> = case.mesh.steps().collect();
    for k in 0..n {
        let tail: f64 = (k + 1..n).map(|l| dt[l] * case.a[l]).sum();
        let rhs = case.k * (case.b[k] + tail + tail_square(&case.zeta, &dt, k, &case.mu));
        if !le(case.a[k], rhs) {
            return Err(Error::HypothesisViolation(format!("first condition fails at k = {k}: {} > {rhs}", case.a[k])));
        }
        let lhs = row_square(&case.zeta[k], &dt, &case.mu);
        let cap = case.k * (case.a[k] + case.c[k]);
        if !le(lhs, cap) {
            return Err(Error::HypothesisViolation(format!("second condition fails at k = {k}: {lhs} > {cap}")));
        }
    }
    Ok(conclusion(case.k, case.mesh.points(), &case.a, &case.b, &case.c))
}

/// Draws `b, c, zeta`, then builds `a` backwards as a random fraction of the
/// first bound and shrinks each kernel row into the second.
fn project<R: Rng + ?Sized>(rng: &mut R, k: f64, w: &[f64], diagonal: bool, points: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<Vec<Vec<f64>>>, Vec<f64>) {
    let n = w.len();
    let draw = |rng: &mut R| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..2.0) };
    let b: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
    let c: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
    let mu: Vec<f64> = (0..points).map(|_| rng.random_range(0.05..1.0)).collect();
    let mut zeta: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| {
            let width = if diagonal { i + 1 } else { i };
            (0..width).map(|_| (0..points).map(|_| rng.random_range(0.0..3.0)).collect()).collect()
        })
        .collect();
    let mut a = vec![0.0; n];
    for i in (0..n).rev() {
        let tail: f64 = (i + 1..n).map(|j| w[j] * a[j]).sum();
        let bound = k * (b[i] + tail + tail_square(&zeta, w, i, &mu));
        a[i] = rng.random_range(0.0..=1.0) * bound;
        let lhs = row_square(&zeta[i], w, &mu);
        let cap = k * (a[i] + c[i]);
        if lhs > cap {
            let scale = (cap / lhs).sqrt() * (1.0 - 1e-9);
            zeta[i].iter_mut().flatten().for_each(|v| *v *= scale);
        }
    }
    (a, b, c, zeta, mu)
}

/// A random case satisfying the continuous hypotheses.
pub fn random_continuous_case<R: Rng + ?Sized>(rng: &mut R) -> ContinuousCase {
    let m = rng.random_range(1..=16);
    let horizon = rng.random_range(0.2..2.0);
    let k = rng.random_range(0.05..2.5);
    let points = rng.random_range(1..=4);
    let w = vec![horizon / m as f64; m];
    let (a, b, c, zeta, mu) = project(rng, k, &w, true, points);
    ContinuousCase { horizon, k, a, b, c, zeta, mu }
}

/// A random case on a random nonuniform mesh satisfying the discrete hypotheses.
pub fn random_discrete_case<R: Rng + ?Sized>(rng: &mut R) -> DiscreteCase {
    let n = rng.random_range(2..=16);
    let horizon = rng.random_range(0.2..2.0);
    let k = rng.random_range(0.05..2.5);
    let points = rng.random_range(1..=4);
    let mut cuts: Vec<f64> = (0..n - 1).map(|_| rng.random_range(0.0..horizon)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut pts = vec![0.0];
    for t in cuts {
        if t > pts[pts.len() - 1] + 1e-6 && t < horizon - 1e-6 {
            pts.push(t);
        }
    }
    if pts.len() < 2 {
        pts.push(horizon / 2.0);
    }
    pts.push(horizon);
    let mesh = TimeMesh::from_points(pts).expect("strictly increasing points");
    let w: Vec<f64> = mesh.steps().collect();
    let (a, b, c, zeta, mu) = project(rng, k, &w, false, points);
    DiscreteCase { mesh, k, a, b, c, zeta, mu }
}

/// Tally of a randomized run of one checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SuiteTally {
    pub kind: &'static str,
    pub cases: usize,
    pub hypothesis_violations: usize,
    pub conclusion_failures: usize,
}

impl SuiteTally {
    pub fn passed(&self) -> bool {
        self.hypothesis_violations == 0 && self.conclusion_failures == 0
    }
}

/// Runs `cases` generated cases through each checker from one seeded stream.
pub fn random_suite(cases: usize, seed: u64) -> [SuiteTally; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cont = SuiteTally { kind: "continuous", cases, hypothesis_violations: 0, conclusion_failures: 0 };
    let mut disc = SuiteTally { kind: "discrete", ..cont };
    let tally = |t: &mut SuiteTally, r: Result<GronwallOutcome>| match r {
        Ok(o) if o.holds => {}
        Ok(_) => t.conclusion_failures += 1,
        Err(_) => t.hypothesis_violations += 1,
    };
    for _ in 0..cases {
        let c = random_continuous_case(&mut rng);
        tally(&mut cont, gronwall_cont_check(&c));
        let d = random_discrete_case(&mut rng);
        tally(&mut disc, gronwall_disc_check(&d));
    }
    [cont, disc]
}
