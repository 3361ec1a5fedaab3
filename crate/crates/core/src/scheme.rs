//! The explicit backward Euler-Maruyama scheme for Type-II BSVIEs:
//!
//! ```text
//! Y(t_k, t_N) = psi(t_k, X(t_k), X(t_N))
//! Z(t_k, t_l) = E_l[Y(t_k, t_{l+1}) dW_l] / dt_l
//! Y(t_k, t_l) = E_l[Y(t_k, t_{l+1})]
//!             + dt_l g(t_k, t_l, X(t_k), X(t_l), Y(t_l, t_l), Z(t_k, t_l), Z(t_l, t_k)) 1{k < l}
//! ```
//!
//! Rows run `k = N-1, ..., 0` and columns `l = N-1, ..., 0` within a row. Row
//! `k` reads only the diagonal `Y(t_l, t_l)` and the cross values `Z(t_l, t_k)`
//! of rows `l > k`, which are already complete.

pub mod oracle;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condexp::{self, fit_lsmc, Features, LsmcFit, Projection, RegressionConfig};
use crate::error::{Error, Result};
use crate::forward::{euler_maruyama, euler_maruyama_tree, StatePaths};
use crate::mesh::TimeMesh;
use crate::model::{DriverArgs, ProblemInstance};
use crate::noise::{IncrementBatch, IncrementLaw, TreeEnsemble, DEFAULT_TREE_CAP};
use crate::scalar::Scalar;
use crate::stats::batch_bounds;

pub(crate) const PATH_CHUNK: usize = 1024;
/// Monte Carlo runs keep per-cell sums in this many fixed path batches.
pub const STAT_BATCHES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Tree,
    Lsmc,
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree" => Ok(Backend::Tree),
            "lsmc" => Ok(Backend::Lsmc),
            other => Err(Error::InvalidArgument(format!("unknown backend `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub regression: RegressionConfig,
    /// Keep the below-diagonal `Z(t_l, t_k)` available to the driver. When
    /// off, the driver receives NaN in its `z_swapped` slot.
    pub retain_cross: bool,
    /// Record every cross-row read in [`SchemeSolution::access_log`].
    pub record_access: bool,
    pub tree_cap: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            regression: RegressionConfig::default(),
            retain_cross: true,
            record_access: false,
            tree_cap: DEFAULT_TREE_CAP,
        }
    }
}

/// A read of a value produced by another row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    /// `Y(t_row, t_row)`.
    Diagonal { row: usize },
    /// `Z(t_row, t_column)`.
    Cross { row: usize, column: usize },
}

/// Reads made while computing cell `(k, l)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRecord {
    pub k: usize,
    pub l: usize,
    pub reads: Vec<Access>,
}

/// Sums of `Y(t_k, t_l)` and `Z(t_k, t_l)` and their squares over a batch of paths.
/// `Z` is also summed relative to `z_ref`, one of its own values, so its
/// spread survives when it is nearly constant.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellSums {
    pub count: usize,
    pub y: f64,
    pub y2: f64,
    pub z: f64,
    pub z2: f64,
    pub z_ref: f64,
    pub dz: f64,
    pub dz2: f64,
}

impl CellSums {
    pub(crate) fn new(count: usize, z_ref: f64) -> Self {
        Self {
            count,
            z_ref,
            ..Default::default()
        }
    }

    /// Adds a value pair with weight `w` (a number of paths).
    pub(crate) fn push(&mut self, w: f64, y: f64, z: f64) {
        let d = z - self.z_ref;
        self.y += w * y;
        self.y2 += w * y * y;
        self.z += w * z;
        self.z2 += w * z * z;
        self.dz += w * d;
        self.dz2 += w * d * d;
    }

    pub(crate) fn add(&mut self, other: &CellSums) {
        if self.count == 0 {
            *self = *other;
            return;
        }
        let c = other.count as f64;
        let shift = other.z_ref - self.z_ref;
        self.count += other.count;
        self.y += other.y;
        self.y2 += other.y2;
        self.z += other.z;
        self.z2 += other.z2;
        self.dz += other.dz + c * shift;
        self.dz2 += other.dz2 + 2.0 * shift * other.dz + c * shift * shift;
    }

    /// Sample mean and (biased) variance of `Z`.
    pub fn z_mean_var(&self) -> (f64, f64) {
        let c = self.count.max(1) as f64;
        let d1 = self.dz / c;
        (self.z_ref + d1, (self.dz2 / c - d1 * d1).max(0.0))
    }

    /// Sample mean of `int_cell |f - Z|^2` for a deterministic `f` with cell
    /// mean `f_mean` and `within = int_cell |f - f_mean|^2` over a cell of `area`.
    pub fn square_error(&self, f_mean: f64, within: f64, area: f64) -> f64 {
        let (m, v) = self.z_mean_var();
        within + area * (v + (m - f_mean) * (m - f_mean))
    }
}

/// Sample moments of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSummary {
    pub k: usize,
    pub l: usize,
    pub mean_y: f64,
    pub mean_y2: f64,
    pub mean_z: f64,
    pub mean_z2: f64,
}

#[derive(Debug, Clone)]
struct TreeStore<T> {
    tree: TreeEnsemble<T>,
    /// `y[k][l][node]` for `l = 0..=N`.
    y: Vec<Vec<Vec<T>>>,
    /// `z[k][l][node]` for `l = 0..N`.
    z: Vec<Vec<Vec<T>>>,
}

#[derive(Debug, Clone)]
struct LsmcStore<T> {
    instance: ProblemInstance<T>,
    states: StatePaths<T>,
    projection: Projection,
    /// `E[G^i]` per column.
    moments: Vec<Vec<f64>>,
    /// Projection::Later: fit of `Y(t_k, t_j)` on the features at `t_j`, `j = 1..=N`.
    later: Vec<Vec<Option<LsmcFit>>>,
    /// Projection::Now: fits of `Y(t_k, t_{l+1})` and `Y(t_k, t_{l+1}) dW_l` on the features at `t_l`.
    now: Vec<Vec<Option<(LsmcFit, LsmcFit)>>>,
    /// `(Y(t_k, t_0), Z(t_k, t_0))`, deterministic.
    col0: Vec<(T, T)>,
    /// `Y(t_l, t_l)` per path.
    diag: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
enum Store<T> {
    Tree(TreeStore<T>),
    Lsmc(LsmcStore<T>),
}

/// Output of the scheme.
#[derive(Debug, Clone)]
pub struct SchemeSolution<T> {
    mesh: TimeMesh<T>,
    paths: usize,
    store: Store<T>,
    /// `[k][l][batch]`.
    stats: Vec<Vec<Vec<CellSums>>>,
    access_log: Vec<AccessRecord>,
}

impl<T: Scalar> SchemeSolution<T> {
    pub fn mesh(&self) -> &TimeMesh<T> {
        &self.mesh
    }

    pub fn backend(&self) -> Backend {
        match self.store {
            Store::Tree(_) => Backend::Tree,
            Store::Lsmc(_) => Backend::Lsmc,
        }
    }

    /// Number of paths: sampled paths, or `2^N` equally likely tree leaves.
    pub fn paths(&self) -> usize {
        self.paths
    }

    /// True when expectations are exact (tree backend) and there is no sampling error.
    pub fn is_exact(&self) -> bool {
        matches!(self.store, Store::Tree(_))
    }

    pub fn access_log(&self) -> &[AccessRecord] {
        &self.access_log
    }

    /// Tree node table `Y(t_k, t_l)` at level `l`.
    pub fn tree_y(&self, k: usize, l: usize) -> Option<&[T]> {
        match &self.store {
            Store::Tree(s) => s.y.get(k)?.get(l).map(|v| v.as_slice()),
            Store::Lsmc(_) => None,
        }
    }

    /// Tree node table `Z(t_k, t_l)` at level `l`.
    pub fn tree_z(&self, k: usize, l: usize) -> Option<&[T]> {
        match &self.store {
            Store::Tree(s) => s.z.get(k)?.get(l).map(|v| v.as_slice()),
            Store::Lsmc(_) => None,
        }
    }

    pub fn tree(&self) -> Option<&TreeEnsemble<T>> {
        match &self.store {
            Store::Tree(s) => Some(&s.tree),
            Store::Lsmc(_) => None,
        }
    }

    /// Forward states the scheme was built on (Monte Carlo backend).
    pub fn states(&self) -> Option<&StatePaths<T>> {
        match &self.store {
            Store::Lsmc(s) => Some(&s.states),
            Store::Tree(_) => None,
        }
    }

    /// `Y(t_k, t_k)` on path `p`.
    pub fn y_diag(&self, k: usize, p: usize) -> T {
        match &self.store {
            Store::Tree(s) => s.y[k][k][p >> (self.mesh.cells() - k)],
            Store::Lsmc(s) => s.diag[k][p],
        }
    }

    /// `Y(t_k, t_l)` on path `p`. The Monte Carlo backend reproduces values
    /// off the diagonal from the fitted representation of the later projection.
    pub fn y(&self, k: usize, l: usize, p: usize) -> Result<T> {
        let n = self.mesh.cells();
        if k >= n || l > n {
            return Err(Error::InvalidArgument(format!("cell ({k},{l}) outside the grid")));
        }
        match &self.store {
            Store::Tree(s) => Ok(s.y[k][l][p >> (n - l)]),
            Store::Lsmc(s) => {
                if l == k {
                    return Ok(s.diag[k][p]);
                }
                if l == 0 {
                    return Ok(s.col0[k].0);
                }
                let fit = s.later[k][l].as_ref().ok_or_else(|| {
                    Error::Unsupported("off-diagonal values need the later projection".into())
                })?;
                let x = features_at(&s.states, k, l, p);
                Ok(T::lit(fit.eval(x.as_slice())))
            }
        }
    }

    /// `Z(t_k, t_l)` on path `p`.
    pub fn z(&self, k: usize, l: usize, p: usize) -> T {
        let n = self.mesh.cells();
        match &self.store {
            Store::Tree(s) => s.z[k][l][p >> (n - l)],
            Store::Lsmc(s) => lsmc_z(s, &self.mesh, k, l, p),
        }
    }

    /// Per-batch sums for cell `(k, l)`.
    pub fn batch_sums(&self, k: usize, l: usize) -> &[CellSums] {
        &self.stats[k][l]
    }

    /// Sample moments of `Y(t_k, t_l)` and `Z(t_k, t_l)` over all paths.
    pub fn cell_summary(&self, k: usize, l: usize) -> CellSummary {
        let mut tot = CellSums::default();
        for b in &self.stats[k][l] {
            tot.add(b);
        }
        let c = tot.count.max(1) as f64;
        CellSummary {
            k,
            l,
            mean_y: tot.y / c,
            mean_y2: tot.y2 / c,
            mean_z: tot.z / c,
            mean_z2: tot.z2 / c,
        }
    }

    /// Every cell `(k, l)`, `k < N`, `l < N`, in row-major order.
    pub fn summary(&self) -> Vec<CellSummary> {
        let n = self.mesh.cells();
        (0..n)
            .flat_map(|k| (0..n).map(move |l| (k, l)))
            .map(|(k, l)| self.cell_summary(k, l))
            .collect()
    }

    pub fn stat_batches(&self) -> usize {
        self.stats.first().and_then(|r| r.first()).map_or(0, |b| b.len())
    }
}

/// State coordinates of the regression for row `k` at column `l`.
pub(crate) fn features_at<T: Scalar>(states: &StatePaths<T>, k: usize, l: usize, p: usize) -> FeatureVec {
    match Features::for_cell(k, l) {
        Features::StatePair => FeatureVec::Two([states.get(p, k).as_f64(), states.get(p, l).as_f64()]),
        Features::StateNow => FeatureVec::One([states.get(p, l).as_f64()]),
    }
}

pub(crate) enum FeatureVec {
    One([f64; 1]),
    Two([f64; 2]),
}

impl FeatureVec {
    pub(crate) fn as_slice(&self) -> &[f64] {
        match self {
            FeatureVec::One(a) => a,
            FeatureVec::Two(a) => a,
        }
    }
}

pub(crate) fn feature_slices<T: Scalar>(states: &StatePaths<T>, k: usize, l: usize) -> Vec<&[T]> {
    match Features::for_cell(k, l) {
        Features::StatePair => vec![states.node(k), states.node(l)],
        Features::StateNow => vec![states.node(l)],
    }
}

/// `(E_l[f], E_l[f dW_l])` of the later fit for row `k` at column `l` on path `p`.
#[inline]
pub(crate) fn later_moments<T: Scalar>(
    fit: &LsmcFit,
    instance_step: (T, T),
    states: &StatePaths<T>,
    k: usize,
    l: usize,
    p: usize,
    moments: &[f64],
) -> (f64, f64) {
    let (mean, sd) = instance_step;
    let fixed = [states.get(p, k).as_f64()];
    let fixed: &[f64] = match Features::for_cell(k, l + 1) {
        Features::StatePair => &fixed,
        Features::StateNow => &[],
    };
    fit.cond_moments(fixed, mean.as_f64(), sd.as_f64(), moments)
}

fn lsmc_z<T: Scalar>(s: &LsmcStore<T>, mesh: &TimeMesh<T>, k: usize, l: usize, p: usize) -> T {
    if l == 0 {
        return s.col0[k].1;
    }
    let dt = mesh.dt(l);
    match s.projection {
        Projection::Later => {
            let fit = s.later[k][l + 1].as_ref().expect("fit stored for every column");
            let st = euler_step(&s.instance, mesh, &s.states, l, p);
            let (_, e1) = later_moments(fit, st, &s.states, k, l, p, &s.moments[l]);
            T::lit(e1) / dt
        }
        Projection::Now => {
            let (_, zfit) = s.now[k][l].as_ref().expect("fit stored for every column");
            let x = features_at(&s.states, k, l, p);
            T::lit(zfit.eval(x.as_slice())) / dt
        }
    }
}

/// Mean and scale of the Euler step out of `X(t_l)` on path `p`.
#[inline]
pub(crate) fn euler_step<T: Scalar>(instance: &ProblemInstance<T>, mesh: &TimeMesh<T>, states: &StatePaths<T>, l: usize, p: usize) -> (T, T) {
    let x = states.get(p, l);
    let t = mesh.t(l);
    (x + instance.drift(t, x) * mesh.dt(l), instance.diffusion(t, x))
}

pub(crate) fn batch_sums<T: Scalar>(y: &[T], z: &[T], batches: usize) -> Vec<CellSums> {
    (0..batches)
        .map(|b| {
            let (lo, hi) = batch_bounds(y.len(), batches, b);
            let mut s = CellSums::new(hi - lo, z.get(lo).map_or(0.0, |v| v.as_f64()));
            for p in lo..hi {
                s.push(1.0, y[p].as_f64(), z[p].as_f64());
            }
            s
        })
        .collect()
}

pub(crate) fn check_horizon<T: Scalar>(instance: &ProblemInstance<T>, mesh: &TimeMesh<T>) -> Result<()> {
    if mesh.horizon() != instance.horizon {
        return Err(Error::ShapeMismatch("mesh horizon differs from instance horizon".into()));
    }
    Ok(())
}

/// Runs the scheme with exact conditional expectations on the binary tree over `mesh`.
pub fn solve_bsvie_tree<T: Scalar>(
    instance: &ProblemInstance<T>,
    mesh: &TimeMesh<T>,
    options: &SolverOptions,
) -> Result<SchemeSolution<T>> {
    check_horizon(instance, mesh)?;
    let tree = TreeEnsemble::with_cap(mesh, options.tree_cap)?;
    let n = mesh.cells();
    let xs = euler_maruyama_tree(instance, &tree)?;
    let mut y: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
    let mut z: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
    let mut log = Vec::new();
    for k in (0..n).rev() {
        let tk = mesh.t(k);
        let mut row_y: Vec<Vec<T>> = vec![Vec::new(); n + 1];
        let mut row_z: Vec<Vec<T>> = vec![Vec::new(); n];
        row_y[n] = (0..tree.nodes_at(n))
            .map(|node| instance.free_term(tk, xs[k][node >> (n - k)], xs[n][node]))
            .collect();
        for l in (0..n).rev() {
            let dt = mesh.dt(l);
            let mean = condexp::tree_condexp(&tree, l, &row_y[l + 1]).map_err(|e| e.at("scheme", k, l))?;
            let zz = condexp::tree_cond_z(&tree, l, &row_y[l + 1], dt).map_err(|e| e.at("scheme", k, l))?;
            let vals = if k < l {
                if options.record_access {
                    log.push(AccessRecord {
                        k,
                        l,
                        reads: vec![Access::Diagonal { row: l }, Access::Cross { row: l, column: k }],
                    });
                }
                let diag: &[T] = &y[l][l];
                let cross: &[T] = &z[l][k];
                let tl = mesh.t(l);
                let mut out = Vec::with_capacity(mean.len());
                for node in 0..mean.len() {
                    let above = node >> (l - k);
                    let g = instance.driver(DriverArgs {
                        t: tk,
                        s: tl,
                        x_t: xs[k][above],
                        x_s: xs[l][node],
                        y: diag[node],
                        z: zz[node],
                        z_swapped: if options.retain_cross { cross[above] } else { T::nan() },
                    });
                    let v = mean[node] + dt * g;
                    if !v.is_finite() {
                        return Err(Error::non_finite(format!("driver at node {node}")).at("scheme", k, l));
                    }
                    out.push(v);
                }
                out
            } else {
                mean
            };
            row_y[l] = vals;
            row_z[l] = zz;
        }
        y[k] = row_y;
        z[k] = row_z;
    }
    Ok(tree_solution(mesh, tree, y, z, log))
}

/// Packs node tables into a solution, with exact cell moments.
fn tree_solution<T: Scalar>(
    mesh: &TimeMesh<T>,
    tree: TreeEnsemble<T>,
    y: Vec<Vec<Vec<T>>>,
    z: Vec<Vec<Vec<T>>>,
    access_log: Vec<AccessRecord>,
) -> SchemeSolution<T> {
    let n = mesh.cells();
    let leaves = tree.leaves();
    let stats = (0..n)
        .map(|k| {
            (0..n)
                .map(|l| {
                    // Each level-l node stands for 2^{N-l} leaves.
                    let w = (1usize << (n - l)) as f64;
                    let mut s = CellSums::new(leaves, z[k][l].first().map_or(0.0, |v| v.as_f64()));
                    for (yv, zv) in y[k][l].iter().zip(&z[k][l]) {
                        s.push(w, yv.as_f64(), zv.as_f64());
                    }
                    vec![s]
                })
                .collect()
        })
        .collect();
    SchemeSolution {
        mesh: mesh.clone(),
        paths: leaves,
        store: Store::Tree(TreeStore { tree, y, z }),
        stats,
        access_log,
    }
}

/// Runs the scheme on sampled paths with regression estimates of the conditional expectations.
pub fn solve_bsvie<T: Scalar>(
    instance: &ProblemInstance<T>,
    increments: &IncrementBatch<T>,
    options: &SolverOptions,
) -> Result<SchemeSolution<T>> {
    options.regression.validate()?;
    let mesh = increments.mesh().clone();
    check_horizon(instance, &mesh)?;
    let states = euler_maruyama(instance, increments)?;
    let n = mesh.cells();
    let m = increments.paths();
    let batches = STAT_BATCHES.min(m);
    let reg = &options.regression;
    let projection = reg.projection;
    let law: IncrementLaw = increments.law();
    let moments: Vec<Vec<f64>> = (0..n).map(|l| law.moments(mesh.dt(l).as_f64(), reg.degree + 1)).collect();

    let mut later: Vec<Vec<Option<LsmcFit>>> = vec![Vec::new(); n];
    let mut now: Vec<Vec<Option<(LsmcFit, LsmcFit)>>> = vec![Vec::new(); n];
    let mut col0s = vec![(T::zero(), T::zero()); n];
    let mut diags: Vec<Vec<T>> = vec![Vec::new(); n];
    let mut stats = vec![vec![Vec::new(); n]; n];
    let mut log = Vec::new();
    let states = &states;
    // Euler-step mean and scale out of every node; independent of the row.
    let transitions: Vec<Vec<(T, T)>> = (0..n)
        .map(|l| {
            (0..m)
                .into_par_iter()
                .with_min_len(PATH_CHUNK)
                .map(|p| euler_step(instance, &mesh, states, l, p))
                .collect()
        })
        .collect();
    let step = |l: usize, p: usize| transitions[l][p];

    for k in (0..n).rev() {
        let tk = mesh.t(k);
        let xk = states.node(k);
        let xn = states.node(n);
        let mut cur: Vec<T> = xk.iter().zip(xn).map(|(&a, &b)| instance.free_term(tk, a, b)).collect();
        if let Some(p) = cur.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("terminal value at path {p}")).at("scheme", k, n));
        }
        let mut row_later: Vec<Option<LsmcFit>> = vec![None; n + 1];
        let mut row_now: Vec<Option<(LsmcFit, LsmcFit)>> = vec![None; n];
        let mut row_stats = vec![Vec::new(); n];
        let mut col0 = (T::zero(), T::zero());
        for l in (0..n).rev() {
            let dt = mesh.dt(l);
            let at = |e: Error| e.at("scheme", k, l);
            // Conditional mean and martingale coefficient per path.
            let (mean, zv): (Vec<T>, Vec<T>) = match projection {
                Projection::Later => {
                    let fit = fit_lsmc(reg, &feature_slices(states, k, l + 1), &cur).map_err(at)?;
                    let mom = &moments[l];
                    let pairs: Vec<(T, T)> = (0..m)
                        .into_par_iter()
                        .with_min_len(PATH_CHUNK)
                        .map(|p| {
                            let (e0, e1) = later_moments(&fit, step(l, p), states, k, l, p, mom);
                            (T::lit(e0), T::lit(e1) / dt)
                        })
                        .collect();
                    row_later[l + 1] = Some(fit);
                    pairs.into_iter().unzip()
                }
                Projection::Now => {
                    let dw: Vec<T> = (0..m).map(|p| increments.get(p, l, 0)).collect();
                    let cur_dw: Vec<T> = cur.iter().zip(&dw).map(|(a, b)| *a * *b).collect();
                    if l == 0 {
                        let mf = T::of_usize(m);
                        let e0 = cur.iter().copied().fold(T::zero(), |a, b| a + b) / mf;
                        let e1 = cur_dw.iter().copied().fold(T::zero(), |a, b| a + b) / mf / dt;
                        (vec![e0; m], vec![e1; m])
                    } else {
                        let feats = feature_slices(states, k, l);
                        let fy = fit_lsmc(reg, &feats, &cur).map_err(at)?;
                        let fz = fit_lsmc(reg, &feats, &cur_dw).map_err(at)?;
                        let pairs: Vec<(T, T)> = (0..m)
                            .into_par_iter()
                            .with_min_len(PATH_CHUNK)
                            .map(|p| {
                                let x = features_at(states, k, l, p);
                                (T::lit(fy.eval(x.as_slice())), T::lit(fz.eval(x.as_slice())) / dt)
                            })
                            .collect();
                        row_now[l] = Some((fy, fz));
                        pairs.into_iter().unzip()
                    }
                }
            };
            let next: Vec<T> = if k < l {
                if options.record_access {
                    log.push(AccessRecord {
                        k,
                        l,
                        reads: vec![Access::Diagonal { row: l }, Access::Cross { row: l, column: k }],
                    });
                }
                let diag = &diags[l];
                let cross: Vec<T> = if options.retain_cross {
                    let view = CrossView {
                        states,
                        projection,
                        moments: &moments,
                        later: &later,
                        now: &now,
                        col0: &col0s,
                    };
                    cross_values(&view, &mesh, &step, l, k, m)
                } else {
                    vec![T::nan(); m]
                };
                let tl = mesh.t(l);
                let xl = states.node(l);
                let out: Vec<T> = (0..m)
                    .into_par_iter()
                    .with_min_len(PATH_CHUNK)
                    .map(|p| {
                        let g = instance.driver(DriverArgs {
                            t: tk,
                            s: tl,
                            x_t: xk[p],
                            x_s: xl[p],
                            y: diag[p],
                            z: zv[p],
                            z_swapped: cross[p],
                        });
                        mean[p] + dt * g
                    })
                    .collect();
                if let Some(p) = out.iter().position(|v| !v.is_finite()) {
                    return Err(at(Error::non_finite(format!("driver at path {p}"))));
                }
                out
            } else {
                mean
            };
            if let Some(p) = next.iter().chain(&zv).position(|v| !v.is_finite()) {
                return Err(at(Error::non_finite(format!("conditional expectation at path {}", p % m))));
            }
            row_stats[l] = batch_sums(&next, &zv, batches);
            if l == 0 {
                col0 = (next[0], zv[0]);
            }
            if l == k {
                diags[k] = next.clone();
            }
            cur = next;
        }
        later[k] = row_later;
        now[k] = row_now;
        col0s[k] = col0;
        stats[k] = row_stats;
    }
    let store = LsmcStore {
        instance: instance.clone(),
        states: states.clone(),
        projection,
        moments,
        later,
        now,
        col0: col0s,
        diag: diags,
    };
    Ok(SchemeSolution {
        mesh,
        paths: m,
        store: Store::Lsmc(store),
        stats,
        access_log: log,
    })
}

/// `Z(t_row, t_col)` per path, `col < row`, from the fits of the completed row.
struct CrossView<'a, T> {
    states: &'a StatePaths<T>,
    projection: Projection,
    moments: &'a [Vec<f64>],
    later: &'a [Vec<Option<LsmcFit>>],
    now: &'a [Vec<Option<(LsmcFit, LsmcFit)>>],
    col0: &'a [(T, T)],
}

fn cross_values<T, F>(store: &CrossView<'_, T>, mesh: &TimeMesh<T>, step: &F, row: usize, col: usize, m: usize) -> Vec<T>
where
    T: Scalar,
    F: Fn(usize, usize) -> (T, T) + Sync,
{
    if col == 0 {
        return vec![store.col0[row].1; m];
    }
    let dt = mesh.dt(col);
    match store.projection {
        Projection::Later => {
            let fit = store.later[row][col + 1].as_ref().expect("completed row");
            let mom = &store.moments[col];
            (0..m)
                .into_par_iter()
                .with_min_len(PATH_CHUNK)
                .map(|p| {
                    let (_, e1) = later_moments(fit, step(col, p), store.states, row, col, p, mom);
                    T::lit(e1) / dt
                })
                .collect()
        }
        Projection::Now => {
            let (_, zfit) = store.now[row][col].as_ref().expect("completed row");
            (0..m)
                .into_par_iter()
                .with_min_len(PATH_CHUNK)
                .map(|p| {
                    let x = features_at(store.states, row, col, p);
                    T::lit(zfit.eval(x.as_slice())) / dt
                })
                .collect()
        }
    }
}

/// `max |Y(t_k,t_k) - E[Y(t_k,t_k)] - sum_{l<k} Z(t_k,t_l) dW_l|` over `k` and tree nodes.
pub fn msolution_residual<T: Scalar>(sol: &SchemeSolution<T>) -> Result<T> {
    let Store::Tree(s) = &sol.store else {
        return Err(Error::Unsupported("identity only exact in tree mode".into()));
    };
    let n = sol.mesh.cells();
    let mut worst = T::zero();
    for k in 0..n {
        let diag = &s.y[k][k];
        let mean = diag.iter().copied().fold(T::zero(), |a, b| a + b) / T::of_usize(diag.len());
        for (node, &v) in diag.iter().enumerate() {
            let mut r = v - mean;
            for l in 0..k {
                let at_l = node >> (k - l);
                let child = node >> (k - l - 1);
                r = r - s.z[k][l][at_l] * s.tree.increment_to(l, child);
            }
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

/// Root-mean-square version of [`msolution_residual`] over sampled paths, maximized over `k`.
pub fn msolution_residual_rms<T: Scalar>(sol: &SchemeSolution<T>, increments: &IncrementBatch<T>) -> Result<T> {
    let n = sol.mesh.cells();
    let m = sol.paths;
    if increments.paths() != m || increments.mesh() != &sol.mesh {
        return Err(Error::ShapeMismatch("increments differ from the solution's paths".into()));
    }
    let mut worst = T::zero();
    for k in 0..n {
        let diag: Vec<T> = (0..m).map(|p| sol.y_diag(k, p)).collect();
        let mean = diag.iter().copied().fold(T::zero(), |a, b| a + b) / T::of_usize(m);
        let sq: Vec<T> = (0..m)
            .into_par_iter()
            .with_min_len(PATH_CHUNK)
            .map(|p| {
                let mut r = diag[p] - mean;
                for l in 0..k {
                    r = r - sol.z(k, l, p) * increments.get(p, l, 0);
                }
                r * r
            })
            .collect();
        let ms = sq.iter().copied().fold(T::zero(), |a, b| a + b) / T::of_usize(m);
        worst = worst.max(ms.sqrt());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
