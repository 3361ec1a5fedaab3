//! The BSDE-system approximation of a Type-II BSVIE. For each outer node
//! `t_k` the pair `(Y(t_k, .), Z(t_k, .))` solves a BSDE on `[0, T]`:
//!
//! ```text
//! Y(t_k, s) = psi(t_k, X(t_k), X(T))
//!           + int_s^T g(t_k, r, X(t_k), X(r), Y(tau(r), r), Z(t_k, r), I[Z(tau(r), .)](t_k)) 1{r >= t_{k+1}} dr
//!           - int_s^T Z(t_k, r) dW(r)
//! ```
//!
//! where `tau(r)` is the outer node at or before `r` and `I[f](t_k)` is the
//! average of `f` over `[t_k, t_{k+1})`. Every row is an explicit backward
//! Euler sweep on an inner mesh refining the outer one by a factor `R`; the
//! coupling terms come from rows `l > k`, which are complete.

mod functionals;

pub use functionals::{bsde_approx_error, regularity_moduli, zbar, ApproxError, Moduli, ModuliReference, ZBar};

use rayon::prelude::*;

use crate::condexp::{self, fit_lsmc, LsmcFit, Projection, RegressionConfig};
use crate::error::{Error, Result};
use crate::forward::{euler_maruyama, euler_maruyama_tree, StatePaths};
use crate::mesh::TimeMesh;
use crate::model::{DriverArgs, ProblemInstance};
use crate::noise::{accumulate, IncrementBatch, TreeEnsemble, DEFAULT_TREE_CAP};
use crate::scalar::Scalar;
use crate::scheme::{
    batch_sums, check_horizon, euler_step, feature_slices, features_at, later_moments, Backend, CellSums, PATH_CHUNK,
    STAT_BATCHES,
};
use crate::stats::batch_bounds;

pub const DEFAULT_REFINEMENT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemOptions {
    /// Inner steps per outer cell.
    pub refinement: usize,
    pub regression: RegressionConfig,
    pub tree_cap: usize,
}

impl Default for SystemOptions {
    fn default() -> Self {
        Self {
            refinement: DEFAULT_REFINEMENT,
            regression: RegressionConfig::default(),
            tree_cap: DEFAULT_TREE_CAP,
        }
    }
}

/// Per-batch sums for the cell average `Zbar(t_k, t_l)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ZBarSums {
    pub count: usize,
    pub zbar: f64,
    pub zbar2: f64,
    /// `sum_j ds_j (Z(t_k, s_j) - Zbar(t_k, t_l))^2` over the inner nodes of cell `l`.
    pub deviation: f64,
}

#[derive(Debug, Clone)]
struct TreeSys<T> {
    tree: TreeEnsemble<T>,
    /// `y[k][j][node]` for inner levels `j = 0..=N R`.
    y: Vec<Vec<Vec<T>>>,
    /// `z[k][j][node]` for `j < N R`.
    z: Vec<Vec<Vec<T>>>,
    /// `zbar[k][l][node]` at inner level `l R`.
    zbar: Vec<Vec<Vec<T>>>,
    /// `W(s_j)` per level and node.
    w: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
struct LsmcSys<T> {
    instance: ProblemInstance<T>,
    states: StatePaths<T>,
    moments: Vec<Vec<f64>>,
    /// Fit of `Y(t_k, s_j)` on the features at `s_j`, `j = 1..=N R`.
    later: Vec<Vec<Option<LsmcFit>>>,
    /// `Y(t_k, 0)`, deterministic.
    y0: Vec<T>,
    /// `Y(t_k, s_{kR + q})` per path, `q = 0..=R`.
    diag: Vec<Vec<Vec<T>>>,
    /// Fit of `Zbar(t_k, t_l)` on the features at `t_l`.
    zbar: Vec<Vec<LsmcFit>>,
    /// `W(s_j)` per inner node and path.
    brownian: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
enum SysStore<T> {
    Tree(TreeSys<T>),
    Lsmc(LsmcSys<T>),
}

/// Output of the BSDE-system solver.
#[derive(Debug, Clone)]
pub struct BsdeSystemSolution<T> {
    outer: TimeMesh<T>,
    inner: TimeMesh<T>,
    refinement: usize,
    paths: usize,
    store: SysStore<T>,
    /// `[k][j][batch]` sums of `Y(t_k, s_j)` and `Z(t_k, s_j)`, `j < N R`.
    stats: Vec<Vec<Vec<CellSums>>>,
    /// `[k][l][batch]`.
    zbar_stats: Vec<Vec<Vec<ZBarSums>>>,
    /// `[k][batch]` sums of `sup_s |Y(t_k, s)|^2` with path counts.
    sup_stats: Vec<Vec<(usize, f64)>>,
}

impl<T: Scalar> BsdeSystemSolution<T> {
    pub fn outer(&self) -> &TimeMesh<T> {
        &self.outer
    }

    pub fn inner(&self) -> &TimeMesh<T> {
        &self.inner
    }

    pub fn refinement(&self) -> usize {
        self.refinement
    }

    /// Sampled paths, or `2^{N R}` tree leaves.
    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn backend(&self) -> Backend {
        match self.store {
            SysStore::Tree(_) => Backend::Tree,
            SysStore::Lsmc(_) => Backend::Lsmc,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.store, SysStore::Tree(_))
    }

    pub fn tree(&self) -> Option<&TreeEnsemble<T>> {
        match &self.store {
            SysStore::Tree(s) => Some(&s.tree),
            SysStore::Lsmc(_) => None,
        }
    }

    /// Forward states on the inner mesh (Monte Carlo backend).
    pub fn states(&self) -> Option<&StatePaths<T>> {
        match &self.store {
            SysStore::Lsmc(s) => Some(&s.states),
            SysStore::Tree(_) => None,
        }
    }

    fn levels(&self) -> usize {
        self.inner.cells()
    }

    /// `Y(t_k, s_j)` on path `p` (a leaf index in tree mode).
    pub fn y(&self, k: usize, j: usize, p: usize) -> Result<T> {
        let (n, ni, r) = (self.outer.cells(), self.levels(), self.refinement);
        if k >= n || j > ni {
            return Err(Error::InvalidArgument(format!("node ({k},{j}) outside the grid")));
        }
        match &self.store {
            SysStore::Tree(s) => Ok(s.y[k][j][p >> (ni - j)]),
            SysStore::Lsmc(s) => {
                if j >= k * r && j <= (k + 1) * r {
                    return Ok(s.diag[k][j - k * r][p]);
                }
                if j == 0 {
                    return Ok(s.y0[k]);
                }
                let fit = s.later[k][j].as_ref().expect("fit stored for every inner node");
                let x = features_at(&s.states, k * r, j, p);
                Ok(T::lit(fit.eval(x.as_slice())))
            }
        }
    }

    /// `Y(t_k, s_{kR + q})`, `q = 0..=R`: the row on its own outer cell.
    pub fn diag_y(&self, k: usize, q: usize, p: usize) -> T {
        let (ni, r) = (self.levels(), self.refinement);
        match &self.store {
            SysStore::Tree(s) => {
                let j = k * r + q;
                s.y[k][j][p >> (ni - j)]
            }
            SysStore::Lsmc(s) => s.diag[k][q][p],
        }
    }

    /// `Z(t_k, s_j)` on path `p`, `j < N R`.
    pub fn z(&self, k: usize, j: usize, p: usize) -> T {
        let ni = self.levels();
        match &self.store {
            SysStore::Tree(s) => s.z[k][j][p >> (ni - j)],
            SysStore::Lsmc(s) => {
                let r = self.refinement;
                let fit = s.later[k][j + 1].as_ref().expect("fit stored for every inner node");
                let st = euler_step(&s.instance, &self.inner, &s.states, j, p);
                let (_, e1) = later_moments(fit, st, &s.states, k * r, j, p, &s.moments[j]);
                T::lit(e1) / self.inner.dt(j)
            }
        }
    }

    /// `Zbar(t_k, t_l)` on path `p`.
    pub fn zbar_value(&self, k: usize, l: usize, p: usize) -> T {
        let (ni, r) = (self.levels(), self.refinement);
        match &self.store {
            SysStore::Tree(s) => s.zbar[k][l][p >> (ni - l * r)],
            SysStore::Lsmc(s) => {
                let x = features_at(&s.states, k * r, l * r, p);
                T::lit(s.zbar[k][l].eval(x.as_slice()))
            }
        }
    }

    /// `W(s_j)` on path `p`.
    pub fn w(&self, j: usize, p: usize) -> T {
        match &self.store {
            SysStore::Tree(s) => s.w[j][p >> (self.levels() - j)],
            SysStore::Lsmc(s) => s.brownian[j][p],
        }
    }

    pub fn node_sums(&self, k: usize, j: usize) -> &[CellSums] {
        &self.stats[k][j]
    }

    pub fn zbar_sums(&self, k: usize, l: usize) -> &[ZBarSums] {
        &self.zbar_stats[k][l]
    }

    /// Per-batch `(paths, sum of sup_s |Y(t_k, s)|^2)`.
    pub fn sup_sums(&self, k: usize) -> &[(usize, f64)] {
        &self.sup_stats[k]
    }

    pub fn stat_batches(&self) -> usize {
        self.sup_stats.first().map_or(0, |b| b.len())
    }
}

pub(crate) fn brownian_levels<T: Scalar>(tree: &TreeEnsemble<T>) -> Vec<Vec<T>> {
    let mut w = vec![vec![T::zero()]];
    for level in 0..tree.depth() {
        let prev = &w[level];
        let next = (0..tree.nodes_at(level + 1))
            .map(|child| prev[child >> 1] + tree.increment_to(level, child))
            .collect();
        w.push(next);
    }
    w
}

fn check_refinement<T: Scalar>(outer: &TimeMesh<T>, options: &SystemOptions) -> Result<TimeMesh<T>> {
    if options.refinement < 1 {
        return Err(Error::InvalidArgument("refinement must be at least 1".into()));
    }
    outer.refine(options.refinement)
}

/// Solves the system with exact conditional expectations on the binary tree over the inner mesh.
pub fn solve_bsde_system_tree<T: Scalar>(
    instance: &ProblemInstance<T>,
    outer: &TimeMesh<T>,
    options: &SystemOptions,
) -> Result<BsdeSystemSolution<T>> {
    let inner = check_refinement(outer, options)?;
    check_horizon(instance, outer)?;
    let tree = TreeEnsemble::with_cap(&inner, options.tree_cap)?;
    let xs = euler_maruyama_tree(instance, &tree)?;
    let r = options.refinement;
    let n = outer.cells();
    let ni = inner.cells();
    let mut y: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
    let mut z: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
    let mut zbar: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
    let mut zbar_stats = vec![Vec::new(); n];
    // iavg[l][k]: row l averaged over outer cell k < l, at inner level (k+1)R - 1.
    let mut iavg: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
    let leaves = tree.leaves();

    for k in (0..n).rev() {
        let kr = k * r;
        let tk = outer.t(k);
        let mut row_y: Vec<Vec<T>> = vec![Vec::new(); ni + 1];
        let mut row_z: Vec<Vec<T>> = vec![Vec::new(); ni];
        row_y[ni] = (0..tree.nodes_at(ni))
            .map(|node| instance.free_term(tk, xs[kr][node >> (ni - kr)], xs[ni][node]))
            .collect();
        for j in (0..ni).rev() {
            let at = |e: Error| e.at("bsde_sys", k, j);
            let ds = inner.dt(j);
            let mean = condexp::tree_condexp(&tree, j, &row_y[j + 1]).map_err(at)?;
            let zz = condexp::tree_cond_z(&tree, j, &row_y[j + 1], ds).map_err(at)?;
            let vals = if j >= kr + r {
                let l = j / r;
                let frontier: &[T] = &y[l][j];
                let cross: &[T] = &iavg[l][k];
                let cross_level = (k + 1) * r - 1;
                let sj = inner.t(j);
                let mut out = Vec::with_capacity(mean.len());
                for node in 0..mean.len() {
                    let g = instance.driver(DriverArgs {
                        t: tk,
                        s: sj,
                        x_t: xs[kr][node >> (j - kr)],
                        x_s: xs[j][node],
                        y: frontier[node],
                        z: zz[node],
                        z_swapped: cross[node >> (j - cross_level)],
                    });
                    let v = mean[node] + ds * g;
                    if !v.is_finite() {
                        return Err(at(Error::non_finite(format!("driver at node {node}"))));
                    }
                    out.push(v);
                }
                out
            } else {
                mean
            };
            row_y[j] = vals;
            row_z[j] = zz;
        }
        // Cell averages of Z(t_k, .) and their conditional expectations.
        let mut row_iavg = vec![Vec::new(); k];
        let mut row_zbar = vec![Vec::new(); n];
        let mut row_zstats = vec![Vec::new(); n];
        for l in 0..n {
            let lo = l * r;
            let hi = (l + 1) * r - 1;
            let dtl = outer.dt(l);
            let avg: Vec<T> = (0..tree.nodes_at(hi))
                .map(|node| {
                    (lo..=hi).fold(T::zero(), |acc, j| acc + inner.dt(j) / dtl * row_z[j][node >> (hi - j)])
                })
                .collect();
            let mut cond = avg.clone();
            for lev in (lo..hi).rev() {
                cond = condexp::tree_condexp(&tree, lev, &cond).map_err(|e| e.at("bsde_sys", k, lev))?;
            }
            let w_hi = (1usize << (ni - hi)) as f64;
            let w_lo = (1usize << (ni - lo)) as f64;
            let mut sums = ZBarSums {
                count: leaves,
                ..Default::default()
            };
            for v in &cond {
                let v = v.as_f64();
                sums.zbar += w_lo * v;
                sums.zbar2 += w_lo * v * v;
            }
            for node in 0..avg.len() {
                let zb = cond[node >> (hi - lo)];
                let dev = (lo..=hi).fold(T::zero(), |acc, j| {
                    let d = row_z[j][node >> (hi - j)] - zb;
                    acc + inner.dt(j) * d * d
                });
                sums.deviation += w_hi * dev.as_f64();
            }
            row_zstats[l] = vec![sums];
            row_zbar[l] = cond;
            if l < k {
                row_iavg[l] = avg;
            }
        }
        y[k] = row_y;
        z[k] = row_z;
        zbar[k] = row_zbar;
        zbar_stats[k] = row_zstats;
        iavg[k] = row_iavg;
    }

    let stats = (0..n)
        .map(|k| {
            (0..ni)
                .map(|j| {
                    let w = (1usize << (ni - j)) as f64;
                    let mut s = CellSums::new(leaves, z[k][j].first().map_or(0.0, |v| v.as_f64()));
                    for (yv, zv) in y[k][j].iter().zip(&z[k][j]) {
                        s.push(w, yv.as_f64(), zv.as_f64());
                    }
                    vec![s]
                })
                .collect()
        })
        .collect();
    let sup_stats = (0..n)
        .map(|k| {
            let total: f64 = (0..leaves)
                .map(|leaf| {
                    (0..=ni)
                        .map(|j| {
                            let v = y[k][j][leaf >> (ni - j)].as_f64();
                            v * v
                        })
                        .fold(0.0, f64::max)
                })
                .sum();
            vec![(leaves, total)]
        })
        .collect();
    Ok(BsdeSystemSolution {
        outer: outer.clone(),
        inner,
        refinement: r,
        paths: leaves,
        store: SysStore::Tree(TreeSys { w: brownian_levels(&tree), tree, y, z, zbar }),
        stats,
        zbar_stats,
        sup_stats,
    })
}

/// Solves the system on sampled paths. `increments` must live on the inner
/// mesh `outer.refine(R)`; conditional expectations use the later projection.
pub fn solve_bsde_system<T: Scalar>(
    instance: &ProblemInstance<T>,
    outer: &TimeMesh<T>,
    increments: &IncrementBatch<T>,
    options: &SystemOptions,
) -> Result<BsdeSystemSolution<T>> {
    let inner = check_refinement(outer, options)?;
    let reg = &options.regression;
    reg.validate()?;
    if reg.projection != Projection::Later {
        return Err(Error::Unsupported("the system solver uses the later projection".into()));
    }
    check_horizon(instance, outer)?;
    if increments.mesh() != &inner {
        return Err(Error::ShapeMismatch("increments must live on the refined inner mesh".into()));
    }
    let states = euler_maruyama(instance, increments)?;
    let r = options.refinement;
    let n = outer.cells();
    let ni = inner.cells();
    let m = increments.paths();
    let batches = STAT_BATCHES.min(m);
    let law = increments.law();
    let moments: Vec<Vec<f64>> = (0..ni).map(|j| law.moments(inner.dt(j).as_f64(), reg.degree + 1)).collect();
    let states = &states;
    let transitions: Vec<Vec<(T, T)>> = (0..ni)
        .map(|j| {
            (0..m)
                .into_par_iter()
                .with_min_len(PATH_CHUNK)
                .map(|p| euler_step(instance, &inner, states, j, p))
                .collect()
        })
        .collect();

    let mut later: Vec<Vec<Option<LsmcFit>>> = vec![Vec::new(); n];
    let mut y0 = vec![T::zero(); n];
    let mut diag: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
    let mut iavg: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
    let mut zbar_fits: Vec<Vec<LsmcFit>> = vec![Vec::new(); n];
    let mut stats = vec![Vec::new(); n];
    let mut zbar_stats = vec![Vec::new(); n];
    let mut sup_stats = vec![Vec::new(); n];

    for k in (0..n).rev() {
        let kr = k * r;
        let tk = outer.t(k);
        let xk = states.node(kr);
        let mut cur: Vec<T> = xk
            .iter()
            .zip(states.node(ni))
            .map(|(&a, &b)| instance.free_term(tk, a, b))
            .collect();
        if let Some(p) = cur.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("terminal value at path {p}")).at("bsde_sys", k, ni));
        }
        let mut sup: Vec<T> = cur.iter().map(|v| *v * *v).collect();
        let mut row_later: Vec<Option<LsmcFit>> = vec![None; ni + 1];
        let mut row_diag: Vec<Vec<T>> = vec![Vec::new(); r + 1];
        let mut row_iavg: Vec<Vec<T>> = vec![Vec::new(); k];
        let mut row_zbar: Vec<Option<LsmcFit>> = vec![None; n];
        let mut row_zstats = vec![Vec::new(); n];
        let mut row_stats = vec![Vec::new(); ni];
        let mut cell_z: Vec<Vec<T>> = Vec::with_capacity(r);
        for j in (0..ni).rev() {
            let at = |e: Error| e.at("bsde_sys", k, j);
            if j + 1 == kr + r {
                row_diag[r] = cur.clone();
            }
            let ds = inner.dt(j);
            let fit = fit_lsmc(reg, &feature_slices(states, kr, j + 1), &cur).map_err(at)?;
            let mom = &moments[j];
            let trans = &transitions[j];
            let (mean, zv): (Vec<T>, Vec<T>) = (0..m)
                .into_par_iter()
                .with_min_len(PATH_CHUNK)
                .map(|p| {
                    let (e0, e1) = later_moments(&fit, trans[p], states, kr, j, p, mom);
                    (T::lit(e0), T::lit(e1) / ds)
                })
                .unzip();
            row_later[j + 1] = Some(fit);
            let next: Vec<T> = if j >= kr + r {
                let l = j / r;
                let frontier = &diag[l][j - l * r];
                let cross = &iavg[l][k];
                let sj = inner.t(j);
                let xj = states.node(j);
                (0..m)
                    .into_par_iter()
                    .with_min_len(PATH_CHUNK)
                    .map(|p| {
                        let g = instance.driver(DriverArgs {
                            t: tk,
                            s: sj,
                            x_t: xk[p],
                            x_s: xj[p],
                            y: frontier[p],
                            z: zv[p],
                            z_swapped: cross[p],
                        });
                        mean[p] + ds * g
                    })
                    .collect()
            } else {
                mean
            };
            if let Some(p) = next.iter().chain(&zv).position(|v| !v.is_finite()) {
                return Err(at(Error::non_finite(format!("backward step at path {}", p % m))));
            }
            row_stats[j] = batch_sums(&next, &zv, batches);
            for (s, v) in sup.iter_mut().zip(&next) {
                *s = s.max(*v * *v);
            }
            if j >= kr && j < kr + r {
                row_diag[j - kr] = next.clone();
            }
            cell_z.push(zv);
            let l = j / r;
            if j == l * r {
                // All of outer cell l is done: average, project, and record.
                let lo = l * r;
                let dtl = outer.dt(l);
                // cell_z holds j = (l+1)R-1 down to lR.
                let avg: Vec<T> = (0..m)
                    .map(|p| {
                        cell_z
                            .iter()
                            .enumerate()
                            .fold(T::zero(), |acc, (i, zs)| acc + inner.dt(lo + r - 1 - i) / dtl * zs[p])
                    })
                    .collect();
                let fz = fit_lsmc(reg, &feature_slices(states, kr, lo), &avg).map_err(|e| e.at("bsde_sys", k, lo))?;
                let zb: Vec<T> = (0..m)
                    .into_par_iter()
                    .with_min_len(PATH_CHUNK)
                    .map(|p| T::lit(fz.eval(features_at(states, kr, lo, p).as_slice())))
                    .collect();
                row_zstats[l] = (0..batches)
                    .map(|b| {
                        let (bl, bh) = batch_bounds(m, batches, b);
                        let mut s = ZBarSums {
                            count: bh - bl,
                            ..Default::default()
                        };
                        for p in bl..bh {
                            let v = zb[p].as_f64();
                            s.zbar += v;
                            s.zbar2 += v * v;
                            for (i, zs) in cell_z.iter().enumerate() {
                                let d = (zs[p] - zb[p]).as_f64();
                                s.deviation += inner.dt(lo + r - 1 - i).as_f64() * d * d;
                            }
                        }
                        s
                    })
                    .collect();
                row_zbar[l] = Some(fz);
                if l < k {
                    row_iavg[l] = avg;
                }
                cell_z.clear();
            }
            cur = next;
        }
        y0[k] = cur[0];
        sup_stats[k] = (0..batches)
            .map(|b| {
                let (lo, hi) = batch_bounds(m, batches, b);
                (hi - lo, sup[lo..hi].iter().map(|v| v.as_f64()).sum())
            })
            .collect();
        later[k] = row_later;
        diag[k] = row_diag;
        iavg[k] = row_iavg;
        zbar_fits[k] = row_zbar.into_iter().map(|f| f.expect("every cell projected")).collect();
        stats[k] = row_stats;
        zbar_stats[k] = row_zstats;
    }
    drop(transitions);
    let pb = accumulate(increments);
    let brownian = (0..=ni).map(|j| (0..m).map(|p| pb.get(p, j, 0)).collect()).collect();
    let store = LsmcSys {
        brownian,
        instance: instance.clone(),
        states: states.clone(),
        moments,
        later,
        y0,
        diag,
        zbar: zbar_fits,
    };
    Ok(BsdeSystemSolution {
        outer: outer.clone(),
        inner,
        refinement: r,
        paths: m,
        store: SysStore::Lsmc(store),
        stats,
        zbar_stats,
        sup_stats,
    })
}
