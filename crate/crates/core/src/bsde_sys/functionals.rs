//! Functionals built on the system: the cell averages `Zbar`, the
//! `L^2`-time regularity moduli and the distance to a closed-form solution.

use rayon::prelude::*;
use serde::Serialize;

use super::BsdeSystemSolution;
use crate::analysis::quadrature::{rect_central, QuadratureRule};
use crate::condexp::{self, fit_lsmc, RegressionConfig};
use crate::error::{Error, Result};
use crate::mesh::TimeMesh;
use crate::model::ClosedFormSolution;
use crate::noise::{accumulate, IncrementBatch};
use crate::scalar::Scalar;
use crate::scheme::STAT_BATCHES;
use crate::stats::{batch_estimate, batch_means, Estimate};

const PATH_CHUNK: usize = 256;

/// `Zbar(t_k, t_l) = E_{t_l}[ (1/dt_l) int_{t_l}^{t_{l+1}} Z(t_k, s) ds ]`, with
/// `Z(t_k, .)` the inner-mesh step function of the system.
#[derive(Debug, Clone, Copy)]
pub struct ZBar<'a, T> {
    sol: &'a BsdeSystemSolution<T>,
}

pub fn zbar<T: Scalar>(sol: &BsdeSystemSolution<T>) -> ZBar<'_, T> {
    ZBar { sol }
}

impl<T: Scalar> ZBar<'_, T> {
    pub fn cells(&self) -> usize {
        self.sol.outer().cells()
    }

    /// Value on path `p` (a leaf index in tree mode).
    pub fn value(&self, k: usize, l: usize, p: usize) -> T {
        self.sol.zbar_value(k, l, p)
    }

    /// `E[Zbar(t_k, t_l)]`.
    pub fn mean(&self, k: usize, l: usize) -> f64 {
        let (c, s) = self
            .sol
            .zbar_sums(k, l)
            .iter()
            .fold((0usize, 0.0), |(c, s), b| (c + b.count, s + b.zbar));
        s / c.max(1) as f64
    }

    /// Means of every cell, `[k][l]`.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        let n = self.cells();
        (0..n).map(|k| (0..n).map(|l| self.mean(k, l)).collect()).collect()
    }
}

/// Monte Carlo estimate of
/// `E[ int |Y(t) - Y(tau(t), t)|^2 dt + int int |Z(t,s) - Z(tau(t), s)|^2 ds dt ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApproxError {
    pub y_part: Estimate,
    pub z_part: Estimate,
    pub total: Estimate,
}

/// `E(Y; pi)` and `E(Z; pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moduli {
    pub e_y: Estimate,
    pub e_z: Estimate,
    pub total: Estimate,
}

fn combine(y: &[f64], z: &[f64], counts: &[usize]) -> (Estimate, Estimate, Estimate) {
    let tot: Vec<f64> = y.iter().zip(z).map(|(a, b)| a + b).collect();
    (batch_estimate(y, counts), batch_estimate(z, counts), batch_estimate(&tot, counts))
}

fn det_z<T: Scalar>(reference: &ClosedFormSolution<T>) -> impl Fn(f64, f64) -> f64 + '_ {
    move |t, s| reference.z(T::lit(t), T::lit(s), T::zero()).as_f64()
}

/// Distance between the system and a closed-form solution, by quadrature on
/// the inner mesh (Simpson when `R` is even, trapezoid otherwise).
pub fn bsde_approx_error<T: Scalar>(sol: &BsdeSystemSolution<T>, reference: &ClosedFormSolution<T>) -> Result<ApproxError> {
    let (outer, inner, r) = (sol.outer(), sol.inner(), sol.refinement());
    let n = outer.cells();
    let ni = inner.cells();
    let m = sol.paths();
    let batches = sol.stat_batches();
    let w = QuadratureRule::default_for(r).weights(r)?;

    let y_path: Vec<f64> = (0..m)
        .into_par_iter()
        .with_min_len(PATH_CHUNK)
        .map(|p| {
            let mut acc = 0.0;
            for k in 0..n {
                let dtk = outer.dt(k).as_f64();
                for (q, wq) in w.iter().enumerate() {
                    let j = k * r + q;
                    let d = (reference.y(inner.t(j), sol.w(j, p)) - sol.diag_y(k, q, p)).as_f64();
                    acc += dtk * wq * d * d;
                }
            }
            acc
        })
        .collect();
    let (y_means, counts) = batch_means(&y_path, batches);

    let z_means: Vec<f64> = if reference.z_is_deterministic() {
        let f = det_z(reference);
        let rects: Vec<(f64, f64, f64)> = (0..n)
            .flat_map(|k| (0..ni).map(move |j| (k, j)))
            .map(|(k, j)| {
                let (t0, t1) = (outer.t(k).as_f64(), outer.t(k + 1).as_f64());
                let (s0, s1) = (inner.t(j).as_f64(), inner.t(j + 1).as_f64());
                let (mean, within) = rect_central(&f, t0, t1, s0, s1);
                (mean, within, (t1 - t0) * (s1 - s0))
            })
            .collect();
        (0..batches)
            .map(|b| {
                let mut acc = 0.0;
                for k in 0..n {
                    for j in 0..ni {
                        let (mean, within, area) = rects[k * ni + j];
                        acc += sol.node_sums(k, j)[b].square_error(mean, within, area);
                    }
                }
                acc
            })
            .collect()
    } else {
        let z_path: Vec<f64> = (0..m)
            .into_par_iter()
            .with_min_len(PATH_CHUNK)
            .map(|p| {
                let mut acc = 0.0;
                for k in 0..n {
                    let dtk = outer.dt(k).as_f64();
                    for j in 0..ni {
                        let (sj, ds) = (inner.t(j), inner.dt(j).as_f64());
                        let zs = sol.z(k, j, p);
                        let ws = sol.w(j, p);
                        for (q, wq) in w.iter().enumerate() {
                            let d = (reference.z(inner.t(k * r + q), sj, ws) - zs).as_f64();
                            acc += dtk * ds * wq * d * d;
                        }
                    }
                }
                acc
            })
            .collect();
        batch_means(&z_path, batches).0
    };
    let (y_part, z_part, total) = combine(&y_means, &z_means, &counts);
    Ok(ApproxError { y_part, z_part, total })
}

/// What the regularity moduli are measured on.
#[derive(Debug, Clone, Copy)]
pub enum ModuliReference<'a, T> {
    /// A closed-form solution sampled along `increments`, which live on a
    /// `Q`-fold refinement of the outer mesh (the quadrature grid).
    ClosedForm {
        solution: &'a ClosedFormSolution<T>,
        increments: &'a IncrementBatch<T>,
    },
    /// The system itself as a proxy: `Y(t) = Y(tau(t), t)`, `Z(t, s) = Z(tau(t), s)`.
    System(&'a BsdeSystemSolution<T>),
}

/// Monte Carlo estimates of `E(Y; pi)` and `E(Z; pi)` on the outer mesh `outer`.
/// Conditional expectations of cell averages use `regression`.
pub fn regularity_moduli<T: Scalar>(
    reference: ModuliReference<'_, T>,
    outer: &TimeMesh<T>,
    regression: &RegressionConfig,
) -> Result<Moduli> {
    match reference {
        ModuliReference::ClosedForm { solution, increments } => closed_form_moduli(solution, increments, outer, regression),
        ModuliReference::System(sol) => system_moduli(sol, outer, regression),
    }
}

fn closed_form_moduli<T: Scalar>(
    reference: &ClosedFormSolution<T>,
    increments: &IncrementBatch<T>,
    outer: &TimeMesh<T>,
    regression: &RegressionConfig,
) -> Result<Moduli> {
    let fine = increments.mesh();
    let n = outer.cells();
    let q = fine.cells() / n;
    if q == 0 || !outer.is_refined_by(fine, q) {
        return Err(Error::ShapeMismatch("quadrature mesh does not refine the outer mesh".into()));
    }
    let w = QuadratureRule::default_for(q).weights(q)?;
    let m = increments.paths();
    let batches = STAT_BATCHES.min(m);
    let pb = accumulate(increments);
    let wn: Vec<Vec<T>> = (0..=fine.cells()).map(|i| (0..m).map(|p| pb.get(p, i, 0)).collect()).collect();

    let mut ey = vec![0.0f64; m];
    for k in 0..n {
        let kq = k * q;
        let yv: Vec<Vec<T>> = (0..=q)
            .map(|a| {
                let t = fine.t(kq + a);
                wn[kq + a].iter().map(|&x| reference.y(t, x)).collect()
            })
            .collect();
        let avg: Vec<T> = (0..m)
            .map(|p| w.iter().zip(&yv).fold(T::zero(), |acc, (wa, v)| acc + T::lit(*wa) * v[p]))
            .collect();
        let fit = fit_lsmc(regression, &[&wn[kq][..]], &avg).map_err(|e| e.at("analysis", k, k))?;
        let dtk = outer.dt(k).as_f64();
        let wk = &wn[kq];
        ey.par_iter_mut().with_min_len(PATH_CHUNK).enumerate().for_each(|(p, e)| {
            let yb = fit.eval(&[wk[p].as_f64()]);
            let mut acc = 0.0;
            for (wa, v) in w.iter().zip(&yv) {
                let d = v[p].as_f64() - yb;
                acc += wa * d * d;
            }
            *e += dtk * acc;
        });
    }
    let (y_means, counts) = batch_means(&ey, batches);

    let z_means: Vec<f64> = if reference.z_is_deterministic() {
        let f = det_z(reference);
        let mut total = 0.0;
        for k in 0..n {
            for l in 0..n {
                let (t0, t1) = (outer.t(k).as_f64(), outer.t(k + 1).as_f64());
                let (s0, s1) = (outer.t(l).as_f64(), outer.t(l + 1).as_f64());
                total += rect_central(&f, t0, t1, s0, s1).1;
            }
        }
        vec![total; counts.len()]
    } else {
        let mut ez = vec![0.0f64; m];
        for k in 0..n {
            for l in 0..n {
                let (kq, lq) = (k * q, l * q);
                // Z on the (q+1)^2 sub-grid of the cell, per path.
                let zv: Vec<Vec<T>> = (0..=q)
                    .flat_map(|a| (0..=q).map(move |b| (a, b)))
                    .map(|(a, b)| {
                        let (t, s) = (fine.t(kq + a), fine.t(lq + b));
                        wn[lq + b].iter().map(|&x| reference.z(t, s, x)).collect()
                    })
                    .collect();
                let ww: Vec<f64> = (0..=q)
                    .flat_map(|a| (0..=q).map(move |b| (a, b)))
                    .map(|(a, b)| w[a] * w[b])
                    .collect();
                let avg: Vec<T> = (0..m)
                    .map(|p| ww.iter().zip(&zv).fold(T::zero(), |acc, (c, v)| acc + T::lit(*c) * v[p]))
                    .collect();
                let fit = fit_lsmc(regression, &[&wn[lq][..]], &avg).map_err(|e| e.at("analysis", k, l))?;
                let area = (outer.dt(k) * outer.dt(l)).as_f64();
                let wl = &wn[lq];
                ez.par_iter_mut().with_min_len(PATH_CHUNK).enumerate().for_each(|(p, e)| {
                    let zb = fit.eval(&[wl[p].as_f64()]);
                    let mut acc = 0.0;
                    for (c, v) in ww.iter().zip(&zv) {
                        let d = v[p].as_f64() - zb;
                        acc += c * d * d;
                    }
                    *e += area * acc;
                });
            }
        }
        batch_means(&ez, batches).0
    };
    let (e_y, e_z, total) = combine(&y_means, &z_means, &counts);
    Ok(Moduli { e_y, e_z, total })
}

fn system_moduli<T: Scalar>(sol: &BsdeSystemSolution<T>, outer: &TimeMesh<T>, regression: &RegressionConfig) -> Result<Moduli> {
    if sol.outer() != outer {
        return Err(Error::ShapeMismatch("system was solved on a different outer mesh".into()));
    }
    let n = outer.cells();
    let r = sol.refinement();
    let ni = sol.inner().cells();
    let m = sol.paths();
    let batches = sol.stat_batches();
    let w = QuadratureRule::default_for(r).weights(r)?;

    let mut ey = vec![0.0f64; m];
    for k in 0..n {
        let kr = k * r;
        let top = kr + r;
        let ybar: Vec<T> = match sol.tree() {
            Some(tree) => {
                let mut v: Vec<T> = (0..tree.nodes_at(top))
                    .map(|node| {
                        let leaf = node << (ni - top);
                        w.iter()
                            .enumerate()
                            .fold(T::zero(), |acc, (q, wq)| acc + T::lit(*wq) * sol.diag_y(k, q, leaf))
                    })
                    .collect();
                for lev in (kr..top).rev() {
                    v = condexp::tree_condexp(tree, lev, &v).map_err(|e| e.at("analysis", k, lev))?;
                }
                (0..m).map(|leaf| v[leaf >> (ni - kr)]).collect()
            }
            None => {
                let states = sol.states().expect("Monte Carlo system keeps its states");
                let avg: Vec<T> = (0..m)
                    .map(|p| {
                        w.iter()
                            .enumerate()
                            .fold(T::zero(), |acc, (q, wq)| acc + T::lit(*wq) * sol.diag_y(k, q, p))
                    })
                    .collect();
                let fit = fit_lsmc(regression, &[states.node(kr)], &avg).map_err(|e| e.at("analysis", k, k))?;
                let xk = states.node(kr);
                (0..m).map(|p| T::lit(fit.eval(&[xk[p].as_f64()]))).collect()
            }
        };
        let dtk = outer.dt(k).as_f64();
        ey.par_iter_mut().with_min_len(PATH_CHUNK).enumerate().for_each(|(p, e)| {
            let mut acc = 0.0;
            for (q, wq) in w.iter().enumerate() {
                let d = (sol.diag_y(k, q, p) - ybar[p]).as_f64();
                acc += wq * d * d;
            }
            *e += dtk * acc;
        });
    }
    let (y_means, counts) = batch_means(&ey, batches);
    let z_means: Vec<f64> = (0..batches)
        .map(|b| {
            let mut acc = 0.0;
            for k in 0..n {
                let dtk = outer.dt(k).as_f64();
                for l in 0..n {
                    let s = &sol.zbar_sums(k, l)[b];
                    acc += dtk * s.deviation / s.count as f64;
                }
            }
            acc
        })
        .collect();
    let (e_y, e_z, total) = combine(&y_means, &z_means, &counts);
    Ok(Moduli { e_y, e_z, total })
}
