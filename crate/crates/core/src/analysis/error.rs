//! The squared error functional of the scheme against a closed-form solution:
//!
//! ```text
//! sum_k E int_{t_k}^{t_{k+1}} |Y(t) - Y^pi(t_k, t_k)|^2 dt
//!   + sum_{k,l} E int_{t_k}^{t_{k+1}} int_{t_l}^{t_{l+1}} |Z(t,s) - Z^pi(t_k, t_l)|^2 ds dt
//! ```

use rayon::prelude::*;
use serde::Serialize;

use super::quadrature::{rect_central, QuadratureRule};
use crate::bsde_sys::brownian_levels;
use crate::error::{Error, Result};
use crate::model::ClosedFormSolution;
use crate::noise::{accumulate, IncrementBatch};
use crate::scalar::Scalar;
use crate::scheme::SchemeSolution;
use crate::stats::{batch_estimate, batch_means, Estimate};

const PATH_CHUNK: usize = 256;

/// Error functional of one mesh level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorEntry {
    pub n: usize,
    pub mesh_norm: f64,
    pub y_part: Estimate,
    pub z_part: Estimate,
    pub total: Estimate,
}

/// Brownian values at the quadrature nodes, `[node][path]`.
fn brownian_grid<T: Scalar>(sol: &SchemeSolution<T>, fine: Option<&IncrementBatch<T>>) -> Result<(Vec<Vec<T>>, usize)> {
    let mesh = sol.mesh();
    let n = mesh.cells();
    match (sol.tree(), fine) {
        (Some(tree), None) => {
            let levels = brownian_levels(tree);
            let leaves = tree.leaves();
            let grid = (0..=n)
                .map(|i| (0..leaves).map(|p| levels[i][p >> (n - i)]).collect())
                .collect();
            Ok((grid, 1))
        }
        (Some(_), Some(_)) => Err(Error::Unsupported(
            "tree solutions are evaluated on their own nodes (Q = 1, no fine increments)".into(),
        )),
        (None, None) => Err(Error::InvalidArgument(
            "Monte Carlo solutions need the fine-mesh increments they were coarsened from".into(),
        )),
        (None, Some(inc)) => {
            let fm = inc.mesh();
            let q = fm.cells() / n;
            if q == 0 || !mesh.is_refined_by(fm, q) {
                return Err(Error::ShapeMismatch("quadrature mesh is not a refinement of the scheme mesh".into()));
            }
            if inc.paths() != sol.paths() {
                return Err(Error::ShapeMismatch(format!(
                    "{} fine paths for a solution on {} paths",
                    inc.paths(),
                    sol.paths()
                )));
            }
            let pb = accumulate(inc);
            let m = inc.paths();
            let grid = (0..=fm.cells()).map(|i| (0..m).map(|p| pb.get(p, i, 0)).collect()).collect();
            Ok((grid, q))
        }
    }
}

/// Estimates the error functional of `sol` against `reference` by composite
/// quadrature with `rule` on the quadrature grid: the tree nodes themselves
/// (tree backend, `fine = None`), or the `Q`-fold refinement carrying `fine`,
/// the increments the scheme's increments were coarsened from.
///
/// For a deterministic reference `Z` the `Z` part is assembled from the
/// per-cell moments of `Z^pi` and a fine tensor rule for `Z`, so only the
/// sampling error of `Z^pi` remains.
pub fn scheme_error<T: Scalar>(
    sol: &SchemeSolution<T>,
    reference: &ClosedFormSolution<T>,
    fine: Option<&IncrementBatch<T>>,
    rule: QuadratureRule,
) -> Result<ErrorEntry> {
    let mesh = sol.mesh();
    let n = mesh.cells();
    let (grid, q) = brownian_grid(sol, fine)?;
    let w = rule.weights(q)?;
    let m = sol.paths();
    let batches = sol.stat_batches();
    let node_t: Vec<T> = match fine {
        Some(inc) => inc.mesh().points().to_vec(),
        None => mesh.points().to_vec(),
    };

    let y_path: Vec<f64> = (0..m)
        .into_par_iter()
        .with_min_len(PATH_CHUNK)
        .map(|p| {
            let mut acc = 0.0;
            for k in 0..n {
                let yk = sol.y_diag(k, p);
                let mut cell = 0.0;
                for (a, wa) in w.iter().enumerate() {
                    let i = k * q + a;
                    let d = (reference.y(node_t[i], grid[i][p]) - yk).as_f64();
                    cell += wa * d * d;
                }
                acc += mesh.dt(k).as_f64() * cell;
            }
            acc
        })
        .collect();
    let (y_means, counts) = batch_means(&y_path, batches);

    let z_means: Vec<f64> = if reference.z_is_deterministic() {
        let f = |t: f64, s: f64| reference.z(T::lit(t), T::lit(s), T::zero()).as_f64();
        let rects: Vec<(f64, f64, f64)> = (0..n)
            .flat_map(|k| (0..n).map(move |l| (k, l)))
            .map(|(k, l)| {
                let (t0, t1) = (mesh.t(k).as_f64(), mesh.t(k + 1).as_f64());
                let (s0, s1) = (mesh.t(l).as_f64(), mesh.t(l + 1).as_f64());
                let (mean, within) = rect_central(f, t0, t1, s0, s1);
                (mean, within, (t1 - t0) * (s1 - s0))
            })
            .collect();
        (0..batches)
            .map(|b| {
                let mut acc = 0.0;
                for k in 0..n {
                    for l in 0..n {
                        let (mean, within, area) = rects[k * n + l];
                        acc += sol.batch_sums(k, l)[b].square_error(mean, within, area);
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
                    for l in 0..n {
                        let zkl = sol.z(k, l, p);
                        let mut cell = 0.0;
                        for (a, wa) in w.iter().enumerate() {
                            let t = node_t[k * q + a];
                            for (b, wb) in w.iter().enumerate() {
                                let j = l * q + b;
                                let d = (reference.z(t, node_t[j], grid[j][p]) - zkl).as_f64();
                                cell += wa * wb * d * d;
                            }
                        }
                        acc += (mesh.dt(k) * mesh.dt(l)).as_f64() * cell;
                    }
                }
                acc
            })
            .collect();
        batch_means(&z_path, batches).0
    };

    let tot: Vec<f64> = y_means.iter().zip(&z_means).map(|(a, b)| a + b).collect();
    Ok(ErrorEntry {
        n,
        mesh_norm: mesh.mesh_norm().as_f64(),
        y_part: batch_estimate(&y_means, &counts),
        z_part: batch_estimate(&z_means, &counts),
        total: batch_estimate(&tot, &counts),
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use super::*;
    use crate::mesh::TimeMesh;
    use crate::model::{catalog, ProblemInstance, ZForm};
    use crate::noise::{generate_increments, NoiseKind};
    use crate::scheme::{solve_bsvie, solve_bsvie_tree, SolverOptions};

    fn inst(name: &str) -> ProblemInstance<f64> {
        catalog(name, &BTreeMap::new(), 1.0).unwrap()
    }

    #[test]
    fn martingale_on_tree() {
        // Y-part T dt / 2 under the trapezoid rule at the nodes; Z-part exactly 0.
        let mesh = TimeMesh::uniform(6, 1.0).unwrap();
        let a = inst("A_martingale");
        let sol = solve_bsvie_tree(&a, &mesh, &SolverOptions::default()).unwrap();
        let e = scheme_error(&sol, a.closed_form().unwrap(), None, QuadratureRule::Trapezoid).unwrap();
        assert!((e.y_part.value - 1.0 / 12.0).abs() < 1e-14, "{:?}", e);
        assert!(e.z_part.value.abs() < 1e-14);
        assert_eq!(e.total.std_error, 0.0);
        assert_eq!(e.n, 6);
        assert!(scheme_error(&sol, a.closed_form().unwrap(), None, QuadratureRule::Simpson).is_err());
    }

    #[test]
    fn self_consistent_reference_gives_zero() {
        let kappa = 1.5;
        let i = ProblemInstance::new(
            "constant",
            1.0,
            0.0,
            Arc::new(|_, _| 0.0),
            Arc::new(|_, _| 1.0),
            Arc::new(move |_, _, _| kappa),
            Arc::new(|_| 0.0),
        );
        let cf = ClosedFormSolution::new(Arc::new(move |_, _| kappa), ZForm::Deterministic(Arc::new(|_, _| 0.0)));
        let mesh = TimeMesh::uniform(4, 1.0).unwrap();
        let sol = solve_bsvie_tree(&i, &mesh, &SolverOptions::default()).unwrap();
        let e = scheme_error(&sol, &cf, None, QuadratureRule::Trapezoid).unwrap();
        assert_eq!(e.total.value, 0.0);
    }

    #[test]
    fn linear_z2_sampled() {
        let mesh = TimeMesh::uniform(4, 1.0).unwrap();
        let fine_mesh = mesh.refine(4).unwrap();
        let fine = generate_increments(&fine_mesh, 1, 20_000, NoiseKind::Gaussian, 4).unwrap();
        let coarse = fine.coarsen(&mesh, 4).unwrap();
        let e_inst = inst("E_linear_z2");
        let sol = solve_bsvie(&e_inst, &coarse, &SolverOptions::default()).unwrap();
        let e = scheme_error(&sol, e_inst.closed_form().unwrap(), Some(&fine), QuadratureRule::Simpson).unwrap();
        let expect = 0.25 / 2.0 + 0.0625 / 3.0;
        assert!(e.y_part.within(expect, 4.0), "{:?}", e);
        assert!(e.z_part.value.abs() < 1e-12);
        assert!(e.y_part.std_error > 0.0);
    }

    #[test]
    fn adapted_reference_uses_pathwise_quadrature() {
        let mesh = TimeMesh::uniform(4, 1.0).unwrap();
        let g = inst("GBM_terminal");
        let tree = solve_bsvie_tree(&g, &mesh, &SolverOptions::default()).unwrap();
        let e = scheme_error(&tree, g.closed_form().unwrap(), None, QuadratureRule::Trapezoid).unwrap();
        assert!(e.z_part.value > 0.0 && e.z_part.value < 0.1, "{:?}", e);
        assert_eq!(e.z_part.std_error, 0.0);
    }

    #[test]
    fn mismatched_inputs() {
        let mesh = TimeMesh::uniform(4, 1.0).unwrap();
        let a = inst("A_martingale");
        let inc = generate_increments(&mesh, 1, 2000, NoiseKind::Gaussian, 1).unwrap();
        let sol = solve_bsvie(&a, &inc, &SolverOptions::default()).unwrap();
        let cf = a.closed_form().unwrap();
        assert!(matches!(
            scheme_error(&sol, cf, None, QuadratureRule::Trapezoid),
            Err(Error::InvalidArgument(_))
        ));
        let other = generate_increments(&TimeMesh::uniform(6, 1.0).unwrap(), 1, 2000, NoiseKind::Gaussian, 1).unwrap();
        assert!(matches!(
            scheme_error(&sol, cf, Some(&other), QuadratureRule::Trapezoid),
            Err(Error::ShapeMismatch(_))
        ));
        let fewer = generate_increments(&mesh.refine(2).unwrap(), 1, 1000, NoiseKind::Gaussian, 1).unwrap();
        assert!(matches!(
            scheme_error(&sol, cf, Some(&fewer), QuadratureRule::Trapezoid),
            Err(Error::ShapeMismatch(_))
        ));
        // Q = 1 on the scheme's own increments is allowed.
        assert!(scheme_error(&sol, cf, Some(&inc), QuadratureRule::Trapezoid).is_ok());
    }
}
