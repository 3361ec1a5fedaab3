use std::collections::BTreeMap;
use std::sync::Arc;

use super::oracle::brute_force_tree;
use super::*;
use crate::model::{catalog, exact_discrete_scheme};
use crate::noise::{accumulate, generate_increments, NoiseKind};

fn inst(name: &str) -> ProblemInstance<f64> {
    catalog(name, &BTreeMap::new(), 1.0).unwrap()
}

fn constant_instance(kappa: f64) -> ProblemInstance<f64> {
    ProblemInstance::new(
        "constant",
        1.0,
        0.0,
        Arc::new(|_, _| 0.0),
        Arc::new(|_, _| 1.0),
        Arc::new(move |_, _, _| kappa),
        Arc::new(|_| 0.0),
    )
}

fn max_table_diff(a: &SchemeSolution<f64>, b: &SchemeSolution<f64>) -> f64 {
    let n = a.mesh().cells();
    let mut worst = 0.0f64;
    for k in 0..n {
        for l in 0..=n {
            for (x, y) in a.tree_y(k, l).unwrap().iter().zip(b.tree_y(k, l).unwrap()) {
                worst = worst.max((x - y).abs());
            }
            if l < n {
                for (x, y) in a.tree_z(k, l).unwrap().iter().zip(b.tree_z(k, l).unwrap()) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    worst
}

#[test]
fn martingale_instance_on_tree() {
    let mesh = TimeMesh::uniform(4, 1.0).unwrap();
    let sol = solve_bsvie_tree(&inst("A_martingale"), &mesh, &SolverOptions::default()).unwrap();
    let tree = sol.tree().unwrap();
    for k in 0..4 {
        for l in 0..=4 {
            for (node, v) in sol.tree_y(k, l).unwrap().iter().enumerate() {
                assert!((v - tree.w_at(l, node)).abs() < 1e-15);
            }
        }
        for l in 0..4 {
            assert!(sol.tree_z(k, l).unwrap().iter().all(|z| (z - 1.0).abs() < 1e-15));
        }
    }
}

#[test]
fn linear_z2_root_value() {
    let mesh = TimeMesh::uniform(4, 1.0).unwrap();
    let sol = solve_bsvie_tree(&inst("E_linear_z2"), &mesh, &SolverOptions::default()).unwrap();
    assert!((sol.tree_y(0, 0).unwrap()[0] - 0.75).abs() < 1e-15);
}

#[test]
fn constant_terminal_value() {
    let mesh = TimeMesh::uniform(5, 1.0).unwrap();
    let c = constant_instance(2.5);
    let sol = solve_bsvie_tree(&c, &mesh, &SolverOptions::default()).unwrap();
    for k in 0..5 {
        for l in 0..5 {
            assert!(sol.tree_y(k, l).unwrap().iter().all(|v| *v == 2.5));
            assert!(sol.tree_z(k, l).unwrap().iter().all(|v| *v == 0.0));
        }
    }
    let inc = generate_increments(&mesh, 1, 1000, NoiseKind::Gaussian, 1).unwrap();
    let sol = solve_bsvie(&c, &inc, &SolverOptions::default()).unwrap();
    for p in [0, 17, 999] {
        assert!((sol.y_diag(2, p) - 2.5).abs() < 1e-12);
        assert!(sol.z(1, 3, p).abs() < 1e-12);
    }
    let brute = brute_force_tree(&constant_instance(5.0), &mesh).unwrap();
    assert!(brute.tree_y(0, 0).unwrap().iter().all(|v| *v == 5.0));
}

#[test]
fn tree_matches_brute_force_and_closed_form() {
    for name in ["A_martingale", "C_linear_y", "E_linear_z2"] {
        let instance = inst(name);
        for n in [4, 6, 8] {
            let mesh = TimeMesh::uniform(n, 1.0).unwrap();
            let sol = solve_bsvie_tree(&instance, &mesh, &SolverOptions::default()).unwrap();
            let brute = brute_force_tree(&instance, &mesh).unwrap();
            let d = max_table_diff(&sol, &brute);
            assert!(d <= 1e-12, "{name} N={n}: tree vs brute force {d}");
            let exact = exact_discrete_scheme(&instance, &mesh).unwrap();
            let tree = sol.tree().unwrap();
            for k in 0..n {
                for l in 0..=n {
                    for (node, v) in sol.tree_y(k, l).unwrap().iter().enumerate() {
                        let e = exact.y(k, l, tree.w_at(l, node));
                        assert!((v - e).abs() <= 1e-12, "{name} N={n} Y({k},{l})");
                    }
                }
                for l in 0..n {
                    for v in sol.tree_z(k, l).unwrap() {
                        assert!((v - exact.z(k, l)).abs() <= 1e-12, "{name} N={n} Z({k},{l})");
                    }
                }
            }
        }
    }
}

#[test]
fn gbm_tree_matches_brute_force() {
    let mesh = TimeMesh::uniform(7, 1.0).unwrap();
    let g = inst("GBM_terminal");
    let d = max_table_diff(
        &solve_bsvie_tree(&g, &mesh, &SolverOptions::default()).unwrap(),
        &brute_force_tree(&g, &mesh).unwrap(),
    );
    assert!(d <= 1e-12);
    assert!(brute_force_tree(&g, &TimeMesh::uniform(11, 1.0).unwrap()).is_err());
}

#[test]
fn msolution_identity_on_tree() {
    for name in Catalog::NAMES {
        for n in 2..=8 {
            let mesh = TimeMesh::uniform(n, 1.0).unwrap();
            let sol = solve_bsvie_tree(&inst(name), &mesh, &SolverOptions::default()).unwrap();
            let r = msolution_residual(&sol).unwrap();
            assert!(r <= 1e-12, "{name} N={n}: {r}");
        }
    }
    let mesh = TimeMesh::uniform(4, 1.0).unwrap();
    let sol = solve_bsvie_tree(&constant_instance(1.0), &mesh, &SolverOptions::default()).unwrap();
    assert_eq!(msolution_residual(&sol).unwrap(), 0.0);
    let inc = generate_increments(&mesh, 1, 1000, NoiseKind::Gaussian, 2).unwrap();
    let sol = solve_bsvie(&inst("E_linear_z2"), &inc, &SolverOptions::default()).unwrap();
    let e = msolution_residual(&sol).unwrap_err();
    assert!(e.to_string().contains("identity only exact in tree mode"));
    // Here the residual is just the sample mean of W(t_k).
    let rms = msolution_residual_rms(&sol, &inc).unwrap();
    assert!(rms > 0.0 && rms < 4.0 * (1.0f64 / 1000.0).sqrt(), "{rms}");
}

use crate::model::Catalog;

#[test]
fn rows_read_only_completed_rows() {
    let mesh = TimeMesh::uniform(6, 1.0).unwrap();
    let opts = SolverOptions {
        record_access: true,
        ..Default::default()
    };
    let tree_sol = solve_bsvie_tree(&inst("E_linear_z2"), &mesh, &opts).unwrap();
    let inc = generate_increments(&mesh, 1, 1000, NoiseKind::Gaussian, 3).unwrap();
    let mc_sol = solve_bsvie(&inst("E_linear_z2"), &inc, &opts).unwrap();
    for sol in [&tree_sol, &mc_sol] {
        let log = sol.access_log();
        assert_eq!(log.len(), 6 * 5 / 2);
        for w in log.windows(2) {
            assert!((w[0].k, w[0].l) > (w[1].k, w[1].l), "cells must be visited backward");
        }
        for rec in log {
            for read in &rec.reads {
                let row = match *read {
                    Access::Diagonal { row } => row,
                    Access::Cross { row, .. } => row,
                };
                assert!(row > rec.k);
                assert!(row == rec.l);
            }
        }
    }
}

#[test]
fn terminal_column_is_exact() {
    let g = inst("GBM_terminal");
    let mesh = TimeMesh::uniform(5, 1.0).unwrap();
    let sol = solve_bsvie_tree(&g, &mesh, &SolverOptions::default()).unwrap();
    let tree = sol.tree().unwrap();
    let xs = crate::forward::euler_maruyama_tree(&g, tree).unwrap();
    for k in 0..5 {
        let col = sol.tree_y(k, 5).unwrap();
        for (node, v) in col.iter().enumerate() {
            let expect = g.free_term(mesh.t(k), xs[k][node >> (5 - k)], xs[5][node]);
            assert_eq!(v.to_bits(), expect.to_bits());
        }
    }
}

#[test]
fn cross_term_unused_by_type_one_driver() {
    let c = inst("C_linear_y");
    let mesh = TimeMesh::uniform(6, 1.0).unwrap();
    let on = SolverOptions::default();
    let off = SolverOptions {
        retain_cross: false,
        ..on
    };
    let a = solve_bsvie_tree(&c, &mesh, &on).unwrap();
    let b = solve_bsvie_tree(&c, &mesh, &off).unwrap();
    for k in 0..6 {
        for l in k..=6 {
            assert_eq!(a.tree_y(k, l), b.tree_y(k, l));
        }
    }
    let inc = generate_increments(&mesh, 1, 1200, NoiseKind::Gaussian, 4).unwrap();
    let a = solve_bsvie(&c, &inc, &on).unwrap();
    let b = solve_bsvie(&c, &inc, &off).unwrap();
    for k in 0..6 {
        for p in 0..1200 {
            assert_eq!(a.y_diag(k, p), b.y_diag(k, p));
        }
    }
    // A Type-II driver does read the cross term.
    let e = inst("E_linear_z2");
    assert!(matches!(
        solve_bsvie_tree(&e, &mesh, &off),
        Err(Error::AtCell { module: "scheme", .. })
    ));
}

#[test]
fn regression_reproduces_exact_discrete_values() {
    let mesh = TimeMesh::uniform(8, 1.0).unwrap();
    let inc = generate_increments(&mesh, 1, 4000, NoiseKind::Gaussian, 5).unwrap();
    let w = accumulate(&inc);
    for name in ["A_martingale", "C_linear_y", "E_linear_z2"] {
        let instance = inst(name);
        let sol = solve_bsvie(&instance, &inc, &SolverOptions::default()).unwrap();
        let exact = exact_discrete_scheme(&instance, &mesh).unwrap();
        for k in 0..8 {
            for p in (0..4000).step_by(97) {
                let e = exact.y(k, k, w.get(p, k, 0));
                assert!((sol.y_diag(k, p) - e).abs() < 1e-8, "{name} Y({k},{k})");
                for l in 0..8 {
                    assert!((sol.z(k, l, p) - exact.z(k, l)).abs() < 1e-8, "{name} Z({k},{l})");
                    assert!((sol.y(k, l, p).unwrap() - exact.y(k, l, w.get(p, l, 0))).abs() < 1e-8);
                }
            }
        }
    }
}

#[test]
fn regression_reproduces_gbm_expectations() {
    // Y(t_k,t_k) = E_k[X(t_N)] = X(t_k) (1 + mu dt)^{N-k} for Euler states.
    let g = inst("GBM_terminal");
    let n = 6;
    let mesh = TimeMesh::uniform(n, 1.0).unwrap();
    let inc = generate_increments(&mesh, 1, 3000, NoiseKind::Gaussian, 6).unwrap();
    let sol = solve_bsvie(&g, &inc, &SolverOptions::default()).unwrap();
    let x = sol.states().unwrap();
    let growth = 1.0 + 0.1 / n as f64;
    for k in 0..n {
        for p in (0..3000).step_by(101) {
            let expect = x.get(p, k) * growth.powi((n - k) as i32);
            assert!((sol.y_diag(k, p) - expect).abs() < 1e-9);
            let zexp = 0.4 * x.get(p, 3) * growth.powi((n - 4) as i32);
            assert!((sol.z(k, 3, p) - zexp).abs() < 1e-9);
        }
    }
}

#[test]
fn now_projection_is_consistent() {
    let mesh = TimeMesh::uniform(4, 1.0).unwrap();
    let inc = generate_increments(&mesh, 1, 40_000, NoiseKind::Gaussian, 7).unwrap();
    let opts = SolverOptions {
        regression: RegressionConfig {
            projection: Projection::Now,
            ..Default::default()
        },
        ..Default::default()
    };
    let sol = solve_bsvie(&inst("E_linear_z2"), &inc, &opts).unwrap();
    assert!((sol.y_diag(0, 0) - 0.75).abs() < 0.03);
    assert!((sol.cell_summary(1, 2).mean_z - 1.0).abs() < 0.05);
    assert!(sol.y(1, 2, 0).is_err());
}

#[test]
fn solutions_are_deterministic_across_pools() {
    let mesh = TimeMesh::uniform(6, 1.0).unwrap();
    let inc = generate_increments(&mesh, 1, 5000, NoiseKind::Gaussian, 8).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| solve_bsvie(&inst("GBM_terminal"), &inc, &SolverOptions::default()).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.summary(), b.summary());
    for p in 0..5000 {
        assert_eq!(a.y_diag(0, p).to_bits(), b.y_diag(0, p).to_bits());
    }
}

#[test]
fn cell_summary_matches_tree_moments() {
    // Instance A: E[Y(t_k,t_l)^2] = E[W(t_l)^2] = t_l.
    let mesh = TimeMesh::uniform(5, 1.0).unwrap();
    let sol = solve_bsvie_tree(&inst("A_martingale"), &mesh, &SolverOptions::default()).unwrap();
    for k in 0..5 {
        for l in 0..5 {
            let s = sol.cell_summary(k, l);
            assert!(s.mean_y.abs() < 1e-14);
            assert!((s.mean_y2 - mesh.t(l)).abs() < 1e-14);
            assert!((s.mean_z - 1.0).abs() < 1e-14);
        }
    }
    assert_eq!(sol.summary().len(), 25);
}

#[test]
fn rejects_bad_inputs() {
    let mesh = TimeMesh::uniform(16, 1.0).unwrap();
    assert!(matches!(
        solve_bsvie_tree(&inst("A_martingale"), &mesh, &SolverOptions::default()),
        Err(Error::TreeTooDeep { .. })
    ));
    let mesh2 = TimeMesh::uniform(4, 2.0).unwrap();
    assert!(solve_bsvie_tree(&inst("A_martingale"), &mesh2, &SolverOptions::default()).is_err());
    let mesh = TimeMesh::uniform(4, 1.0).unwrap();
    let inc = generate_increments(&mesh, 1, 100, NoiseKind::Gaussian, 9).unwrap();
    let e = solve_bsvie(&inst("E_linear_z2"), &inc, &SolverOptions::default()).unwrap_err();
    assert!(matches!(e, Error::AtCell { module: "scheme", k: 3, l: 3, .. }), "{e}");
}

#[test]
fn f32_solutions() {
    let mesh = TimeMesh::<f32>::uniform(4, 1.0).unwrap();
    let e = catalog::<f32>("E_linear_z2", &BTreeMap::new(), 1.0).unwrap();
    let sol = solve_bsvie_tree(&e, &mesh, &SolverOptions::default()).unwrap();
    assert!((sol.tree_y(0, 0).unwrap()[0] - 0.75).abs() < 1e-6);
}

#[test]
fn merged_cell_sums_keep_the_spread() {
    let zs = [3.0 + 1e-9, 3.0 - 1e-9, 3.0 + 2e-9, 3.0];
    let mut parts = [CellSums::new(2, zs[0]), CellSums::new(2, zs[2])];
    for (i, z) in zs.iter().enumerate() {
        parts[i / 2].push(1.0, 0.0, *z);
    }
    let mut tot = CellSums::default();
    parts.iter().for_each(|p| tot.add(p));
    let (m, v) = tot.z_mean_var();
    let mean = zs.iter().sum::<f64>() / 4.0;
    let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / 4.0;
    assert!((m - mean).abs() < 1e-15);
    assert!((v - var).abs() < 1e-6 * var, "{v} vs {var}");
    assert_eq!(tot.count, 4);
    // Exact Z matching a constant reference leaves only the reference spread.
    let mut exact = CellSums::new(3, 0.7);
    (0..3).for_each(|_| exact.push(1.0, 0.0, 0.7));
    assert_eq!(exact.square_error(0.7, 0.0, 0.25), 0.0);
}
