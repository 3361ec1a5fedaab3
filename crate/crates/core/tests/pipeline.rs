//! End-to-end runs through the public API.

use std::collections::BTreeMap;

use bsvie_core::analysis::{apriori_l2_check, scheme_error, QuadratureRule};
use bsvie_core::bsde_sys::{bsde_approx_error, solve_bsde_system_tree, SystemOptions};
use bsvie_core::mesh::TimeMesh;
use bsvie_core::model::{catalog, exact_discrete_scheme, Catalog};
use bsvie_core::noise::{generate_increments, NoiseKind};
use bsvie_core::report::ConvergenceReport;
use bsvie_core::scheme::oracle::brute_force_tree;
use bsvie_core::scheme::{msolution_residual, solve_bsvie, solve_bsvie_tree, SolverOptions};
use bsvie_core::{ProblemInstance64, TimeMesh64};

fn instance(name: &str) -> ProblemInstance64 {
    catalog(name, &BTreeMap::new(), 1.0).unwrap()
}

#[test]
fn tree_matches_both_oracles_at_every_node() {
    for name in ["A_martingale", "C_linear_y", "E_linear_z2"] {
        let inst = instance(name);
        let mesh = TimeMesh64::uniform(5, 1.0).unwrap();
        let sol = solve_bsvie_tree(&inst, &mesh, &SolverOptions::default()).unwrap();
        let brute = brute_force_tree(&inst, &mesh).unwrap();
        let exact = exact_discrete_scheme(&inst, &mesh).unwrap();
        let tree = sol.tree().unwrap();
        for k in 0..5 {
            for l in k..=5 {
                let ours = sol.tree_y(k, l).unwrap();
                let theirs = brute.tree_y(k, l).unwrap();
                for (node, (a, b)) in ours.iter().zip(theirs).enumerate() {
                    assert!((a - b).abs() < 1e-12, "{name} ({k},{l})");
                    let e = exact.y(k, l, tree.w_at(l, node));
                    assert!((a - e).abs() < 1e-10, "{name} ({k},{l}) vs exact");
                }
            }
        }
    }
}

#[test]
fn msolution_identity_for_catalog() {
    for name in Catalog::NAMES {
        let inst = instance(name);
        for n in [2, 5, 8] {
            let mesh = TimeMesh64::uniform(n, 1.0).unwrap();
            let sol = solve_bsvie_tree(&inst, &mesh, &SolverOptions::default()).unwrap();
            assert!(msolution_residual(&sol).unwrap() <= 1e-12, "{name} N={n}");
            let report = apriori_l2_check(&sol, 2.0);
            assert!(report.finite, "{name} N={n}");
        }
    }
}

#[test]
fn single_precision_solves() {
    let inst = catalog::<f32>("E_linear_z2", &BTreeMap::new(), 1.0).unwrap();
    let mesh = TimeMesh::<f32>::uniform(4, 1.0).unwrap();
    let sol = solve_bsvie_tree(&inst, &mesh, &SolverOptions::default()).unwrap();
    let exact = exact_discrete_scheme(&inst, &mesh).unwrap();
    let tree = sol.tree().unwrap();
    for (node, v) in sol.tree_y(0, 0).unwrap().iter().enumerate() {
        assert!((v - exact.y(0, 0, tree.w_at(0, node))).abs() < 1e-5);
    }
}

#[test]
fn coarse_levels_share_fine_noise() {
    // E on coupled levels: the Y part tracks dt/2 + dt^2/3 and the report fits a slope.
    let inst = instance("E_linear_z2");
    let fine_mesh = TimeMesh64::uniform(16, 1.0).unwrap();
    let fine = generate_increments(&fine_mesh, 1, 4000, NoiseKind::Gaussian, 3).unwrap();
    let mut entries = Vec::new();
    for n in [2usize, 4, 8] {
        let mesh = TimeMesh64::uniform(n, 1.0).unwrap();
        let inc = fine.coarsen(&mesh, 16 / n).unwrap();
        let sol = solve_bsvie(&inst, &inc, &SolverOptions::default()).unwrap();
        let e = scheme_error(&sol, inst.closed_form().unwrap(), Some(&fine), QuadratureRule::Simpson).unwrap();
        let dt = 1.0 / n as f64;
        assert!(e.y_part.within(dt / 2.0 + dt * dt / 3.0, 4.0), "N={n}: {e:?}");
        entries.push(e);
    }
    let report = ConvergenceReport::new("E_linear_z2", entries);
    let slope = report.fit.unwrap().slope;
    assert!(slope > 0.8 && slope < 1.3, "{slope}");
}

#[test]
fn system_error_shrinks_with_the_outer_mesh() {
    let inst = instance("E_linear_z2");
    let errs: Vec<f64> = [2usize, 4, 6]
        .iter()
        .map(|&n| {
            let mesh = TimeMesh64::uniform(n, 1.0).unwrap();
            let opts = SystemOptions { refinement: 2, ..Default::default() };
            let sol = solve_bsde_system_tree(&inst, &mesh, &opts).unwrap();
            bsde_approx_error(&sol, inst.closed_form().unwrap()).unwrap().total.value
        })
        .collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
}
