//! A priori L2 bounds: the discrete solution norms relative to `M^2`, where `M`
//! bounds the data. The ratio should stay bounded under mesh refinement.

use serde::Serialize;

use crate::bsde_sys::BsdeSystemSolution;
use crate::scalar::Scalar;
use crate::scheme::{CellSums, SchemeSolution};

/// Discrete L2 norms of a solution.
pub trait L2Norms {
    /// `(sum_k dt_k E|Y(t_k, t_k)|^2, sum_{k,l} dt_k dt_l E|Z(t_k, t_l)|^2)`.
    fn l2_norms(&self) -> (f64, f64);
}

fn pooled(sums: &[CellSums]) -> CellSums {
    let mut acc = CellSums::default();
    sums.iter().for_each(|s| acc.add(s));
    acc
}

impl<T: Scalar> L2Norms for SchemeSolution<T> {
    fn l2_norms(&self) -> (f64, f64) {
        let mesh = self.mesh();
        let n = mesh.cells();
        let mut y = 0.0;
        let mut z = 0.0;
        for k in 0..n {
            let dk = mesh.dt(k).as_f64();
            y += dk * self.cell_summary(k, k).mean_y2;
            for l in 0..n {
                z += dk * mesh.dt(l).as_f64() * self.cell_summary(k, l).mean_z2;
            }
        }
        (y, z)
    }
}

/// For the system the `Y` norm uses `E sup_s |Y(t_k, s)|^2` and the `Z` norm
/// integrates over the inner mesh.
impl<T: Scalar> L2Norms for BsdeSystemSolution<T> {
    fn l2_norms(&self) -> (f64, f64) {
        let outer = self.outer();
        let inner = self.inner();
        let mut y = 0.0;
        let mut z = 0.0;
        for k in 0..outer.cells() {
            let dk = outer.dt(k).as_f64();
            let (count, sum) = self
                .sup_sums(k)
                .iter()
                .fold((0usize, 0.0), |(c, s), (bc, bs)| (c + bc, s + bs));
            y += dk * sum / count as f64;
            for j in 0..inner.cells() {
                let s = pooled(self.node_sums(k, j));
                z += dk * inner.dt(j).as_f64() * s.z2 / s.count as f64;
            }
        }
        (y, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AprioriReport {
    pub y_norm: f64,
    pub z_norm: f64,
    pub m_bound: f64,
    pub y_ratio: f64,
    pub z_ratio: f64,
    /// False when a norm or ratio is not finite.
    pub finite: bool,
}

/// Reports the norms of `sol` and their ratios to `m_bound^2`.
pub fn apriori_l2_check<S: L2Norms + ?Sized>(sol: &S, m_bound: f64) -> AprioriReport {
    let (y_norm, z_norm) = sol.l2_norms();
    let m2 = m_bound * m_bound;
    let y_ratio = y_norm / m2;
    let z_ratio = z_norm / m2;
    AprioriReport {
        y_norm,
        z_norm,
        m_bound,
        y_ratio,
        z_ratio,
        finite: [y_norm, z_norm, y_ratio, z_ratio].iter().all(|v| v.is_finite()),
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::bsde_sys::{solve_bsde_system_tree, SystemOptions};
    use crate::mesh::TimeMesh;
    use crate::model::catalog;
    use crate::scheme::{solve_bsvie_tree, SolverOptions};

    #[test]
    fn martingale_norms() {
        // E W(t_k)^2 = t_k: sum_k dt t_k = 0.4375 for N = 8, T = 1; Z = 1.
        let a = catalog::<f64>("A_martingale", &BTreeMap::new(), 1.0).unwrap();
        let mesh = TimeMesh::uniform(8, 1.0).unwrap();
        let sol = solve_bsvie_tree(&a, &mesh, &SolverOptions::default()).unwrap();
        let r = apriori_l2_check(&sol, 2.0);
        assert!((r.y_norm - 0.4375).abs() < 1e-14);
        assert!((r.z_norm - 1.0).abs() < 1e-14);
        assert!((r.y_ratio - 0.4375 / 4.0).abs() < 1e-14);
        assert!(r.finite);
        assert!(!apriori_l2_check(&sol, 0.0).finite);
    }

    #[test]
    fn system_ratio_stable_under_refinement() {
        let mut p = BTreeMap::new();
        p.insert("lambda".to_string(), 1.0);
        let c = catalog::<f64>("C_linear_y", &p, 1.0).unwrap();
        let norms: Vec<(f64, f64)> = [2usize, 4, 6]
            .iter()
            .map(|&n| {
                let mesh = TimeMesh::uniform(n, 1.0).unwrap();
                let opts = SystemOptions { refinement: 2, ..Default::default() };
                solve_bsde_system_tree(&c, &mesh, &opts).unwrap().l2_norms()
            })
            .collect();
        for w in norms.windows(2) {
            assert!((w[1].0 / w[0].0 - 1.0).abs() < 0.5, "{norms:?}");
            assert!((w[1].1 / w[0].1 - 1.0).abs() < 0.5, "{norms:?}");
        }
        assert!(norms.iter().all(|(y, z)| *y > 0.0 && *z > 0.0));
    }
}
