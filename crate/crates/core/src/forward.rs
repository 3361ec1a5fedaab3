//! Forward Euler-Maruyama simulation `X(t_{k+1}) = X(t_k) + b dt_k + sigma dW_k`
//! and exact simulators for catalog state processes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::TimeMesh;
use crate::model::ProblemInstance;
use crate::noise::{IncrementBatch, TreeEnsemble};
use crate::scalar::Scalar;

const PATH_CHUNK: usize = 1024;

/// Scalar state paths, stored node-major so that a time slice is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePaths<T> {
    mesh: TimeMesh<T>,
    paths: usize,
    values: Vec<T>,
}

impl<T: Scalar> StatePaths<T> {
    /// `values` laid out `[node][path]`.
    pub fn from_values(mesh: TimeMesh<T>, paths: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != (mesh.cells() + 1) * paths {
            return Err(Error::ShapeMismatch(format!(
                "expected {} state values, got {}",
                (mesh.cells() + 1) * paths,
                values.len()
            )));
        }
        Ok(Self { mesh, paths, values })
    }

    pub fn mesh(&self) -> &TimeMesh<T> {
        &self.mesh
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    /// All paths at node `k`.
    #[inline]
    pub fn node(&self, k: usize) -> &[T] {
        &self.values[k * self.paths..(k + 1) * self.paths]
    }

    #[inline]
    pub fn get(&self, p: usize, k: usize) -> T {
        self.values[k * self.paths + p]
    }
}

fn check_scalar_noise<T: Scalar>(increments: &IncrementBatch<T>, instance: &ProblemInstance<T>) -> Result<()> {
    if increments.dim() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "scalar state needs one noise component, got {}",
            increments.dim()
        )));
    }
    if increments.mesh().horizon() != instance.horizon {
        return Err(Error::ShapeMismatch("mesh horizon differs from instance horizon".into()));
    }
    Ok(())
}

/// Transposes path-major chunks into node-major storage.
fn assemble<T: Scalar>(mesh: &TimeMesh<T>, paths: usize, per_path: Vec<Vec<T>>) -> StatePaths<T> {
    let nodes = mesh.cells() + 1;
    let mut values = vec![T::zero(); nodes * paths];
    for (p, row) in per_path.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            values[k * paths + p] = v;
        }
    }
    StatePaths {
        mesh: mesh.clone(),
        paths,
        values,
    }
}

/// Euler-Maruyama states driven by `increments`.
pub fn euler_maruyama<T: Scalar>(
    instance: &ProblemInstance<T>,
    increments: &IncrementBatch<T>,
) -> Result<StatePaths<T>> {
    check_scalar_noise(increments, instance)?;
    let mesh = increments.mesh();
    let n = mesh.cells();
    let paths = increments.paths();
    let rows: Vec<Result<Vec<T>>> = (0..paths)
        .into_par_iter()
        .with_min_len(PATH_CHUNK)
        .map(|p| {
            let dw = increments.path(p);
            let mut row = Vec::with_capacity(n + 1);
            let mut x = instance.x0;
            row.push(x);
            for k in 0..n {
                let t = mesh.t(k);
                x = x + instance.drift(t, x) * mesh.dt(k) + instance.diffusion(t, x) * dw[k];
                if !x.is_finite() {
                    return Err(Error::non_finite(format!("euler_maruyama at path {p}, step {k}")));
                }
                row.push(x);
            }
            Ok(row)
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(assemble(mesh, paths, rows))
}

/// Exact states `X(t_k) = F(t_k, W(t_k))` for instances with a closed-form transition.
pub fn exact_paths<T: Scalar>(
    instance: &ProblemInstance<T>,
    increments: &IncrementBatch<T>,
) -> Result<StatePaths<T>> {
    check_scalar_noise(increments, instance)?;
    let map = instance
        .exact_state()
        .ok_or_else(|| Error::Unsupported(format!("instance `{}` has no exact state map", instance.name)))?;
    let mesh = increments.mesh();
    let n = mesh.cells();
    let rows: Vec<Vec<T>> = (0..increments.paths())
        .into_par_iter()
        .with_min_len(PATH_CHUNK)
        .map(|p| {
            let dw = increments.path(p);
            let mut row = Vec::with_capacity(n + 1);
            let mut w = T::zero();
            row.push(instance.x0);
            for k in 0..n {
                w = w + dw[k];
                row.push(map(mesh.t(k + 1), w));
            }
            row
        })
        .collect();
    Ok(assemble(mesh, increments.paths(), rows))
}

/// Euler-Maruyama states on every node of a binary tree, `[level][node]`.
pub fn euler_maruyama_tree<T: Scalar>(
    instance: &ProblemInstance<T>,
    tree: &TreeEnsemble<T>,
) -> Result<Vec<Vec<T>>> {
    let mesh = tree.mesh();
    if mesh.horizon() != instance.horizon {
        return Err(Error::ShapeMismatch("mesh horizon differs from instance horizon".into()));
    }
    let mut levels = vec![vec![instance.x0]];
    for k in 0..mesh.cells() {
        let t = mesh.t(k);
        let parent = &levels[k];
        let mut next = Vec::with_capacity(2 * parent.len());
        for child in 0..2 * parent.len() {
            let x = parent[child / 2];
            let v = x + instance.drift(t, x) * mesh.dt(k)
                + instance.diffusion(t, x) * tree.increment_to(k, child);
            if !v.is_finite() {
                return Err(Error::non_finite(format!("euler_maruyama_tree at node {child}, step {k}")));
            }
            next.push(v);
        }
        levels.push(next);
    }
    Ok(levels)
}

/// Squared strong error `max_k mean_p |X(t_k) - X^pi(t_k)|^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongError<T> {
    pub value: T,
    /// Monte Carlo standard error of the maximizing node's mean.
    pub std_error: T,
    pub node: usize,
}

/// Mean squared difference at node `k` and its standard error.
pub fn squared_error_at<T: Scalar>(em: &StatePaths<T>, exact: &StatePaths<T>, k: usize) -> Result<(T, T)> {
    if em.paths != exact.paths || em.mesh != exact.mesh {
        return Err(Error::ShapeMismatch("state paths differ in mesh or path count".into()));
    }
    let sq: Vec<T> = em
        .node(k)
        .iter()
        .zip(exact.node(k))
        .map(|(a, b)| (*a - *b) * (*a - *b))
        .collect();
    Ok(crate::stats::mean_and_se(&sq))
}

pub fn forward_strong_error<T: Scalar>(em: &StatePaths<T>, exact: &StatePaths<T>) -> Result<StrongError<T>> {
    let mut best = StrongError {
        value: T::zero(),
        std_error: T::zero(),
        node: 0,
    };
    for k in 0..=em.mesh.cells() {
        let (mean, se) = squared_error_at(em, exact, k)?;
        if k == 0 || mean > best.value {
            best = StrongError {
                value: mean,
                std_error: se,
                node: k,
            };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::catalog;
    use crate::noise::{generate_increments, tree_enumerate, IncrementLaw, NoiseKind};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn gbm(mu: f64, sigma: f64, x0: f64) -> ProblemInstance<f64> {
        let p: BTreeMap<String, f64> = [("mu", mu), ("sigma", sigma), ("x0", x0)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        catalog("GBM_terminal", &p, 1.0).unwrap()
    }

    fn single_step(dw: f64) -> IncrementBatch<f64> {
        let mesh = TimeMesh::from_points(vec![0.0, 0.25, 1.0]).unwrap();
        IncrementBatch::from_values(mesh, 1, 1, NoiseKind::Gaussian, IncrementLaw::Gaussian, 0, vec![dw, 0.0]).unwrap()
    }

    #[test]
    fn brownian_state_is_cumulative_sum() {
        let a = catalog::<f64>("A_martingale", &BTreeMap::new(), 1.0).unwrap();
        let mesh = TimeMesh::uniform(8, 1.0).unwrap();
        let inc = generate_increments(&mesh, 1, 10, NoiseKind::Gaussian, 3).unwrap();
        let em = euler_maruyama(&a, &inc).unwrap();
        let ex = exact_paths(&a, &inc).unwrap();
        let w = crate::noise::accumulate(&inc);
        for p in 0..10 {
            for k in 0..=8 {
                assert!((em.get(p, k) - w.get(p, k, 0)).abs() < 1e-14);
            }
        }
        assert_eq!(em, ex);
        assert_eq!(forward_strong_error(&em, &ex).unwrap().value, 0.0);
    }

    #[test]
    fn gbm_one_step_examples() {
        let inst = gbm(0.0, 1.0, 1.0);
        let inc = single_step(0.5);
        let em = euler_maruyama(&inst, &inc).unwrap();
        assert!((em.get(0, 1) - 1.5).abs() < 1e-15);
        let ex = exact_paths(&inst, &inc).unwrap();
        assert!((ex.get(0, 1) - 1.45499).abs() < 1e-5);
        let (err, se) = squared_error_at(&em, &ex, 1).unwrap();
        assert!((err - 0.00203).abs() < 1e-5);
        assert_eq!(se, 0.0);
        // The second step has no noise, so the gap widens there.
        assert_eq!(forward_strong_error(&em, &ex).unwrap().node, 2);
    }

    #[test]
    fn deterministic_drift() {
        let mesh = TimeMesh::uniform(4, 1.0).unwrap();
        let inst = ProblemInstance::new(
            "ode",
            1.0f64,
            0.0,
            Arc::new(|_, _| 1.0),
            Arc::new(|_, _| 1.0),
            Arc::new(|_, _, x| x),
            Arc::new(|_| 0.0),
        );
        let inc = IncrementBatch::from_values(mesh, 1, 1, NoiseKind::Gaussian, IncrementLaw::Gaussian, 0, vec![0.0; 4]).unwrap();
        let em = euler_maruyama(&inst, &inc).unwrap();
        assert!((em.get(0, 4) - 1.0).abs() < 1e-15);

        let inst = gbm(1.0, 0.0, 1.0);
        let mesh = TimeMesh::uniform(4, 1.0).unwrap();
        let inc = generate_increments(&mesh, 1, 2, NoiseKind::Gaussian, 1).unwrap();
        let ex = exact_paths(&inst, &inc).unwrap();
        for k in 0..=4 {
            assert!((ex.get(1, k) - mesh.t(k).exp()).abs() < 1e-14);
        }
        let em = euler_maruyama(&inst, &inc).unwrap();
        assert!((em.get(0, 4) - 1.25f64.powi(4)).abs() < 1e-14);
    }

    #[test]
    fn errors() {
        let inst = gbm(0.1, 0.4, 1.0);
        let mesh = TimeMesh::uniform(4, 1.0).unwrap();
        let inc = generate_increments(&mesh, 2, 3, NoiseKind::Gaussian, 1).unwrap();
        assert!(euler_maruyama(&inst, &inc).is_err());
        let blowup = ProblemInstance::new(
            "blowup",
            1.0,
            1.0,
            Arc::new(|_, x: f64| x * 1e300),
            Arc::new(|_, _| 0.0),
            Arc::new(|_, _, x| x),
            Arc::new(|_| 0.0),
        );
        let inc = generate_increments(&mesh, 1, 3, NoiseKind::Gaussian, 1).unwrap();
        let e = euler_maruyama(&blowup, &inc).unwrap_err();
        assert!(e.to_string().contains("step 1"), "{e}");
        assert!(exact_paths(&blowup, &inc).is_err());
        let a = euler_maruyama(&inst, &inc).unwrap();
        let inc4 = generate_increments(&mesh, 1, 4, NoiseKind::Gaussian, 1).unwrap();
        let b = euler_maruyama(&inst, &inc4).unwrap();
        assert!(forward_strong_error(&a, &b).is_err());
    }

    #[test]
    fn tree_states_match_leaf_paths() {
        let inst = gbm(0.1, 0.4, 1.0);
        let mesh = TimeMesh::uniform(5, 1.0).unwrap();
        let tree = tree_enumerate(&mesh).unwrap();
        let levels = euler_maruyama_tree(&inst, &tree).unwrap();
        let leaves = euler_maruyama(&inst, &tree.to_increments()).unwrap();
        for leaf in 0..tree.leaves() {
            for k in 0..=5 {
                let node = TreeEnsemble::<f64>::ancestor(leaf, 5, k);
                assert!((levels[k][node] - leaves.get(leaf, k)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn strong_error_shrinks_under_refinement() {
        let inst = gbm(0.1, 0.4, 1.0);
        let fine = TimeMesh::uniform(16, 1.0).unwrap();
        let coarse = TimeMesh::uniform(8, 1.0).unwrap();
        let inc = generate_increments(&fine, 1, 20_000, NoiseKind::Gaussian, 5).unwrap();
        let e16 = forward_strong_error(&euler_maruyama(&inst, &inc).unwrap(), &exact_paths(&inst, &inc).unwrap())
            .unwrap();
        let cinc = inc.coarsen(&coarse, 2).unwrap();
        let e8 = forward_strong_error(&euler_maruyama(&inst, &cinc).unwrap(), &exact_paths(&inst, &cinc).unwrap())
            .unwrap();
        let ratio = e8.value / e16.value;
        assert!((1.3..=3.1).contains(&ratio), "ratio {ratio}");
    }
}
