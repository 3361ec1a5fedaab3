//! Direct evaluation of the scheme on all `2^N` binary paths: every
//! conditional expectation is a plain average over the leaves that share the
//! path prefix, with no node tables and no regression.

use super::{tree_solution, SchemeSolution};
use crate::error::{Error, Result};
use crate::forward::euler_maruyama;
use crate::mesh::TimeMesh;
use crate::model::{DriverArgs, ProblemInstance};
use crate::noise::TreeEnsemble;
use crate::scalar::Scalar;

/// Largest depth accepted by [`brute_force_tree`].
pub const BRUTE_FORCE_CAP: usize = 10;

/// Average of `v` (and of `v * dw / dt`) over every block of `size` consecutive leaves.
fn prefix_average<T: Scalar>(v: &[T], dw: &[T], size: usize, dt: T) -> (Vec<T>, Vec<T>) {
    let mut mean = vec![T::zero(); v.len()];
    let mut z = vec![T::zero(); v.len()];
    let n = T::of_usize(size);
    for start in (0..v.len()).step_by(size) {
        let mut s = T::zero();
        let mut sz = T::zero();
        for i in start..start + size {
            s = s + v[i];
            sz = sz + v[i] * dw[i];
        }
        for i in start..start + size {
            mean[i] = s / n;
            z[i] = sz / n / dt;
        }
    }
    (mean, z)
}

pub fn brute_force_tree<T: Scalar>(instance: &ProblemInstance<T>, mesh: &TimeMesh<T>) -> Result<SchemeSolution<T>> {
    let n = mesh.cells();
    if n > BRUTE_FORCE_CAP {
        return Err(Error::TreeTooDeep {
            n,
            cap: BRUTE_FORCE_CAP,
        });
    }
    if mesh.horizon() != instance.horizon {
        return Err(Error::ShapeMismatch("mesh horizon differs from instance horizon".into()));
    }
    let tree = TreeEnsemble::with_cap(mesh, BRUTE_FORCE_CAP)?;
    let inc = tree.to_increments();
    let x = euler_maruyama(instance, &inc)?;
    let leaves = tree.leaves();
    let dw: Vec<Vec<T>> = (0..n).map(|l| (0..leaves).map(|p| inc.get(p, l, 0)).collect()).collect();

    // Leaf-indexed Y(t_k, t_l) and Z(t_k, t_l).
    let mut y: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
    let mut z: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
    for k in (0..n).rev() {
        let tk = mesh.t(k);
        let mut ry = vec![Vec::new(); n + 1];
        let mut rz = vec![Vec::new(); n];
        ry[n] = (0..leaves).map(|p| instance.free_term(tk, x.get(p, k), x.get(p, n))).collect();
        for l in (0..n).rev() {
            let dt = mesh.dt(l);
            let (mean, zl) = prefix_average(&ry[l + 1], &dw[l], 1 << (n - l), dt);
            let vals: Vec<T> = if k < l {
                (0..leaves)
                    .map(|p| {
                        mean[p]
                            + dt * instance.driver(DriverArgs {
                                t: tk,
                                s: mesh.t(l),
                                x_t: x.get(p, k),
                                x_s: x.get(p, l),
                                y: y[l][l][p],
                                z: zl[p],
                                z_swapped: z[l][k][p],
                            })
                    })
                    .collect()
            } else {
                mean
            };
            ry[l] = vals;
            rz[l] = zl;
        }
        y[k] = ry;
        z[k] = rz;
    }

    // Node tables: the value on the first leaf below each node.
    let table = |leaf_vals: &Vec<T>, l: usize| -> Vec<T> { (0..1usize << l).map(|node| leaf_vals[node << (n - l)]).collect() };
    let ty = y
        .iter()
        .map(|row| row.iter().enumerate().map(|(l, v)| table(v, l)).collect())
        .collect();
    let tz = z
        .iter()
        .map(|row| row.iter().enumerate().map(|(l, v)| table(v, l)).collect())
        .collect();
    Ok(tree_solution(mesh, tree, ty, tz, Vec::new()))
}
