//! Driving-noise increments `dW_k = W(t_{k+1}) - W(t_k)` for Monte Carlo path
//! batches, plus exhaustive enumeration of binary (`±sqrt(dt)`) sign trees.
//!
//! Every path draws from its own ChaCha8 stream selected by `(seed, path)`;
//! within a path, values are consumed in `(step, component)` order. A batch is
//! therefore bit-identical no matter how paths are scheduled across threads.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TimeMesh;
use crate::scalar::Scalar;

/// Largest tree depth enumerated by default (`2^14` leaves).
pub const DEFAULT_TREE_CAP: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Binary,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "binary" => Ok(NoiseKind::Binary),
            other => Err(Error::InvalidArgument(format!("unknown noise kind `{other}`"))),
        }
    }
}

/// Distribution of a single cell increment, needed for exact one-step moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncrementLaw {
    /// `N(0, dt)`.
    Gaussian,
    /// Sum of `q` independent `±sqrt(dt/q)` signs; `q = 1` is the plain binary law.
    RademacherSum(usize),
}

impl IncrementLaw {
    /// Raw moments `E[G^i]`, `i = 0..=max_order`, for an increment over a cell of width `dt`.
    pub fn moments<T: Scalar>(&self, dt: T, max_order: usize) -> Vec<T> {
        let dt = dt.as_f64();
        let out: Vec<f64> = match *self {
            IncrementLaw::Gaussian => (0..=max_order)
                .map(|i| {
                    if i % 2 == 1 {
                        0.0
                    } else {
                        // (i-1)!! dt^{i/2}
                        let dfact: f64 = (1..i).step_by(2).map(|j| j as f64).product();
                        dfact * dt.powi((i / 2) as i32)
                    }
                })
                .collect(),
            IncrementLaw::RademacherSum(q) => {
                // S = 2B - q with B ~ Binomial(q, 1/2); G = sqrt(dt/q) S.
                let weights = binomial_row(q);
                let scale = (dt / q as f64).sqrt();
                (0..=max_order)
                    .map(|i| {
                        if i % 2 == 1 {
                            return 0.0;
                        }
                        let m: f64 = weights
                            .iter()
                            .enumerate()
                            .map(|(b, w)| w * (2.0 * b as f64 - q as f64).powi(i as i32))
                            .sum();
                        m * scale.powi(i as i32)
                    })
                    .collect()
            }
        };
        out.into_iter().map(T::lit).collect()
    }

    fn coarsened(self, factor: usize) -> Self {
        match self {
            IncrementLaw::Gaussian => IncrementLaw::Gaussian,
            IncrementLaw::RademacherSum(q) => IncrementLaw::RademacherSum(q * factor),
        }
    }
}

/// Binomial(q, 1/2) probabilities.
fn binomial_row(q: usize) -> Vec<f64> {
    let mut row = vec![1.0f64];
    for _ in 0..q {
        let mut next = vec![0.0; row.len() + 1];
        for (i, v) in row.iter().enumerate() {
            next[i] += 0.5 * v;
            next[i + 1] += 0.5 * v;
        }
        row = next;
    }
    row
}

/// `M` paths of `d`-dimensional increments on a mesh, stored `[path][step][component]`.
#[derive(Debug, Clone)]
pub struct IncrementBatch<T> {
    mesh: TimeMesh<T>,
    dim: usize,
    paths: usize,
    kind: NoiseKind,
    law: IncrementLaw,
    seed: u64,
    values: Vec<T>,
}

impl<T: Scalar> IncrementBatch<T> {
    /// Wraps explicit values laid out `[path][step][component]`.
    pub fn from_values(
        mesh: TimeMesh<T>,
        dim: usize,
        paths: usize,
        kind: NoiseKind,
        law: IncrementLaw,
        seed: u64,
        values: Vec<T>,
    ) -> Result<Self> {
        if dim == 0 || paths == 0 {
            return Err(Error::InvalidArgument("M and d must be positive".into()));
        }
        let expect = paths * mesh.cells() * dim;
        if values.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "expected {expect} increments, got {}",
                values.len()
            )));
        }
        Ok(Self {
            mesh,
            dim,
            paths,
            kind,
            law,
            seed,
            values,
        })
    }

    pub fn mesh(&self) -> &TimeMesh<T> {
        &self.mesh
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn paths(&self) -> usize {
        self.paths
    }
    pub fn kind(&self) -> NoiseKind {
        self.kind
    }
    pub fn law(&self) -> IncrementLaw {
        self.law
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// All increments of one path, `[step][component]`.
    #[inline]
    pub fn path(&self, p: usize) -> &[T] {
        let len = self.mesh.cells() * self.dim;
        &self.values[p * len..(p + 1) * len]
    }

    #[inline]
    pub fn get(&self, p: usize, k: usize, j: usize) -> T {
        self.values[(p * self.mesh.cells() + k) * self.dim + j]
    }

    /// Sums fine increments into the cells of `coarse`, which must be refined
    /// by this batch's mesh with the given `factor`.
    pub fn coarsen(&self, coarse: &TimeMesh<T>, factor: usize) -> Result<Self> {
        if !coarse.is_refined_by(&self.mesh, factor) {
            return Err(Error::ShapeMismatch(
                "fine mesh is not a refinement of the coarse mesh".into(),
            ));
        }
        let n = coarse.cells();
        let d = self.dim;
        let mut values = vec![T::zero(); self.paths * n * d];
        values
            .par_chunks_mut(n * d)
            .enumerate()
            .for_each(|(p, out)| {
                let fine = self.path(p);
                for k in 0..n {
                    for j in 0..d {
                        let mut s = T::zero();
                        for i in k * factor..(k + 1) * factor {
                            s = s + fine[i * d + j];
                        }
                        out[k * d + j] = s;
                    }
                }
            });
        Ok(Self {
            mesh: coarse.clone(),
            dim: d,
            paths: self.paths,
            kind: self.kind,
            law: self.law.coarsened(factor),
            seed: self.seed,
            values,
        })
    }

    /// Writes the replay format: an 8-byte magic, then `seed, N, d, M, kind, q`
    /// as little-endian `u64`, the `N+1` mesh points and all increments as
    /// little-endian `f64` in `[path][step][component]` order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        let (kind, q) = match (self.kind, self.law) {
            (NoiseKind::Gaussian, _) => (0u64, 0u64),
            (NoiseKind::Binary, IncrementLaw::RademacherSum(q)) => (1, q as u64),
            (NoiseKind::Binary, IncrementLaw::Gaussian) => (1, 1),
        };
        for v in [
            self.seed,
            self.mesh.cells() as u64,
            self.dim as u64,
            self.paths as u64,
            kind,
            q,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for p in self.mesh.points() {
            w.write_all(&p.as_f64().to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Io("not an increment dump".into()));
        }
        let mut header = [0u64; 6];
        for h in header.iter_mut() {
            *h = read_u64(&mut r)?;
        }
        let [seed, n, d, m, kind, q] = header;
        let (n, d, m) = (n as usize, d as usize, m as usize);
        let points = (0..=n)
            .map(|_| read_f64(&mut r).map(T::lit))
            .collect::<Result<Vec<_>>>()?;
        let mesh = TimeMesh::from_points(points)?;
        let values = (0..n * d * m)
            .map(|_| read_f64(&mut r).map(T::lit))
            .collect::<Result<Vec<_>>>()?;
        let (kind, law) = match kind {
            0 => (NoiseKind::Gaussian, IncrementLaw::Gaussian),
            1 => (NoiseKind::Binary, IncrementLaw::RademacherSum(q.max(1) as usize)),
            other => return Err(Error::Io(format!("unknown noise kind code {other}"))),
        };
        Self::from_values(mesh, d, m, kind, law, seed, values)
    }
}

const MAGIC: &[u8; 8] = b"BSVIEINC";

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Draws `M` paths of i.i.d. increments on `mesh`.
pub fn generate_increments<T: Scalar>(
    mesh: &TimeMesh<T>,
    dim: usize,
    paths: usize,
    kind: NoiseKind,
    seed: u64,
) -> Result<IncrementBatch<T>> {
    if paths == 0 || dim == 0 {
        return Err(Error::InvalidArgument("M and d must be positive".into()));
    }
    let n = mesh.cells();
    let sqrt_dt: Vec<f64> = mesh.steps().map(|h| h.as_f64().sqrt()).collect();
    let mut values = vec![T::zero(); paths * n * dim];
    values
        .par_chunks_mut(n * dim)
        .enumerate()
        .for_each(|(p, out)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            for k in 0..n {
                for j in 0..dim {
                    let z: f64 = match kind {
                        NoiseKind::Gaussian => rng.sample(StandardNormal),
                        NoiseKind::Binary => {
                            if rng.random::<bool>() {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                    };
                    out[k * dim + j] = T::lit(z * sqrt_dt[k]);
                }
            }
        });
    let law = match kind {
        NoiseKind::Gaussian => IncrementLaw::Gaussian,
        NoiseKind::Binary => IncrementLaw::RademacherSum(1),
    };
    Ok(IncrementBatch {
        mesh: mesh.clone(),
        dim,
        paths,
        kind,
        law,
        seed,
        values,
    })
}

/// Cumulative paths `W(t_k) = sum_{j<k} dW_j`, stored `[path][node][component]`.
#[derive(Debug, Clone)]
pub struct PathBatch<T> {
    mesh: TimeMesh<T>,
    dim: usize,
    paths: usize,
    values: Vec<T>,
}

impl<T: Scalar> PathBatch<T> {
    pub fn mesh(&self) -> &TimeMesh<T> {
        &self.mesh
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn paths(&self) -> usize {
        self.paths
    }

    /// Node values of one path, `[node][component]`.
    #[inline]
    pub fn path(&self, p: usize) -> &[T] {
        let len = (self.mesh.cells() + 1) * self.dim;
        &self.values[p * len..(p + 1) * len]
    }

    #[inline]
    pub fn get(&self, p: usize, k: usize, j: usize) -> T {
        self.values[(p * (self.mesh.cells() + 1) + k) * self.dim + j]
    }

    /// First differences; inverse of [`accumulate`].
    pub fn increments(&self) -> Vec<T> {
        let (n, d) = (self.mesh.cells(), self.dim);
        let mut out = Vec::with_capacity(self.paths * n * d);
        for p in 0..self.paths {
            let w = self.path(p);
            for k in 0..n {
                for j in 0..d {
                    out.push(w[(k + 1) * d + j] - w[k * d + j]);
                }
            }
        }
        out
    }
}

pub fn accumulate<T: Scalar>(batch: &IncrementBatch<T>) -> PathBatch<T> {
    let (n, d) = (batch.mesh.cells(), batch.dim);
    let mut values = vec![T::zero(); batch.paths * (n + 1) * d];
    values
        .par_chunks_mut((n + 1) * d)
        .enumerate()
        .for_each(|(p, out)| {
            let inc = batch.path(p);
            for k in 0..n {
                for j in 0..d {
                    out[(k + 1) * d + j] = out[k * d + j] + inc[k * d + j];
                }
            }
        });
    PathBatch {
        mesh: batch.mesh.clone(),
        dim: d,
        paths: batch.paths,
        values,
    }
}

/// All `2^N` equally likely sign sequences of scalar binary noise on a mesh.
///
/// Nodes at level `l` are numbered `0..2^l`; node `i` has children `2i` (the
/// `+sqrt(dt_l)` move) and `2i + 1` (the `-sqrt(dt_l)` move). Leaf `m` is
/// therefore the path whose step `k` sign is bit `N-1-k` of `m`.
#[derive(Debug, Clone)]
pub struct TreeEnsemble<T> {
    mesh: TimeMesh<T>,
    sqrt_dt: Vec<T>,
}

pub fn tree_enumerate<T: Scalar>(mesh: &TimeMesh<T>) -> Result<TreeEnsemble<T>> {
    TreeEnsemble::with_cap(mesh, DEFAULT_TREE_CAP)
}

impl<T: Scalar> TreeEnsemble<T> {
    pub fn with_cap(mesh: &TimeMesh<T>, cap: usize) -> Result<Self> {
        let n = mesh.cells();
        if n > cap {
            return Err(Error::TreeTooDeep { n, cap });
        }
        Ok(Self {
            mesh: mesh.clone(),
            sqrt_dt: mesh.steps().map(|h| h.sqrt()).collect(),
        })
    }

    pub fn mesh(&self) -> &TimeMesh<T> {
        &self.mesh
    }

    pub fn depth(&self) -> usize {
        self.mesh.cells()
    }

    pub fn leaves(&self) -> usize {
        1 << self.depth()
    }

    pub fn nodes_at(&self, level: usize) -> usize {
        1 << level
    }

    pub fn leaf_probability(&self) -> T {
        T::one() / T::of_usize(self.leaves())
    }

    /// Increment taken from a level-`level` node to its child `child` (at level `level + 1`).
    #[inline]
    pub fn increment_to(&self, level: usize, child: usize) -> T {
        if child & 1 == 0 {
            self.sqrt_dt[level]
        } else {
            -self.sqrt_dt[level]
        }
    }

    /// `W(t_level)` at a node.
    pub fn w_at(&self, level: usize, node: usize) -> T {
        (0..level).fold(T::zero(), |acc, k| {
            acc + self.increment_to(k, node >> (level - 1 - k))
        })
    }

    /// The ancestor at `level` of a node at `from_level`.
    #[inline]
    pub fn ancestor(node: usize, from_level: usize, level: usize) -> usize {
        node >> (from_level - level)
    }

    /// The leaves as a batch of `2^N` binary paths (leaf order = path order).
    pub fn to_increments(&self) -> IncrementBatch<T> {
        let n = self.depth();
        let mut values = Vec::with_capacity(self.leaves() * n);
        for leaf in 0..self.leaves() {
            for k in 0..n {
                values.push(self.increment_to(k, leaf >> (n - 1 - k)));
            }
        }
        IncrementBatch {
            mesh: self.mesh.clone(),
            dim: 1,
            paths: self.leaves(),
            kind: NoiseKind::Binary,
            law: IncrementLaw::RademacherSum(1),
            seed: 0,
            values,
        }
    }
}
