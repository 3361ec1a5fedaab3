//! Ridge least squares by chunked Householder QR (TSQR).
//!
//! Each block of [`CHUNK_ROWS`] rows of the augmented matrix `[A | y]` is
//! reduced to its triangular factor independently; the stacked factors are
//! then reduced once more in block order. The result does not depend on how
//! blocks are scheduled.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const CHUNK_ROWS: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct LsqSolution {
    pub coef: Vec<f64>,
    /// The orthogonal solve detected numerical rank deficiency and fell back
    /// to ridge-regularized normal equations.
    pub rank_deficient: bool,
    /// `|A beta - y|` (including ridge rows).
    pub residual_norm: f64,
}

/// Dot product in four independent lanes so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Householder QR of a column-major `rows x cols` matrix, in place. Returns the
/// `cols x cols` upper-triangular factor, row-major (zero-padded when `rows < cols`).
fn householder_r(a: &mut [f64], rows: usize, cols: usize) -> Vec<f64> {
    for j in 0..rows.min(cols) {
        let (head, tail) = a.split_at_mut((j + 1) * rows);
        let col = &mut head[j * rows..];
        let below = dot(&col[j + 1..], &col[j + 1..]);
        let norm = (col[j] * col[j] + below).sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if col[j] > 0.0 { -norm } else { norm };
        let vj = col[j] - alpha;
        let vtv = vj * vj + below;
        if vtv == 0.0 {
            continue;
        }
        let v = &col[j + 1..];
        for other in tail.chunks_exact_mut(rows) {
            let s = vj * other[j] + dot(v, &other[j + 1..]);
            let f = 2.0 * s / vtv;
            other[j] -= f * vj;
            for (o, x) in other[j + 1..].iter_mut().zip(v) {
                *o -= f * x;
            }
        }
        col[j] = alpha;
        for x in &mut col[j + 1..] {
            *x = 0.0;
        }
    }
    let mut r = vec![0.0; cols * cols];
    for i in 0..rows.min(cols) {
        for c in i..cols {
            r[i * cols + c] = a[c * rows + i];
        }
    }
    r
}

/// Solves `min |A beta - y|^2 + ridge |beta|^2` where row `r` of `[A | y]` is
/// produced by `fill(r, out)` with `out.len() == p + 1`.
pub fn solve_chunked<F>(rows: usize, p: usize, ridge: f64, fill: F) -> Result<LsqSolution>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if p == 0 {
        return Err(Error::InvalidArgument("empty basis".into()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument("ridge must be nonnegative".into()));
    }
    let cols = p + 1;
    let chunks = rows.div_ceil(CHUNK_ROWS);
    let factors: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK_ROWS;
            let n = CHUNK_ROWS.min(rows - start);
            let mut a = vec![0.0; n * cols];
            let mut row = vec![0.0; cols];
            for i in 0..n {
                fill(start + i, &mut row);
                for (j, v) in row.iter().enumerate() {
                    a[j * n + i] = *v;
                }
            }
            householder_r(&mut a, n, cols)
        })
        .collect();

    let ridge_rows = if ridge > 0.0 { p } else { 0 };
    let stacked_rows = chunks * cols + ridge_rows;
    let mut s = vec![0.0; stacked_rows * cols];
    for (c, r) in factors.iter().enumerate() {
        for i in 0..cols {
            for j in 0..cols {
                s[j * stacked_rows + c * cols + i] = r[i * cols + j];
            }
        }
    }
    let sr = ridge.sqrt();
    for i in 0..ridge_rows {
        s[i * stacked_rows + chunks * cols + i] = sr;
    }
    let r = householder_r(&mut s, stacked_rows, cols);
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("least-squares factor"));
    }
    let residual_norm = r[p * cols + p].abs();
    let tri: Vec<f64> = (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| r[i * cols + j]).collect();
    let rhs: Vec<f64> = (0..p).map(|i| r[i * cols + p]).collect();
    let (coef, rank_deficient) = match pivoted_solve(&tri, &rhs, p) {
        Some(b) => (b, false),
        None => (normal_equations(&tri, &rhs, p, ridge)?, true),
    };
    Ok(LsqSolution {
        coef,
        rank_deficient,
        residual_norm,
    })
}

/// Column-pivoted QR solve of a small square row-major system; `None` if rank deficient.
fn pivoted_solve(a: &[f64], b: &[f64], p: usize) -> Option<Vec<f64>> {
    // Column-major copy with the right-hand side appended.
    let cols = p + 1;
    let mut m = vec![0.0; p * cols];
    for i in 0..p {
        for j in 0..p {
            m[j * p + i] = a[i * p + j];
        }
        m[p * p + i] = b[i];
    }
    let mut perm: Vec<usize> = (0..p).collect();
    for j in 0..p {
        let norm2 = |c: usize, m: &[f64]| m[c * p + j..(c + 1) * p].iter().map(|x| x * x).sum::<f64>();
        let best = (j..p)
            .max_by(|&x, &y| norm2(x, &m).total_cmp(&norm2(y, &m)).then(y.cmp(&x)))
            .unwrap_or(j);
        if best != j {
            for i in 0..p {
                m.swap(j * p + i, best * p + i);
            }
            perm.swap(j, best);
        }
        // Reflect rows j.. of the remaining columns (including the rhs).
        let (head, tail) = m.split_at_mut((j + 1) * p);
        let col = &mut head[j * p..];
        let below: f64 = col[j + 1..].iter().map(|x| x * x).sum();
        let norm = (col[j] * col[j] + below).sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if col[j] > 0.0 { -norm } else { norm };
        let vj = col[j] - alpha;
        let vtv = vj * vj + below;
        for c in 0..cols - j - 1 {
            let other = &mut tail[c * p..(c + 1) * p];
            let mut s = vj * other[j];
            for i in j + 1..p {
                s += col[i] * other[i];
            }
            let f = 2.0 * s / vtv;
            other[j] -= f * vj;
            for i in j + 1..p {
                other[i] -= f * col[i];
            }
        }
        col[j] = alpha;
        for x in &mut col[j + 1..] {
            *x = 0.0;
        }
    }
    let lead = m[0].abs();
    let tol = 1e-12 * lead * p as f64;
    if lead == 0.0 || (0..p).any(|j| m[j * p + j].abs() <= tol) {
        return None;
    }
    let mut z = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = m[p * p + i];
        for j in i + 1..p {
            s -= m[j * p + i] * z[j];
        }
        z[i] = s / m[i * p + i];
    }
    let mut out = vec![0.0; p];
    for (j, &col) in perm.iter().enumerate() {
        out[col] = z[j];
    }
    Some(out)
}

/// `(R^T R + lambda I) beta = R^T q` by Cholesky.
fn normal_equations(r: &[f64], q: &[f64], p: usize, ridge: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    for i in 0..p {
        for j in 0..p {
            g[i * p + j] = (0..p).map(|k| r[k * p + i] * r[k * p + j]).sum();
        }
        rhs[i] = (0..p).map(|k| r[k * p + i] * q[k]).sum();
    }
    let trace: f64 = (0..p).map(|i| g[i * p + i]).sum();
    let lambda = ridge.max(1e-12 * trace.max(f64::MIN_POSITIVE));
    for i in 0..p {
        g[i * p + i] += lambda;
    }
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let s = g[i * p + j] - (0..j).map(|k| l[i * p + k] * l[j * p + k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::non_finite("normal-equation fallback (not positive definite)"));
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    let mut y = vec![0.0; p];
    for i in 0..p {
        y[i] = (rhs[i] - (0..i).map(|k| l[i * p + k] * y[k]).sum::<f64>()) / l[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        x[i] = (y[i] - (i + 1..p).map(|k| l[k * p + i] * x[k]).sum::<f64>()) / l[i * p + i];
    }
    Ok(x)
}
