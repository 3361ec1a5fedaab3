//! Conditional expectations `E_{t_l}[.]`: exact averaging over a binary tree,
//! and least-squares Monte Carlo regression on polynomial bases.
//!
//! Two regression projections are offered. [`Projection::Now`] regresses a
//! target observed at `t_{l+1}` on features at `t_l`. [`Projection::Later`]
//! regresses the target on features at `t_{l+1}`, where it is (near) exactly
//! representable, and then integrates the fitted polynomial against the law of
//! the one-step Euler transition, which gives `E_{t_l}[f]` and
//! `E_{t_l}[f dW_l]` in closed form per path.

pub mod lsq;
pub mod poly;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::TreeEnsemble;
use crate::scalar::Scalar;
pub use poly::PolyBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    #[default]
    Later,
    Now,
}

/// Which states enter a regression for row `k` at column `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Features {
    /// `X(t_l)` alone.
    StateNow,
    /// `(X(t_k), X(t_l))`.
    StatePair,
}

impl Features {
    /// Feature set for `E_{t_l}` while building row `k`.
    pub fn for_cell(k: usize, l: usize) -> Self {
        if l > k {
            Features::StatePair
        } else {
            Features::StateNow
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub degree: usize,
    pub ridge: f64,
    pub min_paths_per_coeff: usize,
    pub projection: Projection,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            ridge: 1e-10,
            min_paths_per_coeff: 50,
            projection: Projection::Later,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.degree > 7 {
            return Err(Error::InvalidArgument(format!("degree {} > 7", self.degree)));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::InvalidArgument("ridge must be a nonnegative number".into()));
        }
        if self.min_paths_per_coeff == 0 {
            return Err(Error::InvalidArgument("min_paths_per_coeff must be >= 1".into()));
        }
        Ok(())
    }
}

/// A fitted regression function.
#[derive(Debug, Clone, PartialEq)]
pub struct LsmcFit {
    basis: PolyBasis,
    coef: Vec<f64>,
    rank_deficient: bool,
}

impl LsmcFit {
    pub fn basis(&self) -> &PolyBasis {
        &self.basis
    }

    pub fn coef(&self) -> &[f64] {
        &self.coef
    }

    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.basis.eval(&self.coef, x)
    }

    /// `(E[f], E[f G])` with the last state coordinate moving to `mean + sd G`.
    #[inline]
    pub fn cond_moments(&self, fixed: &[f64], mean: f64, sd: f64, moments: &[f64]) -> (f64, f64) {
        self.basis.cond_moments(&self.coef, fixed, mean, sd, moments)
    }
}

/// A conditional-expectation function from either backend.
#[derive(Debug, Clone, PartialEq)]
pub enum CondExpFn<T> {
    Tree { level: usize, values: Vec<T> },
    Lsmc(LsmcFit),
}

/// Evaluation points for [`eval_condexp`].
#[derive(Debug, Clone, Copy)]
pub enum At<'a, T> {
    /// One slice per feature coordinate, one entry per path.
    States(&'a [&'a [T]]),
    /// Tree node indices at the function's level.
    Nodes(&'a [usize]),
}

/// Least-squares fit of `targets` on the polynomial basis of `features`
/// (one slice per coordinate).
pub fn fit_lsmc<T: Scalar>(config: &RegressionConfig, features: &[&[T]], targets: &[T]) -> Result<LsmcFit> {
    config.validate()?;
    let m = targets.len();
    if features.is_empty() || features.iter().any(|f| f.len() != m) {
        return Err(Error::ShapeMismatch("features and targets differ in path count".into()));
    }
    if let Some(p) = targets.iter().position(|t| !t.is_finite()) {
        return Err(Error::non_finite(format!("regression target at path {p}")));
    }
    let cols: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().map(|v| v.as_f64()).collect())
        .collect();
    let basis = PolyBasis::from_sample(&cols, config.degree);
    let p = basis.len();
    let required = config.min_paths_per_coeff * p;
    if m < required {
        return Err(Error::TooFewPaths { paths: m, required });
    }
    let d = cols.len();
    let sol = lsq::solve_chunked(m, p, config.ridge, |r, out| {
        let mut x = [0.0f64; 4];
        for j in 0..d {
            x[j] = cols[j][r];
        }
        basis.eval_into(&x[..d], &mut out[..p]);
        out[p] = targets[r].as_f64();
    })?;
    if sol.coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::non_finite("regression coefficients"));
    }
    Ok(LsmcFit {
        basis,
        coef: sol.coef,
        rank_deficient: sol.rank_deficient,
    })
}

pub fn eval_condexp<T: Scalar>(f: &CondExpFn<T>, at: At<'_, T>) -> Result<Vec<T>> {
    match (f, at) {
        (CondExpFn::Lsmc(fit), At::States(states)) => {
            if states.len() != fit.basis.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "fit expects {} state coordinates, got {}",
                    fit.basis.dim(),
                    states.len()
                )));
            }
            let m = states.first().map_or(0, |s| s.len());
            if states.iter().any(|s| s.len() != m) {
                return Err(Error::ShapeMismatch("ragged state slices".into()));
            }
            let mut x = vec![0.0; states.len()];
            Ok((0..m)
                .map(|p| {
                    for (j, s) in states.iter().enumerate() {
                        x[j] = s[p].as_f64();
                    }
                    T::lit(fit.eval(&x))
                })
                .collect())
        }
        (CondExpFn::Tree { values, .. }, At::Nodes(nodes)) => nodes
            .iter()
            .map(|&n| {
                values
                    .get(n)
                    .copied()
                    .ok_or_else(|| Error::ShapeMismatch(format!("node {n} outside table of {}", values.len())))
            })
            .collect(),
        _ => Err(Error::ShapeMismatch("evaluation points do not match the backend".into())),
    }
}

fn check_children<T: Scalar>(tree: &TreeEnsemble<T>, level: usize, child: &[T]) -> Result<()> {
    if level >= tree.depth() {
        return Err(Error::InvalidArgument(format!("level {level} has no children")));
    }
    if child.len() != tree.nodes_at(level + 1) {
        return Err(Error::ShapeMismatch(format!(
            "expected {} child values, got {}",
            tree.nodes_at(level + 1),
            child.len()
        )));
    }
    Ok(())
}

/// `E_{t_l}` on the tree: the average of the two children of every level-`l` node.
pub fn tree_condexp<T: Scalar>(tree: &TreeEnsemble<T>, level: usize, child: &[T]) -> Result<Vec<T>> {
    check_children(tree, level, child)?;
    let half = T::lit(0.5);
    Ok(child.chunks_exact(2).map(|c| (c[0] + c[1]) * half).collect())
}

/// `E_{t_l}[v dW_l] / dt_l` on the tree: `(up - down) / (2 sqrt(dt_l))`.
pub fn tree_cond_z<T: Scalar>(tree: &TreeEnsemble<T>, level: usize, child: &[T], dt: T) -> Result<Vec<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    check_children(tree, level, child)?;
    let denom = T::lit(2.0) * dt.sqrt();
    Ok(child.chunks_exact(2).map(|c| (c[0] - c[1]) / denom).collect())
}
