//! Composite quadrature on equally spaced sub-nodes of a cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadratureRule {
    Trapezoid,
    /// Composite Simpson; needs an even number of sub-intervals.
    Simpson,
}

impl QuadratureRule {
    /// Simpson when `q` is even, the trapezoid rule otherwise.
    pub fn default_for(q: usize) -> Self {
        if q >= 2 && q % 2 == 0 {
            QuadratureRule::Simpson
        } else {
            QuadratureRule::Trapezoid
        }
    }

    /// Weights of the `q + 1` sub-nodes of a unit cell; they sum to 1.
    pub fn weights(self, q: usize) -> Result<Vec<f64>> {
        if q == 0 {
            return Err(Error::InvalidArgument("quadrature needs at least one sub-interval".into()));
        }
        let h = 1.0 / q as f64;
        match self {
            QuadratureRule::Trapezoid => Ok((0..=q)
                .map(|i| if i == 0 || i == q { 0.5 * h } else { h })
                .collect()),
            QuadratureRule::Simpson => {
                if q % 2 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "Simpson's rule needs an even number of sub-intervals, got {q}"
                    )));
                }
                Ok((0..=q)
                    .map(|i| {
                        let c = if i == 0 || i == q {
                            1.0
                        } else if i % 2 == 1 {
                            4.0
                        } else {
                            2.0
                        };
                        c * h / 3.0
                    })
                    .collect())
            }
        }
    }
}

/// Sub-intervals per side used by [`rect_moments`].
pub const RECT_SUBDIVISIONS: usize = 16;

/// `(int int f, int int f^2)` over `[t0, t1] x [s0, s1]` by the tensor Simpson rule.
pub fn rect_moments<F>(f: F, t0: f64, t1: f64, s0: f64, s1: f64) -> (f64, f64)
where
    F: Fn(f64, f64) -> f64,
{
    let q = RECT_SUBDIVISIONS;
    let w = QuadratureRule::Simpson.weights(q).expect("even subdivision");
    let (ht, hs) = (t1 - t0, s1 - s0);
    let (mut m1, mut m2) = (0.0, 0.0);
    for (i, wi) in w.iter().enumerate() {
        let t = t0 + ht * i as f64 / q as f64;
        for (j, wj) in w.iter().enumerate() {
            let s = s0 + hs * j as f64 / q as f64;
            let v = f(t, s);
            let ww = wi * wj;
            m1 += ww * v;
            m2 += ww * v * v;
        }
    }
    let area = ht * hs;
    (m1 * area, m2 * area)
}

/// Mean of `f` over the rectangle and `int (f - mean)^2`, by two passes of
/// the same rule as [`rect_moments`]. Free of the cancellation in
/// `int f^2 - (int f)^2 / area` when `f` is nearly constant.
pub fn rect_central<F>(f: F, t0: f64, t1: f64, s0: f64, s1: f64) -> (f64, f64)
where
    F: Fn(f64, f64) -> f64,
{
    let q = RECT_SUBDIVISIONS;
    let w = QuadratureRule::Simpson.weights(q).expect("even subdivision");
    let (ht, hs) = (t1 - t0, s1 - s0);
    let vals: Vec<(f64, f64)> = w
        .iter()
        .enumerate()
        .flat_map(|(i, wi)| {
            let t = t0 + ht * i as f64 / q as f64;
            let f = &f;
            w.iter().enumerate().map(move |(j, wj)| (wi * wj, f(t, s0 + hs * j as f64 / q as f64)))
        })
        .collect();
    let mean: f64 = vals.iter().map(|(ww, v)| ww * v).sum();
    let var: f64 = vals.iter().map(|(ww, v)| ww * (v - mean) * (v - mean)).sum();
    (mean, var * ht * hs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrate(rule: QuadratureRule, q: usize, f: impl Fn(f64) -> f64) -> f64 {
        let w = rule.weights(q).unwrap();
        w.iter().enumerate().map(|(i, w)| w * f(i as f64 / q as f64)).sum()
    }

    #[test]
    fn weights_sum_to_one() {
        for q in [1, 2, 4, 7, 8] {
            let s: f64 = QuadratureRule::Trapezoid.weights(q).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        let s: f64 = QuadratureRule::Simpson.weights(4).unwrap().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        assert!(QuadratureRule::Simpson.weights(3).is_err());
        assert!(QuadratureRule::Trapezoid.weights(0).is_err());
    }

    #[test]
    fn exactness_degrees() {
        assert!((integrate(QuadratureRule::Trapezoid, 1, |x| 3.0 * x + 1.0) - 2.5).abs() < 1e-15);
        assert!((integrate(QuadratureRule::Simpson, 2, |x| x * x * x) - 0.25).abs() < 1e-15);
        // trapezoid error on x^2 with q = 4 is h^2 / 6
        let e = integrate(QuadratureRule::Trapezoid, 4, |x| x * x) - 1.0 / 3.0;
        assert!((e - 1.0 / 96.0).abs() < 1e-15);
        assert_eq!(QuadratureRule::default_for(1), QuadratureRule::Trapezoid);
        assert_eq!(QuadratureRule::default_for(4), QuadratureRule::Simpson);
        assert_eq!(QuadratureRule::default_for(3), QuadratureRule::Trapezoid);
    }

    #[test]
    fn rectangle_moments() {
        let (m1, m2) = rect_moments(|t, s| t + s, 0.0, 1.0, 0.0, 2.0);
        assert!((m1 - 3.0).abs() < 1e-13);
        // int_0^1 int_0^2 (t+s)^2 = 2/3 + 2 + 8/3
        assert!((m2 - (2.0 / 3.0 + 2.0 + 8.0 / 3.0)).abs() < 1e-13);
    }

    #[test]
    fn rectangle_central_moments() {
        let (mean, within) = rect_central(|t, s| t + s, 0.0, 1.0, 0.0, 2.0);
        assert!((mean - 1.5).abs() < 1e-13);
        // 2/3 + 2 + 8/3 - 9/2
        assert!((within - 5.0 / 6.0).abs() < 1e-13);
        // A near-constant integrand keeps its small spread.
        let (_, tiny) = rect_central(|t, _| 0.5 + 1e-9 * t, 0.0, 1.0, 0.0, 1.0);
        assert!((tiny - 1e-18 / 12.0).abs() < 1e-24, "{tiny}");
    }
}
