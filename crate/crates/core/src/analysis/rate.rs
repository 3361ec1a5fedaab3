//! Least-squares slopes on log-log axes.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Fits `log(error) = intercept + slope * log(mesh_norm)` over `(mesh_norm, error)` pairs.
pub fn fit_rate(levels: &[(f64, f64)]) -> Result<RateFit> {
    if levels.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "a rate needs at least 3 levels, got {}",
            levels.len()
        )));
    }
    if let Some(&(h, e)) = levels.iter().find(|(h, e)| !(*h > 0.0 && *e > 0.0 && h.is_finite() && e.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "mesh norms and errors must be positive, got ({h}, {e})"
        )));
    }
    let xs: Vec<f64> = levels.iter().map(|(h, _)| h.ln()).collect();
    let ys: Vec<f64> = levels.iter().map(|(_, e)| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("mesh norms must not all coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let f = fit_rate(&[(0.25, 0.5), (0.0625, 0.125), (0.015625, 0.03125)]).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12);
        assert!((f.intercept - 2f64.ln()).abs() < 1e-12);
        let f = fit_rate(&[(0.25, 0.3), (0.125, 0.3), (0.0625, 0.3)]).unwrap();
        assert!(f.slope.abs() < 1e-12);
        let f = fit_rate(&[(0.25, 0.5), (0.125, 0.35355), (0.0625, 0.25)]).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_levels() {
        assert!(fit_rate(&[(0.5, 1.0), (0.25, 0.5)]).is_err());
        assert!(fit_rate(&[(0.5, 1.0), (0.25, 0.0), (0.125, 0.1)]).is_err());
        assert!(fit_rate(&[(0.5, 1.0), (0.5, 0.5), (0.5, 0.1)]).is_err());
        assert!(fit_rate(&[(0.5, 1.0), (-0.25, 0.5), (0.125, 0.1)]).is_err());
    }

    proptest! {
        #[test]
        fn exact_on_power_laws(c in 0.01f64..100.0, p in -2.0f64..3.0, levels in 3usize..7) {
            let pts: Vec<(f64, f64)> = (0..levels)
                .map(|i| {
                    let h = 0.5f64.powi(i as i32 + 1);
                    (h, c * h.powf(p))
                })
                .collect();
            let f = fit_rate(&pts).unwrap();
            prop_assert!((f.slope - p).abs() < 1e-9);
            prop_assert!((f.intercept - c.ln()).abs() < 1e-8);
        }
    }
}
