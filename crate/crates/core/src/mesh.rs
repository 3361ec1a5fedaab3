//! Deterministic time partitions `0 = t_0 < t_1 < ... < t_N = T` and the
//! cell lookups `tau(t) = t_k`, `tau*(t) = t_{k+1}` for `t` in `[t_k, t_{k+1})`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A time mesh on `[0, T]` with at least two cells.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMesh<T> {
    points: Vec<T>,
}

/// Result of a cell lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell<T> {
    pub left: T,
    pub right: T,
    pub index: usize,
}

impl<T: Scalar> TimeMesh<T> {
    /// Builds a mesh from explicit points.
    pub fn from_points(points: Vec<T>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidMesh(format!(
                "N<2: need at least 3 points, got {}",
                points.len()
            )));
        }
        if points[0] != T::zero() {
            return Err(Error::InvalidMesh("t_0 must be 0".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidMesh("non-finite mesh point".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidMesh("points must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    /// `N` equal cells on `[0, horizon]`.
    pub fn uniform(cells: usize, horizon: T) -> Result<Self> {
        if cells < 2 {
            return Err(Error::InvalidMesh(format!("N<2 (got N={cells})")));
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidMesh(format!("horizon must be positive, got {horizon}")));
        }
        let n = T::of_usize(cells);
        let mut points: Vec<T> = (0..=cells).map(|k| T::of_usize(k) * horizon / n).collect();
        points[cells] = horizon;
        Ok(Self { points })
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    /// Number of cells `N`.
    pub fn cells(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> T {
        self.points[self.cells()]
    }

    #[inline]
    pub fn t(&self, k: usize) -> T {
        self.points[k]
    }

    /// Cell width `t_{k+1} - t_k`.
    #[inline]
    pub fn dt(&self, k: usize) -> T {
        self.points[k + 1] - self.points[k]
    }

    pub fn steps(&self) -> impl Iterator<Item = T> + '_ {
        self.points.windows(2).map(|w| w[1] - w[0])
    }

    /// `|pi|`, the widest cell.
    pub fn mesh_norm(&self) -> T {
        self.steps().fold(T::zero(), T::max)
    }

    /// Half-open cell lookup; grid points resolve to the cell on their right.
    pub fn tau_pair(&self, t: T) -> Result<Cell<T>> {
        let horizon = self.horizon();
        if !(t >= T::zero()) || t >= horizon {
            return Err(Error::OutsideDomain {
                t: t.as_f64(),
                horizon: horizon.as_f64(),
            });
        }
        // First point strictly greater than t, minus one.
        let index = self.points.partition_point(|&p| p <= t) - 1;
        Ok(Cell {
            left: self.points[index],
            right: self.points[index + 1],
            index,
        })
    }

    /// Splits every cell into `factor` equal sub-cells.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("refinement factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let f = T::of_usize(factor);
        let mut points = Vec::with_capacity(self.cells() * factor + 1);
        for w in self.points.windows(2) {
            let h = (w[1] - w[0]) / f;
            points.push(w[0]);
            for j in 1..factor {
                points.push(w[0] + T::of_usize(j) * h);
            }
        }
        points.push(self.horizon());
        Ok(Self { points })
    }

    /// True if `fine` contains every point of `self` at stride `factor`.
    pub fn is_refined_by(&self, fine: &TimeMesh<T>, factor: usize) -> bool {
        fine.cells() == self.cells() * factor
            && self
                .points
                .iter()
                .enumerate()
                .all(|(k, &p)| fine.points[k * factor] == p)
    }

    pub fn to_json(&self) -> String {
        let pts: Vec<f64> = self.points.iter().map(|p| p.as_f64()).collect();
        serde_json::to_string(&pts).expect("serializing f64 array")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let pts: Vec<f64> = serde_json::from_str(s)?;
        Self::from_points(pts.into_iter().map(T::lit).collect())
    }
}
