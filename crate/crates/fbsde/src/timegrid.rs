//! Discretization grid of `[0, T]` with projection and mesh operators.

use crate::error::{Error, Result};

/// Partition `0 = t_0 < t_1 < … < t_n = T` of the time interval.
///
/// All schemes consume per-step widths, so non-uniform grids are supported
/// by constructing from an explicit point list. The mesh (largest step) must
/// not exceed 1; a larger mesh is rejected at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    /// Builds a grid from an explicit, strictly increasing point list
    /// starting at 0.
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("need at least two points".into()));
        }
        if points[0] != 0.0 {
            return Err(Error::InvalidGrid(format!(
                "first point must be 0, got {}",
                points[0]
            )));
        }
        if !points.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite grid point".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("points must be strictly increasing".into()));
        }
        let grid = TimeGrid { points };
        let mesh = grid.mesh();
        if mesh > 1.0 {
            return Err(Error::InvalidGrid(format!("mesh {mesh} exceeds 1")));
        }
        Ok(grid)
    }

    /// Uniform grid `t_i = i·T/n`.
    pub fn uniform(t_max: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid("n must be at least 1".into()));
        }
        if !(t_max > 0.0) {
            return Err(Error::InvalidGrid(format!("T must be positive, got {t_max}")));
        }
        let mut points: Vec<f64> = (0..=n)
            .map(|i| (i as f64) * t_max / (n as f64))
            .collect();
        // Pin the endpoint so T is hit exactly.
        points[n] = t_max;
        Self::new(points)
    }

    /// Splits every step into `factor` equal substeps. Original points are
    /// kept bitwise, so coarse index `i` maps to fine index `i·factor`.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidGrid("refinement factor must be >= 1".into()));
        }
        let mut points = Vec::with_capacity(self.n_steps() * factor + 1);
        for i in 0..self.n_steps() {
            let (a, b) = (self.points[i], self.points[i + 1]);
            points.push(a);
            let dt = (b - a) / factor as f64;
            for k in 1..factor {
                points.push(a + k as f64 * dt);
            }
        }
        points.push(self.horizon());
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Number of steps `n` (one less than the number of points).
    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.points.last().unwrap()
    }

    /// Width of step `i`, i.e. `t_i - t_{i-1}` for `i` in `1..=n`.
    pub fn dt(&self, i: usize) -> f64 {
        self.points[i] - self.points[i - 1]
    }

    /// Largest step width `|π|`.
    pub fn mesh(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Largest grid point `t_i ≤ t`, returned with its index.
    ///
    /// Binary search; a `t` equal to a grid point returns that point.
    pub fn project(&self, t: f64) -> Result<(usize, f64)> {
        if !(0.0..=self.horizon()).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                t_max: self.horizon(),
            });
        }
        let i = match self
            .points
            .binary_search_by(|p| p.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        Ok((i, self.points[i]))
    }

    /// Index of the projection, without bounds checking beyond `project`.
    pub fn project_index(&self, t: f64) -> Result<usize> {
        self.project(t).map(|(i, _)| i)
    }
}
