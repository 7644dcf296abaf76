//! Assembly of the global discrete-time processes from the pre-jump and
//! branch solutions.
//!
//! The indicator conventions are one-sided and differ between components:
//! `X` and `Y` switch to the branch at `t ≥ τ`, `Z` stays on the pre-jump
//! component through `t ≤ τ` and switches strictly after, and `U` lives on
//! `t ≤ τ` only. The jump time is compared exactly; it is projected onto the
//! grid only to select which branch to read.

use crate::backward::{solve_branches, solve_zero, BranchBackward, PipelineOptions, ZeroBackward};
use crate::error::{Error, Result};
use crate::forward::{euler_x0, PathBundle};
use crate::model::ProblemSpec;
use crate::timegrid::TimeGrid;

/// The four scheme values at one `(t, path)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeValues {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub u: f64,
}

/// Solved scheme over one path bundle, evaluable at any `t ∈ [0, T]`.
///
/// Evaluation is piecewise constant between grid dates by construction; no
/// interpolation happens anywhere.
#[derive(Debug)]
pub struct GlobalSolution {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub taus: Vec<f64>,
    pub x0_chain: Vec<f64>,
    pub branches: BranchBackward,
    pub zero: ZeroBackward,
}

/// Runs the full scheme on one bundle: the pre-jump Euler chain, every
/// branch backward solve, the diagonal, and the coupled pre-jump solve.
pub fn solve_scheme(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    bundle: &PathBundle,
    opts: &PipelineOptions,
) -> Result<GlobalSolution> {
    let x0_chain = euler_x0(spec, grid, bundle)?;
    let branches = solve_branches(spec, grid, bundle, &x0_chain, opts)?;
    let zero = solve_zero(spec, grid, bundle, &x0_chain, &branches.diag, opts)?;
    Ok(GlobalSolution {
        grid: grid.clone(),
        n_paths: bundle.n_paths,
        taus: bundle.taus.clone(),
        x0_chain,
        branches,
        zero,
    })
}

impl GlobalSolution {
    /// Initial value of the pre-jump component (a deterministic scalar).
    pub fn y0(&self) -> f64 {
        self.zero.y0
    }

    /// Scheme values at time `t` for one path.
    pub fn evaluate(&self, t: f64, path: usize) -> Result<SchemeValues> {
        let (i, _) = self.grid.project(t)?;
        Ok(self.evaluate_at_index(i, t, path))
    }

    /// Same as [`evaluate`](Self::evaluate) with the projection index already
    /// resolved; `t` is still needed for the exact jump-time comparisons.
    #[inline]
    pub fn evaluate_at_index(&self, i: usize, t: f64, path: usize) -> SchemeValues {
        let paths = self.n_paths;
        let n = self.grid.n_steps();
        let tau = self.taus[path];
        let idx = i * paths + path;
        // Z is defined on steps only; the terminal date reads the last step.
        let zi = i.min(n - 1) * paths + path;
        let x = if t < tau {
            self.x0_chain[idx]
        } else {
            self.branches.sel_x[idx]
        };
        let y = if t < tau {
            self.zero.y[idx]
        } else {
            self.branches.sel_y[idx]
        };
        let z = if t <= tau {
            self.zero.z[zi]
        } else {
            self.branches.sel_z[zi]
        };
        let u = if t <= tau {
            self.branches.diag[idx] - self.zero.y[idx]
        } else {
            0.0
        };
        SchemeValues { x, y, z, u }
    }

    /// Values for every path at time `t`.
    pub fn evaluate_all(&self, t: f64) -> Result<Vec<SchemeValues>> {
        let (i, _) = self.grid.project(t)?;
        Ok((0..self.n_paths)
            .map(|p| self.evaluate_at_index(i, t, p))
            .collect())
    }
}

/// Checks path-count compatibility of two solutions built on coupled
/// bundles.
pub fn check_coupled(a: &GlobalSolution, b: &GlobalSolution) -> Result<()> {
    if a.n_paths != b.n_paths {
        return Err(Error::PathMismatch(format!(
            "solutions have {} and {} paths",
            a.n_paths, b.n_paths
        )));
    }
    if a.taus != b.taus {
        return Err(Error::PathMismatch(
            "solutions were not built on coupled jump times".into(),
        ));
    }
    Ok(())
}
