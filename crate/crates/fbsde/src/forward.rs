//! Brownian increments and jump times, the Euler scheme for the pre-jump
//! chain `X⁰`, the two-parameter scheme for the post-jump branches `X¹(t_j)`,
//! and the assembled global forward scheme.
//!
//! Increments are stored step-major (`step × path`) so each backward
//! regression reads one contiguous row, and all chains of one path consume
//! the same increment storage. Branch `j` coincides with `X⁰` strictly
//! before `t_j` (copied bitwise), receives the β kick at `t_j` evaluated at
//! the left endpoint of the step, and follows the plain Euler recursion
//! afterwards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{JumpModel, ProblemSpec};
use crate::timegrid::TimeGrid;
use crate::util::CHUNK;

/// Brownian increments and jump times for a block of paths.
///
/// Fully determined by `(seed, n_paths, grid, jump)`. Path `p` draws from
/// substream `p` of a counter-based generator: first the jump-time uniform,
/// then one standard normal per step. Scheduling cannot change the draws.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub n_paths: usize,
    pub seed: u64,
    /// `increments[(i-1)·n_paths + p]` is ΔW_i for path p, i = 1..=n.
    pub increments: Vec<f64>,
    /// Jump time per path; `+∞` when the hazard mass never reaches the draw.
    pub taus: Vec<f64>,
}

impl PathBundle {
    /// Increment row for step `i` (1-based).
    pub fn step(&self, i: usize) -> &[f64] {
        &self.increments[(i - 1) * self.n_paths..i * self.n_paths]
    }
}

/// Draws a fresh bundle on `grid`.
pub fn simulate_bundle(
    grid: &TimeGrid,
    jump: &JumpModel,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(Error::InvalidProblem("need at least one path".into()));
    }
    let n = grid.n_steps();
    let horizon = grid.horizon();
    let sqrt_dt: Vec<f64> = (1..=n).map(|i| grid.dt(i).sqrt()).collect();

    // Path-major generation (one contiguous row per path), then a blocked
    // transpose into the step-major layout.
    let mut path_major = vec![0.0f64; n * n_paths];
    let mut taus = vec![0.0f64; n_paths];
    path_major
        .par_chunks_mut(n)
        .zip(taus.par_iter_mut())
        .enumerate()
        .for_each(|(p, (row, tau))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let u: f64 = rng.gen();
            *tau = jump.sample_tau(u, horizon);
            for (i, slot) in row.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *slot = z * sqrt_dt[i];
            }
        });

    let mut increments = vec![0.0f64; n * n_paths];
    transpose_blocked(&path_major, &mut increments, n_paths, n);
    Ok(PathBundle {
        n_paths,
        seed,
        increments,
        taus,
    })
}

/// `src` is `rows × cols` row-major; writes `dst` as `cols × rows` row-major.
fn transpose_blocked(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    const B: usize = 64;
    dst.par_chunks_mut(rows * B.min(cols))
        .enumerate()
        .for_each(|(cb, out)| {
            let c0 = cb * B;
            let cw = B.min(cols - c0);
            for r0 in (0..rows).step_by(B) {
                let rw = B.min(rows - r0);
                for c in 0..cw {
                    for r in 0..rw {
                        out[c * rows + r0 + r] = src[(r0 + r) * cols + c0 + c];
                    }
                }
            }
        });
}

/// Couples a coarse grid with its `factor`-refinement: the fine increments
/// are drawn directly and the coarse ones are their left-to-right sums, so
/// both schemes ride the same Brownian path and the same jump times.
pub fn refine_bundle(
    coarse: &TimeGrid,
    factor: usize,
    jump: &JumpModel,
    n_paths: usize,
    seed: u64,
) -> Result<(PathBundle, PathBundle, TimeGrid)> {
    let fine_grid = coarse.refine(factor)?;
    let fine = simulate_bundle(&fine_grid, jump, n_paths, seed)?;
    let n = coarse.n_steps();
    let mut increments = vec![0.0f64; n * n_paths];
    increments
        .par_chunks_mut(n_paths)
        .enumerate()
        .for_each(|(i, row)| {
            for k in 0..factor {
                let src = &fine.increments[(i * factor + k) * n_paths..(i * factor + k + 1) * n_paths];
                for (slot, v) in row.iter_mut().zip(src) {
                    *slot += v;
                }
            }
        });
    let coarse_bundle = PathBundle {
        n_paths,
        seed,
        increments,
        taus: fine.taus.clone(),
    };
    Ok((coarse_bundle, fine, fine_grid))
}

#[inline]
fn euler_step(spec: &ProblemSpec, t: f64, dt: f64, x: f64, dw: f64) -> f64 {
    (x + (spec.b)(t, x) * dt) + (spec.sigma)(t, x) * dw
}

fn advance_row(
    spec: &ProblemSpec,
    t: f64,
    dt: f64,
    i: usize,
    prev: &[f64],
    next: &mut [f64],
    dw: &[f64],
) -> Result<()> {
    next.par_chunks_mut(CHUNK)
        .zip(prev.par_chunks(CHUNK))
        .zip(dw.par_chunks(CHUNK))
        .enumerate()
        .try_for_each(|(ci, ((nx, pv), w))| {
            for (k, slot) in nx.iter_mut().enumerate() {
                let x = euler_step(spec, t, dt, pv[k], w[k]);
                if !x.is_finite() {
                    return Err(Error::NonFinite {
                        step: i,
                        path: ci * CHUNK + k,
                        state: x,
                    });
                }
                *slot = x;
            }
            Ok(())
        })
}

/// Euler chain for the pre-jump process: returns `(n+1) × n_paths` values
/// with row 0 equal to the initial condition.
pub fn euler_x0(spec: &ProblemSpec, grid: &TimeGrid, bundle: &PathBundle) -> Result<Vec<f64>> {
    let n = grid.n_steps();
    let paths = bundle.n_paths;
    if bundle.increments.len() != n * paths {
        return Err(Error::PathMismatch(format!(
            "bundle has {} increments for {} steps x {} paths",
            bundle.increments.len(),
            n,
            paths
        )));
    }
    let mut chain = vec![0.0f64; (n + 1) * paths];
    chain[..paths].fill(spec.x0);
    for i in 1..=n {
        let (done, rest) = chain.split_at_mut(i * paths);
        let prev = &done[(i - 1) * paths..];
        let next = &mut rest[..paths];
        advance_row(
            spec,
            grid.points()[i - 1],
            grid.dt(i),
            i,
            prev,
            next,
            bundle.step(i),
        )?;
    }
    Ok(chain)
}

/// Branch chain for jump date `t_j`, written into `out` (same layout as the
/// `X⁰` chain). Rows strictly before `j` are copied from the pre-jump chain,
/// so the identity holds bitwise there.
pub fn euler_x1_into(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    bundle: &PathBundle,
    x0_chain: &[f64],
    j: usize,
    out: &mut [f64],
) -> Result<()> {
    let n = grid.n_steps();
    let paths = bundle.n_paths;
    if j > n {
        return Err(Error::InvalidGrid(format!("branch index {j} out of range 0..={n}")));
    }
    if out.len() != (n + 1) * paths || x0_chain.len() != (n + 1) * paths {
        return Err(Error::PathMismatch("chain buffer size mismatch".into()));
    }

    if j == 0 {
        // Post-jump start: x + β(t_0, x).
        let x1 = spec.x0 + (spec.beta)(grid.points()[0], spec.x0);
        if !x1.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                path: 0,
                state: x1,
            });
        }
        out[..paths].fill(x1);
    } else {
        out[..j * paths].copy_from_slice(&x0_chain[..j * paths]);
        // Kick step: the Euler update from t_{j-1} plus the β term evaluated
        // at the left endpoint. The (b, σ) part reproduces X⁰ at t_j exactly.
        let t_prev = grid.points()[j - 1];
        let (done, rest) = out.split_at_mut(j * paths);
        let prev = &done[(j - 1) * paths..];
        let next = &mut rest[..paths];
        let x0_row_j = &x0_chain[j * paths..(j + 1) * paths];
        next.par_chunks_mut(CHUNK)
            .zip(prev.par_chunks(CHUNK))
            .zip(x0_row_j.par_chunks(CHUNK))
            .enumerate()
            .try_for_each(|(ci, ((nx, pv), xj))| {
                for (k, slot) in nx.iter_mut().enumerate() {
                    let x = xj[k] + (spec.beta)(t_prev, pv[k]);
                    if !x.is_finite() {
                        return Err(Error::NonFinite {
                            step: j,
                            path: ci * CHUNK + k,
                            state: x,
                        });
                    }
                    *slot = x;
                }
                Ok(())
            })?;
    }

    for i in j + 1..=n {
        let (done, rest) = out.split_at_mut(i * paths);
        let prev = &done[(i - 1) * paths..];
        let next = &mut rest[..paths];
        advance_row(
            spec,
            grid.points()[i - 1],
            grid.dt(i),
            i,
            prev,
            next,
            bundle.step(i),
        )?;
    }
    Ok(())
}

/// Convenience wrapper allocating the branch chain.
pub fn euler_x1(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    bundle: &PathBundle,
    x0_chain: &[f64],
    j: usize,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0f64; x0_chain.len()];
    euler_x1_into(spec, grid, bundle, x0_chain, j, &mut out)?;
    Ok(out)
}

/// Branch index of the projected jump date, or `None` when the path never
/// jumps before the horizon.
pub fn jump_branch_index(grid: &TimeGrid, tau: f64) -> Option<usize> {
    if tau > grid.horizon() {
        None
    } else {
        Some(grid.project(tau).expect("tau within [0, T]").0)
    }
}

/// Per-path values of the jumped branch `X¹(π(τ))`: row `i` holds
/// `X¹_{t_i}(π(τ_p))` for each path `p`. Rows before the path's own branch
/// date are filled with the pre-jump chain (the scheme never reads them).
///
/// This walks every path independently, so it is cheap when only the global
/// forward process is needed and no backward pass follows.
pub fn jumped_branch_values(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    bundle: &PathBundle,
    x0_chain: &[f64],
) -> Result<Vec<f64>> {
    let n = grid.n_steps();
    let paths = bundle.n_paths;
    let mut sel = x0_chain.to_vec();
    let branch: Vec<Option<usize>> = bundle
        .taus
        .iter()
        .map(|&tau| jump_branch_index(grid, tau))
        .collect();

    let increments = &bundle.increments;
    let points = grid.points();
    // Work path-by-path; reads of the increment columns are strided but each
    // path is an independent O(n) recursion.
    let cols: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let Some(j) = branch[p] else {
                return Vec::new();
            };
            let mut vals = Vec::with_capacity(n - j + 1);
            let mut x = if j == 0 {
                spec.x0 + (spec.beta)(points[0], spec.x0)
            } else {
                x0_chain[j * paths + p] + (spec.beta)(points[j - 1], x0_chain[(j - 1) * paths + p])
            };
            vals.push(x);
            for i in j + 1..=n {
                let dt = points[i] - points[i - 1];
                x = euler_step(spec, points[i - 1], dt, x, increments[(i - 1) * paths + p]);
                vals.push(x);
            }
            vals
        })
        .collect();
    for (p, vals) in cols.iter().enumerate() {
        if vals.is_empty() {
            continue;
        }
        let j = branch[p].unwrap();
        for (off, &v) in vals.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step: j + off,
                    path: p,
                    state: v,
                });
            }
            sel[(j + off) * paths + p] = v;
        }
    }
    Ok(sel)
}

/// Global forward scheme at time `t`, one value per path:
/// the pre-jump chain strictly before τ, the branch at `π(τ)` from τ on.
pub fn assemble_x(
    grid: &TimeGrid,
    x0_chain: &[f64],
    jumped: &[f64],
    taus: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let (i, _) = grid.project(t)?;
    let paths = taus.len();
    let row0 = &x0_chain[i * paths..(i + 1) * paths];
    let row1 = &jumped[i * paths..(i + 1) * paths];
    Ok((0..paths)
        .map(|p| if t < taus[p] { row0[p] } else { row1[p] })
        .collect())
}

/// Writes the forward dump CSV: `path,branch,i,t,x` with branch −1 for the
/// pre-jump chain, path-major then branch-minor then step order.
pub fn dump_paths_csv<W: std::io::Write>(
    w: &mut W,
    spec: &ProblemSpec,
    grid: &TimeGrid,
    bundle: &PathBundle,
    x0_chain: &[f64],
) -> Result<()> {
    let n = grid.n_steps();
    let paths = bundle.n_paths;
    writeln!(w, "path,branch,i,t,x")?;
    let mut branch_buf = vec![0.0f64; (n + 1) * paths];
    // Branch rows are materialized once per branch into a reusable buffer;
    // rows are gathered per path afterwards to keep the path-major order.
    let mut per_branch: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    for j in 0..=n {
        euler_x1_into(spec, grid, bundle, x0_chain, j, &mut branch_buf)?;
        per_branch.push(branch_buf.clone());
    }
    for p in 0..paths {
        for i in 0..=n {
            writeln!(w, "{},-1,{},{},{}", p, i, grid.points()[i], x0_chain[i * paths + p])?;
        }
        for (j, rows) in per_branch.iter().enumerate() {
            for i in 0..=n {
                writeln!(w, "{},{},{},{},{}", p, j, i, grid.points()[i], rows[i * paths + p])?;
            }
        }
    }
    Ok(())
}
