//! Backward implicit schemes: the Brownian solve along every post-jump
//! branch, the diagonal values feeding the pre-jump generator, and the
//! coupled pre-jump solve.
//!
//! One backward step of either scheme fits two regressions against the same
//! design matrix — the conditional mean of the next value and the
//! increment-weighted mean giving `z` — and then resolves the implicit `y`
//! per path by fixed-point iteration. `z` is always explicit; only `y`
//! appears on both sides.
//!
//! Branch `j` is solved from the terminal date down to its own start `t_j`
//! with the `u`-argument pinned to zero. The pre-jump solve consumes
//! `u = Y¹_{t_i}(t_i) - y` through the diagonal array, which is only
//! constructible once every branch has been solved, so the recursive order
//! of the system is enforced by the types.

use rayon::prelude::*;

use crate::condexp::{self, BasisSpec, FittedConditional};
use crate::error::{Error, Result};
use crate::forward::{euler_x1_into, jump_branch_index, PathBundle};
use crate::model::{Generator, ProblemSpec};
use crate::timegrid::TimeGrid;
use crate::util::{self, CHUNK};

/// Fixed-point controls for the implicit step.
#[derive(Debug, Clone, Copy)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            tol: 1e-12,
            max_iter: 50,
        }
    }
}

/// Solver knobs shared by the branch and pre-jump solves.
#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub basis: BasisSpec,
    pub picard: PicardOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            basis: BasisSpec::default(),
            picard: PicardOptions::default(),
        }
    }
}

/// Resolves `y = e_y + f(y)·dt` by Picard iteration from `y₀ = e_y`, with
/// Aitken extrapolation every third iterate (exact after one cycle when `f`
/// is affine in `y`; plain Picard behaviour otherwise). Returns only after a
/// genuine application of the map moved less than `tol`, so the residual
/// `|y - e_y - f(y)·dt|` is below `l_y·dt·tol` on success.
///
/// `l_y·dt ≥ 1` fails before iterating: the map is not a guaranteed
/// contraction there.
pub fn implicit_step(
    f_of_y: impl Fn(f64) -> f64,
    e_y: f64,
    dt: f64,
    l_y: f64,
    opts: &PicardOptions,
) -> Result<f64> {
    let product = l_y * dt;
    if product >= 1.0 {
        return Err(Error::ContractionBound { product });
    }
    let mut y = e_y;
    let mut hist = [e_y, 0.0, 0.0];
    let mut filled = 1;
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let next = e_y + f_of_y(y) * dt;
        residual = (next - y).abs();
        if residual <= opts.tol {
            return Ok(next);
        }
        hist[filled] = next;
        filled += 1;
        if filled == 3 {
            let d1 = hist[1] - hist[0];
            let d2 = hist[2] - hist[1];
            let den = d2 - d1;
            let candidate = hist[2] - d2 * d2 / den;
            y = if den != 0.0 && candidate.is_finite() {
                candidate
            } else {
                hist[2]
            };
            hist[0] = y;
            filled = 1;
        } else {
            y = next;
        }
    }
    Err(Error::NonConvergence {
        residual,
        iterations: opts.max_iter,
    })
}

/// Fitted functions of one backward step.
#[derive(Debug, Clone)]
pub struct StepFits {
    pub y: FittedConditional,
    pub z: FittedConditional,
}

enum UMode<'a> {
    /// Post-jump branches: the generator never sees the jump component.
    Zero,
    /// Pre-jump solve: `u = diag[i·paths + p] - y`.
    Diagonal(&'a [f64]),
}

/// One backward sweep along a Markov chain, from the terminal date down to
/// time index `stop`. `y_next` must hold the terminal values on entry and
/// holds the values at index `stop` on exit. `on_step(i, y_row, z_row)` is
/// called for every computed index `i = n-1, …, stop`.
#[allow(clippy::too_many_arguments)]
fn backward_sweep(
    spec: &ProblemSpec,
    f_eff: &Generator,
    grid: &TimeGrid,
    bundle: &PathBundle,
    chain: &[f64],
    stop: usize,
    u_mode: UMode<'_>,
    opts: &PipelineOptions,
    y_next: &mut Vec<f64>,
    mut on_step: impl FnMut(usize, &[f64], &[f64]),
) -> Result<Vec<StepFits>> {
    let n = grid.n_steps();
    let paths = bundle.n_paths;
    let l_y = spec.lipschitz_y();
    let mut fits = Vec::with_capacity(n - stop);
    let mut z_target = vec![0.0f64; paths];
    let mut y_row = vec![0.0f64; paths];
    let mut z_row = vec![0.0f64; paths];

    for i in (stop + 1..=n).rev() {
        let dt = grid.dt(i);
        let t_prev = grid.points()[i - 1];
        let dw = bundle.step(i);
        let states = &chain[(i - 1) * paths..i * paths];
        let inv_dt = 1.0 / dt;
        z_target
            .par_chunks_mut(CHUNK)
            .zip(y_next.par_chunks(CHUNK))
            .zip(dw.par_chunks(CHUNK))
            .for_each(|((zt, yn), w)| {
                for ((slot, y), dwp) in zt.iter_mut().zip(yn).zip(w) {
                    *slot = y * dwp * inv_dt;
                }
            });

        let step_fits = if i - 1 == 0 {
            // The chain state at t_0 is deterministic, so the conditional
            // expectation degenerates to the unconditional average.
            let e_y = util::chunked_sum(y_next) / paths as f64;
            let z0 = util::chunked_sum(&z_target) / paths as f64;
            StepFits {
                y: FittedConditional::constant(&opts.basis, e_y),
                z: FittedConditional::constant(&opts.basis, z0),
            }
        } else {
            let pair =
                condexp::fit_many(&opts.basis, states, &[y_next.as_slice(), z_target.as_slice()])?;
            let mut it = pair.into_iter();
            StepFits {
                y: it.next().unwrap(),
                z: it.next().unwrap(),
            }
        };

        // Evaluate both fits and resolve the implicit y in one fused pass.
        let diag = match u_mode {
            UMode::Zero => None,
            UMode::Diagonal(d) => Some(&d[(i - 1) * paths..i * paths]),
        };
        y_row
            .par_chunks_mut(CHUNK)
            .zip(z_row.par_chunks_mut(CHUNK))
            .zip(states.par_chunks(CHUNK))
            .enumerate()
            .try_for_each(|(ci, ((yr, zr), st))| -> Result<()> {
                let base = ci * CHUNK;
                for (k, (y_slot, z_slot)) in yr.iter_mut().zip(zr.iter_mut()).enumerate() {
                    let x = st[k];
                    let e_y = step_fits.y.evaluate(x);
                    let z = step_fits.z.evaluate(x);
                    let y = match diag {
                        None => implicit_step(
                            |y| f_eff(t_prev, x, y, z, 0.0),
                            e_y,
                            dt,
                            l_y,
                            &opts.picard,
                        )?,
                        Some(d) => {
                            let dval = d[base + k];
                            implicit_step(
                                |y| f_eff(t_prev, x, y, z, dval - y),
                                e_y,
                                dt,
                                l_y,
                                &opts.picard,
                            )?
                        }
                    };
                    if !y.is_finite() {
                        return Err(Error::NonFinite {
                            step: i - 1,
                            path: base + k,
                            state: y,
                        });
                    }
                    *y_slot = y;
                    *z_slot = z;
                }
                Ok(())
            })?;

        on_step(i - 1, &y_row, &z_row);
        std::mem::swap(y_next, &mut y_row);
        fits.push(step_fits);
    }
    Ok(fits)
}

fn terminal_row(spec: &ProblemSpec, chain: &[f64], paths: usize, n: usize) -> Vec<f64> {
    let mut row = vec![0.0f64; paths];
    let last = &chain[n * paths..(n + 1) * paths];
    row.par_chunks_mut(CHUNK)
        .zip(last.par_chunks(CHUNK))
        .for_each(|(r, x)| {
            for (slot, xv) in r.iter_mut().zip(x) {
                *slot = (spec.g)(*xv);
            }
        });
    row
}

/// Backward solution of every post-jump branch, reduced to what the rest of
/// the pipeline consumes.
///
/// `diag[i·paths + p]` holds `Y¹_{t_i}(t_i)` for path `p`; the `sel_*`
/// arrays hold the branch selected by the path's own jump date (rows before
/// that date are never read and stay zero); `post_kick` holds the branch
/// start states `X¹_{t_i}(t_i)`. Per-branch fitted conditionals are kept for
/// pointwise re-evaluation.
#[derive(Debug)]
pub struct BranchBackward {
    pub n_paths: usize,
    pub diag: Vec<f64>,
    pub post_kick: Vec<f64>,
    pub sel_x: Vec<f64>,
    pub sel_y: Vec<f64>,
    pub sel_z: Vec<f64>,
    /// `fits[j]` are branch `j`'s step fits ordered from the terminal side
    /// down to `t_j`; `fits[j].last()` is the fit at the branch's own start.
    pub fits: Vec<Vec<StepFits>>,
}

impl BranchBackward {
    /// Fitted conditional of branch `j` at its own start date, used to
    /// transport diagonal values onto other state clouds. Branch `n` has no
    /// regression step (terminal only), so it has no fit.
    pub fn diag_fit(&self, j: usize) -> Option<&FittedConditional> {
        self.fits.get(j).and_then(|f| f.last()).map(|s| &s.y)
    }
}

/// Solves branch `j` alone and returns its per-step values from `t_j` to
/// `t_n` (row `i - j` holds date `t_i`) together with the per-step fits.
/// Convenience entry point for tests and dumps; the pipeline uses
/// [`solve_branches`], which keeps only the reduced arrays.
pub fn solve_branch(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    bundle: &PathBundle,
    x0_chain: &[f64],
    j: usize,
    opts: &PipelineOptions,
) -> Result<(Vec<f64>, Vec<f64>, Vec<StepFits>)> {
    let f_eff = spec.effective_generator()?;
    let n = grid.n_steps();
    let paths = bundle.n_paths;
    let mut chain = vec![0.0f64; (n + 1) * paths];
    euler_x1_into(spec, grid, bundle, x0_chain, j, &mut chain)?;
    let mut y_next = terminal_row(spec, &chain, paths, n);
    let mut y_all = vec![0.0f64; (n - j + 1) * paths];
    let mut z_all = vec![0.0f64; (n - j) * paths];
    y_all[(n - j) * paths..].copy_from_slice(&y_next);
    let fits = backward_sweep(
        spec,
        &f_eff,
        grid,
        bundle,
        &chain,
        j,
        UMode::Zero,
        opts,
        &mut y_next,
        |i, y_row, z_row| {
            y_all[(i - j) * paths..(i - j + 1) * paths].copy_from_slice(y_row);
            z_all[(i - j) * paths..(i - j + 1) * paths].copy_from_slice(z_row);
        },
    )?;
    Ok((y_all, z_all, fits))
}

/// Solves all branches `j = 0..=n` and assembles the reduced arrays. Each
/// branch chain is materialized once into a rolling buffer, so peak memory
/// stays linear in `n·paths`.
pub fn solve_branches(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    bundle: &PathBundle,
    x0_chain: &[f64],
    opts: &PipelineOptions,
) -> Result<BranchBackward> {
    let f_eff = spec.effective_generator()?;
    let n = grid.n_steps();
    let paths = bundle.n_paths;

    let mut paths_by_branch: Vec<Vec<u32>> = vec![Vec::new(); n + 1];
    for (p, &tau) in bundle.taus.iter().enumerate() {
        if let Some(j) = jump_branch_index(grid, tau) {
            paths_by_branch[j].push(p as u32);
        }
    }

    let mut out = BranchBackward {
        n_paths: paths,
        diag: vec![0.0f64; (n + 1) * paths],
        post_kick: vec![0.0f64; (n + 1) * paths],
        sel_x: vec![0.0f64; (n + 1) * paths],
        sel_y: vec![0.0f64; (n + 1) * paths],
        sel_z: vec![0.0f64; n * paths],
        fits: Vec::with_capacity(n + 1),
    };
    let mut chain = vec![0.0f64; (n + 1) * paths];

    for j in 0..=n {
        euler_x1_into(spec, grid, bundle, x0_chain, j, &mut chain)?;
        out.post_kick[j * paths..(j + 1) * paths]
            .copy_from_slice(&chain[j * paths..(j + 1) * paths]);
        for &p in &paths_by_branch[j] {
            let p = p as usize;
            for i in j..=n {
                out.sel_x[i * paths + p] = chain[i * paths + p];
            }
        }

        let mut y_next = terminal_row(spec, &chain, paths, n);
        if j == n {
            out.diag[n * paths..].copy_from_slice(&y_next);
        }
        for &p in &paths_by_branch[j] {
            out.sel_y[n * paths + p as usize] = y_next[p as usize];
        }

        let sel_paths = &paths_by_branch[j];
        let diag_row = &mut out.diag[j * paths..(j + 1) * paths];
        let sel_y = &mut out.sel_y;
        let sel_z = &mut out.sel_z;
        let fits = backward_sweep(
            spec,
            &f_eff,
            grid,
            bundle,
            &chain,
            j,
            UMode::Zero,
            opts,
            &mut y_next,
            |i, y_row, z_row| {
                if i == j {
                    diag_row.copy_from_slice(y_row);
                }
                for &p in sel_paths {
                    let p = p as usize;
                    sel_y[i * paths + p] = y_row[p];
                    sel_z[i * paths + p] = z_row[p];
                }
            },
        )?;
        out.fits.push(fits);
    }
    Ok(out)
}

/// Diagonal array `Y¹_{t_i}(t_i)` per path; identity accessor kept for
/// symmetry with the scheme displays.
pub fn diagonal(branches: &BranchBackward) -> &[f64] {
    &branches.diag
}

/// Transports a solved branch system's diagonal onto another run's post-kick
/// states through its fitted conditionals. Used by the intermediary-scheme
/// error split, where the diagonal comes from a higher-accuracy solve.
pub fn diagonal_from_fits(
    spec: &ProblemSpec,
    source: &BranchBackward,
    post_kick: &[f64],
    paths: usize,
) -> Result<Vec<f64>> {
    let n = source.fits.len() - 1;
    if post_kick.len() != (n + 1) * paths {
        return Err(Error::PathMismatch("post-kick state array size mismatch".into()));
    }
    let mut diag = vec![0.0f64; (n + 1) * paths];
    for i in 0..n {
        let fit = source.diag_fit(i).ok_or(Error::MissingBranch(i))?;
        let states = &post_kick[i * paths..(i + 1) * paths];
        let (head, _) = diag.split_at_mut((i + 1) * paths);
        fit.evaluate_into(states, &mut head[i * paths..]);
    }
    // Terminal date: the diagonal is the terminal condition itself.
    let states = &post_kick[n * paths..];
    diag[n * paths..]
        .par_chunks_mut(CHUNK)
        .zip(states.par_chunks(CHUNK))
        .for_each(|(d, s)| {
            for (slot, x) in d.iter_mut().zip(s) {
                *slot = (spec.g)(*x);
            }
        });
    Ok(diag)
}

/// Pre-jump backward solution.
#[derive(Debug)]
pub struct ZeroBackward {
    pub n_paths: usize,
    /// `(n+1) × paths` values of `Y⁰`.
    pub y: Vec<f64>,
    /// `n × paths` values of `Z⁰` (row `i` is the step from `t_i`).
    pub z: Vec<f64>,
    /// Scalar value at the initial date (constant across paths).
    pub y0: f64,
    pub fits: Vec<StepFits>,
}

/// Solves the pre-jump scheme given the diagonal of the branch system. The
/// diagonal must cover every date: a partial array is rejected, which is
/// what enforces "branches first" at runtime.
pub fn solve_zero(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    bundle: &PathBundle,
    x0_chain: &[f64],
    diag: &[f64],
    opts: &PipelineOptions,
) -> Result<ZeroBackward> {
    let f_eff = spec.effective_generator()?;
    let n = grid.n_steps();
    let paths = bundle.n_paths;
    if diag.len() != (n + 1) * paths {
        return Err(Error::MissingBranch(diag.len() / paths.max(1)));
    }
    let mut y = vec![0.0f64; (n + 1) * paths];
    let mut z = vec![0.0f64; n * paths];
    let mut y_next = terminal_row(spec, x0_chain, paths, n);
    y[n * paths..].copy_from_slice(&y_next);
    let fits = backward_sweep(
        spec,
        &f_eff,
        grid,
        bundle,
        x0_chain,
        0,
        UMode::Diagonal(diag),
        opts,
        &mut y_next,
        |i, y_row, z_row| {
            y[i * paths..(i + 1) * paths].copy_from_slice(y_row);
            z[i * paths..(i + 1) * paths].copy_from_slice(z_row);
        },
    )?;
    let y0 = y[0];
    debug_assert!(y[..paths].iter().all(|v| *v == y0));
    Ok(ZeroBackward {
        n_paths: paths,
        y,
        z,
        y0,
        fits,
    })
}

/// Writes the backward dump CSV `kind,branch,i,path,y,z` (kind `zero` rows
/// first with branch −1, then each branch in index order; `z` is empty at
/// the terminal date).
pub fn dump_solution_csv<W: std::io::Write>(
    w: &mut W,
    spec: &ProblemSpec,
    grid: &TimeGrid,
    bundle: &PathBundle,
    x0_chain: &[f64],
    zero: &ZeroBackward,
    opts: &PipelineOptions,
) -> Result<()> {
    let n = grid.n_steps();
    let paths = bundle.n_paths;
    writeln!(w, "kind,branch,i,path,y,z")?;
    for i in 0..=n {
        for p in 0..paths {
            if i < n {
                writeln!(
                    w,
                    "zero,-1,{},{},{},{}",
                    i,
                    p,
                    zero.y[i * paths + p],
                    zero.z[i * paths + p]
                )?;
            } else {
                writeln!(w, "zero,-1,{},{},{},", i, p, zero.y[i * paths + p])?;
            }
        }
    }
    for j in 0..=n {
        let (y_all, z_all, _) = solve_branch(spec, grid, bundle, x0_chain, j, opts)?;
        for i in j..=n {
            for p in 0..paths {
                if i < n {
                    writeln!(
                        w,
                        "branch,{},{},{},{},{}",
                        j,
                        i,
                        p,
                        y_all[(i - j) * paths + p],
                        z_all[(i - j) * paths + p]
                    )?;
                } else {
                    writeln!(w, "branch,{},{},{},{},", j, i, p, y_all[(i - j) * paths + p])?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{euler_x0, simulate_bundle};
    use crate::model::{Constants, GeneratorKind, JumpModel};
    use std::sync::Arc;

    fn spec_full(
        b: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        beta: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        g: impl Fn(f64) -> f64 + Send + Sync + 'static,
        f: impl Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        x0: f64,
        k: f64,
    ) -> ProblemSpec {
        ProblemSpec::new(
            Arc::new(b),
            Arc::new(sigma),
            Arc::new(beta),
            Arc::new(g),
            Arc::new(f),
            x0,
            1.0,
            GeneratorKind::Lipschitz,
            Constants {
                k,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn implicit_step_explicit_when_f_zero() {
        let y = implicit_step(|_| 0.0, 1.7, 0.1, 0.0, &PicardOptions::default()).unwrap();
        assert_eq!(y, 1.7);
    }

    #[test]
    fn implicit_step_linear_matches_algebra() {
        // y = e_y + a*y*dt has the fixed point e_y / (1 - a*dt).
        let (a, dt, e_y) = (1.0, 0.1, 1.0);
        let y = implicit_step(|y| a * y, e_y, dt, a, &PicardOptions::default()).unwrap();
        assert!((y - e_y / (1.0 - a * dt)).abs() < 1e-10, "y = {y}");
        // Residual contract after convergence.
        assert!((y - e_y - a * y * dt).abs() <= 10.0 * 1e-12);
    }

    #[test]
    fn implicit_step_preemptive_on_contraction_violation() {
        let r = implicit_step(|y| y, 1.0, 1.0, 1.0, &PicardOptions::default());
        assert!(matches!(r, Err(Error::ContractionBound { .. })));
        let r2 = implicit_step(|y| 2.0 * y, 1.0, 0.6, 2.0, &PicardOptions::default());
        assert!(matches!(r2, Err(Error::ContractionBound { .. })));
    }

    #[test]
    fn implicit_step_nonlinear_residual_bound() {
        let (dt, e_y) = (0.05, 0.4);
        let f = |y: f64| y.sin() + 0.3;
        let y = implicit_step(f, e_y, dt, 1.0, &PicardOptions::default()).unwrap();
        assert!((y - e_y - f(y) * dt).abs() <= 1e-11);
    }

    fn driftless_setup(
        n: usize,
        paths: usize,
        beta0: f64,
        lambda0: f64,
        seed: u64,
    ) -> (ProblemSpec, TimeGrid, PathBundle, Vec<f64>) {
        let spec = spec_full(
            |_, _| 0.0,
            |_, _| 1.0,
            move |_, _| beta0,
            |x| x,
            move |_, _, _, _, u| lambda0 * u,
            0.0,
            6.0,
        );
        let grid = TimeGrid::uniform(1.0, n).unwrap();
        let jump = JumpModel::constant(lambda0).unwrap();
        let bundle = simulate_bundle(&grid, &jump, paths, seed).unwrap();
        let x0 = euler_x0(&spec, &grid, &bundle).unwrap();
        (spec, grid, bundle, x0)
    }

    #[test]
    fn branch_martingale_case_tracks_state() {
        // f = 0 on branches (u = 0), g(x) = x, b = 0, σ = 1: the branch value
        // is the martingale E[X_T | state] = state, recovered by regression
        // up to Monte Carlo noise.
        let (spec, grid, bundle, x0) = driftless_setup(8, 20_000, 0.25, 0.25, 3);
        let opts = PipelineOptions::default();
        let (y_all, z_all, _) = solve_branch(&spec, &grid, &bundle, &x0, 2, &opts).unwrap();
        let paths = bundle.n_paths;
        let chain = crate::forward::euler_x1(&spec, &grid, &bundle, &x0, 2).unwrap();
        for i in [2usize, 5] {
            let mut sq = 0.0;
            for p in 0..paths {
                let d = y_all[(i - 2) * paths + p] - chain[i * paths + p];
                sq += d * d;
            }
            let rms = (sq / paths as f64).sqrt();
            assert!(rms < 0.02, "branch value rms deviation {rms} at step {i}");
        }
        // Z approximates the constant 1 (slope of the value in the state).
        let mut zbar = 0.0;
        for p in 0..paths {
            zbar += z_all[(5 - 2) * paths + p];
        }
        zbar /= paths as f64;
        assert!((zbar - 1.0).abs() < 0.05, "mean z {zbar}");
    }

    #[test]
    fn deterministic_exponential_recursion_exact() {
        // g ≡ 1, f = a·y: regression of constants is exact, so the branch
        // values follow y_{i-1} = y_i / (1 - a·dt) on every path.
        let a = 0.2;
        let spec = spec_full(
            |_, _| 0.0,
            |_, _| 1.0,
            |_, _| 0.25,
            |_| 1.0,
            move |_, _, y, _, _| a * y,
            0.0,
            1.0,
        );
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let jump = JumpModel::constant(0.5).unwrap();
        let bundle = simulate_bundle(&grid, &jump, 400, 9).unwrap();
        let x0 = euler_x0(&spec, &grid, &bundle).unwrap();
        let opts = PipelineOptions::default();
        let (y_all, _, _) = solve_branch(&spec, &grid, &bundle, &x0, 0, &opts).unwrap();
        let paths = 400;
        let dt = 0.1;
        for i in 0..=10 {
            let want = (1.0 - a * dt).powi(-(10 - i as i32));
            for p in 0..paths {
                let got = y_all[i * paths + p];
                assert!(
                    (got - want).abs() < 1e-10,
                    "step {i}: got {got}, want {want}"
                );
            }
        }
        // Converges to e^{a(T-t)} as the mesh shrinks (value at t = 0).
        let cont = (a * 1.0f64).exp();
        let disc = (1.0 - a * dt).powi(-10);
        assert!((disc - cont).abs() < 0.01);
    }

    #[test]
    fn zero_beta_branches_match_each_other_bitwise() {
        // β ≡ 0 makes every branch chain identical, so the backward solves
        // see identical regression inputs and must agree bitwise on the
        // common time range.
        let spec = spec_full(
            |_, x| -x,
            |_, _| 1.0,
            |_, _| 0.0,
            |x| x.tanh(),
            |_, _, y, z: f64, _| 0.2 * y + 0.1 * z.sin(),
            1.0,
            2.0,
        );
        let grid = TimeGrid::uniform(1.0, 6).unwrap();
        let jump = JumpModel::constant(1.0).unwrap();
        let bundle = simulate_bundle(&grid, &jump, 500, 21).unwrap();
        let x0 = euler_x0(&spec, &grid, &bundle).unwrap();
        let opts = PipelineOptions::default();
        let (y2, z2, _) = solve_branch(&spec, &grid, &bundle, &x0, 2, &opts).unwrap();
        let (y4, z4, _) = solve_branch(&spec, &grid, &bundle, &x0, 4, &opts).unwrap();
        let paths = 500;
        for i in 4..=6 {
            for p in 0..paths {
                assert_eq!(
                    y2[(i - 2) * paths + p].to_bits(),
                    y4[(i - 4) * paths + p].to_bits()
                );
                if i < 6 {
                    assert_eq!(
                        z2[(i - 2) * paths + p].to_bits(),
                        z4[(i - 4) * paths + p].to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn diagonal_driftless_is_state_plus_kick() {
        // f ≡ 0 at branch level, g(x) = x: the diagonal is the post-kick
        // state X⁰ + β₀ up to regression noise.
        let (spec, grid, bundle, x0) = driftless_setup(8, 20_000, 0.25, 0.25, 5);
        let opts = PipelineOptions::default();
        let bb = solve_branches(&spec, &grid, &bundle, &x0, &opts).unwrap();
        let paths = bundle.n_paths;
        for i in [0usize, 4, 8] {
            let mut sq = 0.0;
            for p in 0..paths {
                let want = x0[i * paths + p] + 0.25;
                let d = bb.diag[i * paths + p] - want;
                sq += d * d;
            }
            let rms = (sq / paths as f64).sqrt();
            assert!(rms < 0.02, "diag rms {rms} at {i}");
        }
        // Terminal row is exact.
        for p in 0..paths {
            assert_eq!(bb.diag[8 * paths + p], x0[8 * paths + p] + 0.25);
        }
    }

    #[test]
    fn zero_solve_requires_full_diagonal() {
        let (spec, grid, bundle, x0) = driftless_setup(4, 200, 0.25, 0.25, 7);
        let opts = PipelineOptions {
            basis: BasisSpec::polynomial(1),
            ..Default::default()
        };
        let short_diag = vec![0.0; 3 * 200];
        let r = solve_zero(&spec, &grid, &bundle, &x0, &short_diag, &opts);
        assert!(matches!(r, Err(Error::MissingBranch(_))));
    }

    #[test]
    fn zero_solve_driftless_closed_form() {
        // Y⁰_{t0} → x + β₀(1 - e^{-λT}) and the discrete recursion offset is
        // β₀(1 - (1 + λ·dt)^{-n}).
        let (beta0, lambda0, n, paths) = (0.25, 0.25, 16, 40_000);
        let (spec, grid, bundle, x0) = driftless_setup(n, paths, beta0, lambda0, 11);
        let opts = PipelineOptions::default();
        let bb = solve_branches(&spec, &grid, &bundle, &x0, &opts).unwrap();
        let zero = solve_zero(&spec, &grid, &bundle, &x0, &bb.diag, &opts).unwrap();
        let dt = 1.0 / n as f64;
        let discrete = beta0 * (1.0 - (1.0 + lambda0 * dt).powi(-(n as i32)));
        let continuous = beta0 * (1.0 - (-lambda0).exp());
        // The estimator's sampling error is driven by the terminal payoff:
        // se ≈ std(g(X_T))/√paths, here ≈ 1/√paths.
        let se = 1.0 / (paths as f64).sqrt();
        assert!(
            (zero.y0 - discrete).abs() < 3.0 * se,
            "y0 {} vs discrete {discrete} (3se = {})",
            zero.y0,
            3.0 * se
        );
        assert!((zero.y0 - continuous).abs() < 3.0 * se + (discrete - continuous).abs());
        // The initial value is a genuine scalar.
        assert!(zero.y[..paths].iter().all(|v| *v == zero.y0));
    }

    #[test]
    fn zero_propagation_is_exact() {
        // g ≡ 0, f ≡ 0 propagates exact zeros through regression and the
        // implicit step at every date.
        let spec = spec_full(
            |_, x| -x,
            |_, _| 1.0,
            |_, _| 0.5,
            |_| 0.0,
            |_, _, _, _, _| 0.0,
            1.0,
            2.0,
        );
        let grid = TimeGrid::uniform(1.0, 6).unwrap();
        let jump = JumpModel::constant(1.0).unwrap();
        let bundle = simulate_bundle(&grid, &jump, 300, 13).unwrap();
        let x0 = euler_x0(&spec, &grid, &bundle).unwrap();
        let opts = PipelineOptions::default();
        let bb = solve_branches(&spec, &grid, &bundle, &x0, &opts).unwrap();
        let zero = solve_zero(&spec, &grid, &bundle, &x0, &bb.diag, &opts).unwrap();
        assert!(zero.y.iter().all(|v| *v == 0.0));
        assert!(zero.z.iter().all(|v| *v == 0.0));
        assert!(bb.diag.iter().all(|v| *v == 0.0));
        assert!(bb.sel_y.iter().all(|v| *v == 0.0));
        assert!(bb.sel_z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn monotone_in_terminal_scale() {
        // Doubling a nonnegative terminal payoff (with the constant budget
        // doubled) cannot decrease the initial value when f is monotone.
        let build = |scale: f64| {
            spec_full(
                |_, _| 0.0,
                |_, _| 1.0,
                |_, _| 0.25,
                move |x: f64| scale * 0.5 * (1.0 + x.tanh()),
                |_, _, y, _, u| 0.1 * y + 0.05 * u,
                0.3,
                2.0 * scale.max(1.0),
            )
        };
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let jump = JumpModel::constant(0.5).unwrap();
        let bundle = simulate_bundle(&grid, &jump, 4000, 17).unwrap();
        let opts = PipelineOptions::default();
        let mut y0s = Vec::new();
        for scale in [1.0, 2.0] {
            let spec = build(scale);
            let x0 = euler_x0(&spec, &grid, &bundle).unwrap();
            let bb = solve_branches(&spec, &grid, &bundle, &x0, &opts).unwrap();
            let zero = solve_zero(&spec, &grid, &bundle, &x0, &bb.diag, &opts).unwrap();
            y0s.push(zero.y0);
        }
        assert!(y0s[1] >= y0s[0], "scaling up g decreased y0: {y0s:?}");
    }

    #[test]
    fn truncation_noop_is_bit_identical() {
        // A quadratic run whose truncation level exceeds every |z| matches
        // the Lipschitz run of the same truncated generator bitwise.
        let kappa = 0.25;
        let f_raw = move |_t: f64, _x: f64, _y: f64, z: f64, u: f64| kappa * z * z + 0.1 * u;
        let constants = Constants {
            k: 2.5,
            k_g: 1.0,
            m_g: 1.0,
            k_q: 0.35,
            k_f: 0.1,
            l_fz: kappa,
            l_a: 1.0,
            k_a: 1.0,
        };
        let mk = |kind: GeneratorKind| {
            ProblemSpec::new(
                Arc::new(|_, x: f64| -x),
                Arc::new(|_, _| 1.0),
                Arc::new(|_, _| 0.5),
                Arc::new(|x: f64| x.tanh()),
                Arc::new(f_raw),
                1.0,
                1.0,
                kind,
                constants,
            )
            .unwrap()
        };
        let quad = mk(GeneratorKind::Quadratic);
        let m = quad.truncation_bound().unwrap();
        // Lipschitz comparator evaluating the truncated driver explicitly.
        let lip = ProblemSpec::new(
            Arc::new(|_, x: f64| -x),
            Arc::new(|_, _| 1.0),
            Arc::new(|_, _| 0.5),
            Arc::new(|x: f64| x.tanh()),
            Arc::new(move |t, x, y, z, u| f_raw(t, x, y, crate::model::truncate_z(z, m), u)),
            1.0,
            1.0,
            GeneratorKind::Lipschitz,
            constants,
        )
        .unwrap();

        let grid = TimeGrid::uniform(1.0, 6).unwrap();
        let jump = JumpModel::constant(1.0).unwrap();
        let bundle = simulate_bundle(&grid, &jump, 2000, 19).unwrap();
        let opts = PipelineOptions::default();
        let x0q = euler_x0(&quad, &grid, &bundle).unwrap();
        let x0l = euler_x0(&lip, &grid, &bundle).unwrap();
        let bbq = solve_branches(&quad, &grid, &bundle, &x0q, &opts).unwrap();
        let bbl = solve_branches(&lip, &grid, &bundle, &x0l, &opts).unwrap();
        let zq = solve_zero(&quad, &grid, &bundle, &x0q, &bbq.diag, &opts).unwrap();
        let zl = solve_zero(&lip, &grid, &bundle, &x0l, &bbl.diag, &opts).unwrap();
        assert!(
            zq.z.iter().all(|z| z.abs() < m),
            "empirical z exceeded the bound"
        );
        for (a, b) in zq.y.iter().zip(&zl.y) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in zq.z.iter().zip(&zl.z) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
