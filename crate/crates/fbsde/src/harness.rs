//! Error metrics against references, convergence-rate studies over a ladder
//! of step counts, reference backends, and CSV reporting.
//!
//! Metrics are evaluated on the reference's own date set, with the scheme
//! read piecewise-constant through its projection. That is the discrete
//! stand-in for the continuous-time sup and integral norms: evaluating only
//! on the run's grid would miss the between-date oscillation that carries
//! the first-order error for problems with additive noise.
//!
//! Two reference backends exist: registered closed forms for builtin
//! problems, and a fine-grid run of the same scheme driven by the same
//! Brownian path (refined increments summing to the coarse ones) and the
//! same jump times.

use std::time::Instant;

use rayon::prelude::*;

use crate::backward::PipelineOptions;
use crate::config::BuiltinId;
use crate::error::{Error, Result};
use crate::forward::{euler_x0, jumped_branch_values, refine_bundle, simulate_bundle, PathBundle};
use crate::model::{JumpModel, ProblemSpec};
use crate::recombine::{solve_scheme, GlobalSolution};
use crate::timegrid::TimeGrid;
use crate::util::CHUNK;

/// Squared-error norms of a run against a reference, with standard errors.
///
/// `err_y_sq` is a sup over dates of per-date means (the standard error is
/// reported at the date attaining the sup); `err_x_sq` puts the sup inside
/// the path average; `err_z_sq` and `err_u_sq` are time integrals, the
/// latter weighted by the jump intensity.
#[derive(Debug, Clone, Copy, Default)]
pub struct ErrorReport {
    pub err_x_sq: f64,
    pub err_y_sq: f64,
    pub err_z_sq: f64,
    pub err_u_sq: f64,
    pub se_x: f64,
    pub se_y: f64,
    pub se_z: f64,
    pub se_u: f64,
    pub n_paths: usize,
}

/// Closed-form reference values on an explicit date set (row-major
/// `date × path`, like the solver arrays).
#[derive(Debug, Clone)]
pub struct ClosedRows {
    pub dates: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
}

/// Reference side of an error computation.
pub enum Reference<'a> {
    /// Fine-grid run of the same scheme, compared on its own dates.
    Fine(&'a GlobalSolution),
    /// Closed-form values on the stored dates.
    Rows(&'a ClosedRows),
}

/// Closed-form solution rows for the builtin problems that have one,
/// evaluated on the run's grid dates from the run's own Brownian path.
pub fn closed_form_rows(
    id: BuiltinId,
    spec: &ProblemSpec,
    jump: &JumpModel,
    grid: &TimeGrid,
    bundle: &PathBundle,
) -> Result<ClosedRows> {
    let n = grid.n_steps();
    let paths = bundle.n_paths;
    let horizon = grid.horizon();
    // Brownian partial sums at grid dates.
    let mut w = vec![0.0f64; (n + 1) * paths];
    for i in 1..=n {
        let (done, rest) = w.split_at_mut(i * paths);
        let prev = &done[(i - 1) * paths..];
        let next = &mut rest[..paths];
        let dw = bundle.step(i);
        next.par_chunks_mut(CHUNK)
            .zip(prev.par_chunks(CHUNK))
            .zip(dw.par_chunks(CHUNK))
            .for_each(|((nx, pv), d)| {
                for ((slot, a), b) in nx.iter_mut().zip(pv).zip(d) {
                    *slot = a + b;
                }
            });
    }

    let x0 = spec.x0;
    let mut rows = ClosedRows {
        dates: grid.points().to_vec(),
        x: vec![0.0f64; (n + 1) * paths],
        y: vec![0.0f64; (n + 1) * paths],
        z: vec![0.0f64; (n + 1) * paths],
        u: vec![0.0f64; (n + 1) * paths],
    };

    match id {
        BuiltinId::Driftless => {
            // Value process = conditional expectation of the terminal value;
            // the pre-jump component carries the deterministic offset
            // β₀(1 - e^{-λ(T-t)}) and the jump component β₀ itself.
            let beta0 = (spec.beta)(0.0, 0.0);
            let lambda0 = jump.lambda(0.0);
            for i in 0..=n {
                let t = grid.points()[i];
                let offset = beta0 * (1.0 - (-lambda0 * (horizon - t)).exp());
                let u_val = beta0 * (-lambda0 * (horizon - t)).exp();
                let wrow = &w[i * paths..(i + 1) * paths];
                for p in 0..paths {
                    let tau = bundle.taus[p];
                    let jumped = t >= tau;
                    rows.x[i * paths + p] = x0 + wrow[p] + if jumped { beta0 } else { 0.0 };
                    rows.y[i * paths + p] =
                        x0 + wrow[p] + if jumped { beta0 } else { offset };
                    rows.z[i * paths + p] = 1.0;
                    rows.u[i * paths + p] = if t <= tau { u_val } else { 0.0 };
                }
            }
        }
        BuiltinId::LinearJump => {
            // g ≡ 1, f = α·y: deterministic exponential value, no z or u.
            let beta0 = (spec.beta)(0.0, 0.0);
            let alpha = (spec.f)(0.0, 0.0, 1.0, 0.0, 0.0);
            for i in 0..=n {
                let t = grid.points()[i];
                let y_val = (alpha * (horizon - t)).exp();
                let wrow = &w[i * paths..(i + 1) * paths];
                for p in 0..paths {
                    let tau = bundle.taus[p];
                    rows.x[i * paths + p] =
                        x0 + wrow[p] + if t >= tau { beta0 } else { 0.0 };
                    rows.y[i * paths + p] = y_val;
                }
            }
        }
        other => return Err(Error::UnknownProblem(format!("{} (no closed form)", other.name()))),
    }
    Ok(rows)
}

struct DateAccum {
    sum_dy2: f64,
    sum_dy4: f64,
}

/// Error norms of `run` against `reference`, streamed over the reference's
/// dates. Both sides must be built on coupled paths (same increments
/// aggregation and the same jump times).
pub fn error_metrics(
    run: &GlobalSolution,
    reference: &Reference<'_>,
    jump: &JumpModel,
) -> Result<ErrorReport> {
    let paths = run.n_paths;
    let dates: &[f64] = match reference {
        Reference::Fine(fine) => {
            if fine.n_paths != paths {
                return Err(Error::PathMismatch(format!(
                    "run has {paths} paths, reference {}",
                    fine.n_paths
                )));
            }
            if fine.taus != run.taus {
                return Err(Error::PathMismatch(
                    "reference not coupled: jump times differ".into(),
                ));
            }
            fine.grid.points()
        }
        Reference::Rows(rows) => {
            if rows.x.len() != rows.dates.len() * paths {
                return Err(Error::PathMismatch(
                    "closed-form rows do not match the path count".into(),
                ));
            }
            &rows.dates
        }
    };

    let n_dates = dates.len();
    let mut max_x = vec![0.0f64; paths];
    let mut sum_z = vec![0.0f64; paths];
    let mut sum_u = vec![0.0f64; paths];
    let mut sup_y = f64::NEG_INFINITY;
    let mut se_y = 0.0f64;

    for k in 0..n_dates {
        let s = dates[k];
        let (i_run, _) = run.grid.project(s)?;
        let cell_dt = if k + 1 < n_dates { dates[k + 1] - s } else { 0.0 };
        let lambda_s = jump.lambda(s);

        let partials: Vec<DateAccum> = max_x
            .par_chunks_mut(CHUNK)
            .zip(sum_z.par_chunks_mut(CHUNK))
            .zip(sum_u.par_chunks_mut(CHUNK))
            .enumerate()
            .map(|(ci, ((mx, sz), su))| {
                let base = ci * CHUNK;
                let mut acc = DateAccum {
                    sum_dy2: 0.0,
                    sum_dy4: 0.0,
                };
                for off in 0..mx.len() {
                    let p = base + off;
                    let rv = run.evaluate_at_index(i_run, s, p);
                    let (rx, ry, rz, ru) = match reference {
                        Reference::Fine(fine) => {
                            let fv = fine.evaluate_at_index(k, s, p);
                            (fv.x, fv.y, fv.z, fv.u)
                        }
                        Reference::Rows(rows) => (
                            rows.x[k * paths + p],
                            rows.y[k * paths + p],
                            rows.z[k * paths + p],
                            rows.u[k * paths + p],
                        ),
                    };
                    let dx = rx - rv.x;
                    let dy = ry - rv.y;
                    mx[off] = mx[off].max(dx * dx);
                    acc.sum_dy2 += dy * dy;
                    acc.sum_dy4 += dy * dy * dy * dy;
                    if cell_dt > 0.0 {
                        let dz = rz - rv.z;
                        sz[off] += dz * dz * cell_dt;
                        let du = ru - rv.u;
                        su[off] += lambda_s * du * du * cell_dt;
                    }
                }
                acc
            })
            .collect();

        let (sum_dy2, sum_dy4) = partials
            .into_iter()
            .fold((0.0, 0.0), |(a, b), acc| (a + acc.sum_dy2, b + acc.sum_dy4));
        let mean_dy2 = sum_dy2 / paths as f64;
        if mean_dy2 > sup_y {
            sup_y = mean_dy2;
            let var = (sum_dy4 / paths as f64 - mean_dy2 * mean_dy2).max(0.0);
            se_y = (var / paths as f64).sqrt();
        }
    }

    let (err_x_sq, sd_x) = crate::util::mean_std(&max_x);
    let (err_z_sq, sd_z) = crate::util::mean_std(&sum_z);
    let (err_u_sq, sd_u) = crate::util::mean_std(&sum_u);
    let sqrt_p = (paths as f64).sqrt();
    Ok(ErrorReport {
        err_x_sq,
        err_y_sq: sup_y.max(0.0),
        err_z_sq,
        err_u_sq,
        se_x: sd_x / sqrt_p,
        se_y,
        se_z: sd_z / sqrt_p,
        se_u: sd_u / sqrt_p,
        n_paths: paths,
    })
}

/// Forward-only error report: `err_x_sq` against a fine coupled forward run,
/// the backward norms left at zero. Used where only the forward rate is
/// studied; the backward solves would dominate the runtime otherwise.
pub fn forward_error_metrics(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    coarse: &PathBundle,
    fine_grid: &TimeGrid,
    fine: &PathBundle,
) -> Result<ErrorReport> {
    let paths = coarse.n_paths;
    let x0c = euler_x0(spec, grid, coarse)?;
    let selc = jumped_branch_values(spec, grid, coarse, &x0c)?;
    let x0f = euler_x0(spec, fine_grid, fine)?;
    let self_ = jumped_branch_values(spec, fine_grid, fine, &x0f)?;

    let fine_dates = fine_grid.points();
    let mut max_x = vec![0.0f64; paths];
    for (k, &s) in fine_dates.iter().enumerate() {
        let (i_run, _) = grid.project(s)?;
        max_x
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(ci, mx)| {
                let base = ci * CHUNK;
                for (off, slot) in mx.iter_mut().enumerate() {
                    let p = base + off;
                    let tau = coarse.taus[p];
                    let rv = if s < tau {
                        x0c[i_run * paths + p]
                    } else {
                        selc[i_run * paths + p]
                    };
                    let fv = if s < tau {
                        x0f[k * paths + p]
                    } else {
                        self_[k * paths + p]
                    };
                    let d = fv - rv;
                    *slot = slot.max(d * d);
                }
            });
    }
    let (err_x_sq, sd_x) = crate::util::mean_std(&max_x);
    Ok(ErrorReport {
        err_x_sq,
        se_x: sd_x / (paths as f64).sqrt(),
        n_paths: paths,
        ..Default::default()
    })
}

// ---------------------------------------------------------------------------
// Convergence study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    ClosedForm,
    FineGrid { factor: usize },
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub n_list: Vec<usize>,
    pub paths: usize,
    pub seed: u64,
    pub pipeline: PipelineOptions,
    pub reference: ReferenceKind,
    pub forward_only: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_list: vec![8, 16, 32, 64],
            paths: 200_000,
            seed: 0,
            pipeline: PipelineOptions::default(),
            reference: ReferenceKind::FineGrid { factor: 4 },
            forward_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TableRow {
    pub n: usize,
    pub mesh: f64,
    pub report: ErrorReport,
    pub runtime_ms: u128,
    pub seed: u64,
}

/// Fitted log-log slopes per metric; `None` when a metric was exactly zero
/// somewhere (a slope of log 0 is meaningless) or not computed.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricSlopes {
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub z: Option<f64>,
    pub u: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvergenceTable {
    pub rows: Vec<TableRow>,
    pub slopes: MetricSlopes,
    pub flags: Vec<String>,
}

/// Least-squares slope of `ln err` against `ln n`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn slope_of(rows: &[TableRow], pick: impl Fn(&ErrorReport) -> f64) -> Option<f64> {
    if rows.iter().any(|r| pick(&r.report) <= 0.0) {
        return None;
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.n as f64).ln(), pick(&r.report).ln()))
        .collect();
    Some(fit_loglog_slope(&pts))
}

/// Runs the full pipeline (or forward only) for every `n` in the ladder
/// against the chosen reference, fits slopes, and flags suspicious ones.
pub fn convergence_study(
    spec: &ProblemSpec,
    jump: &JumpModel,
    closed_id: Option<BuiltinId>,
    cfg: &StudyConfig,
) -> Result<ConvergenceTable> {
    if cfg.n_list.len() < 3 {
        return Err(Error::InvalidProblem(
            "convergence study needs at least 3 ladder entries".into(),
        ));
    }
    if cfg.n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidProblem("n_list must be increasing".into()));
    }
    let mut rows = Vec::with_capacity(cfg.n_list.len());
    for &n in &cfg.n_list {
        let start = Instant::now();
        let grid = TimeGrid::uniform(spec.horizon, n)?;
        let report = match (cfg.reference, cfg.forward_only) {
            (ReferenceKind::ClosedForm, forward_only) => {
                let id = closed_id.ok_or_else(|| {
                    Error::UnknownProblem("closed-form reference needs a builtin problem".into())
                })?;
                let bundle = simulate_bundle(&grid, jump, cfg.paths, cfg.seed)?;
                let rows_ref = closed_form_rows(id, spec, jump, &grid, &bundle)?;
                if forward_only {
                    // Forward part only, still against the closed form.
                    let x0 = euler_x0(spec, &grid, &bundle)?;
                    let sel = jumped_branch_values(spec, &grid, &bundle, &x0)?;
                    forward_only_vs_rows(&grid, &bundle, &x0, &sel, &rows_ref)?
                } else {
                    let sol = solve_scheme(spec, &grid, &bundle, &cfg.pipeline)?;
                    error_metrics(&sol, &Reference::Rows(&rows_ref), jump)?
                }
            }
            (ReferenceKind::FineGrid { factor }, true) => {
                let (coarse, fine, fine_grid) =
                    refine_bundle(&grid, factor, jump, cfg.paths, cfg.seed)?;
                forward_error_metrics(spec, &grid, &coarse, &fine_grid, &fine)?
            }
            (ReferenceKind::FineGrid { factor }, false) => {
                let (coarse, fine, fine_grid) =
                    refine_bundle(&grid, factor, jump, cfg.paths, cfg.seed)?;
                let sol_c = solve_scheme(spec, &grid, &coarse, &cfg.pipeline)?;
                let sol_f = solve_scheme(spec, &fine_grid, &fine, &cfg.pipeline)?;
                error_metrics(&sol_c, &Reference::Fine(&sol_f), jump)?
            }
        };
        rows.push(TableRow {
            n,
            mesh: grid.mesh(),
            report,
            runtime_ms: start.elapsed().as_millis(),
            seed: cfg.seed,
        });
    }

    let mut flags = Vec::new();
    let slopes = MetricSlopes {
        x: slope_of(&rows, |r| r.err_x_sq),
        y: if cfg.forward_only { None } else { slope_of(&rows, |r| r.err_y_sq) },
        z: if cfg.forward_only { None } else { slope_of(&rows, |r| r.err_z_sq) },
        u: if cfg.forward_only { None } else { slope_of(&rows, |r| r.err_u_sq) },
    };
    for (name, s) in [
        ("x", slopes.x),
        ("y", slopes.y),
        ("z", slopes.z),
        ("u", slopes.u),
    ] {
        match s {
            None => flags.push(format!("slope_{name}: skipped (zero or absent errors)")),
            Some(v) if !(-1.5..=-0.5).contains(&v) => {
                flags.push(format!("slope_{name}: {v:.3} outside [-1.5, -0.5]"))
            }
            _ => {}
        }
    }
    Ok(ConvergenceTable {
        rows,
        slopes,
        flags,
    })
}

fn forward_only_vs_rows(
    grid: &TimeGrid,
    bundle: &PathBundle,
    x0: &[f64],
    sel: &[f64],
    rows_ref: &ClosedRows,
) -> Result<ErrorReport> {
    let paths = bundle.n_paths;
    let mut max_x = vec![0.0f64; paths];
    for (k, &s) in rows_ref.dates.iter().enumerate() {
        let (i, _) = grid.project(s)?;
        for p in 0..paths {
            let rv = if s < bundle.taus[p] {
                x0[i * paths + p]
            } else {
                sel[i * paths + p]
            };
            let d = rows_ref.x[k * paths + p] - rv;
            max_x[p] = max_x[p].max(d * d);
        }
    }
    let (err_x_sq, sd) = crate::util::mean_std(&max_x);
    Ok(ErrorReport {
        err_x_sq,
        se_x: sd / (paths as f64).sqrt(),
        n_paths: paths,
        ..Default::default()
    })
}

impl ConvergenceTable {
    /// CSV with the fixed column order
    /// `n,mesh,err_x_sq,err_y_sq,err_z_sq,err_u_sq,se_x,se_y,se_z,se_u,runtime_ms,seed`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "n,mesh,err_x_sq,err_y_sq,err_z_sq,err_u_sq,se_x,se_y,se_z,se_u,runtime_ms,seed"
        )?;
        for r in &self.rows {
            let e = &r.report;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.n,
                r.mesh,
                e.err_x_sq,
                e.err_y_sq,
                e.err_z_sq,
                e.err_u_sq,
                e.se_x,
                e.se_y,
                e.se_z,
                e.se_u,
                r.runtime_ms,
                r.seed
            )?;
        }
        Ok(())
    }
}
