//! One-step conditional expectations by least-squares regression on the
//! Markov state, plus a nested Monte Carlo oracle for testing.
//!
//! The Euler chains are Markov, so the conditional expectation given the
//! discrete filtration is a function of the current chain state; this module
//! fits that function on a small basis. The normal equations are never
//! formed: the design matrix is factored by Householder QR over fixed-size
//! row blocks (a tall-skinny QR), with the block results reduced in index
//! order and the final small factorization done sequentially, so fits are
//! bit-identical for any worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::timegrid::TimeGrid;
use crate::util::{self, CHUNK};

/// Functional form of the regression basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BasisKind {
    /// Global monomials `1, s, …, s^degree` of the (standardized) state.
    Polynomial { degree: usize },
    /// Equal-width partition of the training range with `{1, s}` per cell.
    PiecewiseLinear { cells: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSpec {
    pub kind: BasisKind,
    /// Center/scale the regressor by its empirical mean and standard
    /// deviation before expanding.
    pub standardize: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            kind: BasisKind::Polynomial { degree: 3 },
            standardize: true,
        }
    }
}

impl BasisSpec {
    pub fn polynomial(degree: usize) -> Self {
        BasisSpec {
            kind: BasisKind::Polynomial { degree },
            standardize: true,
        }
    }

    pub fn piecewise_linear(cells: usize) -> Self {
        BasisSpec {
            kind: BasisKind::PiecewiseLinear { cells },
            standardize: true,
        }
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        match self.kind {
            BasisKind::Polynomial { degree } => degree + 1,
            BasisKind::PiecewiseLinear { cells } => 2 * cells,
        }
    }

    pub fn is_empty(&self) -> bool {
        false // the constant function is always present
    }
}

/// Standardization and cell layout frozen at fit time.
#[derive(Debug, Clone, Copy)]
struct StateMap {
    shift: f64,
    scale: f64,
    /// Training range in standardized coordinates (local basis only).
    lo: f64,
    hi: f64,
}

impl StateMap {
    fn apply(&self, s: f64) -> f64 {
        (s - self.shift) / self.scale
    }
}

/// A fitted conditional-expectation function.
#[derive(Debug, Clone)]
pub struct FittedConditional {
    basis: BasisSpec,
    map: StateMap,
    coeffs: Vec<f64>,
    /// Root-mean-square residual of the projection.
    pub residual_rms: f64,
    /// Ratio of the largest to the smallest diagonal entry of `R`.
    pub condition_estimate: f64,
    /// True when the design was rank deficient and a minimum-norm solution
    /// was taken.
    pub rank_deficient: bool,
}

impl FittedConditional {
    /// Fit that is identically `value`, for the dates where the conditional
    /// expectation degenerates to an unconditional average.
    pub fn constant(basis: &BasisSpec, value: f64) -> Self {
        let mut coeffs = vec![0.0; basis.len()];
        match basis.kind {
            BasisKind::Polynomial { .. } => coeffs[0] = value,
            BasisKind::PiecewiseLinear { cells } => {
                for c in 0..cells {
                    coeffs[2 * c] = value;
                }
            }
        }
        FittedConditional {
            basis: *basis,
            map: StateMap {
                shift: 0.0,
                scale: 1.0,
                lo: -1.0,
                hi: 1.0,
            },
            coeffs,
            residual_rms: 0.0,
            condition_estimate: 1.0,
            rank_deficient: false,
        }
    }

    /// Basis expansion at one state.
    pub fn evaluate(&self, state: f64) -> f64 {
        let s = self.map.apply(state);
        match self.basis.kind {
            BasisKind::Polynomial { degree } => {
                // Horner on the standardized state.
                let mut acc = self.coeffs[degree];
                for k in (0..degree).rev() {
                    acc = acc * s + self.coeffs[k];
                }
                acc
            }
            BasisKind::PiecewiseLinear { cells } => {
                let (c, sc) = locate_cell(s, self.map.lo, self.map.hi, cells);
                self.coeffs[2 * c] + self.coeffs[2 * c + 1] * sc
            }
        }
    }

    /// Fills `out[i] = evaluate(states[i])` in parallel.
    pub fn evaluate_into(&self, states: &[f64], out: &mut [f64]) {
        debug_assert_eq!(states.len(), out.len());
        out.par_chunks_mut(CHUNK)
            .zip(states.par_chunks(CHUNK))
            .for_each(|(o, s)| {
                for (oi, si) in o.iter_mut().zip(s) {
                    *oi = self.evaluate(*si);
                }
            });
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }
}

/// Maps a standardized state to its cell and the within-cell coordinate in
/// [-1, 1]. States outside the training range use the edge cells.
fn locate_cell(s: f64, lo: f64, hi: f64, cells: usize) -> (usize, f64) {
    let width = (hi - lo) / cells as f64;
    if width <= 0.0 {
        return (0, 0.0);
    }
    let raw = ((s - lo) / width).floor();
    let c = (raw.max(0.0) as usize).min(cells - 1);
    let center = lo + (c as f64 + 0.5) * width;
    (c, (s - center) / (0.5 * width))
}

/// Least-squares projection of `targets` onto the basis functions of
/// `states`.
pub fn fit(basis: &BasisSpec, states: &[f64], targets: &[f64]) -> Result<FittedConditional> {
    let fits = fit_many(basis, states, &[targets])?;
    Ok(fits.into_iter().next().unwrap())
}

/// Fits several target vectors against one shared design matrix; the
/// factorization is done once.
pub fn fit_many(
    basis: &BasisSpec,
    states: &[f64],
    targets: &[&[f64]],
) -> Result<Vec<FittedConditional>> {
    let m = states.len();
    let k = basis.len();
    for t in targets {
        if t.len() != m {
            return Err(Error::Regression(format!(
                "states ({}) and targets ({}) differ in length",
                m,
                t.len()
            )));
        }
    }
    if m < 10 * k {
        return Err(Error::Regression(format!(
            "need at least 10 samples per basis function: {m} samples for {k} columns"
        )));
    }

    let map = build_state_map(basis, states)?;
    let qr = tsqr(basis, &map, states, targets)?;

    let mut out = Vec::with_capacity(targets.len());
    for (ti, target) in targets.iter().enumerate() {
        if !target.par_chunks(CHUNK).all(|c| c.iter().all(|v| v.is_finite())) {
            return Err(Error::Regression("non-finite regression target".into()));
        }
        let (coeffs, rank_deficient) = solve_triangular_min_norm(&qr.r, &qr.qty[ti], k);
        // ||residual||^2 = ||y||^2 - ||Q^T y||^2 for the full-rank case;
        // clamp guards rounding.
        let yy = util::chunked_sum_by(m, |i| target[i] * target[i]);
        let cc: f64 = qr.qty[ti].iter().map(|v| v * v).sum();
        let residual_rms = ((yy - cc).max(0.0) / m as f64).sqrt();
        out.push(FittedConditional {
            basis: *basis,
            map,
            coeffs,
            residual_rms,
            condition_estimate: qr.condition_estimate,
            rank_deficient,
        });
    }
    Ok(out)
}

fn build_state_map(basis: &BasisSpec, states: &[f64]) -> Result<StateMap> {
    if !states.par_chunks(CHUNK).all(|c| c.iter().all(|v| v.is_finite())) {
        return Err(Error::Regression("non-finite regression state".into()));
    }
    let (shift, scale) = if basis.standardize {
        let (mean, sd) = util::mean_std(states);
        // Constant states degrade to an unscaled shift; the rank-deficient
        // path then returns the plain mean.
        let scale = if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 };
        (mean, scale)
    } else {
        (0.0, 1.0)
    };
    let map0 = StateMap {
        shift,
        scale,
        lo: 0.0,
        hi: 0.0,
    };
    let (lo, hi) = match basis.kind {
        BasisKind::PiecewiseLinear { .. } => states
            .iter()
            .map(|&s| map0.apply(s))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s), hi.max(s))
            }),
        BasisKind::Polynomial { .. } => (0.0, 0.0),
    };
    Ok(StateMap { shift, scale, lo, hi })
}

fn basis_row(basis: &BasisSpec, map: &StateMap, state: f64, row: &mut [f64]) {
    let s = map.apply(state);
    match basis.kind {
        BasisKind::Polynomial { degree } => {
            let mut p = 1.0;
            for slot in row.iter_mut().take(degree + 1) {
                *slot = p;
                p *= s;
            }
        }
        BasisKind::PiecewiseLinear { cells } => {
            row.fill(0.0);
            let (c, sc) = locate_cell(s, map.lo, map.hi, cells);
            row[2 * c] = 1.0;
            row[2 * c + 1] = sc;
        }
    }
}

struct QrResult {
    /// Upper-triangular factor, row-major k×k.
    r: Vec<f64>,
    /// Q^T applied to each target, length k each.
    qty: Vec<Vec<f64>>,
    condition_estimate: f64,
}

/// Tall-skinny QR over fixed-size row blocks.
///
/// Stage 1 factors each block of `CHUNK` rows independently (parallel) and
/// stage 2 stacks the per-block `R` factors and partial `Q^T y` vectors in
/// block order for one sequential Householder pass. The reduction order is
/// fixed by the block index, never by the scheduler.
fn tsqr(
    basis: &BasisSpec,
    map: &StateMap,
    states: &[f64],
    targets: &[&[f64]],
) -> Result<QrResult> {
    let m = states.len();
    let k = basis.len();
    let nt = targets.len();
    let n_blocks = m.div_ceil(CHUNK);

    struct BlockOut {
        r: Vec<f64>,       // k×k row-major
        qty: Vec<f64>,     // nt×k
    }

    let blocks: Vec<BlockOut> = (0..n_blocks)
        .into_par_iter()
        .map(|bi| {
            let lo = bi * CHUNK;
            let hi = (lo + CHUNK).min(m);
            let rows = hi - lo;
            // Column-major block of the design matrix plus target copies.
            let mut a = vec![0.0f64; rows * k];
            let mut row = vec![0.0f64; k];
            for (r, &s) in states[lo..hi].iter().enumerate() {
                basis_row(basis, map, s, &mut row);
                for c in 0..k {
                    a[c * rows + r] = row[c];
                }
            }
            let mut ys: Vec<Vec<f64>> = targets.iter().map(|t| t[lo..hi].to_vec()).collect();
            householder_qr_inplace(&mut a, rows, k, &mut ys);
            let mut r_out = vec![0.0f64; k * k];
            for c in 0..k {
                for r in 0..=c.min(rows - 1) {
                    r_out[r * k + c] = a[c * rows + r];
                }
            }
            let qty = ys
                .iter()
                .flat_map(|y| y.iter().take(k).cloned())
                .collect::<Vec<f64>>();
            BlockOut { r: r_out, qty }
        })
        .collect();

    // Stage 2: stack the block R factors (block order) and re-factor.
    let stacked_rows = n_blocks * k;
    let mut a = vec![0.0f64; stacked_rows * k];
    let mut ys: Vec<Vec<f64>> = vec![vec![0.0f64; stacked_rows]; nt];
    for (bi, block) in blocks.iter().enumerate() {
        for r in 0..k {
            for c in 0..k {
                a[c * stacked_rows + bi * k + r] = block.r[r * k + c];
            }
            for t in 0..nt {
                ys[t][bi * k + r] = block.qty[t * k + r];
            }
        }
    }
    householder_qr_inplace(&mut a, stacked_rows, k, &mut ys);

    let mut r = vec![0.0f64; k * k];
    for c in 0..k {
        for row in 0..=c {
            r[row * k + c] = a[c * stacked_rows + row];
        }
    }
    let qty: Vec<Vec<f64>> = ys.into_iter().map(|y| y[..k].to_vec()).collect();
    let (mut dmax, mut dmin) = (0.0f64, f64::INFINITY);
    for i in 0..k {
        let d = r[i * k + i].abs();
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    let condition_estimate = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
    Ok(QrResult {
        r,
        qty,
        condition_estimate,
    })
}

/// In-place Householder QR of a column-major `rows×k` matrix, applying the
/// reflectors to every right-hand side as they are formed.
fn householder_qr_inplace(a: &mut [f64], rows: usize, k: usize, ys: &mut [Vec<f64>]) {
    let steps = k.min(rows);
    for col in 0..steps {
        let (head, tail) = a.split_at_mut((col + 1) * rows);
        let acol = &mut head[col * rows..];
        // Householder vector for the subcolumn a[col.., col].
        let norm = {
            let mut s = 0.0;
            for r in col..rows {
                s += acol[r] * acol[r];
            }
            s.sqrt()
        };
        if norm == 0.0 {
            continue;
        }
        let alpha = if acol[col] >= 0.0 { -norm } else { norm };
        let v0 = acol[col] - alpha;
        // w = [v0, a[col+1..]]; H = I - 2 w w^T / ||w||^2
        let wnorm2 = v0 * v0
            + (col + 1..rows).map(|r| acol[r] * acol[r]).sum::<f64>();
        if wnorm2 == 0.0 {
            continue;
        }
        // Apply to the remaining columns.
        for c2 in 0..(k - col - 1) {
            let bcol = &mut tail[c2 * rows..(c2 * rows + rows)];
            let mut dot = v0 * bcol[col];
            for r in col + 1..rows {
                dot += acol[r] * bcol[r];
            }
            let f = 2.0 * dot / wnorm2;
            bcol[col] -= f * v0;
            for r in col + 1..rows {
                bcol[r] -= f * acol[r];
            }
        }
        // Apply to the right-hand sides.
        for y in ys.iter_mut() {
            let mut dot = v0 * y[col];
            for r in col + 1..rows {
                dot += acol[r] * y[r];
            }
            let f = 2.0 * dot / wnorm2;
            y[col] -= f * v0;
            for r in col + 1..rows {
                y[r] -= f * acol[r];
            }
        }
        // Store R in the factored column.
        acol[col] = alpha;
        for r in col + 1..rows {
            acol[r] = 0.0;
        }
    }
}

/// Relative rank threshold on the diagonal of `R`.
const RANK_TOL: f64 = 1e-10;

/// Back-substitution when `R` has full numerical rank; otherwise the
/// minimum-norm solution through a small SVD of `R`.
fn solve_triangular_min_norm(r: &[f64], c: &[f64], k: usize) -> (Vec<f64>, bool) {
    let dmax = (0..k).map(|i| r[i * k + i].abs()).fold(0.0f64, f64::max);
    let full_rank = dmax > 0.0 && (0..k).all(|i| r[i * k + i].abs() > RANK_TOL * dmax);
    if full_rank {
        let mut x = vec![0.0f64; k];
        for i in (0..k).rev() {
            let mut s = c[i];
            for j in i + 1..k {
                s -= r[i * k + j] * x[j];
            }
            x[i] = s / r[i * k + i];
        }
        (x, false)
    } else {
        (svd_min_norm(r, c, k), true)
    }
}

/// Minimum-norm solution of `R x ≈ c` via one-sided Jacobi SVD; fine for the
/// small `k×k` systems seen here.
fn svd_min_norm(r: &[f64], c: &[f64], k: usize) -> Vec<f64> {
    // Columns of `a` rotate toward the left singular vectors scaled by the
    // singular values; `v` accumulates the right singular vectors.
    let mut a: Vec<f64> = (0..k * k).map(|i| r[(i % k) * k + i / k]).collect(); // column-major
    let mut v = vec![0.0f64; k * k];
    for i in 0..k {
        v[i * k + i] = 1.0;
    }
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..k {
            for q in p + 1..k {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    app += a[p * k + i] * a[p * k + i];
                    aqq += a[q * k + i] * a[q * k + i];
                    apq += a[p * k + i] * a[q * k + i];
                }
                off = off.max(apq.abs());
                if apq.abs() <= 1e-30 {
                    continue;
                }
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..k {
                    let (ap, aq) = (a[p * k + i], a[q * k + i]);
                    a[p * k + i] = cs * ap - sn * aq;
                    a[q * k + i] = sn * ap + cs * aq;
                    let (vp, vq) = (v[p * k + i], v[q * k + i]);
                    v[p * k + i] = cs * vp - sn * vq;
                    v[q * k + i] = sn * vp + cs * vq;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }
    // Singular values and left vectors.
    let mut sig = vec![0.0f64; k];
    for p in 0..k {
        sig[p] = (0..k).map(|i| a[p * k + i] * a[p * k + i]).sum::<f64>().sqrt();
    }
    let smax = sig.iter().cloned().fold(0.0f64, f64::max);
    let mut x = vec![0.0f64; k];
    for p in 0..k {
        if sig[p] <= RANK_TOL * smax || sig[p] == 0.0 {
            continue;
        }
        // u_p = a_p / sigma_p ; contribution = v_p * (u_p . c) / sigma_p
        let mut dot = 0.0;
        for i in 0..k {
            dot += a[p * k + i] / sig[p] * c[i];
        }
        for i in 0..k {
            x[i] += v[p * k + i] * dot / sig[p];
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Nested Monte Carlo oracle
// ---------------------------------------------------------------------------

/// Brute-force conditional expectation by resimulating the pre-jump chain
/// from `(t_i, state)` with fresh randomness. Returns the plain Monte Carlo
/// mean together with its standard error.
///
/// The payoff sees the sub-chain states at grid dates `i..=n` and the
/// increments driving them.
pub fn nested_mc_oracle(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    i: usize,
    state: f64,
    payoff: impl Fn(&[f64], &[f64]) -> f64 + Sync,
    inner_paths: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if inner_paths < 1000 {
        return Err(Error::Regression(
            "nested oracle needs at least 1000 inner paths".into(),
        ));
    }
    let n = grid.n_steps();
    let vals: Vec<f64> = (0..inner_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut xs = Vec::with_capacity(n - i + 1);
            let mut dws = Vec::with_capacity(n - i);
            let mut x = state;
            xs.push(x);
            for step in i + 1..=n {
                let dt = grid.dt(step);
                let z: f64 = rng.sample(StandardNormal);
                let dw = z * dt.sqrt();
                let t = grid.points()[step - 1];
                x = (x + (spec.b)(t, x) * dt) + (spec.sigma)(t, x) * dw;
                xs.push(x);
                dws.push(dw);
            }
            payoff(&xs, &dws)
        })
        .collect();
    let (mean, sd) = util::mean_std(&vals);
    Ok((mean, sd / (inner_paths as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn gaussian_states(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn constant_target_reproduced_exactly() {
        let states = gaussian_states(500, 1);
        let targets = vec![2.75; 500];
        let fit = fit(&BasisSpec::polynomial(3), &states, &targets).unwrap();
        for s in [-3.0, 0.0, 0.7, 10.0] {
            assert!((fit.evaluate(s) - 2.75).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_target_in_span() {
        let states = gaussian_states(500, 2);
        let fit = fit(&BasisSpec::polynomial(1), &states, &states).unwrap();
        assert!((fit.evaluate(0.3) - 0.3).abs() < 1e-10);
        assert!((fit.evaluate(-1.4) + 1.4).abs() < 1e-10);
    }

    #[test]
    fn quadratic_with_noise_recovers_coefficients() {
        let n = 100_000;
        let states = gaussian_states(n, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let targets: Vec<f64> = states
            .iter()
            .map(|&s| s * s + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let fit = fit(&BasisSpec::polynomial(2), &states, &targets).unwrap();
        // The fitted function must match s^2 within a few regression SEs.
        for s in [-1.5, -0.5, 0.0, 0.5, 1.5] {
            let err = (fit.evaluate(s) - s * s).abs();
            assert!(err < 5e-3, "fit({s}) off by {err}");
        }
    }

    #[test]
    fn projection_residual_orthogonal_to_basis() {
        let states = gaussian_states(4000, 5);
        let targets: Vec<f64> = states.iter().map(|&s| s.sin() + 0.2 * s).collect();
        let basis = BasisSpec::polynomial(3);
        let f = fit(&basis, &states, &targets).unwrap();
        // The residual of an L2 projection is orthogonal to every basis
        // function in the empirical inner product.
        let map = build_state_map(&basis, &states).unwrap();
        let mut row = vec![0.0; basis.len()];
        let mut dots = vec![0.0f64; basis.len()];
        let mut norms = vec![0.0f64; basis.len()];
        for (&s, &y) in states.iter().zip(&targets) {
            let r = y - f.evaluate(s);
            basis_row(&basis, &map, s, &mut row);
            for j in 0..basis.len() {
                dots[j] += row[j] * r;
                norms[j] += row[j] * row[j];
            }
        }
        let ynorm = targets.iter().map(|y| y * y).sum::<f64>().sqrt();
        for j in 0..basis.len() {
            let rel = dots[j].abs() / (norms[j].sqrt() * ynorm).max(1e-300);
            assert!(rel < 1e-8, "basis function {j} correlation {rel}");
        }
    }

    #[test]
    fn constant_states_fall_back_to_mean() {
        let states = vec![1.5; 200];
        let targets: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let f = fit(&BasisSpec::polynomial(3), &states, &targets).unwrap();
        assert!(f.rank_deficient);
        assert!((f.evaluate(1.5) - 99.5).abs() < 1e-8);
    }

    #[test]
    fn rejects_underdetermined_and_non_finite() {
        let states = gaussian_states(30, 6);
        let targets = vec![0.0; 30];
        assert!(fit(&BasisSpec::polynomial(3), &states, &targets).is_err());
        let mut bad = gaussian_states(200, 7);
        bad[17] = f64::NAN;
        assert!(fit(&BasisSpec::polynomial(1), &bad, &vec![0.0; 200]).is_err());
    }

    #[test]
    fn piecewise_linear_fits_kink() {
        let states: Vec<f64> = (0..5000).map(|i| -2.0 + 4.0 * i as f64 / 4999.0).collect();
        let targets: Vec<f64> = states.iter().map(|&s| s.abs()).collect();
        let f = fit(&BasisSpec::piecewise_linear(8), &states, &targets).unwrap();
        for s in [-1.8, -0.9, 0.9, 1.8] {
            assert!((f.evaluate(s) - s.abs()).abs() < 0.05);
        }
    }

    #[test]
    fn fit_bitwise_stable_across_thread_counts() {
        let states = gaussian_states(50_000, 8);
        let targets: Vec<f64> = states.iter().map(|&s| s * s * s - s).collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| fit(&BasisSpec::polynomial(3), &states, &targets).unwrap())
        };
        let f1 = run(1);
        let f4 = run(4);
        for (a, b) in f1.coeffs().iter().zip(f4.coeffs()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn nested_oracle_constant_payoff() {
        let spec = toy_spec();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let (mean, se) = nested_mc_oracle(&spec, &grid, 1, 0.3, |_, _| 1.0, 2000, 9).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn nested_oracle_martingale_identity() {
        let spec = toy_spec(); // b = 0, sigma = 1
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let (mean, se) =
            nested_mc_oracle(&spec, &grid, 1, 0.42, |xs, _| xs[1], 50_000, 10).unwrap();
        assert!((mean - 0.42).abs() <= 3.0 * se, "mean {mean}, se {se}");
        let (mean_dw, se_dw) =
            nested_mc_oracle(&spec, &grid, 1, 0.42, |_, dws| dws[0], 50_000, 11).unwrap();
        assert!(mean_dw.abs() <= 3.0 * se_dw);
    }

    fn toy_spec() -> ProblemSpec {
        ProblemSpec::new(
            Arc::new(|_, _| 0.0),
            Arc::new(|_, _| 1.0),
            Arc::new(|_, _| 0.0),
            Arc::new(|x| x),
            Arc::new(|_, _, _, _, _| 0.0),
            0.0,
            1.0,
            crate::model::GeneratorKind::Lipschitz,
            crate::model::Constants {
                k: 6.0,
                ..Default::default()
            },
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn targets_in_span_reproduced(c0 in -2.0f64..2.0, c1 in -2.0f64..2.0, c2 in -2.0f64..2.0) {
            let states = gaussian_states(2000, 12);
            let targets: Vec<f64> = states.iter().map(|&s| c0 + c1 * s + c2 * s * s).collect();
            let f = fit(&BasisSpec::polynomial(2), &states, &targets).unwrap();
            let scale = 1.0 + c0.abs() + c1.abs() + c2.abs();
            for &s in states.iter().take(50) {
                let want = c0 + c1 * s + c2 * s * s;
                prop_assert!((f.evaluate(s) - want).abs() <= 1e-8 * scale);
            }
        }
    }
}
