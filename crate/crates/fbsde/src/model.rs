//! Problem definition: coefficients, declared constants, the jump-time law,
//! assumption probing and the quadratic-case truncation.
//!
//! Coefficient functions must be pure: they are shared across threads and
//! re-evaluated freely, so hidden mutable state would break determinism.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Coef2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type Coef1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// Generator `f(t, x, y, z, u)`.
pub type Generator = Arc<dyn Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    Lipschitz,
    Quadratic,
}

/// Declared structural constants. They are asserted by the user and
/// spot-checked by random probing, never inferred.
///
/// `k` bounds the forward coefficients and the Lipschitz backward pair,
/// `k_g`/`m_g` the terminal condition, `k_q` the quadratic growth,
/// `k_f`/`l_fz` the quadratic-case Lipschitz split, `l_a` the spatial
/// Lipschitz constant of the drift and `k_a` the diffusion bound.
#[derive(Debug, Clone, Copy)]
pub struct Constants {
    pub k: f64,
    pub k_g: f64,
    pub m_g: f64,
    pub k_q: f64,
    pub k_f: f64,
    pub l_fz: f64,
    pub l_a: f64,
    pub k_a: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Constants {
            k: 1.0,
            k_g: 1.0,
            m_g: 1.0,
            k_q: 1.0,
            k_f: 1.0,
            l_fz: 1.0,
            l_a: 1.0,
            k_a: 1.0,
        }
    }
}

impl Constants {
    fn check_finite(&self) -> Result<()> {
        let vals = [
            ("K", self.k),
            ("K_g", self.k_g),
            ("M_g", self.m_g),
            ("K_q", self.k_q),
            ("K_f", self.k_f),
            ("L_fz", self.l_fz),
            ("L_a", self.l_a),
            ("K_a", self.k_a),
        ];
        for (name, v) in vals {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidProblem(format!(
                    "constant {name} must be nonnegative and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Full problem definition for the solver.
#[derive(Clone)]
pub struct ProblemSpec {
    pub b: Coef2,
    pub sigma: Coef2,
    pub beta: Coef2,
    pub g: Coef1,
    pub f: Generator,
    pub x0: f64,
    pub horizon: f64,
    pub kind: GeneratorKind,
    pub constants: Constants,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("ProblemSpec")
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .field("kind", &self.kind)
            .field("constants", &self.constants)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn new(
        b: Coef2,
        sigma: Coef2,
        beta: Coef2,
        g: Coef1,
        f: Generator,
        x0: f64,
        horizon: f64,
        kind: GeneratorKind,
        constants: Constants,
    ) -> Result<Self> {
        constants.check_finite()?;
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidProblem(format!("horizon must be positive, got {horizon}")));
        }
        if !x0.is_finite() {
            return Err(Error::InvalidProblem("x0 must be finite".into()));
        }
        Ok(ProblemSpec {
            b,
            sigma,
            beta,
            g,
            f,
            x0,
            horizon,
            kind,
            constants,
        })
    }

    /// Lipschitz-in-y constant used for the implicit-step contraction check:
    /// the declared `K` in the Lipschitz case, `K_f` in the quadratic case.
    pub fn lipschitz_y(&self) -> f64 {
        match self.kind {
            GeneratorKind::Lipschitz => self.constants.k,
            GeneratorKind::Quadratic => self.constants.k_f,
        }
    }

    /// Truncation level making the quadratic generator Lipschitz.
    ///
    /// Largest of the two a-priori bounds on the post-jump and pre-jump
    /// gradient processes:
    ///
    /// ```text
    /// M1 = e^{(2·L_a + K_f)·T} · (K_g + T·K_f) · K_a
    /// M2 = e^{2·(K_f + L_a)·T} · (K_g + K_f·T)
    ///         · (1 + T·K_f·e^{K_f·T}·(1 + L_a·e^{L_a·T})) · K_a
    /// ```
    pub fn truncation_bound(&self) -> Result<f64> {
        if self.kind != GeneratorKind::Quadratic {
            return Err(Error::InvalidProblem(
                "truncation bound only applies to the quadratic kind".into(),
            ));
        }
        let c = &self.constants;
        let t = self.horizon;
        Ok(truncation_bound_from(c.l_a, c.k_f, c.k_g, c.k_a, t))
    }

    /// Generator actually consumed by the backward schemes: the identity for
    /// the Lipschitz kind, the z-truncated generator for the quadratic kind.
    pub fn effective_generator(&self) -> Result<Generator> {
        match self.kind {
            GeneratorKind::Lipschitz => Ok(self.f.clone()),
            GeneratorKind::Quadratic => {
                let m = self.truncation_bound()?;
                let f = self.f.clone();
                Ok(Arc::new(move |t, x, y, z, u| f(t, x, y, truncate_z(z, m), u)))
            }
        }
    }
}

/// Evaluates the two closed-form gradient bounds and returns the larger.
pub fn truncation_bound_from(l_a: f64, k_f: f64, k_g: f64, k_a: f64, t: f64) -> f64 {
    let m1 = ((2.0 * l_a + k_f) * t).exp() * (k_g + t * k_f) * k_a;
    let m2 = (2.0 * (k_f + l_a) * t).exp()
        * (k_g + k_f * t)
        * (1.0 + t * k_f * (k_f * t).exp() * (1.0 + l_a * (l_a * t).exp()))
        * k_a;
    m1.max(m2)
}

/// Clamp of `z` to `[-M, M]`; 1-Lipschitz and bounded by `M`.
pub fn truncate_z(z: f64, m: f64) -> f64 {
    debug_assert!(m >= 0.0);
    if z.abs() <= m {
        z
    } else {
        m.copysign(z)
    }
}

// ---------------------------------------------------------------------------
// Jump-time law
// ---------------------------------------------------------------------------

/// Deterministic hazard rate of the jump time.
#[derive(Clone, Debug)]
pub enum Hazard {
    Constant(f64),
    /// Right-open segments `[t_k, t_{k+1})` with constant rate; the last
    /// rate extends to infinity.
    PiecewiseConstant { edges: Vec<f64>, rates: Vec<f64> },
}

/// Law of the jump time τ: independent of the Brownian motion, with
/// deterministic hazard `λ(t)` bounded by `lambda_max`. The density is
/// `γ(θ) = λ(θ)·S(θ)` with survival `S(t) = exp(-Λ(t))`.
#[derive(Clone, Debug)]
pub struct JumpModel {
    hazard: Hazard,
    lambda_max: f64,
}

impl JumpModel {
    pub fn constant(rate: f64) -> Result<Self> {
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(Error::InvalidProblem(format!("hazard rate must be >= 0, got {rate}")));
        }
        Ok(JumpModel {
            hazard: Hazard::Constant(rate),
            lambda_max: rate,
        })
    }

    pub fn piecewise_constant(edges: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if edges.len() != rates.len() {
            return Err(Error::InvalidProblem("edges and rates must have equal length".into()));
        }
        if edges.is_empty() || edges[0] != 0.0 {
            return Err(Error::InvalidProblem("first edge must be 0".into()));
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidProblem("edges must be strictly increasing".into()));
        }
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::InvalidProblem("rates must be nonnegative and finite".into()));
        }
        let lambda_max = rates.iter().cloned().fold(0.0, f64::max);
        Ok(JumpModel {
            hazard: Hazard::PiecewiseConstant { edges, rates },
            lambda_max,
        })
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// Hazard rate λ(t).
    pub fn lambda(&self, t: f64) -> f64 {
        match &self.hazard {
            Hazard::Constant(r) => *r,
            Hazard::PiecewiseConstant { edges, rates } => {
                let k = match edges.binary_search_by(|e| e.partial_cmp(&t).unwrap()) {
                    Ok(k) => k,
                    Err(k) => k.saturating_sub(1),
                };
                rates[k]
            }
        }
    }

    /// Cumulative hazard Λ(t) = ∫₀ᵗ λ.
    pub fn cumulative_hazard(&self, t: f64) -> f64 {
        match &self.hazard {
            Hazard::Constant(r) => r * t,
            Hazard::PiecewiseConstant { edges, rates } => {
                let mut acc = 0.0;
                for k in 0..edges.len() {
                    let hi = if k + 1 < edges.len() { edges[k + 1] } else { f64::INFINITY };
                    if t <= edges[k] {
                        break;
                    }
                    acc += rates[k] * (t.min(hi) - edges[k]);
                }
                acc
            }
        }
    }

    /// Survival S(t) = exp(-Λ(t)).
    pub fn survival(&self, t: f64) -> f64 {
        (-self.cumulative_hazard(t)).exp()
    }

    /// Density γ(θ) = λ(θ)·S(θ).
    pub fn density(&self, theta: f64) -> f64 {
        self.lambda(theta) * self.survival(theta)
    }

    /// Inverse cumulative hazard. Closed form for the registered hazard
    /// shapes, bisection to 1e-12 otherwise.
    pub fn inverse_cumulative_hazard(&self, target: f64, horizon: f64) -> f64 {
        debug_assert!(target >= 0.0);
        match &self.hazard {
            Hazard::Constant(r) => {
                if *r == 0.0 {
                    f64::INFINITY
                } else {
                    target / r
                }
            }
            Hazard::PiecewiseConstant { edges, rates } => {
                let mut acc = 0.0;
                for k in 0..edges.len() {
                    let hi = if k + 1 < edges.len() { edges[k + 1] } else { f64::INFINITY };
                    let seg = rates[k] * (hi - edges[k]);
                    if acc + seg >= target {
                        if rates[k] == 0.0 {
                            // Flat segment cannot absorb a strictly positive remainder.
                            if target == acc {
                                return edges[k];
                            }
                            continue;
                        }
                        return edges[k] + (target - acc) / rates[k];
                    }
                    acc = acc + seg;
                }
                // No closed segment reached the target; fall back to bisection
                // on a bracket past the horizon.
                self.bisect_inverse(target, horizon)
            }
        }
    }

    fn bisect_inverse(&self, target: f64, horizon: f64) -> f64 {
        let hi_cap = if self.lambda_max > 0.0 {
            horizon + 10.0 / self.lambda_max
        } else {
            horizon
        };
        if self.cumulative_hazard(hi_cap) < target {
            return f64::INFINITY;
        }
        let (mut lo, mut hi) = (0.0, hi_cap);
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if self.cumulative_hazard(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Draws τ from a uniform variate by hazard inversion:
    /// `τ = Λ⁻¹(-ln(1-u))`. Insufficient hazard mass yields `+∞`, which
    /// downstream code reads as "no jump before the horizon".
    pub fn sample_tau(&self, u: f64, horizon: f64) -> f64 {
        debug_assert!((0.0..1.0).contains(&u));
        let target = -f64::ln_1p(-u);
        self.inverse_cumulative_hazard(target, horizon)
    }

    /// Numerical self-check of the density: nonnegativity on a probe grid
    /// and `∫₀ᵀ γ = 1 - S(T)` by quadrature. Integration runs piecewise
    /// between hazard discontinuities; the midpoint rule avoids evaluating
    /// the density exactly on an edge.
    pub fn validate(&self, t_probe: f64) -> Result<()> {
        let mut cuts = vec![0.0];
        if let Hazard::PiecewiseConstant { edges, .. } = &self.hazard {
            cuts.extend(edges.iter().copied().filter(|e| *e > 0.0 && *e < t_probe));
        }
        cuts.push(t_probe);
        let mut integral = 0.0;
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let m = 8192;
            let h = (b - a) / m as f64;
            for k in 0..m {
                let t = a + (k as f64 + 0.5) * h;
                let d = self.density(t);
                if d < 0.0 {
                    return Err(Error::InvalidProblem(format!("negative density at t={t}")));
                }
                integral += h * d;
            }
        }
        let expect = 1.0 - self.survival(t_probe);
        if (integral - expect).abs() > 1e-6 * (1.0 + expect.abs()) {
            return Err(Error::InvalidProblem(format!(
                "density mass {integral} does not match 1 - S = {expect}"
            )));
        }
        for k in 0..=64 {
            let t = t_probe * k as f64 / 64.0;
            let l = self.lambda(t);
            if !(0.0..=self.lambda_max * (1.0 + 1e-9)).contains(&l) {
                return Err(Error::InvalidProblem(format!(
                    "hazard {l} at t={t} outside [0, lambda_max]"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Assumption probing
// ---------------------------------------------------------------------------

/// One probing failure: which inequality, the sampled arguments, and both
/// sides of the failed comparison.
#[derive(Debug, Clone)]
pub struct Violation {
    pub assumption: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub sample: Vec<f64>,
}

impl fmt::Display for Violation {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            fm,
            "{}: lhs {:.6e} > rhs {:.6e} at sample {:?}",
            self.assumption, self.lhs, self.rhs, self.sample
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub probes: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Turns a failing report into an error; identity on passing reports.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::ValidationFailed {
                violations: self.violations.len(),
                first: self.violations[0].to_string(),
            })
        }
    }
}

/// Multiplicative slack absorbing floating-point noise in inequality checks.
const PROBE_SLACK: f64 = 1.0 + 1e-9;
/// Probe range for state-like arguments (x, y, z, u).
const PROBE_RANGE: f64 = 5.0;

/// Spot-checks the declared inequalities of the active assumption set on
/// random argument tuples. Probing falsifies bad declarations; it cannot
/// certify them.
pub fn validate_assumptions(spec: &ProblemSpec, probes: usize, seed: u64) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ValidationReport {
        probes,
        ..Default::default()
    };
    let c = &spec.constants;
    let t_max = spec.horizon;
    let push = |report: &mut ValidationReport,
                    assumption: &'static str,
                    lhs: f64,
                    rhs: f64,
                    sample: &[f64]| {
        if !(lhs <= rhs * PROBE_SLACK) && report.violations.len() < 64 {
            report.violations.push(Violation {
                assumption,
                lhs,
                rhs,
                sample: sample.to_vec(),
            });
        }
    };

    for _ in 0..probes {
        let t = rng.gen::<f64>() * t_max;
        let tp = rng.gen::<f64>() * t_max;
        let mut s = || (rng.gen::<f64>() * 2.0 - 1.0) * PROBE_RANGE;
        let (x, xp) = (s(), s());
        let (y, yp) = (s(), s());
        let (z, zp) = (s(), s());
        let (u, up) = (s(), s());

        // Growth at the origin and spatial Lipschitz bounds of b, sigma, beta.
        let origin = (spec.b)(t, 0.0).abs() + (spec.sigma)(t, 0.0).abs() + (spec.beta)(t, 0.0).abs();
        push(&mut report, "HF growth", origin, c.k, &[t]);
        let lip = ((spec.b)(t, x) - (spec.b)(t, xp)).abs()
            + ((spec.sigma)(t, x) - (spec.sigma)(t, xp)).abs()
            + ((spec.beta)(t, x) - (spec.beta)(t, xp)).abs();
        push(&mut report, "HF lipschitz", lip, c.k * (x - xp).abs(), &[t, x, xp]);

        // Time regularity: b and sigma 1/2-Hoelder, beta Lipschitz.
        let hoelder = ((spec.b)(t, x) - (spec.b)(tp, x)).abs()
            + ((spec.sigma)(t, x) - (spec.sigma)(tp, x)).abs();
        push(
            &mut report,
            "HFD time-hoelder",
            hoelder,
            c.k * (t - tp).abs().sqrt(),
            &[t, tp, x],
        );
        let beta_time = ((spec.beta)(t, x) - (spec.beta)(tp, x)).abs();
        push(&mut report, "HFD beta time-lipschitz", beta_time, c.k * (t - tp).abs(), &[t, tp, x]);

        match spec.kind {
            GeneratorKind::Lipschitz => {
                let bound = (spec.f)(t, x, 0.0, 0.0, 0.0).abs() + (spec.g)(x).abs();
                push(&mut report, "HBL growth", bound, c.k, &[t, x]);
                let flip = ((spec.f)(t, x, y, z, u) - (spec.f)(t, x, yp, zp, up)).abs();
                push(
                    &mut report,
                    "HBL lipschitz",
                    flip,
                    c.k * ((y - yp).abs() + (z - zp).abs() + (u - up).abs()),
                    &[t, x, y, yp, z, zp, u, up],
                );
                let greg = ((spec.g)(x) - (spec.g)(xp)).abs()
                    + ((spec.f)(t, x, y, z, u) - (spec.f)(tp, xp, y, z, u)).abs();
                push(
                    &mut report,
                    "HBLD regularity",
                    greg,
                    c.k * ((x - xp).abs() + (t - tp).abs().sqrt()),
                    &[t, tp, x, xp, y, z, u],
                );
            }
            GeneratorKind::Quadratic => {
                push(&mut report, "HBQ terminal bound", (spec.g)(x).abs(), c.m_g, &[x]);
                push(
                    &mut report,
                    "HBQ terminal lipschitz",
                    ((spec.g)(x) - (spec.g)(xp)).abs(),
                    c.k_g * (x - xp).abs(),
                    &[x, xp],
                );
                push(
                    &mut report,
                    "HBQ y-lipschitz",
                    ((spec.f)(t, x, y, z, u) - (spec.f)(t, x, yp, z, u)).abs(),
                    c.k_q * (y - yp).abs(),
                    &[t, x, y, yp, z, u],
                );
                push(
                    &mut report,
                    "HBQ growth",
                    (spec.f)(t, x, y, z, u).abs(),
                    c.k_q * (1.0 + y.abs() + z * z + u.abs()),
                    &[t, x, y, z, u],
                );
                let lhs = ((spec.f)(t, x, y, z, u) - (spec.f)(tp, xp, yp, zp, up)).abs();
                let rhs = c.k_f
                    * ((x - xp).abs() + (y - yp).abs() + (u - up).abs() + (t - tp).abs().sqrt())
                    + c.l_fz * (1.0 + z.abs() + zp.abs()) * (z - zp).abs();
                push(&mut report, "HBQD lipschitz", lhs, rhs, &[t, tp, x, xp, y, yp, z, zp, u, up]);
                // The quadratic analysis requires a state-independent diffusion.
                push(
                    &mut report,
                    "sigma x-independence",
                    ((spec.sigma)(t, x) - (spec.sigma)(t, xp)).abs(),
                    0.0,
                    &[t, x, xp],
                );
                push(&mut report, "sigma bound", (spec.sigma)(t, 0.0).abs(), c.k_a, &[t]);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero2() -> Coef2 {
        Arc::new(|_, _| 0.0)
    }

    fn const2(v: f64) -> Coef2 {
        Arc::new(move |_, _| v)
    }

    fn spec_with(g: Coef1, f: Generator, kind: GeneratorKind, constants: Constants) -> ProblemSpec {
        ProblemSpec::new(zero2(), const2(1.0), zero2(), g, f, 0.0, 1.0, kind, constants).unwrap()
    }

    #[test]
    fn probing_accepts_zero_drift() {
        let spec = spec_with(
            Arc::new(|_| 0.0),
            Arc::new(|_, _, _, _, _| 0.0),
            GeneratorKind::Lipschitz,
            Constants {
                k: 1.0,
                ..Default::default()
            },
        );
        let report = validate_assumptions(&spec, 500, 7);
        assert!(report.passed(), "unexpected violations: {:?}", report.violations);
    }

    #[test]
    fn probing_flags_undeclared_terminal_slope() {
        // g(x) = x is 1-Lipschitz; declaring K_g = 0.5 must be falsified.
        let spec = spec_with(
            Arc::new(|x| x),
            Arc::new(|_, _, _, _, _| 0.0),
            GeneratorKind::Quadratic,
            Constants {
                k_g: 0.5,
                m_g: 10.0,
                k_q: 1.0,
                k_f: 0.0,
                l_fz: 0.0,
                l_a: 0.0,
                k_a: 1.0,
                k: 1.0,
            },
        );
        let report = validate_assumptions(&spec, 500, 7);
        assert!(report
            .violations
            .iter()
            .any(|v| v.assumption == "HBQ terminal lipschitz"));
    }

    #[test]
    fn probing_flags_quadratic_generator_declared_lipschitz() {
        let spec = spec_with(
            Arc::new(|_| 0.0),
            Arc::new(|_, _, _, z, _| z * z),
            GeneratorKind::Lipschitz,
            Constants {
                k: 3.0,
                ..Default::default()
            },
        );
        let report = validate_assumptions(&spec, 2000, 11);
        assert!(report
            .violations
            .iter()
            .any(|v| v.assumption == "HBL lipschitz"));
    }

    #[test]
    fn truncation_bound_degenerate_cases() {
        assert!((truncation_bound_from(0.0, 0.0, 1.0, 1.0, 1.0) - 1.0).abs() < 1e-15);
        // T = 0 kills every exponential and T-factor.
        let (k_g, k_a) = (2.5, 0.4);
        assert!((truncation_bound_from(3.0, 7.0, k_g, k_a, 0.0) - k_g * k_a).abs() < 1e-15);
    }

    #[test]
    fn truncation_bound_generic_value() {
        // Independent re-derivation of both factors for L_a=K_f=K_g=K_a=T=1.
        let e = std::f64::consts::E;
        let m1 = e.powi(3) * 2.0;
        let m2 = e.powi(4) * 2.0 * (1.0 + e * (1.0 + e));
        let got = truncation_bound_from(1.0, 1.0, 1.0, 1.0, 1.0);
        assert!((got - m1.max(m2)).abs() <= 1e-12 * got.abs());
    }

    #[test]
    fn truncate_examples() {
        assert_eq!(truncate_z(0.5, 1.0), 0.5);
        assert_eq!(truncate_z(-3.0, 1.0), -1.0);
        assert_eq!(truncate_z(1.0, 1.0), 1.0);
    }

    #[test]
    fn effective_generator_clamps_quadratic() {
        let quad = spec_with(
            Arc::new(|x: f64| x.tanh()),
            Arc::new(|_, _, _, z, _| z * z),
            GeneratorKind::Quadratic,
            Constants {
                k_g: 1.0,
                m_g: 1.0,
                k_q: 1.1,
                k_f: 0.0,
                l_fz: 1.0,
                l_a: 0.0,
                k_a: 1.0,
                k: 1.0,
            },
        );
        // L_a = K_f = 0 collapses both bounds to K_g*K_a = 1.
        let m = quad.truncation_bound().unwrap();
        assert!((m - 1.0).abs() < 1e-15);
        let f_eff = quad.effective_generator().unwrap();
        assert_eq!(f_eff(0.0, 0.0, 0.0, 2.0, 0.0), 1.0);
        assert_eq!(f_eff(0.0, 0.0, 0.0, 0.5, 0.0), 0.25);

        let lip = spec_with(
            Arc::new(|x: f64| x.tanh()),
            Arc::new(|_, _, y, _, _| 2.0 * y),
            GeneratorKind::Lipschitz,
            Constants::default(),
        );
        let f_eff = lip.effective_generator().unwrap();
        assert_eq!(f_eff(0.0, 0.0, 3.0, 9.0, 0.0), 6.0);
    }

    #[test]
    fn effective_generator_is_lipschitz_in_z() {
        // Sampled difference quotients of the truncated z^2 driver stay below
        // L_fz * (1 + 2M).
        let spec = spec_with(
            Arc::new(|x: f64| x.tanh()),
            Arc::new(|_, _, _, z, _| z * z),
            GeneratorKind::Quadratic,
            Constants {
                k_g: 1.0,
                m_g: 1.0,
                k_q: 1.1,
                k_f: 0.0,
                l_fz: 1.0,
                l_a: 0.0,
                k_a: 1.0,
                k: 1.0,
            },
        );
        let m = spec.truncation_bound().unwrap();
        let f_eff = spec.effective_generator().unwrap();
        let bound = spec.constants.l_fz * (1.0 + 2.0 * m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let z = (rng.gen::<f64>() - 0.5) * 8.0;
            let zp = (rng.gen::<f64>() - 0.5) * 8.0;
            if z == zp {
                continue;
            }
            let quot = (f_eff(0.0, 0.0, 0.0, z, 0.0) - f_eff(0.0, 0.0, 0.0, zp, 0.0)).abs()
                / (z - zp).abs();
            assert!(quot <= bound * (1.0 + 1e-12), "quotient {quot} exceeds {bound}");
        }
    }

    #[test]
    fn tau_inversion_constant_hazard() {
        let jm = JumpModel::constant(1.0).unwrap();
        let u = 1.0 - (-1.0f64).exp();
        assert!((jm.sample_tau(u, 1.0) - 1.0).abs() < 1e-12);
        let jm2 = JumpModel::constant(2.0).unwrap();
        let u2 = 1.0 - (-2.0f64).exp();
        assert!((jm2.sample_tau(u2, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tau_zero_hazard_is_sentinel() {
        let jm = JumpModel::constant(0.0).unwrap();
        assert!(jm.sample_tau(0.5, 1.0).is_infinite());
    }

    #[test]
    fn tau_piecewise_closed_form() {
        // lambda = 0.5 on [0,1), 2.0 afterwards.
        let jm = JumpModel::piecewise_constant(vec![0.0, 1.0], vec![0.5, 2.0]).unwrap();
        assert!((jm.cumulative_hazard(1.0) - 0.5).abs() < 1e-15);
        assert!((jm.cumulative_hazard(2.0) - 2.5).abs() < 1e-15);
        // Target below the first segment mass.
        assert!((jm.inverse_cumulative_hazard(0.25, 1.0) - 0.5).abs() < 1e-12);
        // Target reaching into the second segment.
        assert!((jm.inverse_cumulative_hazard(1.5, 1.0) - 1.5).abs() < 1e-12);
        jm.validate(3.0).unwrap();
    }

    #[test]
    fn tau_empirical_survival_matches_closed_form() {
        let jm = JumpModel::constant(1.0).unwrap();
        let n = 1_000_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut alive = 0usize;
        for _ in 0..n {
            if jm.sample_tau(rng.gen::<f64>(), 1.0) > 0.5 {
                alive += 1;
            }
        }
        let p_hat = alive as f64 / n as f64;
        let p = (-0.5f64).exp();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (p_hat - p).abs() <= 3.0 * se,
            "survival {p_hat} vs {p} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn tau_constant_hazard_ks_against_exponential() {
        // Kolmogorov-Smirnov at desk scale against the exponential law.
        let jm = JumpModel::constant(1.3).unwrap();
        let n = 20_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut taus: Vec<f64> = (0..n).map(|_| jm.sample_tau(rng.gen::<f64>(), 1.0)).collect();
        taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, &t) in taus.iter().enumerate() {
            let cdf = 1.0 - (-1.3 * t).exp();
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            ks = ks.max((cdf - emp_lo).abs()).max((cdf - emp_hi).abs());
        }
        // 1% critical value 1.63/sqrt(n); deterministic seed keeps this stable.
        assert!(ks <= 1.63 / (n as f64).sqrt(), "KS statistic {ks} too large");
    }

    #[test]
    fn jump_model_density_integrates() {
        JumpModel::constant(0.7).unwrap().validate(2.0).unwrap();
    }

    proptest! {
        #[test]
        fn truncate_is_idempotent_and_contractive(
            z in -50.0f64..50.0, zp in -50.0f64..50.0, m in 0.0f64..10.0
        ) {
            let tz = truncate_z(z, m);
            prop_assert_eq!(truncate_z(tz, m), tz);
            prop_assert!(tz.abs() <= m);
            prop_assert!((truncate_z(z, m) - truncate_z(zp, m)).abs() <= (z - zp).abs() + 1e-15);
        }
    }
}
