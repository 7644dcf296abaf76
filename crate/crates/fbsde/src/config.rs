//! Declarative problem configuration: builtin problems and the
//! `key = value` config-file format.
//!
//! Arbitrary user coefficients are supplied programmatically through
//! [`crate::model::ProblemSpec`]; the config file only selects a builtin
//! problem and overrides scalar knobs and declared constants.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Constants, GeneratorKind, JumpModel, ProblemSpec};

/// Builtin problem families selectable from a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinId {
    /// b = 0, σ = 1, β = β₀, g(x) = x, f = λ₀·u. With the compensating
    /// generator the value process is the conditional expectation of the
    /// terminal value, so closed forms exist for all four processes.
    Driftless,
    /// b = 0, σ = 1, β = β₀, g ≡ 1, f = α·y. Deterministic exponential
    /// value; the jump enters the forward process only.
    LinearJump,
    /// Ornstein-Uhlenbeck with a jump: b = -x, σ = 1, β = 0.5, λ = 1,
    /// f = 0.2·y + 0.1·sin z + 0.3·u, g = tanh. Smooth Lipschitz test
    /// problem for the convergence harness.
    OuLipschitz,
    /// Same forward part with the quadratic driver f = 0.25·z² + 0.1·u and
    /// bounded terminal tanh; exercises the truncation route.
    QuadraticToy,
}

impl BuiltinId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "driftless" => Ok(BuiltinId::Driftless),
            "linear_jump" => Ok(BuiltinId::LinearJump),
            "ou_lipschitz" => Ok(BuiltinId::OuLipschitz),
            "quadratic_toy" => Ok(BuiltinId::QuadraticToy),
            other => Err(Error::UnknownProblem(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BuiltinId::Driftless => "driftless",
            BuiltinId::LinearJump => "linear_jump",
            BuiltinId::OuLipschitz => "ou_lipschitz",
            BuiltinId::QuadraticToy => "quadratic_toy",
        }
    }
}

/// Parsed configuration. `None` fields fall back to the builtin's defaults.
#[derive(Debug, Clone, Default)]
pub struct Config {
    pub problem: Option<BuiltinId>,
    pub horizon: Option<f64>,
    pub x0: Option<f64>,
    pub n_steps: Option<usize>,
    pub generator_kind: Option<GeneratorKind>,
    pub lambda_const: Option<f64>,
    pub beta_const: Option<f64>,
    pub k: Option<f64>,
    pub k_g: Option<f64>,
    pub k_q: Option<f64>,
    pub k_f: Option<f64>,
    pub l_fz: Option<f64>,
    pub l_a: Option<f64>,
    pub k_a: Option<f64>,
    pub m_g: Option<f64>,
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let fnum = || -> Result<f64> {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("line {}: bad number `{value}`", lineno + 1)))
            };
            match key {
                "problem" => cfg.problem = Some(BuiltinId::parse(value)?),
                "T" => cfg.horizon = Some(fnum()?),
                "x0" => cfg.x0 = Some(fnum()?),
                "n_steps" => {
                    cfg.n_steps = Some(value.parse::<usize>().map_err(|_| {
                        Error::Config(format!("line {}: bad integer `{value}`", lineno + 1))
                    })?)
                }
                "generator_kind" => {
                    cfg.generator_kind = Some(match value {
                        "lipschitz" => GeneratorKind::Lipschitz,
                        "quadratic" => GeneratorKind::Quadratic,
                        other => {
                            return Err(Error::Config(format!(
                                "line {}: unknown generator_kind `{other}`",
                                lineno + 1
                            )))
                        }
                    })
                }
                "lambda_const" => cfg.lambda_const = Some(fnum()?),
                "beta_const" => cfg.beta_const = Some(fnum()?),
                "K" => cfg.k = Some(fnum()?),
                "K_g" => cfg.k_g = Some(fnum()?),
                "K_q" => cfg.k_q = Some(fnum()?),
                "K_f" => cfg.k_f = Some(fnum()?),
                "L_fz" => cfg.l_fz = Some(fnum()?),
                "L_a" => cfg.l_a = Some(fnum()?),
                "K_a" => cfg.k_a = Some(fnum()?),
                "M_g" => cfg.m_g = Some(fnum()?),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Instantiates the selected builtin with overrides applied.
    pub fn build(&self) -> Result<(ProblemSpec, JumpModel)> {
        let id = self
            .problem
            .ok_or_else(|| Error::Config("config must name a builtin `problem`".into()))?;
        build_builtin(id, self)
    }
}

/// Builds a builtin problem; `cfg` overrides defaults field by field.
pub fn build_builtin(id: BuiltinId, cfg: &Config) -> Result<(ProblemSpec, JumpModel)> {
    let horizon = cfg.horizon.unwrap_or(1.0);
    match id {
        BuiltinId::Driftless => {
            let beta0 = cfg.beta_const.unwrap_or(0.25);
            let lambda0 = cfg.lambda_const.unwrap_or(0.25);
            let x0 = cfg.x0.unwrap_or(0.0);
            // K covers |g(x)| = |x| on the probe range and the generator's
            // u-slope lambda0.
            let constants = Constants {
                k: cfg.k.unwrap_or(6.0_f64.max(1.0 + beta0.abs()).max(lambda0)),
                k_g: cfg.k_g.unwrap_or(1.0),
                m_g: cfg.m_g.unwrap_or(6.0),
                k_q: cfg.k_q.unwrap_or(1.0),
                k_f: cfg.k_f.unwrap_or(lambda0),
                l_fz: cfg.l_fz.unwrap_or(0.0),
                l_a: cfg.l_a.unwrap_or(0.0),
                k_a: cfg.k_a.unwrap_or(1.0),
            };
            let spec = ProblemSpec::new(
                Arc::new(|_, _| 0.0),
                Arc::new(|_, _| 1.0),
                Arc::new(move |_, _| beta0),
                Arc::new(|x| x),
                Arc::new(move |_, _, _, _, u| lambda0 * u),
                x0,
                horizon,
                cfg.generator_kind.unwrap_or(GeneratorKind::Lipschitz),
                constants,
            )?;
            Ok((spec, JumpModel::constant(lambda0)?))
        }
        BuiltinId::LinearJump => {
            let beta0 = cfg.beta_const.unwrap_or(0.25);
            let lambda0 = cfg.lambda_const.unwrap_or(0.25);
            let x0 = cfg.x0.unwrap_or(0.0);
            let alpha = 0.2;
            let constants = Constants {
                k: cfg.k.unwrap_or(1.5_f64.max(1.0 + beta0.abs())),
                k_g: cfg.k_g.unwrap_or(0.0),
                m_g: cfg.m_g.unwrap_or(1.0),
                k_q: cfg.k_q.unwrap_or(1.0),
                k_f: cfg.k_f.unwrap_or(alpha),
                l_fz: cfg.l_fz.unwrap_or(0.0),
                l_a: cfg.l_a.unwrap_or(0.0),
                k_a: cfg.k_a.unwrap_or(1.0),
            };
            let spec = ProblemSpec::new(
                Arc::new(|_, _| 0.0),
                Arc::new(|_, _| 1.0),
                Arc::new(move |_, _| beta0),
                Arc::new(|_| 1.0),
                Arc::new(move |_, _, y, _, _| alpha * y),
                x0,
                horizon,
                cfg.generator_kind.unwrap_or(GeneratorKind::Lipschitz),
                constants,
            )?;
            Ok((spec, JumpModel::constant(lambda0)?))
        }
        BuiltinId::OuLipschitz => {
            let beta0 = cfg.beta_const.unwrap_or(0.5);
            let lambda0 = cfg.lambda_const.unwrap_or(1.0);
            let x0 = cfg.x0.unwrap_or(1.0);
            let constants = Constants {
                k: cfg.k.unwrap_or(1.0 + 1.0 + beta0.abs()), // |sigma(t,0)| + Lip_x(b) + |beta|
                k_g: cfg.k_g.unwrap_or(1.0),
                m_g: cfg.m_g.unwrap_or(1.0),
                k_q: cfg.k_q.unwrap_or(1.0),
                k_f: cfg.k_f.unwrap_or(0.3),
                l_fz: cfg.l_fz.unwrap_or(0.1),
                l_a: cfg.l_a.unwrap_or(1.0),
                k_a: cfg.k_a.unwrap_or(1.0),
            };
            let spec = ProblemSpec::new(
                Arc::new(|_, x: f64| -x),
                Arc::new(|_, _| 1.0),
                Arc::new(move |_, _| beta0),
                Arc::new(|x: f64| x.tanh()),
                Arc::new(|_, _, y, z: f64, u| 0.2 * y + 0.1 * z.sin() + 0.3 * u),
                x0,
                horizon,
                cfg.generator_kind.unwrap_or(GeneratorKind::Lipschitz),
                constants,
            )?;
            Ok((spec, JumpModel::constant(lambda0)?))
        }
        BuiltinId::QuadraticToy => {
            let beta0 = cfg.beta_const.unwrap_or(0.5);
            let lambda0 = cfg.lambda_const.unwrap_or(1.0);
            let x0 = cfg.x0.unwrap_or(1.0);
            let kappa = 0.25;
            let constants = Constants {
                k: cfg.k.unwrap_or(1.0 + 1.0 + beta0.abs()),
                k_g: cfg.k_g.unwrap_or(1.0),
                m_g: cfg.m_g.unwrap_or(1.0),
                k_q: cfg.k_q.unwrap_or(0.35),
                k_f: cfg.k_f.unwrap_or(0.1),
                l_fz: cfg.l_fz.unwrap_or(kappa),
                l_a: cfg.l_a.unwrap_or(1.0),
                k_a: cfg.k_a.unwrap_or(1.0),
            };
            let spec = ProblemSpec::new(
                Arc::new(|_, x: f64| -x),
                Arc::new(|_, _| 1.0),
                Arc::new(move |_, _| beta0),
                Arc::new(|x: f64| x.tanh()),
                Arc::new(move |_, _, _, z, u| kappa * z * z + 0.1 * u),
                x0,
                horizon,
                cfg.generator_kind.unwrap_or(GeneratorKind::Quadratic),
                constants,
            )?;
            Ok((spec, JumpModel::constant(lambda0)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_assumptions;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = Config::parse(
            "# example\nproblem = driftless\nT = 1.0\nn_steps = 32 # steps\nlambda_const = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.problem, Some(BuiltinId::Driftless));
        assert_eq!(cfg.horizon, Some(1.0));
        assert_eq!(cfg.n_steps, Some(32));
        assert_eq!(cfg.lambda_const, Some(0.5));
    }

    #[test]
    fn rejects_unknown_key_and_bad_number() {
        assert!(Config::parse("bogus = 1\n").is_err());
        assert!(Config::parse("T = abc\n").is_err());
        assert!(Config::parse("problem = nope\n").is_err());
    }

    #[test]
    fn builtins_pass_their_own_declarations() {
        for id in [
            BuiltinId::Driftless,
            BuiltinId::LinearJump,
            BuiltinId::OuLipschitz,
            BuiltinId::QuadraticToy,
        ] {
            let (spec, jump) = build_builtin(id, &Config::default()).unwrap();
            let report = validate_assumptions(&spec, 2000, 17);
            assert!(
                report.passed(),
                "{}: {:?}",
                id.name(),
                report.violations.first()
            );
            jump.validate(spec.horizon).unwrap();
        }
    }
}
