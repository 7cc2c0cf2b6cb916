//! Library objects built from configuration keys.
//!
//! Schedules are written as a number or as a call:
//!
//! ```text
//! process.sigma = 1.0                  # constant
//! process.alpha = affine(0.05, 9.95)   # a + b t
//! process.sigma = power(0.01, 1.99, 1.5)
//! process.sigma = exp(1, 25)           # a b^t
//! process.sigma = sqrt(2, alpha)       # √(2 α(t))
//! process.mu    = square(0.5, sigma, -0.25)   # 0.5 σ(t)² − 0.25
//! ```

use tweedie::dsm::DsmObjective;
use tweedie::{CoefficientSchedule, Family, Prior, ProcessSpec, Shape};

use crate::config::Config;
use crate::CliError;

fn number(cfg: &Config, key: &str, s: &str) -> Result<f64, CliError> {
    s.trim()
        .parse()
        .map_err(|_| cfg.error(key, format!("expected a number, found `{}`", s.trim())))
}

/// Parse the schedule stored under `prefix.name`, resolving references to
/// sibling schedules up to a fixed depth.
fn shape(cfg: &Config, prefix: &str, name: &str, depth: usize) -> Result<Shape, CliError> {
    let key = format!("{prefix}.{name}");
    if depth > 4 {
        return Err(cfg.error(&key, "schedule references nest too deeply"));
    }
    let text = cfg.str(&key)?.trim();
    let Some((head, rest)) = text.split_once('(') else {
        return Ok(Shape::Constant(number(cfg, &key, text)?));
    };
    let args: Vec<&str> = rest
        .strip_suffix(')')
        .ok_or_else(|| cfg.error(&key, format!("unbalanced parentheses in `{text}`")))?
        .split(',')
        .map(str::trim)
        .collect();
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(cfg.error(&key, format!("`{head}` takes {n} arguments, found {}", args.len())))
        }
    };
    let num = |i: usize| number(cfg, &key, args[i]);
    let reference = |i: usize| {
        let target = args[i];
        if target == name || !["alpha", "mu", "sigma"].contains(&target) {
            return Err(cfg.error(&key, format!("`{target}` is not a sibling schedule")));
        }
        shape(cfg, prefix, target, depth + 1).map(Box::new)
    };
    match head.trim() {
        "const" => {
            arity(1)?;
            Ok(Shape::Constant(num(0)?))
        }
        "affine" => {
            arity(2)?;
            Ok(Shape::Affine { a: num(0)?, b: num(1)? })
        }
        "power" => {
            arity(3)?;
            Ok(Shape::Power {
                a: num(0)?,
                b: num(1)?,
                p: num(2)?,
            })
        }
        "exp" => {
            arity(2)?;
            Ok(Shape::Exponential { a: num(0)?, b: num(1)? })
        }
        "sqrt" => {
            arity(2)?;
            Ok(Shape::ScaledSqrt {
                scale: num(0)?,
                base: reference(1)?,
            })
        }
        "square" => {
            arity(3)?;
            Ok(Shape::ScaledSquare {
                scale: num(0)?,
                base: reference(1)?,
                offset: num(2)?,
            })
        }
        other => Err(cfg.error(&key, format!("unknown schedule form `{other}`"))),
    }
}

fn drift_schedule(cfg: &Config, prefix: &str, name: &str) -> Result<CoefficientSchedule, CliError> {
    let key = format!("{prefix}.{name}");
    CoefficientSchedule::plain(shape(cfg, prefix, name, 0)?).map_err(|e| cfg.error(&key, e.to_string()))
}

fn diffusion_schedule(cfg: &Config, prefix: &str, name: &str) -> Result<CoefficientSchedule, CliError> {
    let key = format!("{prefix}.{name}");
    CoefficientSchedule::sigma(shape(cfg, prefix, name, 0)?).map_err(|e| cfg.error(&key, e.to_string()))
}

/// The process described by the keys under `prefix` (normally `process`).
pub fn process(cfg: &Config, prefix: &str) -> Result<ProcessSpec, CliError> {
    let fam_key = format!("{prefix}.family");
    let k = |s: &str| format!("{prefix}.{s}");
    let family = cfg.str(&fam_key)?;
    let spec = match family {
        "ve" => ProcessSpec::ve(diffusion_schedule(cfg, prefix, "sigma")?),
        "vp" => ProcessSpec::vp(drift_schedule(cfg, prefix, "alpha")?),
        "gbm" => ProcessSpec::gbm(drift_schedule(cfg, prefix, "mu")?, diffusion_schedule(cfg, prefix, "sigma")?),
        "besq" => ProcessSpec::besq(cfg.get(&k("nu"))?),
        "besq-general" => ProcessSpec::besq_general(cfg.get(&k("mu"))?, cfg.get(&k("sigma"))?),
        "cir" => ProcessSpec::cir(
            drift_schedule(cfg, prefix, "alpha")?,
            drift_schedule(cfg, prefix, "mu")?,
            diffusion_schedule(cfg, prefix, "sigma")?,
            cfg.get_or(&k("horizon"), 1.0)?,
        ),
        "cev" => ProcessSpec::cev(
            drift_schedule(cfg, prefix, "mu")?,
            diffusion_schedule(cfg, prefix, "sigma")?,
            cfg.get(&k("beta"))?,
        ),
        "bes3" => ProcessSpec::bes3(cfg.get_or(&k("sigma"), 1.0)?),
        other => {
            return Err(cfg.error(
                &fam_key,
                format!("unknown family `{other}` (ve, vp, gbm, besq, besq-general, cir, cev, bes3)"),
            ))
        }
    };
    spec.map_err(|e| cfg.error(&fam_key, e.to_string()))
}

pub fn prior(cfg: &Config) -> Result<Prior, CliError> {
    let key = "prior.kind";
    let p = match cfg.str(key)? {
        "point-mass" => Prior::point_mass(cfg.get("prior.z")?),
        "gaussian" => Prior::gaussian(cfg.get("prior.mean")?, cfg.get("prior.var")?),
        "lognormal" => Prior::lognormal(cfg.get("prior.mu")?, cfg.get("prior.sigma2")?),
        "gamma" => Prior::gamma(cfg.get("prior.shape")?, cfg.get("prior.rate")?),
        other => {
            return Err(cfg.error(
                key,
                format!("unknown prior `{other}` (point-mass, gaussian, lognormal, gamma)"),
            ))
        }
    };
    p.map_err(|e| cfg.error(key, e.to_string()))
}

/// The score-matching objective attached to a process, for the families
/// that have one.
pub fn objective(cfg: &Config, spec: &ProcessSpec) -> Result<DsmObjective, CliError> {
    let obj = match spec.family() {
        Family::Ve { sigma } => DsmObjective::Ve { sigma: sigma.clone() },
        Family::Vp { alpha } => DsmObjective::Vp { alpha: alpha.clone() },
        Family::Gbm { mu, sigma } => DsmObjective::Gbm {
            mu: mu.clone(),
            sigma: sigma.clone(),
        },
        Family::Cir { alpha, .. } => {
            let m: f64 = cfg.get("process.mu")?;
            DsmObjective::cir(alpha.clone(), m).map_err(|e| cfg.error("process.mu", e.to_string()))?
        }
        _ => {
            return Err(cfg.error(
                "process.family",
                format!("no score-matching objective for `{}`", spec.name()),
            ))
        }
    };
    Ok(obj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appendix_style_schedules() {
        let cfg = Config::parse(
            "process.family = gbm\nprocess.sigma = power(0.01, 1.99, 1.5)\nprocess.mu = square(0.5, sigma, 0)\n",
        )
        .unwrap();
        let spec = process(&cfg, "process").unwrap();
        let t = 0.3f64;
        let s = 0.01 + 1.99 * t.powf(1.5);
        assert!((spec.drift(t, 1.0) - 0.5 * s * s).abs() < 1e-14);
    }

    #[test]
    fn bad_schedules_name_the_key() {
        for text in [
            "process.family = ve\nprocess.sigma = wobble(1)",
            "process.family = ve\nprocess.sigma = affine(1)",
            "process.family = ve\nprocess.sigma = sqrt(2, sigma)",
            "process.family = ve\nprocess.sigma = abc",
        ] {
            let cfg = Config::parse(text).unwrap();
            match process(&cfg, "process") {
                Err(CliError::Config { key, .. }) => assert_eq!(key, "process.sigma", "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn priors() {
        let cfg = Config::parse("prior.kind = gamma\nprior.shape = 2\nprior.rate = 4").unwrap();
        assert!((prior(&cfg).unwrap().mean() - 0.5).abs() < 1e-15);
        let cfg = Config::parse("prior.kind = gamma\nprior.shape = -2\nprior.rate = 4").unwrap();
        assert!(prior(&cfg).is_err());
    }
}
