use rand::Rng;

use super::ProcessSpec;
use crate::error::{Error, Result};
use crate::special_fn::{ln_gamma, sample_gamma, sample_lognormal, sample_standard_normal};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// A data distribution `p_data`.
///
/// Every variant can be sampled; all but [`Prior::PointMass`] have a
/// normalized density. The named parametric families double as conjugacy
/// descriptors for the analytic conditional-expectation oracle.
#[derive(Debug, Clone)]
pub enum Prior {
    PointMass(f64),
    Gaussian { mean: f64, var: f64 },
    /// `log X ~ N(mu, sigma2)`
    LogNormal { mu: f64, sigma2: f64 },
    /// (shape, rate) convention: the mean is `shape / rate`.
    Gamma { shape: f64, rate: f64 },
    /// The law of `X_t` given `X_0 = x0` under `spec`.
    Transition {
        spec: Box<ProcessSpec>,
        x0: f64,
        t: f64,
    },
}

impl Prior {
    pub fn point_mass(z: f64) -> Result<Self> {
        if !z.is_finite() {
            return Err(Error::domain(format!("point mass location must be finite, got {z}")));
        }
        Ok(Prior::PointMass(z))
    }

    pub fn gaussian(mean: f64, var: f64) -> Result<Self> {
        if !mean.is_finite() || !(var > 0.0 && var.is_finite()) {
            return Err(Error::domain(format!(
                "gaussian prior needs finite mean and positive variance, got ({mean}, {var})"
            )));
        }
        Ok(Prior::Gaussian { mean, var })
    }

    pub fn lognormal(mu: f64, sigma2: f64) -> Result<Self> {
        if !mu.is_finite() || !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::domain(format!(
                "lognormal prior needs finite mu and positive variance, got ({mu}, {sigma2})"
            )));
        }
        Ok(Prior::LogNormal { mu, sigma2 })
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::domain(format!(
                "gamma prior needs positive shape and rate, got ({shape}, {rate})"
            )));
        }
        Ok(Prior::Gamma { shape, rate })
    }

    pub fn transition(spec: ProcessSpec, x0: f64, t: f64) -> Result<Self> {
        spec.check_initial(x0)?;
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::domain(format!("transition prior needs t > 0, got {t}")));
        }
        Ok(Prior::Transition {
            spec: Box::new(spec),
            x0,
            t,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        match self {
            Prior::PointMass(z) => Ok(*z),
            Prior::Gaussian { mean, var } => Ok(mean + var.sqrt() * sample_standard_normal(rng)),
            Prior::LogNormal { mu, sigma2 } => sample_lognormal(*mu, *sigma2, rng),
            Prior::Gamma { shape, rate } => sample_gamma(*shape, *rate, rng),
            Prior::Transition { spec, x0, t } => spec.forward_sample(*x0, *t, rng),
        }
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    pub fn as_point_mass(&self) -> Option<f64> {
        match self {
            Prior::PointMass(z) => Some(*z),
            _ => None,
        }
    }

    /// `log p_data(x)`, or `None` for a point mass.
    pub fn log_density(&self, x: f64) -> Option<f64> {
        Some(match self {
            Prior::PointMass(_) => return None,
            Prior::Gaussian { mean, var } => {
                -0.5 * (x - mean).powi(2) / var - 0.5 * var.ln() - LN_SQRT_2PI
            }
            Prior::LogNormal { mu, sigma2 } => {
                if x <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let y = x.ln();
                    -0.5 * (y - mu).powi(2) / sigma2 - 0.5 * sigma2.ln() - LN_SQRT_2PI - y
                }
            }
            Prior::Gamma { shape, rate } => {
                if x < 0.0 {
                    f64::NEG_INFINITY
                } else if x == 0.0 {
                    match shape.partial_cmp(&1.0) {
                        Some(std::cmp::Ordering::Equal) => rate.ln(),
                        Some(std::cmp::Ordering::Greater) => f64::NEG_INFINITY,
                        _ => f64::INFINITY,
                    }
                } else {
                    shape * rate.ln() - ln_gamma(*shape) + (shape - 1.0) * x.ln() - rate * x
                }
            }
            Prior::Transition { spec, x0, t } => spec
                .log_transition_density(*x0, *t, x)
                .unwrap_or(f64::NEG_INFINITY),
        })
    }

    pub fn density(&self, x: f64) -> Option<f64> {
        self.log_density(x).map(f64::exp)
    }

    /// An interval carrying all but a negligible (far below 1e-12) fraction of the mass.
    pub fn support(&self) -> (f64, f64) {
        match self {
            Prior::PointMass(z) => (*z, *z),
            Prior::Gaussian { mean, var } => {
                let s = var.sqrt();
                (mean - 12.0 * s, mean + 12.0 * s)
            }
            Prior::LogNormal { mu, sigma2 } => {
                let s = sigma2.sqrt();
                ((mu - 12.0 * s).exp(), (mu + 12.0 * s).exp())
            }
            Prior::Gamma { shape, rate } => {
                // Gamma(k, r) is χ²(2k)/(2r); bound √χ² by its Gaussian-like upper tail.
                let hi = ((2.0 * shape).sqrt() + 12.0).powi(2) / (2.0 * rate);
                (0.0, hi)
            }
            Prior::Transition { spec, x0, t } => spec.transition_window(*x0, *t),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Prior::PointMass(z) => *z,
            Prior::Gaussian { mean, .. } => *mean,
            Prior::LogNormal { mu, sigma2 } => (mu + 0.5 * sigma2).exp(),
            Prior::Gamma { shape, rate } => shape / rate,
            Prior::Transition { spec, x0, t } => spec.transition_mean(*x0, *t),
        }
    }
}
