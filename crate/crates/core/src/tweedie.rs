//! Tweedie's formulae: scores of forward marginals from posterior means.
//!
//! Each family's score is an affine function of one conditional expectation
//! `E(g(X₀) | X_t = x)`. A [`ConditionalOracle`] supplies that expectation
//! (exactly, by quadrature, or by self-normalized importance sampling over
//! prior particles) and the formula maps it, with its standard error, to
//! the score.
//!
//! | family | `g(X₀)` | score |
//! |--------|---------|-------|
//! | VE  | `X₀` | `(E − x)/Σ²` |
//! | VP  | `X₀` | `(e^{−A}E − x)/(1 − e^{−2A})` |
//! | GBM | `log X₀` | `(U/Σ² − 3/2)/x − log x/(xΣ²) + E/(xΣ²)` |
//! | BESQ-type | `√Z₀·I_{ν+1}/I_ν(√(zZ₀)/τ)` | `φ'·(ν/z − 1/(2τ) + E/(2τ√z)) + (log|φ'|)'` |
//! | BES3(σ) | `b₀ coth(b b₀/t) − b`, `b = x/σ` | `(1/b + E/t)/σ` |
//!
//! The BESQ-type row covers BESQ, BESQ(μ, σ), CIR and CEV through the
//! squared-Bessel coordinates described in [`crate::process`].

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::oracle;
use crate::process::{CoefficientSchedule, Family, InitialMap, Prior, ProcessSpec};
use crate::special_fn::{bessel_ratio_unchecked, coth};

/// Below this effective sample size a Monte-Carlo expectation is flagged.
pub const ESS_WARN: f64 = 50.0;

/// A value with a standard error (zero when exact) and, for importance
/// sampling, the effective sample size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub ess: Option<f64>,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            std_error: 0.0,
            ess: None,
        }
    }

    fn affine(self, slope: f64, intercept: f64) -> Self {
        Self {
            value: intercept + slope * self.value,
            std_error: slope.abs() * self.std_error,
            ess: self.ess,
        }
    }
}

/// The function of `X₀` whose posterior mean a formula needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Integrand {
    Identity,
    Log,
    /// `√Z₀ · I_{ν+1}(√(z Z₀)/τ) / I_ν(√(z Z₀)/τ)` with `Z₀ = map(X₀)`.
    BesqRatio {
        nu: f64,
        tau: f64,
        z: f64,
        map: InitialMap,
    },
    /// `b₀ coth(b b₀ / t) − b` with `b₀ = X₀/scale`.
    Bes3 { t: f64, b: f64, scale: f64 },
}

impl Integrand {
    pub fn eval(&self, x0: f64) -> f64 {
        match *self {
            Integrand::Identity => x0,
            Integrand::Log => x0.ln(),
            Integrand::BesqRatio { nu, tau, z, map } => {
                let z0 = map.apply(x0);
                if z0 == 0.0 {
                    return 0.0;
                }
                z0.sqrt() * bessel_ratio_unchecked(nu, (z * z0).sqrt() / tau)
            }
            Integrand::Bes3 { t, b, scale } => {
                let b0 = x0 / scale;
                if b0 == 0.0 {
                    // b₀ coth(b b₀/t) → t/b
                    return t / b - b;
                }
                b0 * coth(b * b0 / t) - b
            }
        }
    }
}

/// Prior particles for the importance-sampling oracle.
#[derive(Debug, Clone)]
pub struct Particles {
    samples: Arc<[f64]>,
}

impl Particles {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::domain("Monte-Carlo oracle needs at least one particle"));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("Monte-Carlo particles must be finite"));
        }
        Ok(Self {
            samples: samples.into(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.samples
    }
}

/// Source of `E(g(X₀) | X_t = x)`.
#[derive(Debug, Clone)]
pub enum ConditionalOracle {
    /// `X₀ = z` almost surely.
    Degenerate(f64),
    /// Closed-form posterior for a conjugate (family, prior) pair.
    Analytic(Prior),
    /// Adaptive quadrature against the prior density.
    Quadrature(Prior),
    /// Self-normalized importance sampling with transition-density weights.
    MonteCarlo(Particles),
}

impl ConditionalOracle {
    /// Exact oracle for a prior: degenerate for a point mass, analytic otherwise.
    pub fn analytic(prior: Prior) -> Self {
        match prior.as_point_mass() {
            Some(z) => ConditionalOracle::Degenerate(z),
            None => ConditionalOracle::Analytic(prior),
        }
    }

    pub fn expectation(&self, spec: &ProcessSpec, g: &Integrand, t: f64, x: f64) -> Result<Estimate> {
        match self {
            ConditionalOracle::Degenerate(z) => {
                spec.check_initial(*z)?;
                Ok(Estimate::exact(g.eval(*z)))
            }
            ConditionalOracle::Analytic(prior) => analytic_expectation(spec, prior, g, t, x),
            ConditionalOracle::Quadrature(prior) => {
                oracle::conditional_expectation_numeric(prior, spec, |z| g.eval(z), t, x)
                    .map(Estimate::exact)
            }
            ConditionalOracle::MonteCarlo(p) => conditional_expectation_mc(p.as_slice(), spec, g, t, x),
        }
    }
}

fn unsupported(spec: &ProcessSpec, prior: &Prior) -> Error {
    Error::domain(format!(
        "no closed-form posterior for the {} family with prior {prior:?}",
        spec.name()
    ))
}

fn analytic_expectation(
    spec: &ProcessSpec,
    prior: &Prior,
    g: &Integrand,
    t: f64,
    x: f64,
) -> Result<Estimate> {
    if let Some(z) = prior.as_point_mass() {
        return Ok(Estimate::exact(g.eval(z)));
    }
    let value = match (spec.family(), prior, g) {
        (Family::Ve { sigma }, Prior::Gaussian { mean, var }, Integrand::Identity) => {
            let v = sigma.square_integral(t);
            (mean * v + x * var) / (var + v)
        }
        (Family::Vp { alpha }, Prior::Gaussian { mean, var }, Integrand::Identity) => {
            let a = alpha.plain_integral(t);
            let m = (-a).exp();
            let noise = -(-2.0 * a).exp_m1();
            mean + m * var * (x - m * mean) / (m * m * var + noise)
        }
        (Family::Gbm { mu, sigma }, Prior::LogNormal { mu: m0, sigma2 }, Integrand::Log) => {
            let v = sigma.square_integral(t);
            let y = x.ln() - mu.plain_integral(t) + 0.5 * v;
            (m0 * v + y * sigma2) / (sigma2 + v)
        }
        (_, Prior::Gamma { shape, rate }, Integrand::BesqRatio { nu, tau, z, map }) => {
            // Z₀ = c·X₀ ~ Gamma(ν+1, r/c) gives Z_τ ~ Gamma(ν+1, 1/(2τ + c/r)).
            if map.power != 1.0 || (shape - (nu + 1.0)).abs() > 1e-12 * shape {
                return Err(unsupported(spec, prior));
            }
            let rz = rate / map.scale;
            z.sqrt() / (1.0 + 2.0 * tau * rz)
        }
        _ => return Err(unsupported(spec, prior)),
    };
    Ok(Estimate::exact(value))
}

/// Self-normalized importance estimate of `E(g(X₀) | X_t = x)` from prior
/// particles, weights `q(t, zᵢ, x)` handled on the log scale.
///
/// The standard error is the delta-method one,
/// `√(Σ wᵢ²(gᵢ − ĝ)²) / Σ wᵢ`; the effective sample size is
/// `(Σ wᵢ)² / Σ wᵢ²`.
pub fn conditional_expectation_mc(
    prior_samples: &[f64],
    spec: &ProcessSpec,
    g: &Integrand,
    t: f64,
    x: f64,
) -> Result<Estimate> {
    if prior_samples.is_empty() {
        return Err(Error::domain("Monte-Carlo oracle needs at least one particle"));
    }
    if !(t > 0.0) {
        return Err(Error::domain(format!("time must be > 0, got {t}")));
    }
    for &z in prior_samples {
        spec.check_initial(z)?;
    }
    if prior_samples.len() == 1 {
        return Ok(Estimate {
            value: g.eval(prior_samples[0]),
            std_error: 0.0,
            ess: Some(1.0),
        });
    }
    let log_w: Vec<f64> = prior_samples
        .par_iter()
        .map(|&z| spec.log_transition_density_unchecked(z, t, x))
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::NoSupport {
            n: prior_samples.len(),
            t,
            x,
        });
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let gv: Vec<f64> = prior_samples
        .par_iter()
        .zip(w.par_iter())
        .map(|(&z, &wi)| if wi > 0.0 { g.eval(z) } else { 0.0 })
        .collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    let value = w.iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>() / sw;
    let var_num: f64 = w
        .iter()
        .zip(&gv)
        .map(|(a, b)| (a * (b - value)).powi(2))
        .sum();
    let ess = sw * sw / sw2;
    if ess < ESS_WARN {
        log::warn!(
            "importance sampling at t = {t}, x = {x}: effective sample size {ess:.1} below {ESS_WARN}"
        );
    }
    Ok(Estimate {
        value,
        std_error: var_num.sqrt() / sw,
        ess: Some(ess),
    })
}

/// Score of the forward marginal of `spec` at `(t, x)`.
pub fn score(spec: &ProcessSpec, oracle: &ConditionalOracle, t: f64, x: f64) -> Result<Estimate> {
    spec.check_point(t, x)?;
    match spec.family() {
        Family::Ve { sigma } => {
            let v = sigma.square_integral(t);
            let e = oracle.expectation(spec, &Integrand::Identity, t, x)?;
            Ok(e.affine(1.0 / v, -x / v))
        }
        Family::Vp { alpha } => {
            let a = alpha.plain_integral(t);
            let denom = -(-2.0 * a).exp_m1();
            let e = oracle.expectation(spec, &Integrand::Identity, t, x)?;
            Ok(e.affine((-a).exp() / denom, -x / denom))
        }
        Family::Gbm { mu, sigma } => {
            let v = sigma.square_integral(t);
            let u = mu.plain_integral(t);
            let e = oracle.expectation(spec, &Integrand::Log, t, x)?;
            Ok(e.affine(1.0 / (x * v), (u / v - 1.5) / x - x.ln() / (x * v)))
        }
        Family::Bes3 { sigma } => {
            let b = x / sigma;
            let g = Integrand::Bes3 { t, b, scale: *sigma };
            let e = oracle.expectation(spec, &g, t, x)?;
            Ok(e.affine(1.0 / (t * sigma), 1.0 / (b * sigma)))
        }
        _ => {
            let f = spec.besq_frame(t, x).expect("BESQ-type family");
            let map = spec.initial_map().expect("BESQ-type family");
            let g = Integrand::BesqRatio {
                nu: f.nu,
                tau: f.tau,
                z: f.z,
                map,
            };
            let e = oracle.expectation(spec, &g, t, x)?;
            let base = f.nu / f.z - 0.5 / f.tau;
            let slope = 1.0 / (2.0 * f.tau * f.z.sqrt());
            Ok(e.affine(f.dz_dx * slope, f.dz_dx * base + f.dlogjac_dx))
        }
    }
}

pub fn score_ve(sigma: &CoefficientSchedule, oracle: &ConditionalOracle, t: f64, x: f64) -> Result<Estimate> {
    score(&ProcessSpec::ve(sigma.clone())?, oracle, t, x)
}

pub fn score_vp(alpha: &CoefficientSchedule, oracle: &ConditionalOracle, t: f64, x: f64) -> Result<Estimate> {
    score(&ProcessSpec::vp(alpha.clone())?, oracle, t, x)
}

pub fn score_gbm(
    mu: &CoefficientSchedule,
    sigma: &CoefficientSchedule,
    oracle: &ConditionalOracle,
    t: f64,
    x: f64,
) -> Result<Estimate> {
    score(&ProcessSpec::gbm(mu.clone(), sigma.clone())?, oracle, t, x)
}

pub fn score_besq(nu: f64, oracle: &ConditionalOracle, t: f64, x: f64) -> Result<Estimate> {
    score(&ProcessSpec::besq(nu)?, oracle, t, x)
}

/// Score of `dX = μ dt + σ√X dW`: `(4/σ²)·s_ν(t, 4x/σ²)` with `ν = 2μ/σ² − 1`,
/// the oracle's prior read in `X` coordinates.
pub fn score_besq_general(mu: f64, sigma: f64, oracle: &ConditionalOracle, t: f64, x: f64) -> Result<Estimate> {
    score(&ProcessSpec::besq_general(mu, sigma)?, oracle, t, x)
}

pub fn score_cir(spec: &ProcessSpec, oracle: &ConditionalOracle, t: f64, x: f64) -> Result<Estimate> {
    match spec.family() {
        Family::Cir { .. } => score(spec, oracle, t, x),
        _ => Err(Error::domain(format!("score_cir called with a {} spec", spec.name()))),
    }
}

pub fn score_cev(spec: &ProcessSpec, oracle: &ConditionalOracle, t: f64, x: f64) -> Result<Estimate> {
    match spec.family() {
        Family::Cev { .. } => score(spec, oracle, t, x),
        _ => Err(Error::domain(format!("score_cev called with a {} spec", spec.name()))),
    }
}

pub fn score_bes3(oracle: &ConditionalOracle, t: f64, x: f64) -> Result<Estimate> {
    score(&ProcessSpec::bes3(1.0)?, oracle, t, x)
}

/// Score of `dX = (σ²/X) dt + σ dW`: `(1/σ)·s(t, x/σ)`.
pub fn score_bes3_sigma(sigma: f64, oracle: &ConditionalOracle, t: f64, x: f64) -> Result<Estimate> {
    score(&ProcessSpec::bes3(sigma)?, oracle, t, x)
}

/// How a score field was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    TweedieAnalytic,
    TweedieMc,
    BasisFit,
    FiniteDifferenceOracle,
}

/// A map `(t, x) ↦ ∇ log p(t, x)`.
pub trait ScoreField: Send + Sync {
    fn eval(&self, t: f64, x: f64) -> Result<f64>;
    fn provenance(&self) -> Provenance;
}

/// Tweedie's formula bound to a process and an oracle.
#[derive(Debug, Clone)]
pub struct TweedieScore {
    spec: ProcessSpec,
    oracle: ConditionalOracle,
}

impl TweedieScore {
    pub fn new(spec: ProcessSpec, oracle: ConditionalOracle) -> Self {
        Self { spec, oracle }
    }

    pub fn spec(&self) -> &ProcessSpec {
        &self.spec
    }

    pub fn estimate(&self, t: f64, x: f64) -> Result<Estimate> {
        score(&self.spec, &self.oracle, t, x)
    }
}

impl ScoreField for TweedieScore {
    fn eval(&self, t: f64, x: f64) -> Result<f64> {
        self.estimate(t, x).map(|e| e.value)
    }

    fn provenance(&self) -> Provenance {
        match self.oracle {
            ConditionalOracle::MonteCarlo(_) => Provenance::TweedieMc,
            _ => Provenance::TweedieAnalytic,
        }
    }
}

/// A score given directly as a function.
pub struct FnScore<F> {
    f: F,
    provenance: Provenance,
}

impl<F: Fn(f64, f64) -> f64 + Send + Sync> FnScore<F> {
    pub fn new(f: F, provenance: Provenance) -> Self {
        Self { f, provenance }
    }
}

impl<F: Fn(f64, f64) -> f64 + Send + Sync> ScoreField for FnScore<F> {
    fn eval(&self, t: f64, x: f64) -> Result<f64> {
        Ok((self.f)(t, x))
    }

    fn provenance(&self) -> Provenance {
        self.provenance
    }
}
