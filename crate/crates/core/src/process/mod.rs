//! Forward processes: schedules, the seven scalar families, exact transition
//! sampling, transition densities and reverse-time initial laws.
//!
//! Every non-Gaussian family is handled through its squared-Bessel
//! representation. For a family with index `ν` there is a clock `τ(t)` and a
//! space map `φ_t` such that `Z_{τ(t)} = φ_t(X_t)` is a canonical squared
//! Bessel process `dZ = 2(ν+1)dτ + 2√Z dW`:
//!
//! | family        | `ν`              | `τ(t)`                         | `φ_t(x)`                  |
//! |---------------|------------------|--------------------------------|---------------------------|
//! | BESQ          | `ν`              | `t`                            | `x`                       |
//! | BESQ(μ, σ)    | `2μ/σ² − 1`      | `t`                            | `4x/σ²`                   |
//! | CIR           | `2αμ/σ² − 1`     | `¼∫σ²e^{A}`                    | `e^{A(t)} x`              |
//! | CEV           | `1/(2(β−1))`     | `(β−1)²∫σ²e^{2(β−1)U}`         | `e^{2(β−1)U(t)} x^{−2(β−1)}` |
//!
//! Sampling draws `Z` exactly from a scaled noncentral chi-squared law and
//! maps back; densities pick up the Jacobian of `φ_t`.

pub mod prior;
pub mod schedule;

pub use prior::Prior;
pub use schedule::{CoefficientSchedule, IntegralKind, Shape};

use rand::Rng;

use crate::error::{Error, Result};
use crate::quadrature::Quadrature;
use crate::special_fn::{
    ln_gamma, log_bessel_i_unchecked, noncentral_chi2_unchecked, sample_standard_normal,
};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const CIR_INDEX_GRID: usize = 64;
const CIR_INDEX_RTOL: f64 = 1e-8;

/// Parameters of one process family.
#[derive(Debug, Clone)]
pub enum Family {
    /// `dX = σ(t) dW`
    Ve { sigma: CoefficientSchedule },
    /// `dX = −α(t) X dt + √(2α(t)) dW`
    Vp { alpha: CoefficientSchedule },
    /// `dX = μ(t) X dt + σ(t) X dW`
    Gbm {
        mu: CoefficientSchedule,
        sigma: CoefficientSchedule,
    },
    /// `dX = 2(ν+1) dt + 2√X dW`
    Besq { nu: f64 },
    /// `dX = μ dt + σ√X dW`
    BesqGeneral { mu: f64, sigma: f64 },
    /// `dX = α(t)(μ(t) − X) dt + σ(t)√X dW` with `2αμ/σ² − 1 ≡ ν`
    Cir {
        alpha: CoefficientSchedule,
        mu: CoefficientSchedule,
        sigma: CoefficientSchedule,
        nu: f64,
    },
    /// `dX = μ(t) X dt + σ(t) X^β dW`, `β > 1`
    Cev {
        mu: CoefficientSchedule,
        sigma: CoefficientSchedule,
        beta: f64,
    },
    /// `dX = (σ²/X) dt + σ dW`; `X/σ` is a three-dimensional Bessel process.
    Bes3 { sigma: f64 },
}

/// A validated forward process.
#[derive(Debug, Clone)]
pub struct ProcessSpec {
    family: Family,
}

/// Canonical squared-Bessel coordinates of a point `(t, x)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BesqFrame {
    pub nu: f64,
    pub tau: f64,
    pub z: f64,
    /// `dφ_t/dx`
    pub dz_dx: f64,
    /// `d/dx log|dφ_t/dx|`
    pub dlogjac_dx: f64,
}

/// `Z_0 = scale · X_0^power`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialMap {
    pub scale: f64,
    pub power: f64,
}

impl InitialMap {
    pub fn apply(self, x0: f64) -> f64 {
        if self.power == 1.0 {
            self.scale * x0
        } else {
            self.scale * x0.powf(self.power)
        }
    }

    fn invert(self, z0: f64) -> f64 {
        if self.power == 1.0 {
            z0 / self.scale
        } else {
            (z0 / self.scale).powf(1.0 / self.power)
        }
    }
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{what} must be positive and finite, got {v}")))
    }
}

fn check_interval(s: f64, t: f64) -> Result<()> {
    if s >= 0.0 && s < t && t.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("need 0 <= s < t, got s = {s}, t = {t}")))
    }
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("time must be > 0, got {t}")))
    }
}

/// `log` of the canonical BESQ(ν) transition density `q(τ, z0, z)`.
pub(crate) fn besq_log_density(nu: f64, tau: f64, z0: f64, z: f64) -> f64 {
    if z < 0.0 {
        return f64::NEG_INFINITY;
    }
    if z0 == 0.0 {
        // Gamma(ν+1, rate 1/(2τ))
        if z == 0.0 {
            return if nu == 0.0 {
                -(2.0 * tau).ln()
            } else {
                f64::NEG_INFINITY
            };
        }
        return -(nu + 1.0) * (2.0 * tau).ln() - ln_gamma(nu + 1.0) + nu * z.ln() - z / (2.0 * tau);
    }
    if z == 0.0 {
        return if nu == 0.0 {
            -(2.0 * tau).ln() - z0 / (2.0 * tau)
        } else {
            f64::NEG_INFINITY
        };
    }
    let arg = (z0 * z).sqrt() / tau;
    -(2.0 * tau).ln() + 0.5 * nu * (z.ln() - z0.ln()) - (z0 + z) / (2.0 * tau)
        + log_bessel_i_unchecked(nu, arg)
}

/// `log` of the BES(ν) transition density `q̃(t, r0, r)` of the radial process.
pub(crate) fn bes_log_density(nu: f64, t: f64, r0: f64, r: f64) -> f64 {
    if r <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if r0 == 0.0 {
        return (2.0 * nu + 1.0) * r.ln() - (nu + 1.0) * t.ln() - nu * std::f64::consts::LN_2
            - ln_gamma(nu + 1.0)
            - r * r / (2.0 * t);
    }
    r.ln() - t.ln() + nu * (r.ln() - r0.ln()) - (r0 * r0 + r * r) / (2.0 * t)
        + log_bessel_i_unchecked(nu, r0 * r / t)
}

fn gaussian_log_density(mean: f64, var: f64, x: f64) -> f64 {
    -0.5 * (x - mean).powi(2) / var - 0.5 * var.ln() - LN_SQRT_2PI
}

/// Exact draw of `Z_τ` for BESQ(ν) started at `z0`: `τ·χ²(2(ν+1), z0/τ)`.
pub(crate) fn besq_sample<R: Rng + ?Sized>(nu: f64, tau: f64, z0: f64, rng: &mut R) -> f64 {
    tau * noncentral_chi2_unchecked(2.0 * (nu + 1.0), z0 / tau, rng)
}

/// Bounds for `Z_τ` from `z0` holding all but a negligible mass.
fn besq_window(nu: f64, tau: f64, z0: f64) -> (f64, f64) {
    let s = tau.sqrt();
    let lo = (z0.sqrt() - 12.0 * s).max(0.0).powi(2);
    let hi = (z0.sqrt() + s * ((2.0 * nu + 2.0).sqrt() + 12.0)).powi(2);
    (lo, hi)
}

impl ProcessSpec {
    pub fn new(family: Family) -> Result<Self> {
        Self::with_horizon(family, 1.0)
    }

    /// Validate `family`, checking the CIR index over `[0, horizon]`.
    pub fn with_horizon(family: Family, horizon: f64) -> Result<Self> {
        check_time(horizon)?;
        match &family {
            Family::Ve { .. } | Family::Vp { .. } | Family::Gbm { .. } => {}
            Family::Besq { nu } => {
                if !(nu.is_finite() && *nu >= 0.0) {
                    return Err(Error::domain(format!("BESQ index must be >= 0, got {nu}")));
                }
            }
            Family::BesqGeneral { mu, sigma } => {
                positive(*sigma, "BESQ sigma")?;
                if !mu.is_finite() || *mu < 0.5 * sigma * sigma {
                    return Err(Error::domain(format!(
                        "BESQ drift must satisfy mu >= sigma^2/2, got mu = {mu}, sigma = {sigma}"
                    )));
                }
            }
            Family::Cir {
                alpha,
                mu,
                sigma,
                nu,
            } => {
                for i in 0..CIR_INDEX_GRID {
                    let t = horizon * i as f64 / (CIR_INDEX_GRID - 1) as f64;
                    let (a, m, s) = (alpha.eval(t), mu.eval(t), sigma.eval(t));
                    if !(a > 0.0 && m > 0.0 && s > 0.0) {
                        return Err(Error::domain(format!(
                            "CIR coefficients must be positive, got alpha = {a}, mu = {m}, sigma = {s} at t = {t}"
                        )));
                    }
                    let index = 2.0 * a * m / (s * s) - 1.0;
                    if (index - nu).abs() > CIR_INDEX_RTOL * nu.abs().max(1.0) {
                        return Err(Error::domain(format!(
                            "CIR index 2*alpha*mu/sigma^2 - 1 must be constant: {index} at t = {t}, expected {nu}"
                        )));
                    }
                }
                if *nu < 0.0 {
                    return Err(Error::domain(format!("CIR index must be >= 0, got {nu}")));
                }
            }
            Family::Cev { beta, .. } => {
                if !(beta.is_finite() && *beta > 1.0) {
                    return Err(Error::domain(format!("CEV requires beta > 1, got {beta}")));
                }
            }
            Family::Bes3 { sigma } => positive(*sigma, "BES3 sigma")?,
        }
        Ok(Self { family })
    }

    pub fn ve(sigma: CoefficientSchedule) -> Result<Self> {
        Self::new(Family::Ve { sigma })
    }

    pub fn vp(alpha: CoefficientSchedule) -> Result<Self> {
        Self::new(Family::Vp { alpha })
    }

    pub fn gbm(mu: CoefficientSchedule, sigma: CoefficientSchedule) -> Result<Self> {
        Self::new(Family::Gbm { mu, sigma })
    }

    pub fn besq(nu: f64) -> Result<Self> {
        Self::new(Family::Besq { nu })
    }

    pub fn besq_general(mu: f64, sigma: f64) -> Result<Self> {
        Self::new(Family::BesqGeneral { mu, sigma })
    }

    /// CIR with the index read off at `t = 0` and checked on `[0, horizon]`.
    pub fn cir(
        alpha: CoefficientSchedule,
        mu: CoefficientSchedule,
        sigma: CoefficientSchedule,
        horizon: f64,
    ) -> Result<Self> {
        let s0 = sigma.eval(0.0);
        positive(s0, "CIR sigma(0)")?;
        let mut nu = 2.0 * alpha.eval(0.0) * mu.eval(0.0) / (s0 * s0) - 1.0;
        if nu.abs() < 1e-12 {
            nu = 0.0;
        }
        Self::with_horizon(
            Family::Cir {
                alpha,
                mu,
                sigma,
                nu,
            },
            horizon,
        )
    }

    pub fn cev(mu: CoefficientSchedule, sigma: CoefficientSchedule, beta: f64) -> Result<Self> {
        Self::new(Family::Cev { mu, sigma, beta })
    }

    pub fn bes3(sigma: f64) -> Result<Self> {
        Self::new(Family::Bes3 { sigma })
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn name(&self) -> &'static str {
        match self.family {
            Family::Ve { .. } => "ve",
            Family::Vp { .. } => "vp",
            Family::Gbm { .. } => "gbm",
            Family::Besq { .. } => "besq",
            Family::BesqGeneral { .. } => "besq-general",
            Family::Cir { .. } => "cir",
            Family::Cev { .. } => "cev",
            Family::Bes3 { .. } => "bes3",
        }
    }

    /// Whether the state space is the real line (VE, VP) or the half line.
    pub fn is_real_line(&self) -> bool {
        matches!(self.family, Family::Ve { .. } | Family::Vp { .. })
    }

    /// Membership of the open state space where scores are defined.
    pub fn in_state_space(&self, x: f64) -> bool {
        x.is_finite() && (self.is_real_line() || x > 0.0)
    }

    /// Admissible starting points: the whole line, `[0, ∞)` for the
    /// Bessel-type families (a start at zero is a central law), `(0, ∞)`
    /// for GBM and CEV.
    pub fn check_initial(&self, x0: f64) -> Result<()> {
        let ok = match self.family {
            Family::Ve { .. } | Family::Vp { .. } => x0.is_finite(),
            Family::Gbm { .. } | Family::Cev { .. } => x0 > 0.0 && x0.is_finite(),
            _ => x0 >= 0.0 && x0.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "initial value {x0} is outside the {} state space",
                self.name()
            )))
        }
    }

    pub(crate) fn check_point(&self, t: f64, x: f64) -> Result<()> {
        check_time(t)?;
        if self.in_state_space(x) {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "x = {x} is outside the open {} state space",
                self.name()
            )))
        }
    }

    /// BESQ index of the squared-Bessel representation.
    pub(crate) fn besq_index(&self) -> Option<f64> {
        match &self.family {
            Family::Besq { nu } => Some(*nu),
            Family::BesqGeneral { mu, sigma } => Some(2.0 * mu / (sigma * sigma) - 1.0),
            Family::Cir { nu, .. } => Some(*nu),
            Family::Cev { beta, .. } => Some(0.5 / (beta - 1.0)),
            _ => None,
        }
    }

    pub(crate) fn initial_map(&self) -> Option<InitialMap> {
        match &self.family {
            Family::Besq { .. } | Family::Cir { .. } => Some(InitialMap {
                scale: 1.0,
                power: 1.0,
            }),
            Family::BesqGeneral { sigma, .. } => Some(InitialMap {
                scale: 4.0 / (sigma * sigma),
                power: 1.0,
            }),
            Family::Cev { beta, .. } => Some(InitialMap {
                scale: 1.0,
                power: -2.0 * (beta - 1.0),
            }),
            _ => None,
        }
    }

    /// `τ(t) = ¼∫₀ᵗ σ²(s) e^{A(s)} ds`.
    pub(crate) fn cir_tau(
        alpha: &CoefficientSchedule,
        sigma: &CoefficientSchedule,
        t: f64,
    ) -> f64 {
        if let Some(k) = sigma.sqrt_multiple_of(alpha) {
            // σ² = kα, so the integrand is (k/4)·(e^{A})'.
            return 0.25 * k * alpha.plain_integral(t).exp_m1();
        }
        if let (Some(a), Some(s)) = (alpha.constant_value(), sigma.constant_value()) {
            if a != 0.0 {
                return 0.25 * s * s * (a * t).exp_m1() / a;
            }
        }
        let f = |s: f64| sigma.eval(s).powi(2) * alpha.plain_integral(s).exp();
        0.25 * Quadrature::new(0.0, 1e-13)
            .integrate(f, 0.0, t)
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
    }

    /// `τ(t) = (β−1)²∫₀ᵗ σ²(s) e^{2(β−1)U(s)} ds`.
    pub(crate) fn cev_tau(
        mu: &CoefficientSchedule,
        sigma: &CoefficientSchedule,
        beta: f64,
        t: f64,
    ) -> f64 {
        let g = 2.0 * (beta - 1.0);
        let c = (beta - 1.0).powi(2);
        if let (Some(m), Some(s)) = (mu.constant_value(), sigma.constant_value()) {
            return if m == 0.0 {
                c * s * s * t
            } else {
                c * s * s * (g * m * t).exp_m1() / (g * m)
            };
        }
        let f = |s: f64| sigma.eval(s).powi(2) * (g * mu.plain_integral(s)).exp();
        c * Quadrature::new(0.0, 1e-13)
            .integrate(f, 0.0, t)
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
    }

    /// Clock of the squared-Bessel representation.
    pub(crate) fn besq_clock(&self, t: f64) -> f64 {
        match &self.family {
            Family::Besq { .. } | Family::BesqGeneral { .. } => t,
            Family::Cir { alpha, sigma, .. } => Self::cir_tau(alpha, sigma, t),
            Family::Cev { mu, sigma, beta } => Self::cev_tau(mu, sigma, *beta, t),
            _ => f64::NAN,
        }
    }

    /// Squared-Bessel coordinates of `(t, x)`, for the BESQ-type families.
    pub(crate) fn besq_frame(&self, t: f64, x: f64) -> Option<BesqFrame> {
        let nu = self.besq_index()?;
        let tau = self.besq_clock(t);
        let (z, dz_dx, dlogjac_dx) = match &self.family {
            Family::Besq { .. } => (x, 1.0, 0.0),
            Family::BesqGeneral { sigma, .. } => {
                let c = 4.0 / (sigma * sigma);
                (c * x, c, 0.0)
            }
            Family::Cir { alpha, .. } => {
                let e = alpha.plain_integral(t).exp();
                (e * x, e, 0.0)
            }
            Family::Cev { mu, beta, .. } => {
                let g = 2.0 * (beta - 1.0);
                let e = (g * mu.plain_integral(t)).exp();
                let z = e * x.powf(-g);
                (z, -g * z / x, -(g + 1.0) / x)
            }
            _ => return None,
        };
        Some(BesqFrame {
            nu,
            tau,
            z,
            dz_dx,
            dlogjac_dx,
        })
    }

    /// Inverse of the space map `φ_t`.
    fn besq_unmap(&self, t: f64, z: f64) -> f64 {
        match &self.family {
            Family::Besq { .. } => z,
            Family::BesqGeneral { sigma, .. } => 0.25 * sigma * sigma * z,
            Family::Cir { alpha, .. } => (-alpha.plain_integral(t)).exp() * z,
            Family::Cev { mu, beta, .. } => {
                let g = 2.0 * (beta - 1.0);
                (z * (-g * mu.plain_integral(t)).exp()).powf(-1.0 / g)
            }
            _ => f64::NAN,
        }
    }

    /// One exact draw of `X_t` given `X_0 = x0`.
    pub fn forward_sample<R: Rng + ?Sized>(&self, x0: f64, t: f64, rng: &mut R) -> Result<f64> {
        self.check_initial(x0)?;
        check_time(t)?;
        Ok(self.sample_between_unchecked(0.0, x0, t, rng))
    }

    pub(crate) fn forward_sample_unchecked<R: Rng + ?Sized>(
        &self,
        x0: f64,
        t: f64,
        rng: &mut R,
    ) -> f64 {
        self.sample_between_unchecked(0.0, x0, t, rng)
    }

    /// One exact draw of `X_t` given `X_s = xs`, for `0 ≤ s < t`.
    pub fn forward_sample_between<R: Rng + ?Sized>(
        &self,
        s: f64,
        xs: f64,
        t: f64,
        rng: &mut R,
    ) -> Result<f64> {
        self.check_initial(xs)?;
        check_interval(s, t)?;
        Ok(self.sample_between_unchecked(s, xs, t, rng))
    }

    fn sample_between_unchecked<R: Rng + ?Sized>(&self, s: f64, xs: f64, t: f64, rng: &mut R) -> f64 {
        match &self.family {
            Family::Ve { sigma } => {
                let v = sigma.square_integral(t) - sigma.square_integral(s);
                xs + v.sqrt() * sample_standard_normal(rng)
            }
            Family::Vp { alpha } => {
                let a = alpha.plain_integral(t) - alpha.plain_integral(s);
                (-a).exp() * xs + (-(-2.0 * a).exp_m1()).sqrt() * sample_standard_normal(rng)
            }
            Family::Gbm { mu, sigma } => {
                let v = sigma.square_integral(t) - sigma.square_integral(s);
                let u = mu.plain_integral(t) - mu.plain_integral(s);
                xs * (u - 0.5 * v + v.sqrt() * sample_standard_normal(rng)).exp()
            }
            Family::Bes3 { sigma } => {
                let b = xs / sigma;
                sigma * besq_sample(0.5, t - s, b * b, rng).sqrt()
            }
            _ => {
                let nu = self.besq_index().expect("BESQ-type family");
                let dtau = self.besq_clock(t) - self.besq_clock_or_zero(s);
                let z = besq_sample(nu, dtau, self.besq_map(s, xs), rng);
                self.besq_unmap(t, z)
            }
        }
    }

    fn besq_clock_or_zero(&self, s: f64) -> f64 {
        if s == 0.0 {
            0.0
        } else {
            self.besq_clock(s)
        }
    }

    /// `φ_s(x)` without the clock.
    fn besq_map(&self, s: f64, x: f64) -> f64 {
        if s == 0.0 {
            return self.initial_map().expect("BESQ-type family").apply(x);
        }
        match &self.family {
            Family::Besq { .. } => x,
            Family::BesqGeneral { sigma, .. } => 4.0 * x / (sigma * sigma),
            Family::Cir { alpha, .. } => alpha.plain_integral(s).exp() * x,
            Family::Cev { mu, beta, .. } => {
                let g = 2.0 * (beta - 1.0);
                (g * mu.plain_integral(s)).exp() * x.powf(-g)
            }
            _ => f64::NAN,
        }
    }

    /// `log q(t, x0, x)`; `−∞` off the state space.
    pub fn log_transition_density(&self, x0: f64, t: f64, x: f64) -> Result<f64> {
        self.log_transition_density_between(0.0, x0, t, x)
    }

    /// `log` density of `X_t` at `x` given `X_s = xs`, for `0 ≤ s < t`.
    pub fn log_transition_density_between(&self, s: f64, xs: f64, t: f64, x: f64) -> Result<f64> {
        self.check_initial(xs)?;
        check_interval(s, t)?;
        if x.is_nan() {
            return Err(Error::domain("transition density at NaN"));
        }
        Ok(self.log_density_between_unchecked(s, xs, t, x))
    }

    pub(crate) fn log_transition_density_unchecked(&self, x0: f64, t: f64, x: f64) -> f64 {
        self.log_density_between_unchecked(0.0, x0, t, x)
    }

    pub(crate) fn log_density_between_unchecked(&self, s: f64, xs: f64, t: f64, x: f64) -> f64 {
        match &self.family {
            Family::Ve { sigma } => {
                gaussian_log_density(xs, sigma.square_integral(t) - sigma.square_integral(s), x)
            }
            Family::Vp { alpha } => {
                let a = alpha.plain_integral(t) - alpha.plain_integral(s);
                gaussian_log_density((-a).exp() * xs, -(-2.0 * a).exp_m1(), x)
            }
            Family::Gbm { mu, sigma } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let v = sigma.square_integral(t) - sigma.square_integral(s);
                let u = mu.plain_integral(t) - mu.plain_integral(s);
                let y = x.ln();
                gaussian_log_density(xs.ln() + u - 0.5 * v, v, y) - y
            }
            Family::Bes3 { sigma } => {
                bes_log_density(0.5, t - s, xs / sigma, x / sigma) - sigma.ln()
            }
            _ => {
                if x < 0.0 || (x == 0.0 && matches!(self.family, Family::Cev { .. })) {
                    return f64::NEG_INFINITY;
                }
                let f = self.besq_frame(t, x).expect("BESQ-type family");
                let dtau = f.tau - self.besq_clock_or_zero(s);
                besq_log_density(f.nu, dtau, self.besq_map(s, xs), f.z) + f.dz_dx.abs().ln()
            }
        }
    }

    pub fn transition_density(&self, x0: f64, t: f64, x: f64) -> Result<f64> {
        self.log_transition_density(x0, t, x).map(f64::exp)
    }

    /// Interval holding all but a negligible part of the law of `X_t | X_0 = x0`.
    pub fn transition_window(&self, x0: f64, t: f64) -> (f64, f64) {
        match &self.family {
            Family::Ve { sigma } => {
                let s = sigma.square_integral(t).sqrt();
                (x0 - 12.0 * s, x0 + 12.0 * s)
            }
            Family::Vp { alpha } => {
                let a = alpha.plain_integral(t);
                let m = (-a).exp() * x0;
                let s = (-(-2.0 * a).exp_m1()).sqrt();
                (m - 12.0 * s, m + 12.0 * s)
            }
            Family::Gbm { mu, sigma } => {
                let v = sigma.square_integral(t);
                let m = x0.ln() + mu.plain_integral(t) - 0.5 * v;
                let s = v.sqrt();
                ((m - 12.0 * s).exp(), (m + 12.0 * s).exp())
            }
            Family::Bes3 { sigma } => {
                let b0 = x0 / sigma;
                let (lo, hi) = besq_window(0.5, t, b0 * b0);
                (sigma * lo.sqrt(), sigma * hi.sqrt())
            }
            _ => {
                let map = self.initial_map().expect("BESQ-type family");
                let nu = self.besq_index().expect("BESQ-type family");
                let tau = self.besq_clock(t);
                let (lo, hi) = besq_window(nu, tau, map.apply(x0));
                if matches!(self.family, Family::Cev { .. }) {
                    // Z near 0 is X near infinity; P(Z_τ < ε) ≤ (ε/2τ)^{ν+1}/Γ(ν+2).
                    let lo = lo.max(2.0 * tau * 1e-13f64.powf(1.0 / (nu + 1.0)));
                    (self.besq_unmap(t, hi), self.besq_unmap(t, lo))
                } else {
                    let (a, b) = (self.besq_unmap(t, lo), self.besq_unmap(t, hi));
                    (a, b)
                }
            }
        }
    }

    /// Range of starting points `z` for which `q(t, z, x)` is not negligible.
    pub(crate) fn backward_window(&self, t: f64, x: f64) -> (f64, f64) {
        match &self.family {
            Family::Ve { sigma } => {
                let s = sigma.square_integral(t).sqrt();
                (x - 12.0 * s, x + 12.0 * s)
            }
            Family::Vp { alpha } => {
                let a = alpha.plain_integral(t);
                let s = (-(-2.0 * a).exp_m1()).sqrt();
                ((x - 12.0 * s) * a.exp(), (x + 12.0 * s) * a.exp())
            }
            Family::Gbm { mu, sigma } => {
                let v = sigma.square_integral(t);
                let m = x.ln() - mu.plain_integral(t) + 0.5 * v;
                let s = v.sqrt();
                ((m - 12.0 * s).exp(), (m + 12.0 * s).exp())
            }
            Family::Bes3 { sigma } => {
                let b = x / sigma;
                let s = t.sqrt();
                (sigma * (b - 12.0 * s).max(0.0), sigma * (b + 12.0 * s))
            }
            _ => {
                let f = self.besq_frame(t, x).expect("BESQ-type family");
                let map = self.initial_map().expect("BESQ-type family");
                let s = f.tau.sqrt();
                let lo = (f.z.sqrt() - 12.0 * s).max(0.0).powi(2);
                let hi = (f.z.sqrt() + 12.0 * s).powi(2);
                let (a, b) = (map.invert(lo), map.invert(hi));
                if a <= b {
                    (a, b)
                } else {
                    (b, a)
                }
            }
        }
    }

    /// `E(X_t | X_0 = x0)`.
    pub fn transition_mean(&self, x0: f64, t: f64) -> f64 {
        match &self.family {
            Family::Ve { .. } => x0,
            Family::Vp { alpha } => (-alpha.plain_integral(t)).exp() * x0,
            Family::Gbm { mu, .. } => x0 * mu.plain_integral(t).exp(),
            Family::Besq { .. } | Family::BesqGeneral { .. } | Family::Cir { .. } => {
                let map = self.initial_map().expect("BESQ-type family");
                let nu = self.besq_index().expect("BESQ-type family");
                self.besq_unmap(t, map.apply(x0) + 2.0 * (nu + 1.0) * self.besq_clock(t))
            }
            Family::Cev { .. } | Family::Bes3 { .. } => {
                let (lo, hi) = self.transition_window(x0, t);
                Quadrature::new(1e-12, 1e-10)
                    .integrate_with_breaks(
                        |y| y * self.log_transition_density_unchecked(x0, t, y).exp(),
                        &crate::quadrature::spread_breaks(lo, hi, 24),
                    )
                    .map(|r| r.value)
                    .unwrap_or(f64::NAN)
            }
        }
    }

    /// Drift `b(t, x)`.
    pub fn drift(&self, t: f64, x: f64) -> f64 {
        match &self.family {
            Family::Ve { .. } => 0.0,
            Family::Vp { alpha } => -alpha.eval(t) * x,
            Family::Gbm { mu, .. } | Family::Cev { mu, .. } => mu.eval(t) * x,
            Family::Besq { nu } => 2.0 * (nu + 1.0),
            Family::BesqGeneral { mu, .. } => *mu,
            Family::Cir { alpha, mu, .. } => alpha.eval(t) * (mu.eval(t) - x),
            Family::Bes3 { sigma } => sigma * sigma / x,
        }
    }

    /// Squared diffusion coefficient `a(t, x) = σ(t, x)²`.
    pub fn diffusion_sq(&self, t: f64, x: f64) -> f64 {
        match &self.family {
            Family::Ve { sigma } => sigma.eval(t).powi(2),
            Family::Vp { alpha } => 2.0 * alpha.eval(t),
            Family::Gbm { sigma, .. } => (sigma.eval(t) * x).powi(2),
            Family::Besq { .. } => 4.0 * x,
            Family::BesqGeneral { sigma, .. } => sigma * sigma * x,
            Family::Cir { sigma, .. } => sigma.eval(t).powi(2) * x,
            Family::Cev { sigma, beta, .. } => sigma.eval(t).powi(2) * x.powf(2.0 * beta),
            Family::Bes3 { sigma } => sigma * sigma,
        }
    }

    /// `∂a/∂x`.
    pub fn diffusion_sq_dx(&self, t: f64, x: f64) -> f64 {
        match &self.family {
            Family::Ve { .. } | Family::Vp { .. } | Family::Bes3 { .. } => 0.0,
            Family::Gbm { sigma, .. } => 2.0 * sigma.eval(t).powi(2) * x,
            Family::Besq { .. } => 4.0,
            Family::BesqGeneral { sigma, .. } => sigma * sigma,
            Family::Cir { sigma, .. } => sigma.eval(t).powi(2),
            Family::Cev { sigma, beta, .. } => {
                2.0 * beta * sigma.eval(t).powi(2) * x.powf(2.0 * beta - 1.0)
            }
        }
    }

    /// Reverse-time initial law at horizon `horizon`.
    ///
    /// VE: `N(0, Σ²(T))`; VP: `N(0, 1)`; GBM: `LogNormal(U(T) − Σ²(T)/2, Σ²(T))`;
    /// CIR: the stationary `Gamma(ν+1, 2α/σ²)` when `α/σ²` is constant (this
    /// is `Gamma(μ, 1)` for `σ = √(2α)`). The remaining families have no
    /// stationary law; they use the transition law from a reference start,
    /// `0` for the Bessel types and `1` for CEV.
    pub fn noise_distribution(&self, horizon: f64) -> Result<Prior> {
        let reference = match self.family {
            Family::Cev { .. } => 1.0,
            _ => 0.0,
        };
        self.noise_distribution_from(horizon, reference)
    }

    pub fn noise_distribution_from(&self, horizon: f64, reference: f64) -> Result<Prior> {
        check_time(horizon)?;
        match &self.family {
            Family::Ve { sigma } => Prior::gaussian(0.0, sigma.square_integral(horizon)),
            Family::Vp { .. } => Prior::gaussian(0.0, 1.0),
            Family::Gbm { mu, sigma } => {
                let v = sigma.square_integral(horizon);
                Prior::lognormal(mu.plain_integral(horizon) - 0.5 * v, v)
            }
            Family::Cir {
                alpha, sigma, nu, ..
            } => {
                let rate = |t: f64| 2.0 * alpha.eval(t) / sigma.eval(t).powi(2);
                let r0 = rate(0.0);
                let constant = (0..CIR_INDEX_GRID).all(|i| {
                    let t = horizon * i as f64 / (CIR_INDEX_GRID - 1) as f64;
                    (rate(t) - r0).abs() <= CIR_INDEX_RTOL * r0
                });
                if constant {
                    Prior::gamma(nu + 1.0, r0)
                } else {
                    Prior::transition(self.clone(), reference, horizon)
                }
            }
            _ => Prior::transition(self.clone(), reference, horizon),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::stats::summarize;

    fn constant(c: f64) -> CoefficientSchedule {
        CoefficientSchedule::constant(c).unwrap()
    }

    #[test]
    fn construction_guards() {
        assert!(ProcessSpec::besq_general(1.0, 2.0).is_err());
        assert!(ProcessSpec::besq_general(2.0, 2.0).is_ok());
        assert!(ProcessSpec::cev(constant(0.0), constant(1.0), 1.0).is_err());
        assert!(ProcessSpec::besq(-0.5).is_err());
        assert!(ProcessSpec::bes3(0.0).is_err());
        let alpha = CoefficientSchedule::plain(Shape::Affine { a: 0.05, b: 4.95 }).unwrap();
        // σ constant while α varies: index drifts with t
        assert!(ProcessSpec::cir(alpha, constant(1.0), constant(1.0), 1.0).is_err());
    }

    #[test]
    fn state_space_of_initial_values() {
        let besq = ProcessSpec::besq(0.5).unwrap();
        assert!(besq.check_initial(0.0).is_ok());
        assert!(besq.check_initial(-1.0).is_err());
        let gbm = ProcessSpec::gbm(constant(0.0), constant(1.0)).unwrap();
        assert!(gbm.check_initial(0.0).is_err());
        let ve = ProcessSpec::ve(constant(1.0)).unwrap();
        assert!(ve.check_initial(-3.0).is_ok());
        let mut rng = RngStream::new(0);
        assert!(ve.forward_sample(0.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn gbm_density_matches_lognormal_pdf() {
        let gbm = ProcessSpec::gbm(constant(0.0), constant(1.0)).unwrap();
        let q = gbm.transition_density(1.0, 1.0, 1.0).unwrap();
        let expected = (-0.125f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((q - expected).abs() < 1e-15);
        assert!((q - 0.35207).abs() < 1e-5);
    }

    #[test]
    fn besq_density_at_zero_start_is_gamma() {
        let p = ProcessSpec::besq(1.0).unwrap();
        // Gamma(2, rate 1/2) at y = 3: (1/4)·3·e^{-3/2}
        let q = p.transition_density(0.0, 1.0, 3.0).unwrap();
        assert!((q - 0.75 * (-1.5f64).exp()).abs() < 1e-15);
        // continuity in the starting point
        let q_eps = p.transition_density(1e-12, 1.0, 3.0).unwrap();
        assert!((q - q_eps).abs() < 1e-10);
    }

    #[test]
    fn bes3_density_is_radial_gaussian() {
        // |B_1| for a 3-d Brownian motion from the origin is Maxwell: √(2/π) r² e^{−r²/2}
        let p = ProcessSpec::bes3(1.0).unwrap();
        let r = 1.3_f64;
        let q = p.transition_density(0.0, 1.0, r).unwrap();
        let expected = (2.0 / std::f64::consts::PI).sqrt() * r * r * (-0.5 * r * r).exp();
        assert!((q - expected).abs() < 1e-14);
    }

    #[test]
    fn densities_normalize() {
        let specs = vec![
            (ProcessSpec::besq(1.0).unwrap(), 1.0, 1.0),
            (ProcessSpec::besq(0.0).unwrap(), 0.5, 0.3),
            (ProcessSpec::besq_general(3.0, 2.0).unwrap(), 2.0, 0.7),
            (
                ProcessSpec::cir(constant(1.0), constant(1.5), constant(2f64.sqrt()), 1.0).unwrap(),
                1.0,
                1.0,
            ),
            (ProcessSpec::cev(constant(0.0), constant(1.0), 1.5).unwrap(), 1.0, 0.25),
            (ProcessSpec::bes3(2.0).unwrap(), 1.0, 0.5),
            (ProcessSpec::gbm(constant(0.1), constant(0.5)).unwrap(), 2.0, 1.0),
        ];
        let quad = Quadrature::new(1e-12, 1e-10);
        for (spec, x0, t) in specs {
            let (lo, hi) = spec.transition_window(x0, t);
            let z = quad
                .integrate_with_breaks(
                    |y| spec.transition_density(x0, t, y).unwrap(),
                    &crate::quadrature::spread_breaks(lo, hi, 24),
                )
                .unwrap()
                .value;
            assert!((z - 1.0).abs() < 1e-6, "{}: {z}", spec.name());
        }
    }

    #[test]
    fn transition_means_match_samples() {
        let cir = ProcessSpec::cir(constant(1.0), constant(1.0), constant(2f64.sqrt()), 1.0).unwrap();
        let mut rng = RngStream::new(5);
        let xs: Vec<f64> = (0..200_000)
            .map(|_| cir.forward_sample(2.0, 1.0, &mut rng).unwrap())
            .collect();
        let s = summarize(&xs);
        let expected = 1.0 + (-1f64).exp();
        assert!((cir.transition_mean(2.0, 1.0) - expected).abs() < 1e-12);
        assert!((s.mean - expected).abs() < 4.0 * s.std_error);
    }

    #[test]
    fn divergence_matches_finite_difference() {
        let sched = CoefficientSchedule::plain(Shape::Affine { a: 0.5, b: 1.0 }).unwrap();
        let specs = vec![
            ProcessSpec::ve(sched.clone()).unwrap(),
            ProcessSpec::vp(sched.clone()).unwrap(),
            ProcessSpec::gbm(sched.clone(), sched.clone()).unwrap(),
            ProcessSpec::besq(0.5).unwrap(),
            ProcessSpec::besq_general(3.0, 2.0).unwrap(),
            ProcessSpec::cir(constant(1.0), constant(1.5), constant(2f64.sqrt()), 1.0).unwrap(),
            ProcessSpec::cev(sched.clone(), sched, 1.5).unwrap(),
            ProcessSpec::bes3(2.0).unwrap(),
        ];
        for spec in specs {
            for &x in &[0.3, 1.0, 2.5] {
                let h = 1e-5;
                let fd = (spec.diffusion_sq(0.4, x + h) - spec.diffusion_sq(0.4, x - h)) / (2.0 * h);
                let an = spec.diffusion_sq_dx(0.4, x);
                assert!((fd - an).abs() < 1e-7 * an.abs().max(1.0), "{}", spec.name());
            }
        }
    }

    #[test]
    fn noise_laws() {
        let vp = ProcessSpec::vp(CoefficientSchedule::plain(Shape::Affine { a: 0.05, b: 9.95 }).unwrap())
            .unwrap();
        assert!(matches!(vp.noise_distribution(1.0).unwrap(), Prior::Gaussian { mean, var } if mean == 0.0 && var == 1.0));
        let alpha = Shape::Affine { a: 0.05, b: 4.95 };
        let cir = ProcessSpec::cir(
            CoefficientSchedule::plain(alpha.clone()).unwrap(),
            constant(1.0),
            CoefficientSchedule::sigma(Shape::ScaledSqrt {
                base: Box::new(alpha),
                scale: 2.0,
            })
            .unwrap(),
            1.0,
        )
        .unwrap();
        match cir.noise_distribution(1.0).unwrap() {
            Prior::Gamma { shape, rate } => {
                assert!((shape - 1.0).abs() < 1e-12 && (rate - 1.0).abs() < 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
        let sigma = Shape::Affine { a: 0.2, b: 1.0 };
        let gbm = ProcessSpec::gbm(
            CoefficientSchedule::plain(Shape::ScaledSquare {
                base: Box::new(sigma.clone()),
                scale: 0.5,
                offset: 0.0,
            })
            .unwrap(),
            CoefficientSchedule::sigma(sigma).unwrap(),
        )
        .unwrap();
        match gbm.noise_distribution(1.0).unwrap() {
            Prior::LogNormal { mu, .. } => assert!(mu.abs() < 1e-14),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn chapman_kolmogorov() {
        let quad = Quadrature::new(1e-14, 1e-11);
        let cases = vec![
            (ProcessSpec::besq(0.5).unwrap(), 1.0, 1.7),
            (ProcessSpec::bes3(1.0).unwrap(), 1.0, 1.2),
            (
                ProcessSpec::cir(
                    CoefficientSchedule::plain(Shape::Affine { a: 0.05, b: 4.95 }).unwrap(),
                    constant(1.0),
                    CoefficientSchedule::sigma(Shape::ScaledSqrt {
                        base: Box::new(Shape::Affine { a: 0.05, b: 4.95 }),
                        scale: 2.0,
                    })
                    .unwrap(),
                    1.0,
                )
                .unwrap(),
                1.0,
                0.8,
            ),
            (ProcessSpec::cev(constant(0.2), constant(1.0), 1.5).unwrap(), 1.0, 1.1),
        ];
        for (spec, x0, x) in cases {
            let (s, t) = (0.3, 1.0);
            let (lo, hi) = spec.transition_window(x0, s);
            let total = quad
                .integrate_with_breaks(
                    |y| {
                        if y <= 0.0 {
                            return 0.0;
                        }
                        (spec.log_transition_density(x0, s, y).unwrap()
                            + spec.log_transition_density_between(s, y, t, x).unwrap())
                        .exp()
                    },
                    &crate::quadrature::spread_breaks(lo, hi, 32),
                )
                .unwrap()
                .value;
            let direct = spec.transition_density(x0, t, x).unwrap();
            assert!((total - direct).abs() < 1e-8 * direct, "{}: {total} vs {direct}", spec.name());
        }
    }

    #[test]
    fn cir_clock_closed_forms_agree_with_quadrature() {
        let alpha = CoefficientSchedule::plain(Shape::Affine { a: 0.05, b: 4.95 }).unwrap();
        let sigma = CoefficientSchedule::sigma(Shape::ScaledSqrt {
            base: Box::new(Shape::Affine { a: 0.05, b: 4.95 }),
            scale: 2.0,
        })
        .unwrap();
        let closed = ProcessSpec::cir_tau(&alpha, &sigma, 0.7);
        let direct = 0.25
            * Quadrature::new(0.0, 1e-14)
                .integrate(|s| sigma.eval(s).powi(2) * alpha.plain_integral(s).exp(), 0.0, 0.7)
                .unwrap()
                .value;
        assert!((closed - direct).abs() < 1e-12 * direct);
    }
}
