//! Special functions and exact non-Gaussian samplers.
//!
//! The modified Bessel function of the first kind enters every non-Gaussian
//! transition density, always on the log scale, and its ratio
//! `I_{ν+1}(x) / I_ν(x)` appears inside each squared-Bessel score. Both are
//! evaluated without ever forming `I_ν(x)` itself, which overflows near
//! `x ≈ 700`.
//!
//! Gamma, log-normal and noncentral chi-squared draws are exact. Gamma uses the
//! (shape, rate) convention throughout: `Gamma(12, 10)` has mean `1.2`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

use crate::error::{Error, Result};

/// Order `ν ≥ 0` of a modified Bessel function of the first kind.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BesselOrder(f64);

impl BesselOrder {
    pub fn new(nu: f64) -> Result<Self> {
        if !nu.is_finite() || nu < 0.0 {
            return Err(Error::domain(format!("Bessel order must be finite and >= 0, got {nu}")));
        }
        Ok(Self(nu))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

// Beyond this argument (and when x dominates ν²) the Hankel expansion is used.
const ASYMPTOTIC_MIN_X: f64 = 30.0;
const LN_RESCALE: f64 = 644.724_079_809_781_7; // ln(1e280)

/// `log I_ν(x)` for `x ≥ 0`.
///
/// Power series (with running rescaling, so it never overflows) for moderate
/// arguments; the large-argument Hankel expansion once `x ≥ 30` and
/// `x ≥ 2ν²`, where the neglected remainder is below `e^{-2x}`.
pub fn log_bessel_i(nu: BesselOrder, x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::domain(format!("log_bessel_i needs x >= 0, got {x}")));
    }
    Ok(log_bessel_i_unchecked(nu.0, x))
}

pub(crate) fn log_bessel_i_unchecked(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    if x >= ASYMPTOTIC_MIN_X && x >= 2.0 * nu * nu {
        log_bessel_i_hankel(nu, x)
    } else {
        log_bessel_i_series(nu, x)
    }
}

fn log_bessel_i_series(nu: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut offset = 0.0_f64;
    let mut k = 1.0_f64;
    loop {
        term *= q / (k * (k + nu));
        sum += term;
        if sum > 1e280 {
            sum *= 1e-280;
            term *= 1e-280;
            offset += LN_RESCALE;
        }
        // Terms decrease once k exceeds roughly x/2; stop when negligible.
        if term < sum * 1e-17 && k > 0.5 * x {
            break;
        }
        k += 1.0;
        if k > 1e6 {
            break;
        }
    }
    nu * (0.5 * x).ln() - libm::lgamma(nu + 1.0) + sum.ln() + offset
}

fn log_bessel_i_hankel(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut prev_abs = f64::INFINITY;
    for k in 1..200 {
        let odd = (2 * k - 1) as f64;
        term *= -(mu - odd * odd) / (8.0 * k as f64 * x);
        let a = term.abs();
        if a > prev_abs {
            // asymptotic series started to diverge; the remainder is below prev term
            sum -= term;
            break;
        }
        sum += term;
        if a < 1e-17 * sum.abs() || term == 0.0 {
            break;
        }
        prev_abs = a;
    }
    x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
}

/// `I_{ν+1}(x) / I_ν(x)`, in `[0, 1)`.
///
/// Evaluated as a continued fraction with the modified Lentz algorithm: the
/// Gauss fraction for small arguments and Perron's fraction, which converges
/// in a handful of terms, for large ones.
pub fn bessel_ratio(nu: BesselOrder, x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::domain(format!("bessel_ratio needs x >= 0, got {x}")));
    }
    Ok(bessel_ratio_unchecked(nu.0, x))
}

pub(crate) fn bessel_ratio_unchecked(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    if x < nu + 1.0 {
        ratio_gauss_cf(nu, x)
    } else {
        ratio_perron_cf(nu, x)
    }
}

const TINY: f64 = 1e-300;
const CF_EPS: f64 = 1e-16;
const CF_MAX_ITER: usize = 100_000;

// x / (2(ν+1) + x² / (2(ν+2) + x² / (2(ν+3) + ...)))
fn ratio_gauss_cf(nu: f64, x: f64) -> f64 {
    let x2 = x * x;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0;
    for j in 1..CF_MAX_ITER {
        let a = if j == 1 { x } else { x2 };
        let b = 2.0 * (nu + j as f64);
        d = b + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < CF_EPS {
            break;
        }
    }
    f
}

// With m = ν+1:
// x / (2m + x − (2m+1)x / (2m + 1 + 2x − (2m+3)x / (2m + 2 + 2x − ...)))
fn ratio_perron_cf(nu: f64, x: f64) -> f64 {
    let m = nu + 1.0;
    // Denominator D = b0 − a1/(b1 − a2/(b2 − ...)), evaluated by Lentz.
    let b0 = 2.0 * m + x;
    let mut f = b0;
    let mut c = f;
    let mut d = 0.0;
    for k in 1..CF_MAX_ITER {
        let kf = k as f64;
        let a = -(2.0 * m + 2.0 * kf - 1.0) * x;
        let b = 2.0 * m + kf + 2.0 * x;
        d = b + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < CF_EPS {
            break;
        }
    }
    x / f
}

/// Error function, accurate to a few ulp.
pub fn erf(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::domain("erf of NaN"));
    }
    Ok(libm::erf(x))
}

/// `coth(u)`, using `1/u + u/3 − u³/45` for `|u| < 1e-4`.
pub fn coth(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        1.0 / u + u / 3.0 - u * u * u / 45.0
    } else {
        1.0 / u.tanh()
    }
}

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// One draw from `Gamma(shape, rate)`; the mean is `shape / rate`.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::domain(format!(
            "gamma needs positive shape and rate, got ({shape}, {rate})"
        )));
    }
    Ok(gamma_unchecked(shape, rate, rng))
}

fn gamma_unchecked<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    // Gamma::new only fails for non-positive or non-finite parameters, checked by callers.
    Gamma::new(shape, 1.0 / rate)
        .expect("validated gamma parameters")
        .sample(rng)
}

/// One draw from `LogNormal(mu, sigma2)`, i.e. `exp(mu + √sigma2 · Z)`.
pub fn sample_lognormal<R: Rng + ?Sized>(mu: f64, sigma2: f64, rng: &mut R) -> Result<f64> {
    if !mu.is_finite() || !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::domain(format!(
            "lognormal needs finite mu and positive variance, got ({mu}, {sigma2})"
        )));
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok((mu + sigma2.sqrt() * z).exp())
}

/// A standard normal draw.
pub fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// One exact draw from the noncentral chi-squared law `χ²(dof, noncentrality)`.
///
/// Poisson mixture of central laws: `K ~ Poisson(λ/2)`, then
/// `2 · Gamma(dof/2 + K, 1)`. Valid for every real `dof > 0`.
pub fn sample_noncentral_chi2<R: Rng + ?Sized>(
    dof: f64,
    noncentrality: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(dof > 0.0 && dof.is_finite()) {
        return Err(Error::domain(format!("chi-squared dof must be > 0, got {dof}")));
    }
    if !(noncentrality >= 0.0 && noncentrality.is_finite()) {
        return Err(Error::domain(format!(
            "noncentrality must be finite and >= 0, got {noncentrality}"
        )));
    }
    Ok(noncentral_chi2_unchecked(dof, noncentrality, rng))
}

pub(crate) fn noncentral_chi2_unchecked<R: Rng + ?Sized>(dof: f64, nc: f64, rng: &mut R) -> f64 {
    let k = if nc > 0.0 {
        Poisson::new(0.5 * nc)
            .expect("validated poisson mean")
            .sample(rng)
    } else {
        0.0
    };
    2.0 * gamma_unchecked(0.5 * dof + k, 1.0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn order(nu: f64) -> BesselOrder {
        BesselOrder::new(nu).unwrap()
    }

    // coth(x) − 1/x without cancellation near zero.
    fn langevin(x: f64) -> f64 {
        if x < 0.1 {
            let x2 = x * x;
            x / 3.0 - x * x2 / 45.0 + 2.0 * x * x2 * x2 / 945.0 - x * x2 * x2 * x2 / 4725.0
                + 2.0 * x * x2 * x2 * x2 * x2 / 93555.0
        } else {
            1.0 / x.tanh() - 1.0 / x
        }
    }

    #[test]
    fn log_bessel_half_order_closed_form() {
        // I_{1/2}(1) = √(2/π) sinh(1)
        let expected = ((2.0 / std::f64::consts::PI).sqrt() * 1f64.sinh()).ln();
        let got = log_bessel_i(order(0.5), 1.0).unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
        assert!((got - (-0.064_351_991_073_531_83)).abs() < 1e-14);
    }

    #[test]
    fn log_bessel_at_zero() {
        assert_eq!(log_bessel_i(order(2.0), 0.0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(log_bessel_i(order(0.0), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn log_bessel_rejects_negative_and_nan() {
        assert!(log_bessel_i(order(1.0), -1.0).is_err());
        assert!(log_bessel_i(order(1.0), f64::NAN).is_err());
        assert!(BesselOrder::new(-0.5).is_err());
    }

    #[test]
    fn log_bessel_half_order_over_range() {
        // ln I_{1/2}(x) = ½ ln(2/(πx)) + ln sinh x, with ln sinh x = x + ln(1 − e^{−2x}) − ln 2
        for &x in &[1e-300_f64, 1e-10, 1e-3, 0.5, 3.0, 17.0, 29.9, 30.0, 45.0, 120.0, 700.0] {
            let ln_sinh = if x < 1.0 {
                x.sinh().ln()
            } else {
                x + (-(-2.0 * x).exp()).ln_1p() - std::f64::consts::LN_2
            };
            let expected = 0.5 * (2.0 / (std::f64::consts::PI * x)).ln() + ln_sinh;
            let got = log_bessel_i(order(0.5), x).unwrap();
            assert!(
                (got - expected).abs() <= 1e-12 * expected.abs().max(1.0),
                "x={x}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn log_bessel_series_and_hankel_agree_at_switch() {
        for &nu in &[0.0, 0.5, 1.0, 2.0, 3.5] {
            let x = 30.0;
            let s = log_bessel_i_series(nu, x);
            let h = log_bessel_i_hankel(nu, x);
            assert!((s - h).abs() < 1e-13 * s.abs(), "nu={nu}: {s} vs {h}");
        }
    }

    #[test]
    fn log_bessel_integer_order_reference() {
        // I_0(1) = 1.2660658777520083, I_1(1) = 0.5651591039924851, I_2(10) = 2281.518967726004
        let cases = [
            (0.0, 1.0, 1.266_065_877_752_008_4_f64),
            (1.0, 1.0, 0.565_159_103_992_485_1),
            (2.0, 10.0, 2_281.518_967_726_004),
        ];
        for (nu, x, v) in cases {
            let got = log_bessel_i(order(nu), x).unwrap();
            assert!((got - v.ln()).abs() < 1e-13, "nu={nu} x={x}");
        }
    }

    #[test]
    fn ratio_half_order_identity() {
        let got = bessel_ratio(order(0.5), 1.0).unwrap();
        assert!((got - 0.313_035_285_499_331_3).abs() < 1e-15);
        let mut x = 1e-4;
        while x <= 50.0 {
            let r = bessel_ratio(order(0.5), x).unwrap();
            let e = langevin(x);
            assert!((r - e).abs() <= 1e-12 * e, "x={x}: {r} vs {e}");
            x *= 1.07;
        }
    }

    #[test]
    fn ratio_small_and_large_argument() {
        let r = bessel_ratio(order(3.0), 1e-12).unwrap();
        assert!((r - 1.25e-13).abs() < 1e-25);
        let r = bessel_ratio(order(0.0), 700.0).unwrap();
        assert!(r > 0.999 && r < 1.0);
        assert_eq!(bessel_ratio(order(1.0), 0.0).unwrap(), 0.0);
        assert!(bessel_ratio(order(1.0), -1.0).is_err());
    }

    #[test]
    fn ratio_monotone_and_bounded() {
        for &nu in &[0.0, 0.5, 1.0, 2.0, 7.5] {
            let mut prev = 0.0;
            let mut x = 1e-6;
            while x < 800.0 {
                let r = bessel_ratio(order(nu), x).unwrap();
                assert!((0.0..1.0).contains(&r), "nu={nu} x={x} r={r}");
                assert!(r > prev, "not increasing at nu={nu} x={x}");
                prev = r;
                x *= 1.1;
            }
        }
    }

    #[test]
    fn ratio_agrees_with_log_route() {
        for &nu in &[0.0, 0.5, 1.0, 2.0, 4.0] {
            let mut x = 1e-6;
            while x <= 600.0 {
                let direct = bessel_ratio(order(nu), x).unwrap();
                let via_log = (log_bessel_i(order(nu + 1.0), x).unwrap()
                    - log_bessel_i(order(nu), x).unwrap())
                .exp();
                assert!(
                    (direct - via_log).abs() <= 1e-10 * direct,
                    "nu={nu} x={x}: {direct} vs {via_log}"
                );
                x *= 1.3;
            }
        }
    }

    #[test]
    fn erf_values() {
        assert_eq!(erf(0.0).unwrap(), 0.0);
        assert!((erf(10.0).unwrap() - 1.0).abs() < 1e-14);
        assert!((erf(1.0).unwrap() - 0.842_700_792_949_714_9).abs() < 1e-14);
        assert_eq!(erf(-0.3).unwrap(), -erf(0.3).unwrap());
        assert!(erf(f64::NAN).is_err());
    }

    #[test]
    fn erf_matches_simpson_quadrature() {
        // (2/√π) ∫₀¹ e^{−z²} dz by composite Simpson with 2000 panels
        let n = 2000;
        let h = 1.0 / n as f64;
        let f = |z: f64| (-z * z).exp();
        let mut s = f(0.0) + f(1.0);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        let reference = s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt();
        assert!((erf(1.0).unwrap() - reference).abs() < 1e-13);
        assert!((reference - 0.842_700_792_9).abs() < 1e-10);
    }

    #[test]
    fn coth_small_argument() {
        let u = 1e-6;
        assert!((coth(u) - (1.0 / u + u / 3.0)).abs() < 1e-9);
        assert!((coth(2.0) - 1.0 / 2f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn sampler_parameter_errors() {
        let mut rng = RngStream::new(1);
        assert!(sample_gamma(0.0, 1.0, &mut rng).is_err());
        assert!(sample_gamma(1.0, -1.0, &mut rng).is_err());
        assert!(sample_lognormal(0.0, 0.0, &mut rng).is_err());
        assert!(sample_noncentral_chi2(0.0, 1.0, &mut rng).is_err());
        assert!(sample_noncentral_chi2(2.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn samplers_are_deterministic() {
        let mut a = RngStream::new(11);
        let mut b = RngStream::new(11);
        for _ in 0..50 {
            assert_eq!(
                sample_noncentral_chi2(2.5, 3.0, &mut a).unwrap(),
                sample_noncentral_chi2(2.5, 3.0, &mut b).unwrap()
            );
        }
    }
}
