//! Brute-force reference values.
//!
//! Marginal densities `p(t, x) = ∫ p_data(z) q(t, z, x) dz` by adaptive
//! quadrature, scores by Richardson-extrapolated central differences of
//! `log p`, posterior means by ratios of quadratures, and a Monte-Carlo
//! estimate of the lookback drift `lim (1/ε) E(X_{t−ε} − X_t | X_t = x)`.
//! None of this touches the closed-form score code.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::process::{Prior, ProcessSpec};
use crate::quadrature::{spread_breaks, Quadrature};
use crate::rng::RngStream;
use crate::tweedie::Estimate;

const SHARD: usize = 1 << 14;
const BREAKS: usize = 24;

/// A finite-difference score with its extrapolation error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericScore {
    pub value: f64,
    pub error: f64,
}

fn quadrature() -> Quadrature {
    Quadrature::new(0.0, 1e-12)
}

fn integration_breaks(prior: &Prior, spec: &ProcessSpec, t: f64, x: f64, pad: f64) -> Result<Vec<f64>> {
    let (plo, phi) = prior.support();
    let (blo, bhi) = spec.backward_window(t, x);
    let mut lo = plo.max(blo - pad);
    let hi = phi.min(bhi + pad);
    if !spec.is_real_line() {
        lo = lo.max(0.0);
    }
    if !(lo < hi) {
        return Err(Error::NoSupport { n: 0, t, x });
    }
    Ok(spread_breaks(lo, hi, BREAKS))
}

fn joint(prior: &Prior, spec: &ProcessSpec, t: f64, x: f64, z: f64) -> f64 {
    let lp = prior.log_density(z).unwrap_or(f64::NEG_INFINITY);
    if lp == f64::NEG_INFINITY || !spec.in_state_space(z) {
        return 0.0;
    }
    let v = (lp + spec.log_transition_density_unchecked(z, t, x)).exp();
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

fn check(spec: &ProcessSpec, t: f64, x: f64) -> Result<()> {
    spec.check_point(t, x)
}

/// `p(t, x)` for the forward marginal started from `prior`.
pub fn marginal_density_numeric(prior: &Prior, spec: &ProcessSpec, t: f64, x: f64) -> Result<f64> {
    check(spec, t, x)?;
    if let Some(z) = prior.as_point_mass() {
        return spec.transition_density(z, t, x);
    }
    let pts = match integration_breaks(prior, spec, t, x, 0.0) {
        Ok(p) => p,
        Err(Error::NoSupport { .. }) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    Ok(quadrature()
        .integrate_with_breaks(|z| joint(prior, spec, t, x, z), &pts)?
        .value)
}

/// `∂ₓ log p(t, x)` by central differences at steps `h` and `h/2`,
/// combined by Richardson extrapolation.
///
/// The quadrature partition is fixed once at `x` and reused for every
/// shifted evaluation, so the difference quotient sees a smooth function.
/// Without `h` the step is `1e-5·max(1, |x|)`.
pub fn score_numeric(prior: &Prior, spec: &ProcessSpec, t: f64, x: f64, h: Option<f64>) -> Result<NumericScore> {
    check(spec, t, x)?;
    let h = h.unwrap_or(1e-5 * x.abs().max(1.0));
    if !(h > 0.0) || !spec.in_state_space(x - h) || !spec.in_state_space(x + h) {
        return Err(Error::domain(format!(
            "finite-difference step {h} leaves the state space at x = {x}"
        )));
    }
    let log_p: Box<dyn Fn(f64) -> f64> = match prior.as_point_mass() {
        Some(z) => {
            spec.check_initial(z)?;
            Box::new(move |y| spec.log_transition_density_unchecked(z, t, y))
        }
        None => {
            let pts = integration_breaks(prior, spec, t, x, 2.0 * h)?;
            let part = quadrature().partition(|z| joint(prior, spec, t, x, z), &pts)?;
            Box::new(move |y| Quadrature::fixed(|z| joint(prior, spec, t, y, z), &part).value.ln())
        }
    };
    let d = |h: f64| (log_p(x + h) - log_p(x - h)) / (2.0 * h);
    let (d1, d2) = (d(h), d(0.5 * h));
    let value = (4.0 * d2 - d1) / 3.0;
    if !value.is_finite() {
        return Err(Error::NoSupport { n: 0, t, x });
    }
    Ok(NumericScore {
        value,
        error: (value - d2).abs(),
    })
}

/// `E(g(X₀) | X_t = x)` as a ratio of two quadratures.
pub fn conditional_expectation_numeric<G: Fn(f64) -> f64>(
    prior: &Prior,
    spec: &ProcessSpec,
    g: G,
    t: f64,
    x: f64,
) -> Result<f64> {
    check(spec, t, x)?;
    if let Some(z) = prior.as_point_mass() {
        spec.check_initial(z)?;
        return Ok(g(z));
    }
    let pts = integration_breaks(prior, spec, t, x, 0.0)?;
    let q = quadrature();
    let part = q.partition(|z| joint(prior, spec, t, x, z), &pts)?;
    let den = Quadrature::fixed(|z| joint(prior, spec, t, x, z), &part).value;
    if !(den > 0.0) {
        return Err(Error::NoSupport { n: 0, t, x });
    }
    // The numerator gets its own adaptive pass: g may vary where the weight does not.
    let num = q
        .integrate_with_breaks(
            |z| {
                let w = joint(prior, spec, t, x, z);
                if w == 0.0 {
                    0.0
                } else {
                    w * g(z)
                }
            },
            &pts,
        )?
        .value;
    Ok(num / den)
}

/// The right-hand side `a·s + ∂ₓa − b` that the lookback drift must match.
pub fn lookback_prediction(spec: &ProcessSpec, score: f64, t: f64, x: f64) -> f64 {
    spec.diffusion_sq(t, x) * score + spec.diffusion_sq_dx(t, x) - spec.drift(t, x)
}

/// Estimator for [`lookback_drift_mc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LookbackMethod {
    /// Simulate `(X_{t−ε}, X_t)` pairs and keep those with `|X_t − x| < w`.
    /// `None` uses `w = 0.02·sd(X_t)` from a pilot run.
    Window { half_width: Option<f64> },
    /// Draw `X₀` from the prior, weight by `q(t, X₀, x)`, and integrate
    /// `X_{t−ε}` against its exact bridge law given `(X₀, X_t = x)`.
    Bridge,
}

/// Monte-Carlo estimate of `(1/ε) E(X_{t−ε} − X_t | X_t = x)` from `n`
/// draws. Work is split into fixed shards on child streams of `rng`, so the
/// result does not depend on the thread count.
pub fn lookback_drift_mc(
    spec: &ProcessSpec,
    prior: &Prior,
    t: f64,
    x: f64,
    epsilon: f64,
    n: usize,
    method: LookbackMethod,
    rng: &RngStream,
) -> Result<Estimate> {
    check(spec, t, x)?;
    if !(epsilon > 0.0 && epsilon < t) {
        return Err(Error::domain(format!("need 0 < ε < t, got ε = {epsilon}, t = {t}")));
    }
    if n == 0 {
        return Err(Error::domain("lookback estimate needs n > 0"));
    }
    match method {
        LookbackMethod::Window { half_width } => lookback_window(spec, prior, t, x, epsilon, n, half_width, rng),
        LookbackMethod::Bridge => lookback_bridge(spec, prior, t, x, epsilon, n, rng),
    }
}

fn shards(n: usize) -> Vec<(u64, usize)> {
    (0..n.div_ceil(SHARD))
        .map(|k| (k as u64, SHARD.min(n - k * SHARD)))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn lookback_window(
    spec: &ProcessSpec,
    prior: &Prior,
    t: f64,
    x: f64,
    eps: f64,
    n: usize,
    half_width: Option<f64>,
    rng: &RngStream,
) -> Result<Estimate> {
    let s = t - eps;
    let pair = |r: &mut RngStream| -> Result<(f64, f64)> {
        let x0 = prior.sample(r)?;
        let xs = spec.forward_sample_unchecked(x0, s, r);
        let xt = spec.forward_sample_between(s, xs, t, r)?;
        Ok((xs, xt))
    };
    let w = match half_width {
        Some(w) if w > 0.0 => w,
        Some(w) => return Err(Error::domain(format!("window half-width must be > 0, got {w}"))),
        None => {
            let mut r = rng.split(u64::MAX);
            let pilot: Vec<f64> = (0..10_000).map(|_| pair(&mut r).map(|p| p.1)).collect::<Result<_>>()?;
            0.02 * crate::stats::summarize(&pilot).std
        }
    };
    let parts: Vec<(usize, f64, f64)> = shards(n)
        .into_par_iter()
        .map(|(k, len)| {
            let mut r = rng.split(k);
            let (mut c, mut s1, mut s2) = (0usize, 0.0, 0.0);
            for _ in 0..len {
                let (xs, xt) = pair(&mut r)?;
                if (xt - x).abs() < w {
                    let d = (xs - xt) / eps;
                    c += 1;
                    s1 += d;
                    s2 += d * d;
                }
            }
            Ok((c, s1, s2))
        })
        .collect::<Result<_>>()?;
    let (c, s1, s2) = parts
        .iter()
        .fold((0usize, 0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    if c < 2 {
        return Err(Error::domain(format!(
            "no draws landed within {w} of x = {x}; increase n or the window"
        )));
    }
    let cf = c as f64;
    let mean = s1 / cf;
    let var = (s2 / cf - mean * mean).max(0.0) * cf / (cf - 1.0);
    Ok(Estimate {
        value: mean,
        std_error: (var / cf).sqrt(),
        ess: Some(cf),
    })
}

/// Weighted sums relative to a shard-local log-weight reference.
#[derive(Debug, Clone, Copy)]
struct Sums {
    max: f64,
    w: f64,
    wd: f64,
    w2: f64,
    w2d: f64,
    w2d2: f64,
}

impl Sums {
    fn empty() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            w: 0.0,
            wd: 0.0,
            w2: 0.0,
            w2d: 0.0,
            w2d2: 0.0,
        }
    }

    fn from_points(points: &[(f64, f64)]) -> Self {
        let max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let mut s = Self { max, ..Self::empty() };
        if max == f64::NEG_INFINITY {
            return s;
        }
        for &(lw, d) in points {
            let w = (lw - max).exp();
            s.w += w;
            s.wd += w * d;
            s.w2 += w * w;
            s.w2d += w * w * d;
            s.w2d2 += w * w * d * d;
        }
        s
    }

    fn merge(self, o: Self) -> Self {
        let max = self.max.max(o.max);
        if max == f64::NEG_INFINITY {
            return self;
        }
        let (a, b) = ((self.max - max).exp(), (o.max - max).exp());
        Self {
            max,
            w: a * self.w + b * o.w,
            wd: a * self.wd + b * o.wd,
            w2: a * a * self.w2 + b * b * o.w2,
            w2d: a * a * self.w2d + b * b * o.w2d,
            w2d2: a * a * self.w2d2 + b * b * o.w2d2,
        }
    }
}

fn lookback_bridge(
    spec: &ProcessSpec,
    prior: &Prior,
    t: f64,
    x: f64,
    eps: f64,
    n: usize,
    rng: &RngStream,
) -> Result<Estimate> {
    let s = t - eps;
    // The bridge of X_{t−ε} has spread √(ε a(t, x)); a fixed node set covers it.
    let sd = (eps * spec.diffusion_sq(t, x)).sqrt();
    let mut lo = x - 12.0 * sd;
    if !spec.is_real_line() {
        lo = lo.max(0.5 * x);
    }
    let hi = x + 12.0 * sd;
    let panels = 8;
    let part: Vec<(f64, f64)> = (0..panels)
        .map(|i| {
            let a = lo + (hi - lo) * i as f64 / panels as f64;
            let b = lo + (hi - lo) * (i + 1) as f64 / panels as f64;
            (a, b)
        })
        .collect();
    let nodes: Vec<(f64, f64, f64)> = Quadrature::nodes(&part)
        .into_iter()
        .map(|(y, wq)| (y, wq.ln() + spec.log_density_between_unchecked(s, y, t, x), (y - x) / eps))
        .collect();
    let particle = |x0: f64| -> (f64, f64) {
        let ls: Vec<f64> = nodes
            .iter()
            .map(|&(y, lw, _)| lw + spec.log_transition_density_unchecked(x0, s, y))
            .collect();
        let m = ls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY || m.is_nan() {
            return (f64::NEG_INFINITY, 0.0);
        }
        let (mut den, mut num) = (0.0, 0.0);
        for (l, &(_, _, d)) in ls.iter().zip(&nodes) {
            let w = (l - m).exp();
            den += w;
            num += w * d;
        }
        (m + den.ln(), num / den)
    };
    let total = if let Some(z) = prior.as_point_mass() {
        spec.check_initial(z)?;
        let (lw, d) = particle(z);
        Sums::from_points(&[(lw, d)])
    } else {
        shards(n)
            .into_par_iter()
            .map(|(k, len)| {
                let mut r = rng.split(k);
                let mut pts = Vec::with_capacity(len);
                for _ in 0..len {
                    pts.push(particle(prior.sample(&mut r)?));
                }
                Ok(Sums::from_points(&pts))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(Sums::empty(), Sums::merge)
    };
    if !(total.w > 0.0) {
        return Err(Error::NoSupport { n, t, x });
    }
    let v = total.wd / total.w;
    let var = (total.w2d2 - 2.0 * v * total.w2d + v * v * total.w2).max(0.0);
    Ok(Estimate {
        value: v,
        std_error: var.sqrt() / total.w,
        ess: Some(total.w * total.w / total.w2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::CoefficientSchedule;

    fn constant(c: f64) -> CoefficientSchedule {
        CoefficientSchedule::constant(c).unwrap()
    }

    #[test]
    fn ve_gaussian_marginal() {
        let spec = ProcessSpec::ve(constant(1.0)).unwrap();
        let prior = Prior::gaussian(0.0, 1.0).unwrap();
        let p = marginal_density_numeric(&prior, &spec, 1.0, 0.0).unwrap();
        assert!((p - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gbm_point_mass_marginal() {
        let spec = ProcessSpec::gbm(constant(0.0), constant(1.0)).unwrap();
        let p = marginal_density_numeric(&Prior::point_mass(1.0).unwrap(), &spec, 1.0, 1.0).unwrap();
        let expected = (-0.125f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((p - expected).abs() < 1e-14);
    }

    #[test]
    fn marginals_normalize() {
        let cases = [
            (ProcessSpec::besq(0.5).unwrap(), Prior::gamma(2.0, 1.0).unwrap(), 1.0),
            (
                ProcessSpec::gbm(constant(0.0), constant(1.0)).unwrap(),
                Prior::gamma(2.0, 2.0).unwrap(),
                0.5,
            ),
            (ProcessSpec::bes3(1.0).unwrap(), Prior::gamma(3.0, 3.0).unwrap(), 0.4),
        ];
        for (spec, prior, t) in &cases {
            let f = |x: f64| match marginal_density_numeric(prior, spec, *t, x) {
                Ok(v) => v,
                Err(e) => panic!("{} x={x}: {e:?}", spec.name()),
            };
            let total = Quadrature::new(1e-9, 1e-9)
                .integrate_with_breaks(f, &spread_breaks(1e-6, 60.0, 24))
                .unwrap()
                .value;
            assert!((total - 1.0).abs() < 1e-6, "{}: {total}", spec.name());
        }
    }

    #[test]
    fn gaussian_score_and_mode() {
        let spec = ProcessSpec::ve(constant(1.0)).unwrap();
        let prior = Prior::gaussian(0.5, 2.0).unwrap();
        for &x in &[-1.0, 0.5, 3.0] {
            let s = score_numeric(&prior, &spec, 1.0, x, None).unwrap();
            assert!((s.value + (x - 0.5) / 3.0).abs() < 1e-7, "x={x}: {s:?}");
        }
    }

    #[test]
    fn expectation_of_one_is_one() {
        let spec = ProcessSpec::besq(1.0).unwrap();
        let prior = Prior::gamma(2.0, 1.0).unwrap();
        let e = conditional_expectation_numeric(&prior, &spec, |_| 1.0, 0.7, 1.5).unwrap();
        assert!((e - 1.0).abs() < 1e-14);
    }

    #[test]
    fn conjugate_posterior_mean() {
        let spec = ProcessSpec::ve(constant(1.0)).unwrap();
        let prior = Prior::gaussian(0.0, 1.0).unwrap();
        let e = conditional_expectation_numeric(&prior, &spec, |z| z, 1.0, 1.0).unwrap();
        assert!((e - 0.5).abs() < 1e-10);
    }

    #[test]
    fn step_outside_state_space_is_rejected() {
        let spec = ProcessSpec::besq(1.0).unwrap();
        let p = Prior::point_mass(1.0).unwrap();
        assert!(score_numeric(&p, &spec, 1.0, 1e-3, Some(1e-2)).is_err());
    }

    #[test]
    fn bridge_point_mass_matches_gaussian_identity() {
        // VE from a point mass at c: lookback drift is (c − x)/t exactly.
        let spec = ProcessSpec::ve(constant(1.0)).unwrap();
        let prior = Prior::point_mass(0.3).unwrap();
        let e = lookback_drift_mc(&spec, &prior, 1.0, 1.2, 1e-3, 1, LookbackMethod::Bridge, &RngStream::new(0))
            .unwrap();
        assert!((e.value - (0.3 - 1.2)).abs() < 1e-9, "{e:?}");
    }

    #[test]
    fn window_is_deterministic_in_seed() {
        let spec = ProcessSpec::ve(constant(1.0)).unwrap();
        let prior = Prior::gaussian(0.0, 1.0).unwrap();
        let m = LookbackMethod::Window { half_width: Some(0.2) };
        let a = lookback_drift_mc(&spec, &prior, 1.0, 1.0, 0.1, 40_000, m, &RngStream::new(3)).unwrap();
        let b = lookback_drift_mc(&spec, &prior, 1.0, 1.0, 0.1, 40_000, m, &RngStream::new(3)).unwrap();
        assert_eq!(a, b);
    }
}
