//! Tweedie empirical Bayes.
//!
//! The marginal score of the observations is estimated by Lindsey's method
//! (a natural spline through the log histogram counts, differentiated) and
//! plugged into one of three posterior-mean identities:
//!
//! * noncentral chi-squared, `z ~ χ²(3, u)`: solve
//!   `√û·coth(√(û z)) = (2ŝ(z) + 1)√z`;
//! * lognormal, `z ~ LogNormal(u, σ²)` in `z` space:
//!   `û = σ² z ŝ(z) + σ² + log z`;
//! * the same data in `log z` space: `ũ = σ² ŝ̃(log z) + log z`.

mod histogram;
mod spline;

pub use histogram::{build_histogram, Histogram};
pub use spline::SplineScore;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::special_fn::{coth, sample_gamma, sample_noncentral_chi2, sample_standard_normal};

pub const DEFAULT_BINS: usize = 63;
pub const DEFAULT_DF: usize = 10;
/// Upper limit of the bracket search in the chi-squared inversion.
pub const U_CAP: f64 = 1e6;

/// Fit Lindsey's spline to the nonempty bins of `h`.
pub fn lindsey_fit(h: &Histogram, df: usize) -> Result<SplineScore> {
    let (x, y) = h.log_counts();
    if x.len() < df + 1 {
        return Err(Error::RankDeficient(format!(
            "only {} nonempty bins for a spline with {df} degrees of freedom; lower df",
            x.len()
        )));
    }
    SplineScore::fit(&x, &y, df)
}

/// Observation model of an empirical-Bayes problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EbKind {
    /// `z ~ χ²(3, u)`
    Besq,
    /// `z ~ LogNormal(u, σ²)`, score estimated in `z`.
    Gbm { sigma: f64 },
    /// `z ~ LogNormal(u, σ²)`, score estimated in `log z`.
    BmLog { sigma: f64 },
}

impl EbKind {
    pub fn name(&self) -> &'static str {
        match self {
            EbKind::Besq => "besq",
            EbKind::Gbm { .. } => "gbm",
            EbKind::BmLog { .. } => "bm-log",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            EbKind::Gbm { sigma } | EbKind::BmLog { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::domain(format!("noise scale must be > 0, got {sigma}")))
            }
            _ => Ok(()),
        }
    }
}

/// A fitted empirical-Bayes estimator.
#[derive(Debug, Clone)]
pub struct EbModel {
    pub kind: EbKind,
    pub score: SplineScore,
    /// Absolute tolerance on the inversion residual (chi-squared kind).
    pub tolerance: f64,
}

/// `f(u, z) = √u · coth(√(u z))`, with `f(0, z) = 1/√z`.
pub fn besq_link(u: f64, z: f64) -> f64 {
    if u == 0.0 {
        return 1.0 / z.sqrt();
    }
    u.sqrt() * coth((u * z).sqrt())
}

/// Solve `f(u, z) = rhs` for `u ≥ 0`, projecting to `0` when
/// `rhs ≤ f(0, z)`.
pub fn invert_besq_link(z: f64, rhs: f64, tolerance: f64) -> Result<f64> {
    if !(z > 0.0) || !rhs.is_finite() {
        return Err(Error::domain(format!("inversion needs z > 0 and finite target, got z = {z}, target = {rhs}")));
    }
    if rhs <= besq_link(0.0, z) {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = z.max(1.0);
    while besq_link(hi, z) < rhs {
        lo = hi;
        hi *= 2.0;
        if hi > U_CAP {
            return Err(Error::Bracket(format!(
                "no root below {U_CAP} for target {rhs} at z = {z}"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = besq_link(mid, z);
        if (f - rhs).abs() <= tolerance || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if f < rhs {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

impl EbModel {
    pub fn new(kind: EbKind, score: SplineScore) -> Result<Self> {
        kind.validate()?;
        Ok(Self {
            kind,
            score,
            tolerance: 1e-10,
        })
    }

    /// Histogram the observations (in `log z` for the log-space kind) and fit.
    pub fn fit(kind: EbKind, z: &[f64], n_bins: usize, df: usize) -> Result<Self> {
        kind.validate()?;
        if let Some(bad) = z.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::domain(format!("observations must be > 0, got {bad}")));
        }
        let h = match kind {
            EbKind::BmLog { .. } => {
                let logs: Vec<f64> = z.iter().map(|v| v.ln()).collect();
                build_histogram(&logs, n_bins)?
            }
            _ => build_histogram(z, n_bins)?,
        };
        Self::new(kind, lindsey_fit(&h, df)?)
    }

    /// Posterior estimate of `u` for one observation.
    pub fn estimate(&self, z: f64) -> Result<f64> {
        if !(z > 0.0) {
            return Err(Error::domain(format!("observation must be > 0, got {z}")));
        }
        match self.kind {
            EbKind::Besq => {
                let s = self.score.deriv(z);
                if s.is_nan() {
                    return Err(Error::domain(format!("score estimate is NaN at z = {z}")));
                }
                invert_besq_link(z, (2.0 * s + 1.0) * z.sqrt(), self.tolerance)
            }
            EbKind::Gbm { sigma } => {
                let s2 = sigma * sigma;
                Ok(s2 * z * self.score.deriv(z) + s2 + z.ln())
            }
            EbKind::BmLog { sigma } => {
                let y = z.ln();
                Ok(sigma * sigma * self.score.deriv(y) + y)
            }
        }
    }

    /// Whether the spline is extrapolated at `z`.
    pub fn extrapolates(&self, z: f64) -> bool {
        match self.kind {
            EbKind::BmLog { .. } => self.score.extrapolates(z.ln()),
            _ => self.score.extrapolates(z),
        }
    }
}

pub fn eb_besq_estimate(model: &EbModel, z: f64) -> Result<f64> {
    match model.kind {
        EbKind::Besq => model.estimate(z),
        _ => Err(Error::domain("eb_besq_estimate needs a chi-squared model")),
    }
}

pub fn eb_gbm_estimate(model: &EbModel, z: f64) -> Result<f64> {
    match model.kind {
        EbKind::Gbm { .. } => model.estimate(z),
        _ => Err(Error::domain("eb_gbm_estimate needs a lognormal z-space model")),
    }
}

pub fn eb_bm_estimate(model: &EbModel, z: f64) -> Result<f64> {
    match model.kind {
        EbKind::BmLog { .. } => model.estimate(z),
        _ => Err(Error::domain("eb_bm_estimate needs a log-space model")),
    }
}

/// Law of the latent parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EbPrior {
    /// `u ~ Gamma(shape, rate)`, mean `shape/rate`.
    Gamma { shape: f64, rate: f64 },
    /// The deterministic design `u_i = log log(m / (j + 1/2))`, `j = i mod m`,
    /// whose `e^u` is close to Exponential(1).
    LogLogGrid { m: usize },
}

impl EbPrior {
    fn draw(&self, n: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        match *self {
            EbPrior::Gamma { shape, rate } => (0..n).map(|_| sample_gamma(shape, rate, rng)).collect(),
            EbPrior::LogLogGrid { m } => {
                if m == 0 {
                    return Err(Error::domain("grid prior needs m > 0"));
                }
                Ok((0..n)
                    .map(|i| (m as f64 / ((i % m) as f64 + 0.5)).ln().ln())
                    .collect())
            }
        }
    }
}

/// Settings of one simulated empirical-Bayes run.
#[derive(Debug, Clone, PartialEq)]
pub struct EbExperiment {
    pub kind: EbKind,
    pub prior: EbPrior,
    pub n: usize,
    pub n_bins: usize,
    pub df: usize,
    pub seed: u64,
}

impl EbExperiment {
    /// The chi-squared setting: Gamma(12, 10) prior, 5000 draws, 63 bins, df 10.
    pub fn besq_default(seed: u64) -> Self {
        Self {
            kind: EbKind::Besq,
            prior: EbPrior::Gamma { shape: 12.0, rate: 10.0 },
            n: 5000,
            n_bins: DEFAULT_BINS,
            df: DEFAULT_DF,
            seed,
        }
    }

    /// The lognormal setting: ten copies of the 500-point grid.
    pub fn lognormal_default(kind: EbKind, seed: u64) -> Self {
        Self {
            kind,
            prior: EbPrior::LogLogGrid { m: 500 },
            n: 5000,
            n_bins: DEFAULT_BINS,
            df: DEFAULT_DF,
            seed,
        }
    }
}

/// Latent values and observations. Both lognormal kinds draw the same data
/// from the same seed, so their estimates can be compared pairwise.
pub fn simulate_eb_data(exp: &EbExperiment) -> Result<(Vec<f64>, Vec<f64>)> {
    exp.kind.validate()?;
    let mut rng = RngStream::new(exp.seed);
    let u = exp.prior.draw(exp.n, &mut rng)?;
    let z = match exp.kind {
        EbKind::Besq => {
            if let Some(bad) = u.iter().find(|v| !(**v >= 0.0)) {
                return Err(Error::domain(format!("noncentrality must be ≥ 0, prior drew {bad}")));
            }
            u.iter()
                .map(|&ui| sample_noncentral_chi2(3.0, ui, &mut rng))
                .collect::<Result<Vec<_>>>()?
        }
        EbKind::Gbm { sigma } | EbKind::BmLog { sigma } => u
            .iter()
            .map(|&ui| (ui + sigma * sample_standard_normal(&mut rng)).exp())
            .collect(),
    };
    Ok((u, z))
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct EbReport {
    pub experiment: EbExperiment,
    pub histogram: Histogram,
    pub model: EbModel,
    /// `(z_i, u_i, û_i)`
    pub pairs: Vec<(f64, f64, f64)>,
    /// `(x, fitted log count, ŝ)` on a uniform grid over the histogram range.
    pub curve: Vec<(f64, f64, f64)>,
    pub rmse: f64,
    /// RMSE of `max(z − 3, 0)` for the chi-squared kind, of `log z` otherwise.
    pub baseline_rmse: f64,
    /// Observations at which the spline was extrapolated.
    pub extrapolated: usize,
}

pub fn baseline_estimate(kind: EbKind, z: f64) -> f64 {
    match kind {
        EbKind::Besq => (z - 3.0).max(0.0),
        EbKind::Gbm { .. } | EbKind::BmLog { .. } => z.ln(),
    }
}

fn rmse(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (a, b) in pairs {
        s += (a - b).powi(2);
        n += 1;
    }
    (s / n.max(1) as f64).sqrt()
}

pub fn run_eb_experiment(exp: &EbExperiment) -> Result<EbReport> {
    let (u, z) = simulate_eb_data(exp)?;
    let model = EbModel::fit(exp.kind, &z, exp.n_bins, exp.df)?;
    let histogram = match exp.kind {
        EbKind::BmLog { .. } => build_histogram(&z.iter().map(|v| v.ln()).collect::<Vec<_>>(), exp.n_bins)?,
        _ => build_histogram(&z, exp.n_bins)?,
    };
    let mut pairs = Vec::with_capacity(z.len());
    let mut extrapolated = 0;
    for (&zi, &ui) in z.iter().zip(&u) {
        if model.extrapolates(zi) {
            extrapolated += 1;
        }
        pairs.push((zi, ui, model.estimate(zi)?));
    }
    let lo = histogram.lower;
    let hi = lo + histogram.bin_width * histogram.n_bins() as f64;
    let curve = (0..=200)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / 200.0;
            (x, model.score.eval(x), model.score.deriv(x))
        })
        .collect();
    let rmse_v = rmse(pairs.iter().map(|p| (p.1, p.2)));
    let baseline_rmse = rmse(pairs.iter().map(|p| (p.1, baseline_estimate(exp.kind, p.0))));
    Ok(EbReport {
        experiment: exp.clone(),
        histogram,
        model,
        pairs,
        curve,
        rmse: rmse_v,
        baseline_rmse,
        extrapolated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn inversion_round_trip() {
        let rhs = besq_link(2.0, 3.0);
        let u = invert_besq_link(3.0, rhs, 1e-12).unwrap();
        assert!((u - 2.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_projection() {
        let z = 2.5;
        assert_eq!(invert_besq_link(z, 1.0 / z.sqrt(), 1e-12).unwrap(), 0.0);
        assert_eq!(invert_besq_link(z, 0.1, 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn bracket_cap_is_reported() {
        assert!(matches!(invert_besq_link(1.0, 1e4, 1e-10), Err(Error::Bracket(_))));
    }

    #[test]
    fn link_is_increasing_in_u() {
        for &z in &[0.1, 1.0, 10.0] {
            let mut prev = besq_link(0.0, z);
            for i in 1..=5000 {
                let u = 1e-6 + 50.0 * i as f64 / 5000.0;
                let f = besq_link(u, z);
                assert!(f > prev, "z={z}, u={u}");
                prev = f;
            }
        }
    }

    #[test]
    fn lognormal_exact_score_gives_conjugate_mean() {
        // u ~ N(m0, τ²), log z | u ~ N(u, σ²): log z ~ N(m0, τ² + σ²).
        let (m0, tau2, sigma) = (0.0, 1.0, 0.5f64);
        let s2 = sigma * sigma;
        let z = 2.0f64;
        let y = z.ln();
        let v = tau2 + s2;
        // score of z = e^Y: p_Z(z) = p_Y(log z)/z
        let score = (-(y - m0) / v - 1.0) / z;
        let u_hat = s2 * z * score + s2 + y;
        let posterior = (tau2 * y + s2 * m0) / (tau2 + s2);
        assert!((u_hat - posterior).abs() < 1e-10);
    }

    #[test]
    fn small_noise_returns_log_z() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        let spline = SplineScore::fit(&x, &y, 5).unwrap();
        let m = EbModel::new(EbKind::Gbm { sigma: 1e-9 }, spline).unwrap();
        assert!((m.estimate(1.7).unwrap() - 1.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let spline = SplineScore::fit(&x, &x, 5).unwrap();
        let m = EbModel::new(EbKind::Besq, spline).unwrap();
        assert!(eb_gbm_estimate(&m, 1.0).is_err());
        assert!(eb_besq_estimate(&m, -1.0).is_err());
    }

    #[test]
    fn histogram_of_the_gamma_pipeline() {
        let (_, z) = simulate_eb_data(&EbExperiment::besq_default(1)).unwrap();
        let h = build_histogram(&z, 63).unwrap();
        assert_eq!(h.n_bins(), 63);
        assert_eq!(h.total(), 5000);
    }

    #[test]
    fn symmetric_mode_has_zero_score() {
        let mut rng = RngStream::new(0);
        let z: Vec<f64> = (0..100_000).map(|_| 5.0 + sample_standard_normal(&mut rng)).collect();
        let h = build_histogram(&z, 63).unwrap();
        let s = lindsey_fit(&h, 10).unwrap();
        assert!(s.deriv(5.0).abs() < 0.05, "{}", s.deriv(5.0));
        assert!(s.deriv(4.0) > 0.5 && s.deriv(6.0) < -0.5);
    }

    #[test]
    fn spline_score_integrates_to_curve_difference() {
        let r = run_eb_experiment(&EbExperiment::besq_default(3)).unwrap();
        let (a, b) = (r.curve[0].0, r.curve[r.curve.len() - 1].0);
        let n = 200_000;
        let h = (b - a) / n as f64;
        let mut integral = 0.5 * (r.model.score.deriv(a) + r.model.score.deriv(b));
        for i in 1..n {
            integral += r.model.score.deriv(a + i as f64 * h);
        }
        integral *= h;
        let diff = r.model.score.eval(b) - r.model.score.eval(a);
        assert!((integral - diff).abs() < 1e-8, "{integral} vs {diff}");
    }

    #[test]
    fn pipeline_is_deterministic() {
        let e = EbExperiment::lognormal_default(EbKind::Gbm { sigma: 0.5 }, 4);
        let a = run_eb_experiment(&e).unwrap();
        let b = run_eb_experiment(&e).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.rmse.to_bits(), b.rmse.to_bits());
    }

    #[test]
    fn lognormal_kinds_share_data() {
        let g = simulate_eb_data(&EbExperiment::lognormal_default(EbKind::Gbm { sigma: 0.5 }, 9)).unwrap();
        let b = simulate_eb_data(&EbExperiment::lognormal_default(EbKind::BmLog { sigma: 0.5 }, 9)).unwrap();
        assert_eq!(g, b);
    }

    proptest! {
        #[test]
        fn inversion_residual_is_small(u in 1e-4f64..40.0, z in 0.05f64..20.0) {
            let rhs = besq_link(u, z);
            let got = invert_besq_link(z, rhs, 1e-10).unwrap();
            prop_assert!((besq_link(got, z) - rhs).abs() <= 1e-10);
        }
    }
}
