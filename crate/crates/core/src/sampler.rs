//! Reverse-time Euler–Maruyama generation.
//!
//! The reverse of `dX = b dt + √a dW` run from `p(T, ·)` has drift
//! `−b + a ∂ₓlog p + ∂ₓa` evaluated at time `T − u`. Steps are uniform on
//! `[0, T − t_min]` with `t_min = 10⁻⁵·T`, so the last score evaluation
//! stays off the singular point `t = 0`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::process::{CoefficientSchedule, Family, Prior, ProcessSpec};
use crate::rng::RngStream;
use crate::special_fn::sample_standard_normal;
use crate::tweedie::ScoreField;

/// Fraction of the horizon at which the reverse run stops.
pub const T_MIN_FRACTION: f64 = 1e-5;

/// How a step that leaves `(0, ∞)` is repaired.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositivityGuard {
    /// `y ← |y|`
    Reflect,
    /// `y ← max(y, floor)`
    Clamp(f64),
    /// Redraw the Gaussian increment, at most `retries` times, then drop the path.
    RejectStep { retries: usize },
}

impl PositivityGuard {
    /// Reflection for GBM, clamping at `1e-8` for the other positive families.
    pub fn default_for(spec: &ProcessSpec) -> Self {
        match spec.family() {
            Family::Gbm { .. } => PositivityGuard::Reflect,
            _ => PositivityGuard::Clamp(1e-8),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReverseRunConfig {
    pub spec: ProcessSpec,
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub guard: PositivityGuard,
    /// Initial law; `None` uses the spec's noise distribution at the horizon.
    pub initial: Option<Prior>,
    pub keep_paths: bool,
}

impl ReverseRunConfig {
    pub fn new(spec: ProcessSpec, horizon: f64, n_steps: usize, n_paths: usize, seed: u64) -> Self {
        let guard = PositivityGuard::default_for(&spec);
        Self {
            spec,
            horizon,
            n_steps,
            n_paths,
            seed,
            guard,
            initial: None,
            keep_paths: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::domain(format!("horizon must be > 0, got {}", self.horizon)));
        }
        if self.n_steps == 0 || self.n_paths == 0 {
            return Err(Error::domain("reverse run needs at least one step and one path"));
        }
        if let PositivityGuard::Clamp(f) = self.guard {
            if !(f > 0.0) {
                return Err(Error::domain(format!("clamp floor must be > 0, got {f}")));
            }
        }
        Ok(())
    }

    pub fn t_min(&self) -> f64 {
        T_MIN_FRACTION * self.horizon
    }

    pub fn step_size(&self) -> f64 {
        (self.horizon - self.t_min()) / self.n_steps as f64
    }

    /// Forward time at reverse step `k`.
    pub fn time_at(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_min()
        } else {
            self.horizon - k as f64 * self.step_size()
        }
    }
}

/// Output of a reverse run, in path order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseRun {
    /// Terminal values of the paths that were not dropped.
    pub samples: Vec<f64>,
    /// Indices of dropped paths.
    pub excluded: Vec<usize>,
    /// Full trajectories (`n_steps + 1` states each) when requested; dropped
    /// paths are empty.
    pub paths: Option<Vec<Vec<f64>>>,
}

enum PathOutcome {
    Done(Vec<f64>),
    Dropped,
}

fn run<F>(cfg: &ReverseRunConfig, initial: &Prior, positive: bool, step: F) -> Result<ReverseRun>
where
    F: Fn(f64, f64, f64, f64) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let dt = cfg.step_size();
    let root = RngStream::new(cfg.seed);
    let outcomes: Vec<PathOutcome> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.split(i as u64);
            let mut y = initial.sample(&mut rng)?;
            let mut traj = Vec::with_capacity(if cfg.keep_paths { cfg.n_steps + 1 } else { 1 });
            traj.push(y);
            for k in 0..cfg.n_steps {
                let t = cfg.time_at(k);
                let mut attempts = 0;
                let next = loop {
                    let z = sample_standard_normal(&mut rng);
                    let cand = step(t, y, z, dt)?;
                    if !positive && cand.is_finite() {
                        break Some(cand);
                    }
                    match cfg.guard {
                        _ if cand.is_nan() => break None,
                        _ if cand > 0.0 && cand.is_finite() => break Some(cand),
                        PositivityGuard::Reflect if cand.is_finite() && cand != 0.0 => break Some(cand.abs()),
                        PositivityGuard::Clamp(floor) if cand.is_finite() => break Some(cand.max(floor)),
                        PositivityGuard::RejectStep { retries } if attempts < retries && cand.is_finite() => {
                            attempts += 1
                        }
                        _ => break None,
                    }
                };
                match next {
                    Some(v) => y = v,
                    None => return Ok(PathOutcome::Dropped),
                }
                if cfg.keep_paths {
                    traj.push(y);
                } else {
                    traj[0] = y;
                }
            }
            Ok(PathOutcome::Done(traj))
        })
        .collect::<Result<_>>()?;
    let mut out = ReverseRun {
        samples: Vec::with_capacity(cfg.n_paths),
        excluded: Vec::new(),
        paths: cfg.keep_paths.then(Vec::new),
    };
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            PathOutcome::Done(traj) => {
                out.samples.push(*traj.last().expect("trajectory is nonempty"));
                if let Some(p) = out.paths.as_mut() {
                    p.push(traj);
                }
            }
            PathOutcome::Dropped => {
                out.excluded.push(i);
                if let Some(p) = out.paths.as_mut() {
                    p.push(Vec::new());
                }
            }
        }
    }
    if !out.excluded.is_empty() {
        log::warn!("{} of {} paths dropped", out.excluded.len(), cfg.n_paths);
    }
    Ok(out)
}

fn initial_law(cfg: &ReverseRunConfig) -> Result<Prior> {
    match &cfg.initial {
        Some(p) => Ok(p.clone()),
        None => cfg.spec.noise_distribution(cfg.horizon),
    }
}

/// Euler–Maruyama for the general reverse SDE with drift `−b + a·s + ∂ₓa`
/// and diffusion `√a`.
pub fn reverse_em_general(cfg: &ReverseRunConfig, score: &dyn ScoreField) -> Result<ReverseRun> {
    let spec = &cfg.spec;
    let initial = initial_law(cfg)?;
    run(cfg, &initial, !spec.is_real_line(), |t, y, z, dt| {
        let a = spec.diffusion_sq(t, y);
        let drift = -spec.drift(t, y) + a * score.eval(t, y)? + spec.diffusion_sq_dx(t, y);
        Ok(y + drift * dt + (a * dt).sqrt() * z)
    })
}

/// The multiplicative GBM update
/// `y ← y(1 + (σ² − μ − σ²ε_θ/Σ)Δt + σ√Δt z)` driven by a noise predictor
/// `ε_θ(t, x)`.
pub fn reverse_em_gbm<E>(cfg: &ReverseRunConfig, eps: E) -> Result<ReverseRun>
where
    E: Fn(f64, f64) -> Result<f64> + Sync,
{
    let (mu, sigma) = match cfg.spec.family() {
        Family::Gbm { mu, sigma } => (mu, sigma),
        _ => return Err(Error::domain("reverse_em_gbm needs a GBM spec")),
    };
    let initial = initial_law(cfg)?;
    run(cfg, &initial, true, |t, y, z, dt| {
        let s2 = sigma.eval(t).powi(2);
        let big = sigma.square_integral(t).sqrt();
        let m = mu.eval(t);
        Ok(y * (1.0 + (s2 - m - s2 / big * eps(t, y)?) * dt + s2.sqrt() * dt.sqrt() * z))
    })
}

/// The CIR update `y ← y + α(2ys_θ + 2 − μ + y)Δt + √(2αyΔt) z` for
/// `σ = √(2α)` and constant `μ`.
pub fn reverse_em_cir(cfg: &ReverseRunConfig, score: &dyn ScoreField) -> Result<ReverseRun> {
    let (alpha, mu): (&CoefficientSchedule, f64) = match cfg.spec.family() {
        Family::Cir { alpha, mu, .. } => match mu.constant_value() {
            Some(m) => (alpha, m),
            None => return Err(Error::domain("reverse_em_cir needs a constant μ")),
        },
        _ => return Err(Error::domain("reverse_em_cir needs a CIR spec")),
    };
    let initial = initial_law(cfg)?;
    run(cfg, &initial, true, |t, y, z, dt| {
        let a = alpha.eval(t);
        let s = score.eval(t, y)?;
        Ok(y + a * (2.0 * y * s + 2.0 - mu + y) * dt + (2.0 * a * y.max(0.0) * dt).sqrt() * z)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tweedie::{ConditionalOracle, FnScore, Provenance, TweedieScore};

    fn constant(c: f64) -> CoefficientSchedule {
        CoefficientSchedule::constant(c).unwrap()
    }

    #[test]
    fn time_grid_ends_at_t_min() {
        let cfg = ReverseRunConfig::new(ProcessSpec::ve(constant(1.0)).unwrap(), 2.0, 10, 1, 0);
        assert_eq!(cfg.time_at(0), 2.0);
        assert_eq!(cfg.time_at(10), 2e-5);
        assert!((cfg.time_at(9) - (2.0 - 9.0 * cfg.step_size())).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_runs() {
        let spec = ProcessSpec::ve(constant(1.0)).unwrap();
        let score = FnScore::new(|_, x| -x, Provenance::TweedieAnalytic);
        let cfg = ReverseRunConfig::new(spec, 1.0, 10, 0, 0);
        assert!(reverse_em_general(&cfg, &score).is_err());
    }

    #[test]
    fn deterministic_and_path_ordered() {
        let spec = ProcessSpec::vp(constant(1.0)).unwrap();
        let score = FnScore::new(|_, x| -x, Provenance::TweedieAnalytic);
        let mut cfg = ReverseRunConfig::new(spec, 1.0, 50, 64, 9);
        cfg.keep_paths = true;
        let a = reverse_em_general(&cfg, &score).unwrap();
        let b = reverse_em_general(&cfg, &score).unwrap();
        assert_eq!(a, b);
        let paths = a.paths.unwrap();
        assert_eq!(paths.len(), 64);
        assert!(paths.iter().all(|p| p.len() == 51));
        assert_eq!(paths[3][50], a.samples[3]);
    }

    #[test]
    fn guards_keep_states_positive() {
        // A hostile score pushes every path below zero.
        let spec = ProcessSpec::besq(0.5).unwrap();
        let push = FnScore::new(|_, _| -1e3, Provenance::BasisFit);
        for guard in [PositivityGuard::Reflect, PositivityGuard::Clamp(1e-6)] {
            let mut cfg = ReverseRunConfig::new(spec.clone(), 1.0, 20, 16, 1);
            cfg.guard = guard;
            let r = reverse_em_general(&cfg, &push).unwrap();
            assert!(r.samples.iter().all(|&y| y > 0.0));
        }
        let mut cfg = ReverseRunConfig::new(spec, 1.0, 20, 16, 1);
        cfg.guard = PositivityGuard::RejectStep { retries: 3 };
        let r = reverse_em_general(&cfg, &push).unwrap();
        assert_eq!(r.samples.len() + r.excluded.len(), 16);
        assert!(!r.excluded.is_empty());
    }

    #[test]
    fn ve_point_mass_concentrates() {
        let spec = ProcessSpec::ve(constant(1.0)).unwrap();
        let score = TweedieScore::new(spec.clone(), ConditionalOracle::Degenerate(0.4));
        let cfg = ReverseRunConfig::new(spec, 1.0, 500, 2000, 3);
        let r = reverse_em_general(&cfg, &score).unwrap();
        let s = crate::stats::summarize(&r.samples);
        assert!((s.mean - 0.4).abs() < 3.0 * s.std_error + 1e-3, "{s:?}");
        assert!(s.std < 0.08);
    }

    #[test]
    fn cir_update_matches_general_drift() {
        // With σ = √(2α) and constant μ the printed update is the general one.
        let alpha = constant(0.8);
        let sigma = constant((1.6f64).sqrt());
        let spec = ProcessSpec::cir(alpha, constant(1.0), sigma, 1.0).unwrap();
        let score = TweedieScore::new(spec.clone(), ConditionalOracle::Degenerate(1.0));
        let cfg = ReverseRunConfig::new(spec, 1.0, 40, 32, 11);
        let a = reverse_em_cir(&cfg, &score).unwrap();
        let b = reverse_em_general(&cfg, &score).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((x - y).abs() < 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
}
