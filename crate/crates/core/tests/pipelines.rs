//! End-to-end properties across modules.

use tweedie::dsm::{draw_batch, fit_basis_score, BasisFn, DsmObjective};
use tweedie::oracle::{lookback_drift_mc, lookback_prediction, score_numeric, LookbackMethod};
use tweedie::sampler::{reverse_em_general, ReverseRunConfig};
use tweedie::stats::summarize;
use tweedie::tweedie::{score, ConditionalOracle, ScoreField, TweedieScore};
use tweedie::{CoefficientSchedule, Prior, ProcessSpec, RngStream, Shape};

fn constant(c: f64) -> CoefficientSchedule {
    CoefficientSchedule::constant(c).unwrap()
}

fn pool(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()
}

fn appendix_cir_alpha() -> CoefficientSchedule {
    CoefficientSchedule::plain(Shape::Affine { a: 0.05, b: 4.95 }).unwrap()
}

#[test]
fn reverse_runs_ignore_thread_count() {
    let spec = ProcessSpec::besq(1.0).unwrap();
    let field = TweedieScore::new(spec.clone(), ConditionalOracle::analytic(Prior::gamma(2.0, 1.0).unwrap()));
    let mut cfg = ReverseRunConfig::new(spec.clone(), 1.0, 100, 500, 9);
    cfg.initial = Some(spec.noise_distribution(1.0).unwrap());
    let a = pool(1).install(|| reverse_em_general(&cfg, &field).unwrap());
    let b = pool(4).install(|| reverse_em_general(&cfg, &field).unwrap());
    assert_eq!(a, b);
}

#[test]
fn basis_fit_ignores_data_order_and_thread_count() {
    let obj = DsmObjective::Ve { sigma: constant(1.0) };
    let mut data = Prior::gaussian(0.0, 2.0).unwrap().sample_n(3000, &mut RngStream::new(1)).unwrap();
    let basis = [BasisFn::Power(0), BasisFn::Power(1)];
    let ts = [0.3, 1.0];
    let a = pool(1).install(|| fit_basis_score(&obj, &data, &ts, &basis, 2, &RngStream::new(2)).unwrap());
    data.reverse();
    let b = pool(3).install(|| fit_basis_score(&obj, &data, &ts, &basis, 2, &RngStream::new(2)).unwrap());
    assert_eq!(a.coefficients, b.coefficients);
}

#[test]
fn cir_score_reaches_the_stationary_limit() {
    // σ² = 2α and μ = 1 make Exponential(1) stationary, whatever the data.
    let spec = ProcessSpec::cir(constant(1.0), constant(1.0), constant(2f64.sqrt()), 20.0).unwrap();
    let s = score(&spec, &ConditionalOracle::Quadrature(Prior::gamma(2.0, 2.0).unwrap()), 20.0, 2.0).unwrap();
    assert!((s.value + 1.0).abs() < 1e-3, "{}", s.value);
}

#[test]
fn cir_tweedie_score_beats_zero_noise_prediction() {
    let alpha = appendix_cir_alpha();
    let obj = DsmObjective::cir(alpha, 1.0).unwrap();
    let prior = Prior::gamma(2.0, 2.0).unwrap();
    let field = TweedieScore::new(obj.spec().unwrap(), ConditionalOracle::Quadrature(prior.clone()));
    let samples = draw_batch(&obj, &prior, 1.0, 100_000, &mut RngStream::new(3)).unwrap();
    let diffs: Vec<f64> = samples
        .iter()
        .map(|smp| {
            let s = field.eval(smp.t, smp.xt).unwrap();
            let zero = obj.score_from_eps(smp.t, smp.xt, 0.0);
            obj.loss_score(zero, smp).unwrap() - obj.loss_score(s, smp).unwrap()
        })
        .collect();
    let st = summarize(&diffs);
    assert!(st.mean > 5.0 * st.std_error, "{st:?}");
}

#[test]
fn lookback_discrepancy_shrinks_with_epsilon() {
    let spec = ProcessSpec::gbm(constant(0.0), constant(1.0)).unwrap();
    let prior = Prior::point_mass(1.0).unwrap();
    let (t, x) = (1.0, 1.5);
    let s = score_numeric(&prior, &spec, t, x, None).unwrap().value;
    let target = lookback_prediction(&spec, s, t, x);
    let rng = RngStream::new(4);
    let gap = |eps: f64| {
        let e = lookback_drift_mc(&spec, &prior, t, x, eps, 200_000, LookbackMethod::Bridge, &rng).unwrap();
        ((e.value - target).abs(), e.std_error)
    };
    let (coarse, se_c) = gap(1e-1);
    let (fine, se_f) = gap(1e-3);
    assert!(fine < coarse + 3.0 * (se_c + se_f), "{fine} vs {coarse}");
    assert!(coarse > 3.0 * se_c, "the coarse step should show its bias: {coarse} ± {se_c}");
}
