//! The four subcommands.
//!
//! Each one reads all of its keys into a plan first, so that unknown keys and
//! bad values are reported before anything is computed or written.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use tweedie::dsm::{default_basis, fit_basis_score, BasisFn, BasisScoreModel, DsmObjective};
use tweedie::empirical_bayes::{baseline_estimate, run_eb_experiment, EbExperiment, EbKind, EbPrior};
use tweedie::oracle::score_numeric;
use tweedie::sampler::{reverse_em_cir, reverse_em_gbm, reverse_em_general, PositivityGuard, ReverseRunConfig};
use tweedie::stats::{quantile_sorted, sorted, summarize};
use tweedie::tweedie::{ConditionalOracle, Particles, ScoreField, TweedieScore};
use tweedie::{Prior, RngStream};

use crate::config::Config;
use crate::output::{fmt_f64, write_sidecar, CsvOut, RunManifest};
use crate::{setup, CliError};

/// What a successful run reports back to `main`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    ToleranceBreach { failures: usize },
}

pub struct Context {
    pub manifest: RunManifest,
    pub header: String,
}

impl Context {
    fn out(&self) -> &Path {
        &self.manifest.out_dir
    }

    fn seed(&self) -> u64 {
        self.manifest.seed
    }
}

fn reject_unused(cfg: &Config) -> Result<(), CliError> {
    match cfg.unused().first() {
        Some(k) => Err(cfg.error(k, "unknown key")),
        None => Ok(()),
    }
}

fn resolve(config_path: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

// ---------------------------------------------------------------- score-check

enum OracleChoice {
    Analytic,
    Quadrature,
    MonteCarlo(usize),
}

pub fn score_check(cfg: &Config, ctx: &Context) -> Result<Outcome, CliError> {
    let spec = setup::process(cfg, "process")?;
    let reference = if cfg.has("reference.family") {
        setup::process(cfg, "reference")?
    } else {
        spec.clone()
    };
    let prior = setup::prior(cfg)?;
    let ts: Vec<f64> = cfg.list("grid.t")?;
    let xs: Vec<f64> = cfg.list("grid.x")?;
    let tolerance: f64 = cfg.get_or("check.tolerance", 1e-5)?;
    let choice = match cfg.raw("check.oracle").unwrap_or("analytic") {
        "analytic" => OracleChoice::Analytic,
        "quadrature" => OracleChoice::Quadrature,
        "monte-carlo" => OracleChoice::MonteCarlo(cfg.get_or("check.particles", 100_000usize)?),
        other => {
            return Err(cfg.error(
                "check.oracle",
                format!("unknown oracle `{other}` (analytic, quadrature, monte-carlo)"),
            ))
        }
    };
    reject_unused(cfg)?;

    let oracle = match choice {
        OracleChoice::Analytic => ConditionalOracle::analytic(prior.clone()),
        OracleChoice::Quadrature => ConditionalOracle::Quadrature(prior.clone()),
        OracleChoice::MonteCarlo(n) => {
            let mut rng = RngStream::new(ctx.seed());
            ConditionalOracle::MonteCarlo(Particles::new(prior.sample_n(n, &mut rng)?)?)
        }
    };
    let grid: Vec<(f64, f64)> = ts.iter().flat_map(|&t| xs.iter().map(move |&x| (t, x))).collect();
    let rows: Vec<[f64; 6]> = grid
        .par_iter()
        .map(|&(t, x)| -> Result<[f64; 6], CliError> {
            let s = tweedie::tweedie::score(&spec, &oracle, t, x)?;
            let o = score_numeric(&prior, &reference, t, x, None)?;
            Ok([t, x, s.value, s.std_error, o.value, o.error])
        })
        .collect::<Result<_, _>>()?;

    let mut csv = CsvOut::create(
        ctx.out(),
        "score_check.csv",
        &ctx.header,
        &["t", "x", "tweedie", "tweedie_se", "oracle", "oracle_error", "abs_diff", "pass"],
    )?;
    let mut failures = 0;
    let mut worst = 0.0f64;
    for r in &rows {
        let diff = (r[2] - r[4]).abs();
        let pass = diff <= tolerance;
        if !pass {
            failures += 1;
        }
        worst = worst.max(if diff.is_nan() { f64::INFINITY } else { diff });
        let mut fields: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
        fields.push(fmt_f64(diff));
        fields.push(pass.to_string());
        csv.row(fields)?;
    }
    csv.finish()?;
    eprintln!(
        "score-check: {} points, max |diff| = {worst:e}, tolerance {tolerance:e}, {failures} failing",
        rows.len()
    );
    Ok(if failures == 0 {
        Outcome::Ok
    } else {
        Outcome::ToleranceBreach { failures }
    })
}

// ------------------------------------------------------------------- generate

enum ScoreSource {
    Oracle(ConditionalOracle),
    Basis(PathBuf),
}

enum Scheme {
    General,
    Gbm,
    Cir,
}

fn read_basis_file(path: &Path, objective: DsmObjective) -> Result<BasisScoreModel, CliError> {
    let bad = |msg: String| CliError::Config {
        key: "generate.basis_file".into(),
        message: format!("{}: {msg}", path.display()),
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.get(0) != Some("t") {
        return Err(bad("first column must be `t`".into()));
    }
    let basis: Vec<BasisFn> = headers
        .iter()
        .skip(1)
        .take_while(|h| *h != "loss")
        .map(|h| h.parse().map_err(|e: tweedie::Error| bad(e.to_string())))
        .collect::<Result<_, _>>()?;
    let mut t_slices = Vec::new();
    let mut coefficients = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad number in column {i}")))
        };
        t_slices.push(num(0)?);
        coefficients.push((1..=basis.len()).map(num).collect::<Result<Vec<_>, _>>()?);
    }
    if t_slices.is_empty() {
        return Err(bad("no coefficient rows".into()));
    }
    let n = t_slices.len();
    Ok(BasisScoreModel {
        objective,
        basis,
        t_slices,
        coefficients,
        losses: vec![f64::NAN; n],
        conditions: vec![f64::NAN; n],
        ridged: vec![false; n],
    })
}

pub fn generate(cfg: &Config, ctx: &Context) -> Result<Outcome, CliError> {
    let spec = setup::process(cfg, "process")?;
    let horizon: f64 = cfg.get_or("generate.horizon", 1.0)?;
    let steps: usize = cfg.get_or("generate.steps", 1000)?;
    let paths: usize = cfg.get("generate.paths")?;
    let keep_paths: bool = cfg.get_or("generate.keep_paths", false)?;
    let source = match cfg.raw("generate.score").unwrap_or("analytic") {
        "analytic" => ScoreSource::Oracle(ConditionalOracle::analytic(setup::prior(cfg)?)),
        "quadrature" => ScoreSource::Oracle(ConditionalOracle::Quadrature(setup::prior(cfg)?)),
        "basis" => ScoreSource::Basis(resolve(&ctx.manifest.config_path, cfg.str("generate.basis_file")?)),
        other => {
            return Err(cfg.error(
                "generate.score",
                format!("unknown score source `{other}` (analytic, quadrature, basis)"),
            ))
        }
    };
    let scheme = match cfg.raw("generate.sampler").unwrap_or("general") {
        "general" => Scheme::General,
        "gbm" => Scheme::Gbm,
        "cir" => Scheme::Cir,
        other => {
            return Err(cfg.error(
                "generate.sampler",
                format!("unknown sampler `{other}` (general, gbm, cir)"),
            ))
        }
    };
    let guard = match cfg.raw("generate.guard") {
        None => PositivityGuard::default_for(&spec),
        Some("reflect") => PositivityGuard::Reflect,
        Some("clamp") => PositivityGuard::Clamp(cfg.get_or("generate.clamp_floor", 1e-8)?),
        Some("reject") => PositivityGuard::RejectStep {
            retries: cfg.get_or("generate.retries", 10)?,
        },
        Some(other) => {
            return Err(cfg.error(
                "generate.guard",
                format!("unknown guard `{other}` (reflect, clamp, reject)"),
            ))
        }
    };
    let reference: Option<f64> = match cfg.raw("generate.reference") {
        None => None,
        Some(_) => Some(cfg.get("generate.reference")?),
    };
    let objective = match (&source, &scheme) {
        (ScoreSource::Basis(_), _) | (_, Scheme::Gbm) => Some(setup::objective(cfg, &spec)?),
        _ => None,
    };
    reject_unused(cfg)?;

    let score: Box<dyn ScoreField> = match source {
        ScoreSource::Oracle(o) => Box::new(TweedieScore::new(spec.clone(), o)),
        ScoreSource::Basis(path) => Box::new(read_basis_file(&path, objective.clone().expect("objective"))?),
    };
    let mut run_cfg = ReverseRunConfig::new(spec.clone(), horizon, steps, paths, ctx.seed());
    run_cfg.guard = guard;
    run_cfg.keep_paths = keep_paths;
    if let Some(r) = reference {
        run_cfg.initial = Some(spec.noise_distribution_from(horizon, r)?);
    }
    let run = match scheme {
        Scheme::General => reverse_em_general(&run_cfg, score.as_ref())?,
        Scheme::Cir => reverse_em_cir(&run_cfg, score.as_ref())?,
        Scheme::Gbm => {
            let obj = objective.expect("objective");
            reverse_em_gbm(&run_cfg, |t, x| Ok(obj.eps_from_score(t, x, score.eval(t, x)?)))?
        }
    };

    let kept: Vec<usize> = (0..paths).filter(|i| run.excluded.binary_search(i).is_err()).collect();
    let mut csv = CsvOut::create(ctx.out(), "samples.csv", &ctx.header, &["path_id", "y"])?;
    for (id, y) in kept.iter().zip(&run.samples) {
        csv.row([id.to_string(), fmt_f64(*y)])?;
    }
    csv.finish()?;

    if let Some(trajectories) = &run.paths {
        let mut csv = CsvOut::create(ctx.out(), "paths.csv", &ctx.header, &["path_id", "step", "t", "y"])?;
        for (id, path) in trajectories.iter().enumerate() {
            for (k, y) in path.iter().enumerate() {
                csv.row([id.to_string(), k.to_string(), fmt_f64(run_cfg.time_at(k)), fmt_f64(*y)])?;
            }
        }
        csv.finish()?;
    }

    let mut csv = CsvOut::create(ctx.out(), "summary.csv", &ctx.header, &["statistic", "value"])?;
    let s = summarize(&run.samples);
    csv.row(["n".to_string(), s.n.to_string()])?;
    csv.row(["excluded".to_string(), run.excluded.len().to_string()])?;
    csv.row(["mean".to_string(), fmt_f64(s.mean)])?;
    csv.row(["std".to_string(), fmt_f64(s.std)])?;
    if !run.samples.is_empty() {
        let sorted = sorted(&run.samples);
        for (name, p) in [
            ("q01", 0.01),
            ("q05", 0.05),
            ("q25", 0.25),
            ("median", 0.5),
            ("q75", 0.75),
            ("q95", 0.95),
            ("q99", 0.99),
        ] {
            csv.row([name.to_string(), fmt_f64(quantile_sorted(&sorted, p))])?;
        }
    }
    csv.finish()?;

    write_sidecar(
        ctx.out(),
        "run.txt",
        &ctx.header,
        &[
            ("family", spec.name().to_string()),
            ("seed", ctx.seed().to_string()),
            ("paths", paths.to_string()),
            ("steps", steps.to_string()),
            ("excluded", run.excluded.len().to_string()),
        ],
    )?;
    Ok(Outcome::Ok)
}

// -------------------------------------------------------------------- dsm-fit

pub fn dsm_fit(cfg: &Config, ctx: &Context) -> Result<Outcome, CliError> {
    let spec = setup::process(cfg, "process")?;
    let objective = setup::objective(cfg, &spec)?;
    let prior: Prior = setup::prior(cfg)?;
    let n_data: usize = cfg.get_or("dsm.n_data", 1000)?;
    let n_mc: usize = cfg.get_or("dsm.n_mc", 1)?;
    let t_slices: Vec<f64> = cfg.list("dsm.t")?;
    let basis: Vec<BasisFn> = if cfg.has("dsm.basis") {
        cfg.list("dsm.basis")?
    } else {
        default_basis(&objective)
    };
    reject_unused(cfg)?;

    let root = RngStream::new(ctx.seed());
    let data = prior.sample_n(n_data, &mut root.split(0))?;
    let model = fit_basis_score(&objective, &data, &t_slices, &basis, n_mc, &root.split(1))?;

    let mut columns = vec!["t".to_string()];
    columns.extend(basis.iter().map(|b| b.to_string()));
    columns.extend(["loss", "condition", "ridged"].map(String::from));
    let column_refs: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut csv = CsvOut::create(ctx.out(), "coefficients.csv", &ctx.header, &column_refs)?;
    for (k, &t) in model.t_slices.iter().enumerate() {
        let mut row = vec![fmt_f64(t)];
        row.extend(model.coefficients[k].iter().map(|c| fmt_f64(*c)));
        row.push(fmt_f64(model.losses[k]));
        row.push(fmt_f64(model.conditions[k]));
        row.push(model.ridged[k].to_string());
        csv.row(row)?;
    }
    csv.finish()?;
    Ok(Outcome::Ok)
}

// --------------------------------------------------------------------- eb-run

fn eb_plan(cfg: &Config, seed: u64) -> Result<EbExperiment, CliError> {
    let kind = match cfg.str("eb.kind")? {
        "besq" => EbKind::Besq,
        "gbm" => EbKind::Gbm { sigma: cfg.get("eb.sigma")? },
        "bm-log" => EbKind::BmLog { sigma: cfg.get("eb.sigma")? },
        other => return Err(cfg.error("eb.kind", format!("unknown kind `{other}` (besq, gbm, bm-log)"))),
    };
    let default_prior = match kind {
        EbKind::Besq => "gamma",
        _ => "loglog-grid",
    };
    let prior = match cfg.raw("eb.prior").unwrap_or(default_prior) {
        "gamma" => EbPrior::Gamma {
            shape: cfg.get_or("eb.shape", 12.0)?,
            rate: cfg.get_or("eb.rate", 10.0)?,
        },
        "loglog-grid" => EbPrior::LogLogGrid {
            m: cfg.get_or("eb.m", 500)?,
        },
        other => return Err(cfg.error("eb.prior", format!("unknown prior `{other}` (gamma, loglog-grid)"))),
    };
    Ok(EbExperiment {
        kind,
        prior,
        n: cfg.get_or("eb.n", 5000)?,
        n_bins: cfg.get_or("eb.bins", 63)?,
        df: cfg.get_or("eb.df", 10)?,
        seed,
    })
}

pub fn eb_run(cfg: &Config, ctx: &Context) -> Result<Outcome, CliError> {
    let exp = eb_plan(cfg, ctx.seed())?;
    reject_unused(cfg)?;
    let report = run_eb_experiment(&exp)?;

    let mut csv = CsvOut::create(ctx.out(), "eb_pairs.csv", &ctx.header, &["z", "u", "u_hat", "baseline"])?;
    for &(z, u, u_hat) in &report.pairs {
        csv.row([z, u, u_hat, baseline_estimate(exp.kind, z)].map(fmt_f64))?;
    }
    csv.finish()?;

    let mut csv = CsvOut::create(ctx.out(), "eb_histogram.csv", &ctx.header, &["center", "count"])?;
    for (c, n) in report.histogram.centers.iter().zip(&report.histogram.counts) {
        csv.row([fmt_f64(*c), n.to_string()])?;
    }
    csv.finish()?;

    let mut csv = CsvOut::create(ctx.out(), "eb_curve.csv", &ctx.header, &["x", "log_count_fit", "score"])?;
    for &(x, fit, s) in &report.curve {
        csv.row([x, fit, s].map(fmt_f64))?;
    }
    csv.finish()?;

    let mut csv = CsvOut::create(ctx.out(), "eb_summary.csv", &ctx.header, &["statistic", "value"])?;
    csv.row(["kind".to_string(), exp.kind.name().to_string()])?;
    csv.row(["n".to_string(), exp.n.to_string()])?;
    csv.row(["rmse".to_string(), fmt_f64(report.rmse)])?;
    csv.row(["baseline_rmse".to_string(), fmt_f64(report.baseline_rmse)])?;
    csv.row(["extrapolated".to_string(), report.extrapolated.to_string()])?;
    csv.finish()?;
    eprintln!(
        "eb-run: {} rmse = {:.6}, baseline rmse = {:.6}",
        exp.kind.name(),
        report.rmse,
        report.baseline_rmse
    );
    Ok(Outcome::Ok)
}
