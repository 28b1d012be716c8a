//! Experiment pipelines behind the CLI subcommands.

use std::sync::Arc;
use std::time::Instant;

use faer::Mat;
use serde::Serialize;
use serde_json::{json, Value};

use scvamp_core::diagnostics::{error_decoupling_report, GaussianityReport};
use scvamp_core::dsm::{load_weights, pairwise_score_error, train_dsm, MlpPairScore, MlpScoreNet, TrainingReport};
use scvamp_core::langevin::{ClipForward, ForwardModel, LangevinConditionalScore, LinearForward, TanhForward};
use scvamp_core::numerics::{build_rri_matrix, RngStream, SensingMatrix};
use scvamp_core::score::{
    LinearLikelihood, LinearLmmseScore, PairwiseGaussianParams, PairwiseGaussianScore, Prior, ScoreModel,
};
use scvamp_core::state_evolution::{
    exit_curves, log_grid, run_se, scalar_gaussian_fixed_point, BgMmse, ExitCurves, GaussianPriorMmse, LinearMmse,
    Mmse, PairwiseMmse, SeConfig, SeTrace, DEFAULT_BG_BUDGET,
};
use scvamp_core::vamp::{run_scvamp, ProblemBatch, RunOutput, ScVampConfig};

use crate::config::{ConfigError, ExperimentConfig, ExperimentKind, ForwardKind, ScoreSource};
use crate::output::{records_from_run, records_from_se, TraceRecord};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] scvamp_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

/// Everything an experiment produces before it is written to disk.
#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub records: Vec<TraceRecord>,
    pub results: Value,
    pub exit: Option<ExitCurves>,
    pub diagnostics: Option<Value>,
}

/// A synthetic linear problem `y = A x + w`, one instance per column.
pub struct LinearProblem {
    pub matrix: Arc<SensingMatrix>,
    pub noise_variance: f64,
    pub x: Mat<f64>,
    pub y: Mat<f64>,
}

/// Draws `A`, `x` and `w` from labeled splits of the experiment seed.
pub fn linear_problem(cfg: &ExperimentConfig, n: usize, m: usize, seed: u64) -> Result<LinearProblem, CliError> {
    let rng = RngStream::seeded(seed);
    let matrix = if cfg.kind == ExperimentKind::ScalarGaussian {
        SensingMatrix::scalar(1.0)?
    } else {
        build_rri_matrix(&mut rng.split("matrix"), m, n, &cfg.spectrum.values(m.min(n)))?
    };
    let noise_variance = cfg.noise_variance_for(matrix.singular_values());
    let x = cfg.prior().sample_batch(&mut rng.split("signal"), n, cfg.batch())?;
    let mut y = matrix.apply_batch(x.as_ref());
    y += &rng.split("noise").gaussian_matrix(m, cfg.batch(), noise_variance);
    Ok(LinearProblem {
        matrix: Arc::new(matrix),
        noise_variance,
        x,
        y,
    })
}

pub fn scvamp_config(cfg: &ExperimentConfig) -> ScVampConfig {
    ScVampConfig {
        max_iterations: cfg.iterations,
        v_init: cfg.v_init.expect("resolved config"),
        damping: cfg.damping,
        stop_tolerance: cfg.stop_tolerance,
        record_mse: true,
        final_estimate: cfg.final_estimate,
        siso_a: cfg.siso_a(),
        siso_b: cfg.siso_b(),
        capture_iteration: None,
    }
}

pub fn prior_mmse(prior: &Prior) -> Box<dyn Mmse> {
    match *prior {
        Prior::Gaussian(p) => Box::new(GaussianPriorMmse { power: p.power }),
        Prior::BernoulliGaussian(params) => Box::new(BgMmse {
            params,
            budget: DEFAULT_BG_BUDGET,
        }),
        Prior::PairwiseGaussian(params) => Box::new(PairwiseMmse { params }),
    }
}

/// SE of the configured linear system, run for exactly `cfg.iterations`
/// steps so every algorithm row has a prediction.
pub fn se_for(
    cfg: &ExperimentConfig,
    singular_values: &[f64],
    noise: f64,
    stop_tolerance: f64,
) -> Result<SeTrace, CliError> {
    let a = LinearMmse::new(singular_values.to_vec(), cfg.n(), noise)?;
    let b = prior_mmse(&cfg.prior());
    let se_cfg = SeConfig {
        max_iterations: cfg.iterations,
        v_init: cfg.v_init.expect("resolved config"),
        stop_tolerance,
        clip_a: cfg.siso_a().alpha_clip,
        clip_b: cfg.siso_b().alpha_clip,
    };
    Ok(run_se(&se_cfg, &a, b.as_ref())?)
}

fn linear_module_a(p: &LinearProblem) -> Result<LinearLmmseScore, CliError> {
    Ok(LinearLmmseScore::new(LinearLikelihood::new(
        p.matrix.clone(),
        p.noise_variance,
    )?))
}

fn run_linear(
    cfg: &ExperimentConfig,
    p: &LinearProblem,
    module_b: &dyn ScoreModel,
    capture: Option<usize>,
) -> Result<RunOutput, CliError> {
    let module_a = linear_module_a(p)?;
    let batch = ProblemBatch {
        y: p.y.clone(),
        truth: Some(p.x.clone()),
    };
    let mut sc = scvamp_config(cfg);
    sc.capture_iteration = capture;
    Ok(run_scvamp(&sc, &module_a, module_b, &batch)?)
}

/// Per-iteration comparison of actual and predicted MSE.
#[derive(Clone, Debug, Serialize)]
pub struct SeComparison {
    pub iterations: usize,
    pub converged_at: Option<usize>,
    pub final_mse_actual: f64,
    pub final_mse_se: f64,
    pub fixed_point_rel_dev: f64,
    /// `max_t |mse_actual/mse_se - 1|` over `t ≥ 2`.
    pub max_rel_dev_from_t2: f64,
    pub rel_dev: Vec<f64>,
    /// First iteration after which the actual MSE stays within 1% of its
    /// final value.
    pub settled_at: usize,
}

pub fn compare(records: &[TraceRecord]) -> SeComparison {
    let rows: Vec<&TraceRecord> = records.iter().filter(|r| r.iter >= 1).collect();
    let rel: Vec<f64> = rows
        .iter()
        .map(|r| match (r.mse_actual, r.mse_se) {
            (Some(a), Some(s)) => a / s - 1.0,
            _ => f64::NAN,
        })
        .collect();
    let last = rows.last().expect("at least one iteration");
    let fa = last.mse_actual.unwrap_or(f64::NAN);
    let fs = last.mse_se.unwrap_or(f64::NAN);
    let max_rel = rows
        .iter()
        .zip(&rel)
        .filter(|(r, _)| r.iter >= 2)
        .fold(0.0f64, |m, (_, d)| if d.is_nan() { f64::NAN } else { m.max(d.abs()) });
    let settled_at = rows
        .iter()
        .rev()
        .take_while(|r| r.mse_actual.is_some_and(|a| (a / fa - 1.0).abs() < 0.01))
        .last()
        .map_or(last.iter, |r| r.iter);
    SeComparison {
        iterations: last.iter,
        converged_at: None,
        final_mse_actual: fa,
        final_mse_se: fs,
        fixed_point_rel_dev: (fa / fs - 1.0).abs(),
        max_rel_dev_from_t2: max_rel,
        rel_dev: rel,
        settled_at,
    }
}

pub fn scalar_gaussian(cfg: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    let p = linear_problem(cfg, 1, 1, cfg.seed)?;
    let power = cfg.prior().variance();
    let module_b = cfg.prior().score_model(1)?;
    let out = run_linear(cfg, &p, module_b.as_ref(), None)?;
    let se = se_for(cfg, &[1.0], p.noise_variance, 0.0)?;
    let fp = scalar_gaussian_fixed_point(power, p.noise_variance)?;
    let gain = power / (power + p.noise_variance);
    let dev: Vec<f64> = (0..cfg.batch())
        .map(|j| (out.estimate[(0, j)] - gain * p.y[(0, j)]).abs())
        .collect();
    let wiener_mad = scvamp_core::numerics::pairwise_sum(&dev) / dev.len() as f64;
    let records = records_from_run(&out.trace, Some(&se));
    let mut cmp = compare(&records);
    cmp.converged_at = out.trace.converged_at;
    Ok(ExperimentOutput {
        results: json!({
            "noise_variance": p.noise_variance,
            "v_star": fp.v_star,
            "mutual_information_nats": fp.mutual_information_nats,
            "se_iterations_to_fixed_point": fp.iterations_to_converge,
            "wiener_gain": gain,
            "wiener_mean_abs_deviation": wiener_mad,
            "comparison": cmp,
        }),
        records,
        ..Default::default()
    })
}

pub fn linear_bg(cfg: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    let p = linear_problem(cfg, cfg.n(), cfg.m(), cfg.seed)?;
    let module_b = cfg.prior().score_model(cfg.n())?;
    let out = run_linear(cfg, &p, module_b.as_ref(), None)?;
    let se = se_for(cfg, p.matrix.singular_values(), p.noise_variance, 0.0)?;
    let records = records_from_run(&out.trace, Some(&se));
    let mut cmp = compare(&records);
    cmp.converged_at = out.trace.converged_at;
    Ok(ExperimentOutput {
        results: json!({
            "noise_variance": p.noise_variance,
            "calibration_fallbacks": out.trace.calibration_fallbacks,
            "comparison": cmp,
        }),
        records,
        ..Default::default()
    })
}

/// Module B input errors `x_in,B - x` at iteration `t` and the variance the
/// algorithm claimed for them.
pub fn captured_errors(
    cfg: &ExperimentConfig,
    n: usize,
    m: usize,
    seed: u64,
    t: usize,
) -> Result<(Mat<f64>, f64), CliError> {
    let p = linear_problem(cfg, n, m, seed)?;
    let module_b = cfg.prior().score_model(n)?;
    let mut short = cfg.clone();
    short.iterations = t;
    short.stop_tolerance = 0.0;
    let out = run_linear(&short, &p, module_b.as_ref(), Some(t))?;
    let xb = out.captured_x_in_b.ok_or_else(|| ConfigError {
        field: "diagnostics.iteration".into(),
        message: format!("run ended before iteration {t}"),
    })?;
    let e = Mat::from_fn(n, cfg.batch(), |i, j| xb[(i, j)] - p.x[(i, j)]);
    Ok((e, out.trace.rows[t].v_in_b))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrendReport {
    pub seeds: usize,
    pub n_large: usize,
    pub n_small: usize,
    pub mean_kl_large: f64,
    pub mean_kl_small: f64,
    pub kl_large: Vec<f64>,
    pub kl_small: Vec<f64>,
    pub decreasing: bool,
}

/// Mean KL-to-Gaussian of captured errors at the configured `n` and at
/// `trend_small_n` (same aspect ratio) over `trend_seeds` seeds.
pub fn kl_trend(cfg: &ExperimentConfig) -> Result<TrendReport, CliError> {
    let d = &cfg.diagnostics;
    let (n, m) = (cfg.n(), cfg.m());
    let small_n = d.trend_small_n;
    let small_m = ((m as f64 * small_n as f64 / n as f64).round() as usize).max(1);
    let mut large = Vec::new();
    let mut small = Vec::new();
    for s in 0..d.trend_seeds as u64 {
        let seed = cfg.seed.wrapping_add(1 + s);
        for (nn, mm, out) in [(n, m, &mut large), (small_n, small_m, &mut small)] {
            let (e, v) = captured_errors(cfg, nn, mm, seed, d.iteration)?;
            out.push(error_decoupling_report(e.as_ref(), v, d.lags)?.kl.unwrap_or(f64::NAN));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ml, ms) = (mean(&large), mean(&small));
    Ok(TrendReport {
        seeds: d.trend_seeds,
        n_large: n,
        n_small: small_n,
        mean_kl_large: ml,
        mean_kl_small: ms,
        kl_large: large,
        kl_small: small,
        decreasing: ml <= ms,
    })
}

pub fn diagnostics(cfg: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    let t = cfg.diagnostics.iteration;
    let p = linear_problem(cfg, cfg.n(), cfg.m(), cfg.seed)?;
    let module_b = cfg.prior().score_model(cfg.n())?;
    let out = run_linear(cfg, &p, module_b.as_ref(), Some(t))?;
    let xb = out.captured_x_in_b.as_ref().ok_or_else(|| ConfigError {
        field: "diagnostics.iteration".into(),
        message: format!("run converged before iteration {t}"),
    })?;
    let e = Mat::from_fn(cfg.n(), cfg.batch(), |i, j| xb[(i, j)] - p.x[(i, j)]);
    let report: GaussianityReport =
        error_decoupling_report(e.as_ref(), out.trace.rows[t].v_in_b, cfg.diagnostics.lags)?;
    let trend = if cfg.diagnostics.trend_seeds > 0 {
        Some(kl_trend(cfg)?)
    } else {
        None
    };
    let se = se_for(cfg, p.matrix.singular_values(), p.noise_variance, 0.0)?;
    let records = records_from_run(&out.trace, Some(&se));
    let diag = json!({ "iteration": t, "report": report, "trend": trend });
    Ok(ExperimentOutput {
        results: json!({
            "noise_variance": p.noise_variance,
            "checks_pass": report.checks.all(),
            "comparison": compare(&records),
        }),
        records,
        diagnostics: Some(diag),
        ..Default::default()
    })
}

/// Weight file if configured, otherwise a network trained from `cfg.dsm`.
pub fn learned_net(cfg: &ExperimentConfig) -> Result<(Arc<MlpScoreNet>, Option<TrainingReport>), CliError> {
    match &cfg.weights {
        Some(path) => Ok((Arc::new(load_weights(path)?), None)),
        None => {
            let (net, report) = train_pair_score(cfg)?;
            Ok((Arc::new(net), Some(report)))
        }
    }
}

fn pairwise_params(cfg: &ExperimentConfig) -> Result<PairwiseGaussianParams, CliError> {
    match cfg.prior() {
        Prior::PairwiseGaussian(p) => Ok(p),
        _ => Err(ConfigError {
            field: "prior".into(),
            message: "score training needs the pairwise-gaussian prior".into(),
        }
        .into()),
    }
}

pub fn train_pair_score(cfg: &ExperimentConfig) -> Result<(MlpScoreNet, TrainingReport), CliError> {
    let params = pairwise_params(cfg)?;
    Ok(train_dsm(|r: &mut RngStream| params.sample_pair(r), &cfg.dsm)?)
}

/// Noise grid and sample count used to score a trained network.
pub const EVAL_SIGMAS: usize = 20;
pub const EVAL_PAIRS_PER_SIGMA: usize = 5000;

pub fn eval_sigmas() -> Vec<f64> {
    (0..EVAL_SIGMAS)
        .map(|k| 0.1 + (3.0 - 0.1) * k as f64 / (EVAL_SIGMAS - 1) as f64)
        .collect()
}

/// Per-σ relative RMS error on held-out pairs and its average.
pub fn score_quality(
    net: &MlpScoreNet,
    params: &PairwiseGaussianParams,
    seed: u64,
) -> Result<(Vec<f64>, f64), CliError> {
    let errs = pairwise_score_error(
        net,
        params,
        &eval_sigmas(),
        EVAL_PAIRS_PER_SIGMA,
        &RngStream::seeded(seed).split("dsm-eval"),
    )?;
    let avg = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok((errs, avg))
}

pub fn correlated(cfg: &ExperimentConfig, net: Option<Arc<MlpScoreNet>>) -> Result<ExperimentOutput, CliError> {
    let params = pairwise_params(cfg)?;
    let p = linear_problem(cfg, cfg.n(), cfg.m(), cfg.seed)?;
    let mut training = None;
    let module_b: Box<dyn ScoreModel> = match cfg.score.expect("resolved config") {
        ScoreSource::Analytic => Box::new(PairwiseGaussianScore::new(cfg.n(), params)?),
        ScoreSource::LearnedMlp => {
            let net = match net {
                Some(n) => n,
                None => {
                    let (n, r) = learned_net(cfg)?;
                    training = r;
                    n
                }
            };
            Box::new(MlpPairScore::new(net, cfg.n())?)
        }
    };
    let out = run_linear(cfg, &p, module_b.as_ref(), None)?;
    let se = se_for(cfg, p.matrix.singular_values(), p.noise_variance, 0.0)?;
    let records = records_from_run(&out.trace, Some(&se));
    let mut cmp = compare(&records);
    cmp.converged_at = out.trace.converged_at;
    Ok(ExperimentOutput {
        results: json!({
            "noise_variance": p.noise_variance,
            "score": cfg.score,
            "calibration_fallbacks": out.trace.calibration_fallbacks,
            "training": training,
            "comparison": cmp,
        }),
        records,
        ..Default::default()
    })
}

pub fn forward_model(
    cfg: &ExperimentConfig,
    matrix: &Arc<SensingMatrix>,
    noise: f64,
) -> Result<Arc<dyn ForwardModel>, CliError> {
    let n = cfg.n();
    Ok(match cfg.langevin.forward {
        ForwardKind::Linear => Arc::new(LinearForward::new(matrix.clone(), noise)?),
        ForwardKind::Tanh => Arc::new(TanhForward::new(n, noise)?),
        ForwardKind::Clip => Arc::new(ClipForward::new(n, cfg.langevin.clip_level, noise)?),
    })
}

pub fn langevin_demo(cfg: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    let (n, m, b) = (cfg.n(), cfg.m(), cfg.batch());
    let rng = RngStream::seeded(cfg.seed);
    let matrix = Arc::new(build_rri_matrix(
        &mut rng.split("matrix"),
        m,
        n,
        &cfg.spectrum.values(m.min(n)),
    )?);
    let noise = cfg.noise_variance_for(matrix.singular_values());
    let model = forward_model(cfg, &matrix, noise)?;
    let x = cfg.prior().sample_batch(&mut rng.split("signal"), n, b)?;
    let mut y = Mat::zeros(m, b);
    for j in 0..b {
        let fx = model.forward(x.col_as_slice(j));
        y.col_as_slice_mut(j).copy_from_slice(&fx);
    }
    y += &rng.split("noise").gaussian_matrix(m, b, noise);
    let module_a = LangevinConditionalScore::new(model.clone(), cfg.langevin.sampler, rng.split("langevin"))?;
    let module_b = cfg.prior().score_model(n)?;
    let batch = ProblemBatch { y, truth: Some(x) };
    let out = run_scvamp(&scvamp_config(cfg), &module_a, module_b.as_ref(), &batch)?;
    let records = records_from_run(&out.trace, None);
    let last = out.trace.last().and_then(|r| r.mse_actual);
    Ok(ExperimentOutput {
        results: json!({
            "forward": model.name(),
            "noise_variance": noise,
            "sampler": cfg.langevin.sampler,
            "step_size": cfg.langevin.sampler.base_step(out.trace.last().map_or(1.0, |r| r.v_in_a), noise),
            "iterations": out.trace.iterations(),
            "final_mse_actual": last,
        }),
        records,
        ..Default::default()
    })
}

fn singular_values_for(cfg: &ExperimentConfig) -> Vec<f64> {
    if cfg.kind == ExperimentKind::ScalarGaussian {
        vec![1.0]
    } else {
        cfg.spectrum.values(cfg.m().min(cfg.n()))
    }
}

pub fn se_only(cfg: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    let d = singular_values_for(cfg);
    let noise = cfg.noise_variance_for(&d);
    let se = se_for(cfg, &d, noise, cfg.stop_tolerance)?;
    let last = se.last().expect("initial row");
    Ok(ExperimentOutput {
        results: json!({
            "noise_variance": noise,
            "converged_at": se.converged_at,
            "final_mse_se": last.predicted_mse,
            "final_v_out_a": last.v_out_a,
            "final_v_out_b": last.v_out_b,
        }),
        records: records_from_se(&se),
        ..Default::default()
    })
}

pub fn exit(cfg: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    let d = singular_values_for(cfg);
    let noise = cfg.noise_variance_for(&d);
    let a = LinearMmse::new(d, cfg.n(), noise)?;
    let b = prior_mmse(&cfg.prior());
    let grid = log_grid(cfg.exit.v_min, cfg.exit.v_max, cfg.exit.points);
    let se_cfg = SeConfig {
        max_iterations: cfg.iterations,
        v_init: cfg.v_init.expect("resolved config"),
        stop_tolerance: cfg.stop_tolerance,
        clip_a: cfg.siso_a().alpha_clip,
        clip_b: cfg.siso_b().alpha_clip,
    };
    let curves = exit_curves(&a, b.as_ref(), &grid, &se_cfg)?;
    let se = run_se(&se_cfg, &a, b.as_ref())?;
    let end = curves.staircase.last().copied();
    Ok(ExperimentOutput {
        results: json!({
            "noise_variance": noise,
            "grid_points": grid.len(),
            "staircase_steps": curves.staircase.len(),
            "fixed_point": end,
        }),
        records: records_from_se(&se),
        exit: Some(curves),
        ..Default::default()
    })
}

/// Dispatches on `cfg.kind`; `cfg` must be resolved.
pub fn run_experiment(cfg: &ExperimentConfig, net: Option<Arc<MlpScoreNet>>) -> Result<ExperimentOutput, CliError> {
    match cfg.kind {
        ExperimentKind::ScalarGaussian => scalar_gaussian(cfg),
        ExperimentKind::LinearBg => linear_bg(cfg),
        ExperimentKind::CorrelatedLearned => correlated(cfg, net),
        ExperimentKind::LangevinDemo => langevin_demo(cfg),
        ExperimentKind::SeOnly => se_only(cfg),
        ExperimentKind::Exit => exit(cfg),
        ExperimentKind::Diagnostics => diagnostics(cfg),
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

/// Wall-clock seconds of `f`.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64())
}
