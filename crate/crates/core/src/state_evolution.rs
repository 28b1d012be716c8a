//! Scalar state evolution, per-symbol MMSE functions, EXIT transfer curves
//! and Gaussian mutual information.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::numerics::{RngStream, SensingMatrix};
use crate::quadrature::integrate;
use crate::score::{bg_branch_weights, BernoulliGaussianParams, PairwiseGaussianParams, Prior, ScoreModel};
use crate::siso::{fisher_of_batch, siso_from_scores, SisoConfig, SisoMessage};
use crate::vamp::batch_mse;

/// Default maximum number of adaptive subintervals for [`mmse_bg`].
pub const DEFAULT_BG_BUDGET: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MmseKind {
    ClosedForm,
    Quadrature,
    MonteCarlo,
}

/// Per-symbol MMSE of a module as a function of its input variance.
pub trait Mmse: Send + Sync {
    fn mmse(&self, v: f64) -> f64;
    fn kind(&self) -> MmseKind;
}

#[derive(Clone, Copy, Debug)]
pub struct GaussianPriorMmse {
    pub power: f64,
}

impl Mmse for GaussianPriorMmse {
    fn mmse(&self, v: f64) -> f64 {
        v * self.power / (v + self.power)
    }
    fn kind(&self) -> MmseKind {
        MmseKind::ClosedForm
    }
}

/// Linear-Gaussian observation module described by its spectrum:
/// `(1/N)[Σ 1/(1/v + dᵢ²/σ²) + (N - k) v]`.
#[derive(Clone, Debug)]
pub struct LinearMmse {
    pub singular_values: Vec<f64>,
    pub n: usize,
    pub noise_variance: f64,
}

impl LinearMmse {
    pub fn new(singular_values: Vec<f64>, n: usize, noise_variance: f64) -> Result<Self> {
        if singular_values.len() > n {
            return Err(domain(format!(
                "{} singular values for dimension {n}",
                singular_values.len()
            )));
        }
        if !(noise_variance > 0.0) {
            return Err(domain(format!("noise variance must be positive, got {noise_variance}")));
        }
        Ok(Self {
            singular_values,
            n,
            noise_variance,
        })
    }

    pub fn from_matrix(a: &SensingMatrix, noise_variance: f64) -> Result<Self> {
        Self::new(a.singular_values().to_vec(), a.cols(), noise_variance)
    }

    /// Scalar channel `y = x + w` with `w ~ N(0, σ²)`.
    pub fn scalar(noise_variance: f64) -> Result<Self> {
        Self::new(vec![1.0], 1, noise_variance)
    }
}

impl Mmse for LinearMmse {
    fn mmse(&self, v: f64) -> f64 {
        let s2 = self.noise_variance;
        let tr: f64 = self.singular_values.iter().map(|d| 1.0 / (1.0 / v + d * d / s2)).sum();
        (tr + (self.n - self.singular_values.len()) as f64 * v) / self.n as f64
    }
    fn kind(&self) -> MmseKind {
        MmseKind::ClosedForm
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BgMmse {
    pub params: BernoulliGaussianParams,
    pub budget: usize,
}

impl Mmse for BgMmse {
    fn mmse(&self, v: f64) -> f64 {
        mmse_bg(v, &self.params, self.budget)
    }
    fn kind(&self) -> MmseKind {
        MmseKind::Quadrature
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PairwiseMmse {
    pub params: PairwiseGaussianParams,
}

impl Mmse for PairwiseMmse {
    fn mmse(&self, v: f64) -> f64 {
        self.params.mmse(v)
    }
    fn kind(&self) -> MmseKind {
        MmseKind::ClosedForm
    }
}

/// Any closure `v ↦ mmse(v)`.
pub struct FnMmse<F>(pub F, pub MmseKind);

impl<F: Fn(f64) -> f64 + Send + Sync> Mmse for FnMmse<F> {
    fn mmse(&self, v: f64) -> f64 {
        (self.0)(v)
    }
    fn kind(&self) -> MmseKind {
        self.1
    }
}

/// Monte Carlo MMSE of a prior-side score model; every variance gets its own
/// stream derived from `seed` so grid evaluation order does not matter.
pub struct ScoreModelMmse<'a> {
    pub model: &'a dyn ScoreModel,
    pub prior: Prior,
    pub samples: usize,
    pub seed: u64,
    pub stein_calibration: bool,
}

impl Mmse for ScoreModelMmse<'_> {
    fn mmse(&self, v: f64) -> f64 {
        let mut rng = RngStream::seeded(self.seed).split(&format!("se-mmse-{:016x}", v.to_bits()));
        mmse_from_score_model(
            self.model,
            &self.prior,
            v,
            self.samples,
            &mut rng,
            self.stein_calibration,
        )
        .unwrap_or(f64::NAN)
    }
    fn kind(&self) -> MmseKind {
        MmseKind::MonteCarlo
    }
}

/// Per-symbol `E[(X - E[X | X + Z])²]` for `X ~ (1-ρ)δ₀ + ρ N(0, σ_x²)` and
/// `Z ~ N(0, v)`, integrating `p(y) Var(X | y)` with adaptive Gauss-Kronrod.
/// `budget` caps the number of subintervals.
pub fn mmse_bg(v: f64, p: &BernoulliGaussianParams, budget: usize) -> f64 {
    let (rho, s2) = (p.sparsity, p.active_variance);
    if rho == 0.0 {
        return 0.0;
    }
    if rho == 1.0 {
        return v * s2 / (v + s2);
    }
    let v1 = s2 + v;
    let post_var = v * s2 / v1;
    let gain = s2 / v1;
    let density = |y: f64, var: f64| (-y * y / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
    let integrand = |y: f64| {
        let py = (1.0 - rho) * density(y, v) + rho * density(y, v1);
        if py == 0.0 {
            return 0.0;
        }
        let (pi0, pi1) = bg_branch_weights(y, v, p);
        let m1 = gain * y;
        py * (pi1 * post_var + pi1 * pi0 * m1 * m1)
    };
    let (sv, s1) = (v.sqrt(), v1.sqrt());
    let mut bps: Vec<f64> = vec![0.0];
    for k in [0.5, 1.0, 2.0, 4.0, 8.0] {
        bps.push(k * sv);
    }
    for k in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 40.0] {
        bps.push(k * s1);
    }
    bps.retain(|&b| b <= 40.0 * s1);
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    2.0 * integrate(integrand, &bps, 0.0, 1e-13, budget.max(bps.len())).value
}

/// Monte Carlo MMSE of the Tweedie denoiser built on `model`, with `samples`
/// independent instances drawn from `prior`. Per-symbol.
pub fn mmse_from_score_model(
    model: &dyn ScoreModel,
    prior: &Prior,
    v: f64,
    samples: usize,
    rng: &mut RngStream,
    stein_calibration: bool,
) -> Result<f64> {
    if samples == 0 {
        return Err(crate::Error::EmptyBatch("mmse sample budget"));
    }
    let n = model.dim();
    let x = prior.sample_batch(rng, n, samples)?;
    let sd = v.sqrt();
    let mut noise = vec![0.0; n];
    let mut x_in = x.clone();
    for j in 0..samples {
        rng.fill_standard_normal(&mut noise);
        for (xi, z) in x_in.col_as_slice_mut(j).iter_mut().zip(&noise) {
            *xi += sd * z;
        }
    }
    let input = SisoMessage::new(x_in, v)?;
    let scores = model.score_batch(input.mean.as_ref(), v, None)?;
    let cfg = SisoConfig {
        stein_calibration,
        ..Default::default()
    };
    let r = siso_from_scores(&input, scores, None, &cfg)?;
    batch_mse(r.posterior_mean.as_ref(), x.as_ref())
}

/// Monte Carlo Fisher information `E‖s‖²` of a prior-side score model.
pub fn fisher_from_score_model(
    model: &dyn ScoreModel,
    prior: &Prior,
    v: f64,
    samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let n = model.dim();
    let mut x = prior.sample_batch(rng, n, samples)?;
    let sd = v.sqrt();
    for j in 0..samples {
        for xi in x.col_as_slice_mut(j) {
            *xi += sd * rng.standard_normal();
        }
    }
    fisher_of_batch(model.score_batch(x.as_ref(), v, None)?.as_ref())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeStep {
    pub alpha: f64,
    pub v_post: f64,
    pub v_out: f64,
    pub clipped: bool,
}

/// `α = clamp(mmse(v)/v)`, `v_post = v α`, `v_out = v α/(1-α)`.
pub fn se_step(v_in: f64, mmse: &dyn Mmse, clip: (f64, f64)) -> Result<SeStep> {
    if !(v_in > 0.0) {
        return Err(domain(format!("input variance must be positive, got {v_in}")));
    }
    let raw = mmse.mmse(v_in) / v_in;
    if raw.is_nan() {
        return Err(domain(format!("mmse evaluation failed at v = {v_in}")));
    }
    let alpha = raw.clamp(clip.0, clip.1);
    Ok(SeStep {
        alpha,
        v_post: v_in * alpha,
        v_out: v_in * alpha / (1.0 - alpha),
        clipped: alpha != raw,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeConfig {
    pub max_iterations: usize,
    pub v_init: f64,
    pub stop_tolerance: f64,
    pub clip_a: (f64, f64),
    pub clip_b: (f64, f64),
}

impl Default for SeConfig {
    fn default() -> Self {
        let clip = SisoConfig::default().alpha_clip;
        Self {
            max_iterations: 20,
            v_init: 1.0,
            stop_tolerance: 1e-8,
            clip_a: clip,
            clip_b: clip,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeRow {
    pub iter: usize,
    pub v_in_a: f64,
    pub v_out_a: f64,
    pub v_in_b: f64,
    pub v_out_b: f64,
    pub alpha_a: f64,
    pub alpha_b: f64,
    /// `v_in_b · α_b`; NaN on the initialization row.
    pub predicted_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeTrace {
    pub rows: Vec<SeRow>,
    pub converged_at: Option<usize>,
}

impl SeTrace {
    pub fn last(&self) -> Option<&SeRow> {
        self.rows.last()
    }
}

/// Alternates [`se_step`] for Module A then Module B from `v_init`, with the
/// same relative stop rule as the algorithm.
pub fn run_se(config: &SeConfig, mmse_a: &dyn Mmse, mmse_b: &dyn Mmse) -> Result<SeTrace> {
    if !(config.v_init > 0.0) {
        return Err(domain(format!("v_init must be positive, got {}", config.v_init)));
    }
    let nan = f64::NAN;
    let mut trace = SeTrace {
        rows: vec![SeRow {
            iter: 0,
            v_in_a: nan,
            v_out_a: nan,
            v_in_b: nan,
            v_out_b: config.v_init,
            alpha_a: nan,
            alpha_b: nan,
            predicted_mse: nan,
        }],
        converged_at: None,
    };
    let mut v_out_b = config.v_init;
    let mut prev: Option<(f64, f64)> = None;
    for t in 1..=config.max_iterations {
        let v_in_a = v_out_b;
        let a = se_step(v_in_a, mmse_a, config.clip_a)?;
        let b = se_step(a.v_out, mmse_b, config.clip_b)?;
        trace.rows.push(SeRow {
            iter: t,
            v_in_a,
            v_out_a: a.v_out,
            v_in_b: a.v_out,
            v_out_b: b.v_out,
            alpha_a: a.alpha,
            alpha_b: b.alpha,
            predicted_mse: b.v_post,
        });
        v_out_b = b.v_out;
        if let Some((pa, pb)) = prev {
            if (a.v_out - pa).abs() / pa < config.stop_tolerance && (b.v_out - pb).abs() / pb < config.stop_tolerance {
                trace.converged_at = Some(t);
                break;
            }
        }
        prev = Some((a.v_out, b.v_out));
    }
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub v_star: f64,
    pub mutual_information_nats: f64,
    pub iterations_to_converge: usize,
}

/// Closed-form fixed point of the scalar Gaussian system, `v* = σ²` and
/// `I = ½ ln(1 + P/σ²)`, with the iteration count taken from [`run_se`]
/// started at `v_init = P`.
pub fn scalar_gaussian_fixed_point(p: f64, sigma2: f64) -> Result<FixedPointReport> {
    if !(p > 0.0 && sigma2 > 0.0) {
        return Err(domain(format!(
            "power and noise variance must be positive, got {p}, {sigma2}"
        )));
    }
    let se = run_se(
        &SeConfig {
            v_init: p,
            ..Default::default()
        },
        &LinearMmse::scalar(sigma2)?,
        &GaussianPriorMmse { power: p },
    )?;
    let iterations = se
        .rows
        .iter()
        .skip(1)
        .find(|r| (r.v_in_b - sigma2).abs() <= 1e-12 * sigma2)
        .map_or(se.rows.len() - 1, |r| r.iter);
    Ok(FixedPointReport {
        v_star: sigma2,
        mutual_information_nats: 0.5 * (p / sigma2).ln_1p(),
        iterations_to_converge: iterations,
    })
}

/// `½ Σᵢ ln(1 + λᵢ P/σ²)` in nats.
pub fn vector_gaussian_mi(eigenvalues: &[f64], p: f64, sigma2: f64) -> Result<f64> {
    if let Some(l) = eigenvalues.iter().find(|l| !(**l >= 0.0)) {
        return Err(domain(format!("eigenvalues must be non-negative, got {l}")));
    }
    Ok(eigenvalues.iter().map(|l| 0.5 * (l * p / sigma2).ln_1p()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaircaseStep {
    pub iter: usize,
    pub v_in_a: f64,
    pub v_out_a: f64,
    pub v_out_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitCurves {
    pub grid: Vec<f64>,
    /// `v ↦ v_out,A(v)`.
    pub curve_a: Vec<f64>,
    /// `v ↦ v_out,B(v)`.
    pub curve_b: Vec<f64>,
    pub staircase: Vec<StaircaseStep>,
}

/// Transfer curves of both modules on `grid` plus the SE staircase from
/// `config.v_init`.
pub fn exit_curves(mmse_a: &dyn Mmse, mmse_b: &dyn Mmse, grid: &[f64], config: &SeConfig) -> Result<ExitCurves> {
    if let Some(v) = grid.iter().find(|v| !(**v > 0.0)) {
        return Err(domain(format!("grid variances must be positive, got {v}")));
    }
    let mut curve_a = Vec::with_capacity(grid.len());
    let mut curve_b = Vec::with_capacity(grid.len());
    for &v in grid {
        curve_a.push(se_step(v, mmse_a, config.clip_a)?.v_out);
        curve_b.push(se_step(v, mmse_b, config.clip_b)?.v_out);
    }
    let se = run_se(config, mmse_a, mmse_b)?;
    let staircase = se
        .rows
        .iter()
        .skip(1)
        .map(|r| StaircaseStep {
            iter: r.iter,
            v_in_a: r.v_in_a,
            v_out_a: r.v_out_a,
            v_out_b: r.v_out_b,
        })
        .collect();
    Ok(ExitCurves {
        grid: grid.to_vec(),
        curve_a,
        curve_b,
        staircase,
    })
}

/// `n` log-spaced variances from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}
