//! Sampling-based observation module: likelihood gradients through a
//! forward model's vector-Jacobian product, unadjusted Langevin chains and
//! the resulting Monte Carlo posterior mean.

use std::sync::{Arc, Mutex};

use faer::{Mat, MatRef};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dimension, domain, Error, Result};
use crate::numerics::{pairwise_sum, RngStream, SensingMatrix};
use crate::score::{ScoreKind, ScoreModel};
use crate::siso::{siso_from_scores, SisoConfig, SisoMessage, SisoResult};

/// `y = f(x) + w`, `w ~ N(0, σ_n² I)`, with `J_f(x)ᵀ u` available without
/// forming the Jacobian.
pub trait ForwardModel: Send + Sync {
    fn name(&self) -> &'static str;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward(&self, x: &[f64]) -> Vec<f64>;
    fn vjp(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    fn noise_variance(&self) -> f64;
}

fn check_noise(noise: f64) -> Result<()> {
    if noise > 0.0 && noise.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("noise variance must be positive, got {noise}")))
    }
}

#[derive(Clone, Debug)]
pub struct LinearForward {
    pub matrix: Arc<SensingMatrix>,
    pub noise: f64,
    /// Row-major copy of `A` for per-chain matrix-vector products.
    dense: Vec<f64>,
}

impl LinearForward {
    pub fn new(matrix: Arc<SensingMatrix>, noise: f64) -> Result<Self> {
        check_noise(noise)?;
        let a = matrix.dense();
        let dense = (0..a.nrows())
            .flat_map(|i| (0..a.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)])
            .collect();
        Ok(Self { matrix, noise, dense })
    }
}

impl ForwardModel for LinearForward {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn input_dim(&self) -> usize {
        self.matrix.cols()
    }
    fn output_dim(&self) -> usize {
        self.matrix.rows()
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.dense
            .chunks_exact(x.len())
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
    fn vjp(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.matrix.cols()];
        for (row, ui) in self.dense.chunks_exact(out.len()).zip(u) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * ui;
            }
        }
        out
    }
    fn noise_variance(&self) -> f64 {
        self.noise
    }
}

/// Elementwise `tanh`.
#[derive(Clone, Debug)]
pub struct TanhForward {
    pub dim: usize,
    pub noise: f64,
}

impl TanhForward {
    pub fn new(dim: usize, noise: f64) -> Result<Self> {
        check_noise(noise)?;
        Ok(Self { dim, noise })
    }
}

impl ForwardModel for TanhForward {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.tanh()).collect()
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(u)
            .map(|(xi, ui)| {
                let t = xi.tanh();
                (1.0 - t * t) * ui
            })
            .collect()
    }
    fn noise_variance(&self) -> f64 {
        self.noise
    }
}

/// Elementwise saturation to `[-c, c]`.
#[derive(Clone, Debug)]
pub struct ClipForward {
    pub dim: usize,
    pub level: f64,
    pub noise: f64,
}

impl ClipForward {
    pub fn new(dim: usize, level: f64, noise: f64) -> Result<Self> {
        check_noise(noise)?;
        if !(level > 0.0) {
            return Err(domain(format!("clip level must be positive, got {level}")));
        }
        Ok(Self { dim, level, noise })
    }
}

impl ForwardModel for ClipForward {
    fn name(&self) -> &'static str {
        "clip"
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.clamp(-self.level, self.level)).collect()
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(u)
            .map(|(xi, ui)| if xi.abs() < self.level { *ui } else { 0.0 })
            .collect()
    }
    fn noise_variance(&self) -> f64 {
        self.noise
    }
}

/// `f ≡ value`: the observation carries no information about `x`.
#[derive(Clone, Debug)]
pub struct ConstantForward {
    pub dim: usize,
    pub value: Vec<f64>,
    pub noise: f64,
}

impl ForwardModel for ConstantForward {
    fn name(&self) -> &'static str {
        "constant"
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.value.len()
    }
    fn forward(&self, _x: &[f64]) -> Vec<f64> {
        self.value.clone()
    }
    fn vjp(&self, _x: &[f64], _u: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }
    fn noise_variance(&self) -> f64 {
        self.noise
    }
}

/// `∇ₓ log p(y | x) = J_f(x)ᵀ (y - f(x)) / σ_n²`.
pub fn grad_log_likelihood(model: &dyn ForwardModel, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim() || y.len() != model.output_dim() {
        return Err(dimension(format!(
            "{} model maps {} -> {}, got x of length {} and y of length {}",
            model.name(),
            model.input_dim(),
            model.output_dim(),
            x.len(),
            y.len()
        )));
    }
    let fx = model.forward(x);
    let r: Vec<f64> = y.iter().zip(&fx).map(|(a, b)| a - b).collect();
    let s2 = model.noise_variance();
    Ok(model.vjp(x, &r).into_iter().map(|g| g / s2).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepDecay {
    #[default]
    Constant,
    /// `δ_k = δ / √(k + 1)`.
    InvSqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LangevinConfig {
    /// `None` selects `0.05 · min(v_in, σ_n²)`.
    pub step_size: Option<f64>,
    pub steps: usize,
    pub burn_in: usize,
    pub particles: usize,
    pub warm_start: bool,
    pub decay: StepDecay,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            step_size: None,
            steps: 500,
            burn_in: 200,
            particles: 32,
            warm_start: true,
            decay: StepDecay::Constant,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.steps {
            return Err(domain(format!(
                "burn-in {} must be below the step count {}",
                self.burn_in, self.steps
            )));
        }
        if self.particles == 0 {
            return Err(domain("at least one particle is required"));
        }
        if let Some(d) = self.step_size {
            if !(d > 0.0) {
                return Err(domain(format!("step size must be positive, got {d}")));
            }
        }
        Ok(())
    }

    pub fn base_step(&self, v_in: f64, noise: f64) -> f64 {
        self.step_size.unwrap_or(0.05 * v_in.min(noise))
    }
}

/// One Euler-Maruyama step
/// `x + δ(∇log p(y|x) - (x - x_in)/v_in) + √(2δ) z`. Without `y` the
/// likelihood term is dropped.
#[allow(clippy::too_many_arguments)]
pub fn ula_step(
    x: &[f64],
    x_in: &[f64],
    v_in: f64,
    model: &dyn ForwardModel,
    y: Option<&[f64]>,
    delta: f64,
    rng: &mut RngStream,
    step: usize,
) -> Result<Vec<f64>> {
    if !(delta >= 0.0) {
        return Err(domain(format!("step size must be non-negative, got {delta}")));
    }
    if !(v_in > 0.0) {
        return Err(domain(format!("input variance must be positive, got {v_in}")));
    }
    let g = match y {
        Some(y) => grad_log_likelihood(model, x, y)?,
        None => vec![0.0; x.len()],
    };
    let noise = (2.0 * delta).sqrt();
    let out: Vec<f64> = x
        .iter()
        .zip(x_in)
        .zip(&g)
        .map(|((xi, xin), gi)| xi + delta * (gi - (xi - xin) / v_in) + noise * rng.standard_normal())
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "langevin chain".into(),
            step,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LangevinResult {
    pub x_post: Vec<f64>,
    /// Per-symbol empirical posterior variance of the kept samples.
    pub sample_variance: f64,
    /// Last state of every chain, usable as the next warm start.
    pub final_states: Vec<Vec<f64>>,
    pub step_size: f64,
}

/// Averages `particles` independent ULA chains over their post-burn-in
/// samples. Chains start at `warm` states when given (and warm starting is
/// on), at `x_in` otherwise; with warm starting off they start at zero.
pub fn posterior_mean_langevin(
    x_in: &[f64],
    v_in: f64,
    y: Option<&[f64]>,
    model: &dyn ForwardModel,
    config: &LangevinConfig,
    warm: Option<&[Vec<f64>]>,
    rng: &RngStream,
) -> Result<LangevinResult> {
    config.validate()?;
    if !(v_in > 0.0) {
        return Err(domain(format!("input variance must be positive, got {v_in}")));
    }
    let n = x_in.len();
    if n != model.input_dim() {
        return Err(dimension(format!(
            "model input dimension {} vs x_in of length {n}",
            model.input_dim()
        )));
    }
    let delta = config.base_step(v_in, model.noise_variance());
    let kept = (config.steps - config.burn_in) as f64;
    let chains: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>)>> = (0..config.particles)
        .into_par_iter()
        .map(|c| {
            let mut crng = rng.split(&format!("chain-{c}"));
            let mut x = match (config.warm_start, warm) {
                (true, Some(w)) if !w.is_empty() => w[c % w.len()].clone(),
                (true, _) => x_in.to_vec(),
                (false, _) => vec![0.0; n],
            };
            let mut sum = vec![0.0; n];
            let mut sum_sq = vec![0.0; n];
            for k in 0..config.steps {
                let d = match config.decay {
                    StepDecay::Constant => delta,
                    StepDecay::InvSqrt => delta / ((k + 1) as f64).sqrt(),
                };
                x = ula_step(&x, x_in, v_in, model, y, d, &mut crng, k)?;
                if k >= config.burn_in {
                    for i in 0..n {
                        sum[i] += x[i];
                        sum_sq[i] += x[i] * x[i];
                    }
                }
            }
            Ok((sum, sum_sq, x))
        })
        .collect();
    let mut sums = Vec::with_capacity(chains.len());
    let mut sqs = Vec::with_capacity(chains.len());
    let mut finals = Vec::with_capacity(chains.len());
    for c in chains {
        let (s, q, f) = c?;
        sums.push(s);
        sqs.push(q);
        finals.push(f);
    }
    let total = kept * config.particles as f64;
    let x_post: Vec<f64> = (0..n)
        .map(|i| pairwise_sum(&sums.iter().map(|s| s[i]).collect::<Vec<_>>()) / total)
        .collect();
    let var: Vec<f64> = (0..n)
        .map(|i| pairwise_sum(&sqs.iter().map(|s| s[i]).collect::<Vec<_>>()) / total - x_post[i] * x_post[i])
        .collect();
    Ok(LangevinResult {
        sample_variance: pairwise_sum(&var) / n as f64,
        x_post,
        final_states: finals,
        step_size: delta,
    })
}

/// Langevin posterior means for every column of `input`, each with its own
/// stream `rng.split("instance-j")`.
fn langevin_batch(
    input: &SisoMessage,
    y: MatRef<'_, f64>,
    model: &dyn ForwardModel,
    config: &LangevinConfig,
    warm: Option<&[Vec<Vec<f64>>]>,
    rng: &RngStream,
) -> Result<Vec<LangevinResult>> {
    if y.ncols() != input.batch_size() || y.nrows() != model.output_dim() {
        return Err(dimension(format!(
            "observations are {}x{}, expected {}x{}",
            y.nrows(),
            y.ncols(),
            model.output_dim(),
            input.batch_size()
        )));
    }
    (0..input.batch_size())
        .into_par_iter()
        .map(|j| {
            let x_in = input.mean.col_as_slice(j);
            let yj: Vec<f64> = (0..y.nrows()).map(|i| y[(i, j)]).collect();
            let w = warm.and_then(|w| w.get(j)).map(|v| v.as_slice());
            posterior_mean_langevin(
                x_in,
                input.variance,
                Some(&yj),
                model,
                config,
                w,
                &rng.split(&format!("instance-{j}")),
            )
        })
        .collect()
}

/// Langevin-driven Module A: posterior mean by sampling, implicit conditional
/// score `(x_post - x_in)/v_in`, then the usual Fisher, Onsager and
/// extrinsic steps.
pub fn hybrid_module_a(
    input: &SisoMessage,
    y: MatRef<'_, f64>,
    model: &dyn ForwardModel,
    lang_config: &LangevinConfig,
    siso_config: &SisoConfig,
    rng: &RngStream,
) -> Result<(SisoResult, Vec<LangevinResult>)> {
    let runs = langevin_batch(input, y, model, lang_config, None, rng)?;
    let v = input.variance;
    let scores = Mat::from_fn(input.dim(), input.batch_size(), |i, j| {
        (runs[j].x_post[i] - input.mean[(i, j)]) / v
    });
    Ok((siso_from_scores(input, scores, None, siso_config)?, runs))
}

/// [`ScoreModel`] view of the Langevin estimator so it can serve as Module A
/// inside the main loop. Successive calls use fresh streams and reuse the
/// previous chains' end states as warm starts.
pub struct LangevinConditionalScore {
    pub model: Arc<dyn ForwardModel>,
    pub config: LangevinConfig,
    base: RngStream,
    state: Mutex<(u64, Option<Vec<Vec<Vec<f64>>>>)>,
}

impl LangevinConditionalScore {
    pub fn new(model: Arc<dyn ForwardModel>, config: LangevinConfig, rng: RngStream) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            config,
            base: rng,
            state: Mutex::new((0, None)),
        })
    }
}

impl ScoreModel for LangevinConditionalScore {
    fn kind(&self) -> ScoreKind {
        ScoreKind::Langevin
    }

    fn dim(&self) -> usize {
        self.model.input_dim()
    }

    fn score_batch(&self, x_in: MatRef<'_, f64>, v_in: f64, y: Option<MatRef<'_, f64>>) -> Result<Mat<f64>> {
        let y = y.ok_or_else(|| domain("langevin score needs observations"))?;
        let input = SisoMessage::new(x_in.to_owned(), v_in)?;
        let mut state = self.state.lock().expect("langevin state lock");
        let rng = self.base.split(&format!("call-{}", state.0));
        let runs = langevin_batch(&input, y, self.model.as_ref(), &self.config, state.1.as_deref(), &rng)?;
        state.0 += 1;
        state.1 = Some(runs.iter().map(|r| r.final_states.clone()).collect());
        Ok(Mat::from_fn(x_in.nrows(), x_in.ncols(), |i, j| {
            (runs[j].x_post[i] - x_in[(i, j)]) / v_in
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gradient_example() {
        let m = ClipForward::new(1, 1e9, 1.0).unwrap();
        assert_eq!(grad_log_likelihood(&m, &[0.0], &[1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_step_is_identity() {
        let m = TanhForward::new(2, 0.5).unwrap();
        let mut rng = RngStream::seeded(1);
        let x = ula_step(&[0.3, -0.2], &[0.0, 0.0], 1.0, &m, Some(&[0.1, 0.1]), 0.0, &mut rng, 0).unwrap();
        assert_eq!(x, vec![0.3, -0.2]);
    }

    #[test]
    fn pure_diffusion_step() {
        let m = ConstantForward {
            dim: 1,
            value: vec![0.0],
            noise: 1.0,
        };
        let delta = 0.02;
        let mut a = RngStream::seeded(6);
        let mut b = RngStream::seeded(6);
        let x = ula_step(&[0.4], &[0.4], 1.0, &m, Some(&[3.0]), delta, &mut a, 0).unwrap();
        assert_eq!(x[0], 0.4 + (2.0 * delta).sqrt() * b.standard_normal());
    }

    #[test]
    fn config_validation() {
        let bad = LangevinConfig {
            burn_in: 500,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(LangevinConfig::default().validate().is_ok());
    }
}
