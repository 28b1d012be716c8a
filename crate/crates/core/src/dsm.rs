//! Pairwise MLP score network trained by denoising score matching.
//!
//! The network maps `(r₁, r₂, σ)` to an estimate of the score of the
//! σ-smoothed pair density. Hidden layers use softplus, the output layer is
//! linear. Parameters live in one flat vector, layer by layer, each layer as
//! a row-major `out × in` weight block followed by its bias.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use faer::{Mat, MatMut, MatRef};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{dimension, domain, Error, Result};
use crate::numerics::{matmul_into, pairwise_sum, RngStream};
use crate::score::{score_pairwise_gaussian, PairwiseGaussianParams, ScoreKind, ScoreModel};

pub const PAIR_ARCH: [usize; 5] = [3, 128, 128, 128, 2];
pub const WEIGHT_FORMAT_VERSION: u32 = 1;
/// Pairs evaluated per forward call when scoring whole signals.
const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpScoreNet {
    arch: Vec<usize>,
    params: Vec<f64>,
    pub seed: u64,
    pub init: String,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn param_count(arch: &[usize]) -> usize {
    arch.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl MlpScoreNet {
    pub fn zeros(arch: &[usize]) -> Result<Self> {
        if arch.len() < 2 || arch.contains(&0) {
            return Err(domain(format!("invalid architecture {arch:?}")));
        }
        Ok(Self {
            arch: arch.to_vec(),
            params: vec![0.0; param_count(arch)],
            seed: 0,
            init: "zeros".into(),
        })
    }

    /// Glorot-uniform weights `U[-√(6/(fan_in+fan_out)), +…]`, zero biases.
    pub fn glorot(arch: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let mut rng = RngStream::seeded(seed).split("dsm-init");
        for l in 0..arch.len() - 1 {
            let (fan_in, fan_out) = (arch[l], arch[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = net.layer_ranges(l);
            for p in &mut net.params[w] {
                *p = rng.uniform_range(-limit, limit);
            }
        }
        net.seed = seed;
        net.init = "glorot-uniform".into();
        Ok(net)
    }

    pub fn from_params(arch: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        if params.len() != net.params.len() {
            return Err(dimension(format!(
                "architecture {arch:?} needs {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layers(&self) -> usize {
        self.arch.len() - 1
    }

    /// Index ranges of the weight block and bias of layer `l`.
    fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.arch[..l + 1].windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        let (i, o) = (self.arch[l], self.arch[l + 1]);
        (start..start + o * i, start + o * i..start + o * i + o)
    }

    fn weight(&self, l: usize) -> MatRef<'_, f64> {
        let (w, _) = self.layer_ranges(l);
        MatRef::from_row_major_slice(&self.params[w], self.arch[l + 1], self.arch[l])
    }

    fn bias(&self, l: usize) -> &[f64] {
        &self.params[self.layer_ranges(l).1]
    }

    /// Forward pass on a batch of inputs, one per column. Returns the
    /// pre-activations of every layer (the last one is the output).
    fn forward_cached(&self, input: MatRef<'_, f64>) -> Vec<Mat<f64>> {
        let b = input.ncols();
        let mut pre: Vec<Mat<f64>> = Vec::with_capacity(self.layers());
        let mut act: Mat<f64> = input.to_owned();
        for l in 0..self.layers() {
            let mut z = Mat::zeros(self.arch[l + 1], b);
            matmul_into(z.as_mut(), self.weight(l), act.as_ref());
            let bias = self.bias(l);
            for j in 0..b {
                for (zi, bi) in z.col_as_slice_mut(j).iter_mut().zip(bias) {
                    *zi += bi;
                }
            }
            if l + 1 < self.layers() {
                act = Mat::from_fn(z.nrows(), b, |i, j| softplus(z[(i, j)]));
            }
            pre.push(z);
        }
        pre
    }

    /// Outputs for a `3 × B` input batch.
    pub fn forward_batch(&self, input: MatRef<'_, f64>) -> Result<Mat<f64>> {
        if input.nrows() != self.arch[0] {
            return Err(dimension(format!(
                "network expects {} inputs, got {}",
                self.arch[0],
                input.nrows()
            )));
        }
        let b = input.ncols();
        let mut act: Mat<f64> = input.to_owned();
        for l in 0..self.layers() {
            let mut z = Mat::zeros(self.arch[l + 1], b);
            matmul_into(z.as_mut(), self.weight(l), act.as_ref());
            let bias = self.bias(l);
            let hidden = l + 1 < self.layers();
            for j in 0..b {
                for (zi, bi) in z.col_as_slice_mut(j).iter_mut().zip(bias) {
                    *zi = if hidden { softplus(*zi + bi) } else { *zi + bi };
                }
            }
            act = z;
        }
        Ok(act)
    }

    /// Validates the fixed input/output widths of a pair network.
    pub fn check_pair_io(&self) -> Result<()> {
        if self.arch[0] != 3 || *self.arch.last().expect("non-empty") != 2 {
            return Err(dimension(format!(
                "pair score network must map 3 -> 2, got {:?}",
                self.arch
            )));
        }
        Ok(())
    }
}

/// `s_θ((r₁, r₂), σ)`.
pub fn mlp_forward(net: &MlpScoreNet, pair: (f64, f64), sigma: f64) -> Result<(f64, f64)> {
    if !(sigma > 0.0) {
        return Err(domain(format!("noise level must be positive, got {sigma}")));
    }
    net.check_pair_io()?;
    let x = [pair.0, pair.1, sigma];
    let out = net.forward_batch(MatRef::from_column_major_slice(&x, 3, 1))?;
    Ok((out[(0, 0)], out[(1, 0)]))
}

/// Network inputs `(x₀ + z, σ)` and regression targets `-z/σ²`.
#[derive(Clone, Debug)]
pub struct DsmBatch {
    pub inputs: Mat<f64>,
    pub targets: Mat<f64>,
}

impl DsmBatch {
    pub fn new(x0: &[(f64, f64)], z: &[(f64, f64)], sigma: &[f64]) -> Result<Self> {
        let b = x0.len();
        if b == 0 {
            return Err(Error::EmptyBatch("dsm batch"));
        }
        if z.len() != b || sigma.len() != b {
            return Err(dimension("dsm batch components have different lengths"));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
            return Err(domain(format!("noise level must be positive, got {s}")));
        }
        let inputs = Mat::from_fn(3, b, |i, j| match i {
            0 => x0[j].0 + z[j].0,
            1 => x0[j].1 + z[j].1,
            _ => sigma[j],
        });
        let targets = Mat::from_fn(2, b, |i, j| {
            let zi = if i == 0 { z[j].0 } else { z[j].1 };
            -zi / (sigma[j] * sigma[j])
        });
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenation of two batches.
    pub fn concat(&self, other: &DsmBatch) -> DsmBatch {
        let b = self.len() + other.len();
        let pick = |a: &Mat<f64>, o: &Mat<f64>, i: usize, j: usize| {
            if j < self.len() {
                a[(i, j)]
            } else {
                o[(i, j - self.len())]
            }
        };
        DsmBatch {
            inputs: Mat::from_fn(3, b, |i, j| pick(&self.inputs, &other.inputs, i, j)),
            targets: Mat::from_fn(2, b, |i, j| pick(&self.targets, &other.targets, i, j)),
        }
    }
}

/// `(1/B) Σ ‖outputᵢ - targetᵢ‖²` for outputs produced by any means.
pub fn dsm_loss_from_outputs(outputs: MatRef<'_, f64>, batch: &DsmBatch) -> Result<f64> {
    if outputs.nrows() != 2 || outputs.ncols() != batch.len() {
        return Err(dimension("outputs do not match the batch"));
    }
    let per: Vec<f64> = (0..batch.len())
        .map(|j| {
            let d0 = outputs[(0, j)] - batch.targets[(0, j)];
            let d1 = outputs[(1, j)] - batch.targets[(1, j)];
            d0 * d0 + d1 * d1
        })
        .collect();
    Ok(pairwise_sum(&per) / batch.len() as f64)
}

/// `E‖s_θ(x₀ + z, σ) + z/σ²‖²` over the batch.
pub fn dsm_loss(net: &MlpScoreNet, batch: &DsmBatch) -> Result<f64> {
    let out = net.forward_batch(batch.inputs.as_ref())?;
    dsm_loss_from_outputs(out.as_ref(), batch)
}

/// Loss and its exact gradient, laid out like [`MlpScoreNet::params`].
pub fn dsm_gradient(net: &MlpScoreNet, batch: &DsmBatch) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("dsm batch"));
    }
    net.check_pair_io()?;
    let b = batch.len();
    let pre = net.forward_cached(batch.inputs.as_ref());
    let out = pre.last().expect("at least one layer");
    let loss = dsm_loss_from_outputs(out.as_ref(), batch)?;

    let mut grad = vec![0.0; net.params.len()];
    let scale = 2.0 / b as f64;
    let mut delta = Mat::from_fn(2, b, |i, j| scale * (out[(i, j)] - batch.targets[(i, j)]));
    for l in (0..net.layers()).rev() {
        let act: Mat<f64> = if l == 0 {
            batch.inputs.clone()
        } else {
            Mat::from_fn(pre[l - 1].nrows(), b, |i, j| softplus(pre[l - 1][(i, j)]))
        };
        let (wr, br) = net.layer_ranges(l);
        let (o, i) = (net.arch[l + 1], net.arch[l]);
        {
            let gw = MatMut::from_row_major_slice_mut(&mut grad[wr], o, i);
            matmul_into(gw, delta.as_ref(), act.as_ref().transpose());
        }
        for (k, g) in grad[br].iter_mut().enumerate() {
            let row: Vec<f64> = (0..b).map(|j| delta[(k, j)]).collect();
            *g = pairwise_sum(&row);
        }
        if l > 0 {
            let mut back = Mat::zeros(i, b);
            matmul_into(back.as_mut(), net.weight(l).transpose(), delta.as_ref());
            let p = &pre[l - 1];
            delta = Mat::from_fn(i, b, |r, c| back[(r, c)] * sigmoid(p[(r, c)]));
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(dimension("parameter, gradient and optimizer state lengths differ"));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params[k] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Single-cycle cosine annealing `lr₀ · ½(1 + cos(π t / total))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsmConfig {
    pub arch: Vec<usize>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub iterations: usize,
    pub batch: usize,
    pub lr0: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: usize,
    /// Pair every noise draw with its negation on the same clean sample.
    pub antithetic: bool,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            arch: PAIR_ARCH.to_vec(),
            sigma_min: 0.01,
            sigma_max: 3.0,
            iterations: 20_000,
            batch: 256,
            lr0: 1e-3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 1000,
            antithetic: true,
        }
    }
}

impl DsmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max) {
            return Err(domain(format!(
                "noise range must satisfy 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.batch == 0 {
            return Err(domain("training batch must be at least 1"));
        }
        if self.arch.first() != Some(&3) || self.arch.last() != Some(&2) {
            return Err(domain(format!(
                "pair score network must map 3 -> 2, got {:?}",
                self.arch
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    /// Mean minibatch loss since the previous checkpoint.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub checkpoints: Vec<Checkpoint>,
    pub final_loss: Option<f64>,
    pub wall_clock_secs: f64,
    pub seed: u64,
    pub steps: usize,
}

/// Draws one DSM minibatch: clean pairs from `sampler`, `σ ~ U[σ_min, σ_max]`,
/// `z ~ N(0, σ² I₂)`.
pub fn sample_dsm_batch<S>(sampler: &mut S, config: &DsmConfig, rng: &mut RngStream) -> Result<DsmBatch>
where
    S: FnMut(&mut RngStream) -> (f64, f64),
{
    let mut x0 = Vec::with_capacity(config.batch);
    let mut z = Vec::with_capacity(config.batch);
    let mut sigma = Vec::with_capacity(config.batch);
    while x0.len() < config.batch {
        let x = sampler(rng);
        let s = rng.uniform_range(config.sigma_min, config.sigma_max);
        let n = (s * rng.standard_normal(), s * rng.standard_normal());
        x0.push(x);
        z.push(n);
        sigma.push(s);
        if config.antithetic && x0.len() < config.batch {
            x0.push(x);
            z.push((-n.0, -n.1));
            sigma.push(s);
        }
    }
    DsmBatch::new(&x0, &z, &sigma)
}

/// Trains a Glorot-initialized network with Adam and cosine annealing on
/// freshly sampled minibatches. Deterministic given `config.seed`.
pub fn train_dsm<S>(mut sampler: S, config: &DsmConfig) -> Result<(MlpScoreNet, TrainingReport)>
where
    S: FnMut(&mut RngStream) -> (f64, f64),
{
    config.validate()?;
    let start = Instant::now();
    let mut net = MlpScoreNet::glorot(&config.arch, config.seed)?;
    let mut state = AdamState::new(net.params.len());
    state.beta1 = config.beta1;
    state.beta2 = config.beta2;
    state.eps = config.eps;
    let mut rng = RngStream::seeded(config.seed).split("dsm-data");
    let mut checkpoints = Vec::new();
    let mut window = Vec::new();
    let mut final_loss = None;
    for step in 0..config.iterations {
        let batch = sample_dsm_batch(&mut sampler, config, &mut rng)?;
        let (loss, grad) = dsm_gradient(&net, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { step, loss });
        }
        adam_step(
            &mut net.params,
            &grad,
            &mut state,
            cosine_lr(step, config.iterations, config.lr0),
        )?;
        window.push(loss);
        final_loss = Some(loss);
        let done = step + 1;
        if config.checkpoint_every > 0 && (done % config.checkpoint_every == 0 || done == config.iterations) {
            checkpoints.push(Checkpoint {
                step: done,
                loss: pairwise_sum(&window) / window.len() as f64,
            });
            window.clear();
        }
    }
    Ok((
        net,
        TrainingReport {
            checkpoints,
            final_loss,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            seed: config.seed,
            steps: config.iterations,
        },
    ))
}

#[derive(Serialize)]
struct WeightFileOut<'a> {
    format_version: u32,
    arch: &'a [usize],
    activation: &'static str,
    init: &'a str,
    seed: u64,
    weights: Vec<Vec<Box<RawValue>>>,
    biases: Vec<Vec<Box<RawValue>>>,
}

#[derive(Deserialize)]
struct WeightFileIn {
    format_version: u32,
    arch: Vec<usize>,
    activation: String,
    init: String,
    seed: u64,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

fn raw_numbers(xs: &[f64]) -> Result<Vec<Box<RawValue>>> {
    xs.iter()
        .map(|x| {
            if !x.is_finite() {
                return Err(Error::WeightFormat(format!("cannot store non-finite weight {x}")));
            }
            Ok(RawValue::from_string(format!("{x:.16e}"))?)
        })
        .collect()
}

/// Serializes the network as versioned JSON with 17 significant digits per
/// number, which round-trips every weight exactly.
pub fn weights_to_string(net: &MlpScoreNet) -> Result<String> {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..net.layers() {
        let (w, b) = net.layer_ranges(l);
        weights.push(raw_numbers(&net.params[w])?);
        biases.push(raw_numbers(&net.params[b])?);
    }
    let file = WeightFileOut {
        format_version: WEIGHT_FORMAT_VERSION,
        arch: &net.arch,
        activation: "softplus",
        init: &net.init,
        seed: net.seed,
        weights,
        biases,
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn weights_from_str(text: &str) -> Result<MlpScoreNet> {
    let file: WeightFileIn = serde_json::from_str(text)?;
    if file.format_version != WEIGHT_FORMAT_VERSION {
        return Err(Error::WeightFormat(format!(
            "unsupported format_version {} (expected {WEIGHT_FORMAT_VERSION})",
            file.format_version
        )));
    }
    if file.activation != "softplus" {
        return Err(Error::WeightFormat(format!(
            "unsupported activation {:?}",
            file.activation
        )));
    }
    let mut net = MlpScoreNet::zeros(&file.arch).map_err(|e| Error::WeightFormat(e.to_string()))?;
    let layers = net.layers();
    if file.weights.len() != layers || file.biases.len() != layers {
        return Err(dimension(format!(
            "architecture has {layers} layers but the file stores {} weight and {} bias arrays",
            file.weights.len(),
            file.biases.len()
        )));
    }
    for l in 0..layers {
        let (w, b) = net.layer_ranges(l);
        let (o, i) = (file.arch[l + 1], file.arch[l]);
        if file.weights[l].len() != w.len() {
            return Err(dimension(format!(
                "layer {l}: declared {o}x{i} needs {} weights, file has {}",
                w.len(),
                file.weights[l].len()
            )));
        }
        if file.biases[l].len() != b.len() {
            return Err(dimension(format!(
                "layer {l}: declared width {o} needs {} biases, file has {}",
                b.len(),
                file.biases[l].len()
            )));
        }
        net.params[w].copy_from_slice(&file.weights[l]);
        net.params[b].copy_from_slice(&file.biases[l]);
    }
    net.seed = file.seed;
    net.init = file.init;
    Ok(net)
}

pub fn save_weights(net: &MlpScoreNet, path: &Path) -> Result<()> {
    let text = weights_to_string(net)?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, text.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<MlpScoreNet> {
    weights_from_str(&std::fs::read_to_string(path)?)
}

/// Whole-signal score from a pair network applied to each consecutive pair
/// with `σ = √v_in`.
#[derive(Clone, Debug)]
pub struct MlpPairScore {
    pub net: Arc<MlpScoreNet>,
    pub dim: usize,
}

impl MlpPairScore {
    pub fn new(net: Arc<MlpScoreNet>, dim: usize) -> Result<Self> {
        net.check_pair_io()?;
        if !dim.is_multiple_of(2) {
            return Err(dimension(format!("pair score needs an even dimension, got {dim}")));
        }
        Ok(Self { net, dim })
    }
}

impl ScoreModel for MlpPairScore {
    fn kind(&self) -> ScoreKind {
        ScoreKind::LearnedMlp
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, x_in: MatRef<'_, f64>, v_in: f64, _y: Option<MatRef<'_, f64>>) -> Result<Mat<f64>> {
        if !(v_in > 0.0 && v_in.is_finite()) {
            return Err(domain(format!(
                "input variance must be positive and finite, got {v_in}"
            )));
        }
        if x_in.nrows() != self.dim {
            return Err(dimension(format!(
                "learned score expects dimension {}, got {}",
                self.dim,
                x_in.nrows()
            )));
        }
        let sigma = v_in.sqrt();
        let half = self.dim / 2;
        let total = half * x_in.ncols();
        let chunks: Vec<Mat<f64>> = (0..total.div_ceil(EVAL_CHUNK))
            .into_par_iter()
            .map(|c| {
                let lo = c * EVAL_CHUNK;
                let hi = (lo + EVAL_CHUNK).min(total);
                let input = Mat::from_fn(3, hi - lo, |i, k| {
                    let p = lo + k;
                    let (col, pair) = (p / half, p % half);
                    match i {
                        0 => x_in[(2 * pair, col)],
                        1 => x_in[(2 * pair + 1, col)],
                        _ => sigma,
                    }
                });
                self.net.forward_batch(input.as_ref()).expect("checked input width")
            })
            .collect();
        let mut out = Mat::zeros(self.dim, x_in.ncols());
        for (c, chunk) in chunks.iter().enumerate() {
            for k in 0..chunk.ncols() {
                let p = c * EVAL_CHUNK + k;
                let (col, pair) = (p / half, p % half);
                out[(2 * pair, col)] = chunk[(0, k)];
                out[(2 * pair + 1, col)] = chunk[(1, k)];
            }
        }
        Ok(out)
    }
}

/// Relative RMS error `√(Σ‖s_θ − s‖² / Σ‖s‖²)` of the network against the
/// analytic smoothed pairwise score, one value per entry of `sigmas`, each
/// over `pairs` fresh noisy pairs.
pub fn pairwise_score_error(
    net: &MlpScoreNet,
    params: &PairwiseGaussianParams,
    sigmas: &[f64],
    pairs: usize,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    net.check_pair_io()?;
    if pairs == 0 {
        return Err(Error::EmptyBatch("score evaluation"));
    }
    sigmas
        .par_iter()
        .enumerate()
        .map(|(k, &sigma)| {
            if !(sigma > 0.0) {
                return Err(domain(format!("noise level must be positive, got {sigma}")));
            }
            let mut r = rng.split(&format!("sigma-{k}"));
            let mut input = Mat::zeros(3, pairs);
            for p in 0..pairs {
                let (a, b) = params.sample_pair(&mut r);
                input[(0, p)] = a + sigma * r.standard_normal();
                input[(1, p)] = b + sigma * r.standard_normal();
                input[(2, p)] = sigma;
            }
            let out = net.forward_batch(input.as_ref())?;
            let mut num = Vec::with_capacity(pairs);
            let mut den = Vec::with_capacity(pairs);
            for p in 0..pairs {
                let s = score_pairwise_gaussian(&[input[(0, p)], input[(1, p)]], sigma * sigma, params)?;
                num.push((out[(0, p)] - s[0]).powi(2) + (out[(1, p)] - s[1]).powi(2));
                den.push(s[0] * s[0] + s[1] * s[1]);
            }
            Ok((pairwise_sum(&num) / pairwise_sum(&den)).sqrt())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_net_outputs_zero() {
        let net = MlpScoreNet::zeros(&PAIR_ARCH).unwrap();
        assert_eq!(mlp_forward(&net, (3.0, -1.0), 0.5).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn one_hidden_unit_by_hand() {
        // input r1 -> hidden (w=1, b=0) -> softplus -> output row (1, 2)
        let arch = [3, 1, 2];
        let params = vec![1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.5];
        let net = MlpScoreNet::from_params(&arch, params).unwrap();
        let sp = (1.0 + 1f64.exp()).ln();
        assert!((sp - 1.313262).abs() < 1e-6);
        let (a, b) = mlp_forward(&net, (1.0, 7.0), 0.3).unwrap();
        assert!((a - sp).abs() < 1e-15);
        assert!((b - (2.0 * sp + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.3, -5.0, 100.0], &mut s, 0.01).unwrap();
        for (x, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - sign * 0.01).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut w = vec![1.0];
        let mut s = AdamState::new(1);
        let mut last = 1.0f64;
        for _ in 0..100 {
            let g = [2.0 * w[0]];
            adam_step(&mut w, &g, &mut s, 0.1).unwrap();
            assert!(w[0].abs() < last.abs() || w[0].abs() < 0.5);
            last = w[0];
        }
        assert!(w[0].abs() < 0.5);
    }

    #[test]
    fn zero_iterations_returns_initial_net() {
        let cfg = DsmConfig {
            iterations: 0,
            seed: 9,
            ..Default::default()
        };
        let (net, report) = train_dsm(|r: &mut RngStream| (r.standard_normal(), 0.0), &cfg).unwrap();
        assert_eq!(net, MlpScoreNet::glorot(&PAIR_ARCH, 9).unwrap());
        assert!(report.checkpoints.is_empty());
    }

    #[test]
    fn weight_text_round_trip_is_exact() {
        let net = MlpScoreNet::glorot(&[3, 5, 2], 4).unwrap();
        let back = weights_from_str(&weights_to_string(&net).unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn truncated_weight_text_fails() {
        let text = weights_to_string(&MlpScoreNet::glorot(&[3, 4, 2], 1).unwrap()).unwrap();
        assert!(matches!(weights_from_str(&text[..text.len() / 2]), Err(Error::Json(_))));
    }

    #[test]
    fn wrong_version_fails() {
        let text = weights_to_string(&MlpScoreNet::glorot(&[3, 4, 2], 1).unwrap())
            .unwrap()
            .replace("\"format_version\":1", "\"format_version\":2");
        assert!(matches!(weights_from_str(&text), Err(Error::WeightFormat(_))));
    }
}
