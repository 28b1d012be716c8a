//! Score functions and MMSE estimators for the priors and likelihoods the
//! solver ships with, and the adapter that turns a black-box denoiser into a
//! score through Tweedie's formula.
//!
//! Prior scores are always those of the Gaussian-smoothed marginal
//! `p(x_in) = ∫ p(x) N(x_in; x, v_in I) dx`, so `v_in > 0` is required even
//! when the prior has a point mass.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use faer::{Mat, MatRef};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dimension, domain, Result};
use crate::numerics::{mul, RngStream, SensingMatrix};

/// Default variance floor for implicit scores.
pub const DEFAULT_V_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Gaussian,
    BernoulliGaussian,
    PairwiseGaussian,
    LinearLmmse,
    LearnedMlp,
    ImplicitDenoiser,
    Langevin,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Gaussian => "gaussian",
            ScoreKind::BernoulliGaussian => "bernoulli-gaussian",
            ScoreKind::PairwiseGaussian => "pairwise-gaussian",
            ScoreKind::LinearLmmse => "linear-lmmse",
            ScoreKind::LearnedMlp => "learned-mlp",
            ScoreKind::ImplicitDenoiser => "implicit-denoiser",
            ScoreKind::Langevin => "langevin",
        }
    }
}

/// Maps `(x_in, v_in[, y])` to the score of the smoothed (conditional) density.
///
/// Batches hold one instance per column. `y` is only consulted by
/// observation-side models.
pub trait ScoreModel: Send + Sync {
    fn kind(&self) -> ScoreKind;

    fn dim(&self) -> usize;

    fn score_batch(&self, x_in: MatRef<'_, f64>, v_in: f64, y: Option<MatRef<'_, f64>>) -> Result<Mat<f64>>;

    /// Closed-form `E‖s‖²` at `v_in` when the model has one.
    fn expected_fisher(&self, _v_in: f64) -> Option<f64> {
        None
    }

    /// Cumulative number of inputs whose variance was raised to a floor.
    fn variance_clamps(&self) -> usize {
        0
    }

    /// Single-instance convenience wrapper around [`ScoreModel::score_batch`].
    fn score(&self, x_in: &[f64], v_in: f64, y: Option<&[f64]>) -> Result<Vec<f64>> {
        let x = MatRef::from_column_major_slice(x_in, x_in.len(), 1);
        let y = y.map(|y| MatRef::from_column_major_slice(y, y.len(), 1));
        let s = self.score_batch(x, v_in, y)?;
        Ok(s.col_as_slice(0).to_vec())
    }
}

fn check_variance(v_in: f64) -> Result<()> {
    if v_in > 0.0 && v_in.is_finite() {
        Ok(())
    } else {
        Err(domain(format!(
            "input variance must be positive and finite, got {v_in}"
        )))
    }
}

fn check_batch(model: &dyn ScoreModel, x_in: MatRef<'_, f64>) -> Result<()> {
    if x_in.nrows() != model.dim() {
        return Err(dimension(format!(
            "{} score expects dimension {}, got {}",
            model.kind().name(),
            model.dim(),
            x_in.nrows()
        )));
    }
    Ok(())
}

/// Applies `f(input_column, output_column)` to every column; columns are
/// independent so the result does not depend on scheduling.
pub(crate) fn map_columns<F>(x: MatRef<'_, f64>, out_rows: usize, f: F) -> Mat<f64>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let n = x.nrows();
    let cols: Vec<Vec<f64>> = (0..x.ncols())
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| x[(i, j)]).collect();
            let mut out = vec![0.0; out_rows];
            f(&col, &mut out);
            out
        })
        .collect();
    Mat::from_fn(out_rows, x.ncols(), |i, j| cols[j][i])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPriorParams {
    pub power: f64,
}

impl GaussianPriorParams {
    pub fn new(power: f64) -> Result<Self> {
        if !(power > 0.0) {
            return Err(domain(format!("prior power must be positive, got {power}")));
        }
        Ok(Self { power })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BernoulliGaussianParams {
    pub sparsity: f64,
    pub active_variance: f64,
}

impl BernoulliGaussianParams {
    pub fn new(sparsity: f64, active_variance: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&sparsity) {
            return Err(domain(format!("sparsity must lie in [0, 1], got {sparsity}")));
        }
        if !(active_variance > 0.0) {
            return Err(domain(format!(
                "active variance must be positive, got {active_variance}"
            )));
        }
        Ok(Self {
            sparsity,
            active_variance,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseGaussianParams {
    pub variance: f64,
    pub correlation: f64,
}

impl PairwiseGaussianParams {
    pub fn new(variance: f64, correlation: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(domain(format!("pair variance must be positive, got {variance}")));
        }
        if !(correlation.abs() < 1.0) {
            return Err(domain(format!("correlation must lie in (-1, 1), got {correlation}")));
        }
        Ok(Self { variance, correlation })
    }

    /// `(a, b)` with `Σ + v I = [[a, b], [b, a]]`.
    fn smoothed_cov(&self, v_in: f64) -> (f64, f64) {
        (self.variance + v_in, self.correlation * self.variance)
    }
}

#[derive(Clone, Debug)]
pub struct LinearLikelihood {
    pub matrix: Arc<SensingMatrix>,
    pub noise_variance: f64,
}

impl LinearLikelihood {
    pub fn new(matrix: Arc<SensingMatrix>, noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0) {
            return Err(domain(format!("noise variance must be positive, got {noise_variance}")));
        }
        Ok(Self { matrix, noise_variance })
    }

    /// `Tr(Σ_post)` for the Gaussian posterior given `x_in` and `y`.
    pub fn posterior_trace(&self, v_in: f64) -> f64 {
        let a = &self.matrix;
        let k = a.singular_values().len();
        let tr: f64 = a
            .singular_values()
            .iter()
            .map(|d| 1.0 / (1.0 / v_in + d * d / self.noise_variance))
            .sum();
        tr + (a.cols() - k) as f64 * v_in
    }

    /// `E‖s(x_in|y)‖² = Σ dᵢ² / (σ_w² + v dᵢ²)`.
    pub fn fisher(&self, v_in: f64) -> f64 {
        self.matrix
            .singular_values()
            .iter()
            .map(|d| d * d / (self.noise_variance + v_in * d * d))
            .sum()
    }
}

pub fn score_gaussian_prior(x_in: &[f64], v_in: f64, p: &GaussianPriorParams) -> Result<Vec<f64>> {
    check_variance(v_in)?;
    let denom = p.power + v_in;
    Ok(x_in.iter().map(|x| -x / denom).collect())
}

/// Score of `(1-ρ) N(0, v) + ρ N(0, σ_x² + v)` at one point, via the
/// posterior weight of the active branch computed in the log domain.
pub fn bg_score_scalar(x: f64, v_in: f64, p: &BernoulliGaussianParams) -> f64 {
    let v0 = v_in;
    let v1 = p.active_variance + v_in;
    let pi1 = bg_active_weight(x, v_in, p);
    -(x * (1.0 - pi1)) / v0 - (x * pi1) / v1
}

/// Posterior probability that the coordinate is active given `x_in = x`.
pub fn bg_active_weight(x: f64, v_in: f64, p: &BernoulliGaussianParams) -> f64 {
    bg_branch_weights(x, v_in, p).1
}

/// `(P(inactive | x_in), P(active | x_in))`, each computed without
/// cancellation.
pub fn bg_branch_weights(x: f64, v_in: f64, p: &BernoulliGaussianParams) -> (f64, f64) {
    let v0 = v_in;
    let v1 = p.active_variance + v_in;
    let l0 = (1.0 - p.sparsity).ln() - 0.5 * v0.ln() - x * x / (2.0 * v0);
    let l1 = p.sparsity.ln() - 0.5 * v1.ln() - x * x / (2.0 * v1);
    let d = l1 - l0;
    if d >= 0.0 {
        let e = (-d).exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    } else {
        let e = d.exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    }
}

/// `ln p(x_in)` of the smoothed Bernoulli-Gaussian marginal at one point.
pub fn bg_log_marginal(x: f64, v_in: f64, p: &BernoulliGaussianParams) -> f64 {
    let v0 = v_in;
    let v1 = p.active_variance + v_in;
    let l0 = (1.0 - p.sparsity).ln() - 0.5 * (2.0 * PI * v0).ln() - x * x / (2.0 * v0);
    let l1 = p.sparsity.ln() - 0.5 * (2.0 * PI * v1).ln() - x * x / (2.0 * v1);
    let m = l0.max(l1);
    m + ((l0 - m).exp() + (l1 - m).exp()).ln()
}

pub fn score_bg_prior(x_in: &[f64], v_in: f64, p: &BernoulliGaussianParams) -> Result<Vec<f64>> {
    check_variance(v_in)?;
    Ok(x_in.iter().map(|&x| bg_score_scalar(x, v_in, p)).collect())
}

fn pair_score(r1: f64, r2: f64, v_in: f64, p: &PairwiseGaussianParams) -> (f64, f64) {
    let (a, b) = p.smoothed_cov(v_in);
    let k = b / a;
    let schur = a - k * b;
    (-(r1 - k * r2) / schur, -(r2 - k * r1) / schur)
}

/// `s = -(Σ + v I)⁻¹ r` for each consecutive pair `r = (x_{2k}, x_{2k+1})`.
pub fn score_pairwise_gaussian(x_in: &[f64], v_in: f64, p: &PairwiseGaussianParams) -> Result<Vec<f64>> {
    check_variance(v_in)?;
    if !x_in.len().is_multiple_of(2) {
        return Err(dimension(format!(
            "pairwise prior needs an even dimension, got {}",
            x_in.len()
        )));
    }
    let mut out = vec![0.0; x_in.len()];
    for (r, s) in x_in.chunks_exact(2).zip(out.chunks_exact_mut(2)) {
        let (s1, s2) = pair_score(r[0], r[1], v_in, p);
        s[0] = s1;
        s[1] = s2;
    }
    Ok(out)
}

fn check_linear_dims(x_in: &[f64], y: &[f64], lik: &LinearLikelihood) -> Result<()> {
    let a = &lik.matrix;
    if x_in.len() != a.cols() || y.len() != a.rows() {
        return Err(dimension(format!(
            "linear model is {}x{}, got x_in of length {} and y of length {}",
            a.rows(),
            a.cols(),
            x_in.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Wiener filter `(I/v + AᵀA/σ²)⁻¹ (x_in/v + Aᵀy/σ²)` evaluated in the SVD
/// basis, together with `Tr(Σ_post)`.
pub fn lmmse_estimate(x_in: &[f64], v_in: f64, y: &[f64], lik: &LinearLikelihood) -> Result<(Vec<f64>, f64)> {
    check_variance(v_in)?;
    check_linear_dims(x_in, y, lik)?;
    let a = &lik.matrix;
    let s2 = lik.noise_variance;
    let xt = mul(
        a.right().transpose(),
        MatRef::from_column_major_slice(x_in, x_in.len(), 1),
    );
    let yt = mul(a.left().transpose(), MatRef::from_column_major_slice(y, y.len(), 1));
    let mut z = xt.clone();
    for (i, &d) in a.singular_values().iter().enumerate() {
        z[(i, 0)] = (xt[(i, 0)] / v_in + d * yt[(i, 0)] / s2) / (1.0 / v_in + d * d / s2);
    }
    let x_hat = mul(a.right(), z.as_ref());
    Ok((x_hat.col_as_slice(0).to_vec(), lik.posterior_trace(v_in)))
}

/// Conditional score of the linear-Gaussian model,
/// `s = (x̂_LMMSE - x_in)/v_in = V S̃` with `S̃ᵢ = dᵢ(ỹᵢ - dᵢx̃ᵢ)/(σ² + v dᵢ²)`,
/// written without the cancellation in `x̂ - x_in`.
pub fn conditional_score_linear(x_in: &[f64], v_in: f64, y: &[f64], lik: &LinearLikelihood) -> Result<Vec<f64>> {
    check_variance(v_in)?;
    check_linear_dims(x_in, y, lik)?;
    let model = LinearLmmseScore::new(lik.clone());
    model.score(x_in, v_in, Some(y))
}

#[derive(Clone, Debug)]
pub struct ImplicitScore {
    pub score: Vec<f64>,
    /// `v_in` was below the floor and the floor was used instead.
    pub clamped: bool,
}

/// Reverse Tweedie: `(η(x_in) - x_in) / max(v_in, v_floor)`.
pub fn implicit_score_from_denoiser<D>(denoiser: D, x_in: &[f64], v_in: f64, v_floor: f64) -> Result<ImplicitScore>
where
    D: Fn(&[f64], f64) -> Vec<f64>,
{
    if !(v_in > 0.0) {
        return Err(domain(format!("input variance must be positive, got {v_in}")));
    }
    let clamped = v_in < v_floor;
    let v = if clamped { v_floor } else { v_in };
    let eta = denoiser(x_in, v);
    if eta.len() != x_in.len() {
        return Err(dimension(format!(
            "denoiser returned {} values for an input of length {}",
            eta.len(),
            x_in.len()
        )));
    }
    Ok(ImplicitScore {
        score: eta.iter().zip(x_in).map(|(e, x)| (e - x) / v).collect(),
        clamped,
    })
}

#[derive(Clone, Debug)]
pub struct GaussianPriorScore {
    pub dim: usize,
    pub params: GaussianPriorParams,
}

impl ScoreModel for GaussianPriorScore {
    fn kind(&self) -> ScoreKind {
        ScoreKind::Gaussian
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn score_batch(&self, x_in: MatRef<'_, f64>, v_in: f64, _y: Option<MatRef<'_, f64>>) -> Result<Mat<f64>> {
        check_variance(v_in)?;
        check_batch(self, x_in)?;
        let denom = self.params.power + v_in;
        Ok(Mat::from_fn(x_in.nrows(), x_in.ncols(), |i, j| -x_in[(i, j)] / denom))
    }
    fn expected_fisher(&self, v_in: f64) -> Option<f64> {
        Some(self.dim as f64 / (self.params.power + v_in))
    }
}

#[derive(Clone, Debug)]
pub struct BernoulliGaussianScore {
    pub dim: usize,
    pub params: BernoulliGaussianParams,
}

impl ScoreModel for BernoulliGaussianScore {
    fn kind(&self) -> ScoreKind {
        ScoreKind::BernoulliGaussian
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn score_batch(&self, x_in: MatRef<'_, f64>, v_in: f64, _y: Option<MatRef<'_, f64>>) -> Result<Mat<f64>> {
        check_variance(v_in)?;
        check_batch(self, x_in)?;
        let p = self.params;
        Ok(map_columns(x_in, self.dim, |x, s| {
            for (si, &xi) in s.iter_mut().zip(x) {
                *si = bg_score_scalar(xi, v_in, &p);
            }
        }))
    }
}

#[derive(Clone, Debug)]
pub struct PairwiseGaussianScore {
    pub dim: usize,
    pub params: PairwiseGaussianParams,
}

impl PairwiseGaussianScore {
    pub fn new(dim: usize, params: PairwiseGaussianParams) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(dimension(format!("pairwise prior needs an even dimension, got {dim}")));
        }
        Ok(Self { dim, params })
    }
}

impl ScoreModel for PairwiseGaussianScore {
    fn kind(&self) -> ScoreKind {
        ScoreKind::PairwiseGaussian
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn score_batch(&self, x_in: MatRef<'_, f64>, v_in: f64, _y: Option<MatRef<'_, f64>>) -> Result<Mat<f64>> {
        check_variance(v_in)?;
        check_batch(self, x_in)?;
        let p = self.params;
        Ok(map_columns(x_in, self.dim, |x, s| {
            for (r, o) in x.chunks_exact(2).zip(s.chunks_exact_mut(2)) {
                let (s1, s2) = pair_score(r[0], r[1], v_in, &p);
                o[0] = s1;
                o[1] = s2;
            }
        }))
    }
    fn expected_fisher(&self, v_in: f64) -> Option<f64> {
        let (a, b) = self.params.smoothed_cov(v_in);
        Some((self.dim / 2) as f64 * 2.0 * a / (a * a - b * b))
    }
}

/// Conditional score of `y = A x + w` given `x_in`, batched in the SVD basis.
#[derive(Clone, Debug)]
pub struct LinearLmmseScore {
    pub likelihood: LinearLikelihood,
}

impl LinearLmmseScore {
    pub fn new(likelihood: LinearLikelihood) -> Self {
        Self { likelihood }
    }
}

impl ScoreModel for LinearLmmseScore {
    fn kind(&self) -> ScoreKind {
        ScoreKind::LinearLmmse
    }
    fn dim(&self) -> usize {
        self.likelihood.matrix.cols()
    }
    fn score_batch(&self, x_in: MatRef<'_, f64>, v_in: f64, y: Option<MatRef<'_, f64>>) -> Result<Mat<f64>> {
        check_variance(v_in)?;
        check_batch(self, x_in)?;
        let a = &self.likelihood.matrix;
        let y = y.ok_or_else(|| domain("linear-lmmse score needs observations"))?;
        if y.nrows() != a.rows() || y.ncols() != x_in.ncols() {
            return Err(dimension(format!(
                "observations are {}x{}, expected {}x{}",
                y.nrows(),
                y.ncols(),
                a.rows(),
                x_in.ncols()
            )));
        }
        let s2 = self.likelihood.noise_variance;
        let xt = mul(a.right().transpose(), x_in);
        let yt = mul(a.left().transpose(), y);
        let d = a.singular_values();
        let mut st = Mat::zeros(a.cols(), x_in.ncols());
        for j in 0..x_in.ncols() {
            let (xc, yc) = (xt.col_as_slice(j), yt.col_as_slice(j));
            let sc = st.col_as_slice_mut(j);
            for (i, &di) in d.iter().enumerate() {
                sc[i] = di * (yc[i] - di * xc[i]) / (s2 + v_in * di * di);
            }
        }
        Ok(mul(a.right(), st.as_ref()))
    }
    fn expected_fisher(&self, v_in: f64) -> Option<f64> {
        Some(self.likelihood.fisher(v_in))
    }
}

/// Black-box denoiser `η(x_in, v_in) ≈ E[x | x_in]`.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, x_in: &[f64], v_in: f64) -> Vec<f64>;
}

impl<F> Denoiser for F
where
    F: Fn(&[f64], f64) -> Vec<f64> + Send + Sync,
{
    fn denoise(&self, x_in: &[f64], v_in: f64) -> Vec<f64> {
        self(x_in, v_in)
    }
}

/// Score recovered from a denoiser by reverse Tweedie.
pub struct ImplicitDenoiserScore<D> {
    pub dim: usize,
    pub denoiser: D,
    pub v_floor: f64,
    clamps: AtomicUsize,
}

impl<D: Denoiser> ImplicitDenoiserScore<D> {
    pub fn new(dim: usize, denoiser: D, v_floor: f64) -> Self {
        Self {
            dim,
            denoiser,
            v_floor,
            clamps: AtomicUsize::new(0),
        }
    }
}

impl<D: Denoiser> ScoreModel for ImplicitDenoiserScore<D> {
    fn kind(&self) -> ScoreKind {
        ScoreKind::ImplicitDenoiser
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn score_batch(&self, x_in: MatRef<'_, f64>, v_in: f64, _y: Option<MatRef<'_, f64>>) -> Result<Mat<f64>> {
        check_variance(v_in)?;
        check_batch(self, x_in)?;
        if v_in < self.v_floor {
            self.clamps.fetch_add(x_in.ncols(), Ordering::Relaxed);
        }
        let v = v_in.max(self.v_floor);
        let mut failed = None;
        let out = map_columns(x_in, self.dim, |x, s| {
            let eta = self.denoiser.denoise(x, v);
            if eta.len() == x.len() {
                for ((si, e), xi) in s.iter_mut().zip(&eta).zip(x) {
                    *si = (e - xi) / v;
                }
            } else {
                s.fill(f64::NAN);
            }
        });
        if out.col_iter().any(|c| c.iter().any(|v| v.is_nan())) {
            failed = Some(());
        }
        match failed {
            Some(()) => Err(dimension("denoiser output length does not match its input")),
            None => Ok(out),
        }
    }
    fn variance_clamps(&self) -> usize {
        self.clamps.load(Ordering::Relaxed)
    }
}

/// Signal priors with samplers and analytic scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Prior {
    Gaussian(GaussianPriorParams),
    BernoulliGaussian(BernoulliGaussianParams),
    PairwiseGaussian(PairwiseGaussianParams),
}

impl Prior {
    /// Per-symbol second moment `E[x_i²]`.
    pub fn variance(&self) -> f64 {
        match self {
            Prior::Gaussian(p) => p.power,
            Prior::BernoulliGaussian(p) => p.sparsity * p.active_variance,
            Prior::PairwiseGaussian(p) => p.variance,
        }
    }

    pub fn sample(&self, rng: &mut RngStream, n: usize) -> Result<Vec<f64>> {
        match self {
            Prior::Gaussian(p) => {
                let sd = p.power.sqrt();
                Ok((0..n).map(|_| sd * rng.standard_normal()).collect())
            }
            Prior::BernoulliGaussian(p) => {
                let sd = p.active_variance.sqrt();
                Ok((0..n)
                    .map(|_| {
                        let active = rng.uniform() < p.sparsity;
                        let g = rng.standard_normal();
                        if active {
                            sd * g
                        } else {
                            0.0
                        }
                    })
                    .collect())
            }
            Prior::PairwiseGaussian(p) => {
                if !n.is_multiple_of(2) {
                    return Err(dimension(format!("pairwise prior needs an even dimension, got {n}")));
                }
                let mut out = Vec::with_capacity(n);
                for _ in 0..n / 2 {
                    let (a, b) = p.sample_pair(rng);
                    out.push(a);
                    out.push(b);
                }
                Ok(out)
            }
        }
    }

    /// `n x b` batch, one independent draw per column.
    pub fn sample_batch(&self, rng: &mut RngStream, n: usize, b: usize) -> Result<Mat<f64>> {
        let mut m = Mat::zeros(n, b);
        for j in 0..b {
            let x = self.sample(rng, n)?;
            m.col_as_slice_mut(j).copy_from_slice(&x);
        }
        Ok(m)
    }

    pub fn score_model(&self, n: usize) -> Result<Arc<dyn ScoreModel>> {
        Ok(match *self {
            Prior::Gaussian(params) => Arc::new(GaussianPriorScore { dim: n, params }),
            Prior::BernoulliGaussian(params) => Arc::new(BernoulliGaussianScore { dim: n, params }),
            Prior::PairwiseGaussian(params) => Arc::new(PairwiseGaussianScore::new(n, params)?),
        })
    }
}

impl PairwiseGaussianParams {
    /// One correlated pair via `x₂ = ξ x₁ + √(1-ξ²) g` scaled by `σ`.
    pub fn sample_pair(&self, rng: &mut RngStream) -> (f64, f64) {
        let sd = self.variance.sqrt();
        let g1 = rng.standard_normal();
        let g2 = rng.standard_normal();
        let xi = self.correlation;
        (sd * g1, sd * (xi * g1 + (1.0 - xi * xi).sqrt() * g2))
    }

    /// Log density of the smoothed pair `N(0, Σ + v I)`.
    pub fn log_density(&self, r1: f64, r2: f64, v_in: f64) -> f64 {
        let (a, b) = self.smoothed_cov(v_in);
        let det = a * a - b * b;
        let q = (a * r1 * r1 - 2.0 * b * r1 * r2 + a * r2 * r2) / det;
        -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * q
    }

    /// Per-symbol MMSE `½ Tr(Σ - Σ (Σ + v I)⁻¹ Σ)`.
    pub fn mmse(&self, v_in: f64) -> f64 {
        // Σ and Σ + vI share eigenvectors; eigenvalues are σ²(1 ± ξ).
        let l1 = self.variance * (1.0 + self.correlation);
        let l2 = self.variance * (1.0 - self.correlation);
        0.5 * (l1 * v_in / (l1 + v_in) + l2 * v_in / (l2 + v_in))
    }
}
