//! The score-driven SISO block: Tweedie posterior mean, Fisher-information
//! Onsager coefficient, Stein calibration and extrinsic message construction.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{dimension, domain, Error, Result};
use crate::numerics::{dot, norm_sq, pairwise_sum};
use crate::score::{ScoreModel, DEFAULT_V_FLOOR};

/// Mean/variance message for a batch of instances that share one variance.
/// Column `j` of `mean` belongs to instance `j`.
#[derive(Clone, Debug)]
pub struct SisoMessage {
    pub mean: Mat<f64>,
    pub variance: f64,
}

impl SisoMessage {
    pub fn new(mean: Mat<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(domain(format!(
                "message variance must be positive and finite, got {variance}"
            )));
        }
        Ok(Self { mean, variance })
    }

    pub fn single(mean: &[f64], variance: f64) -> Result<Self> {
        Self::new(Mat::from_fn(mean.len(), 1, |i, _| mean[i]), variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn batch_size(&self) -> usize {
        self.mean.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.variance.is_finite() && self.mean.col_iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

/// How the Fisher information behind the Onsager coefficient is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherMode {
    /// Sample average of squared score norms over the batch.
    #[default]
    Minibatch,
    /// The model's closed-form expectation; errors if it has none.
    Expected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SisoConfig {
    pub alpha_clip: (f64, f64),
    pub stein_calibration: bool,
    pub fisher_mode: FisherMode,
    pub v_floor: f64,
}

impl Default for SisoConfig {
    fn default() -> Self {
        Self {
            alpha_clip: (1e-6, 1.0 - 1e-6),
            stein_calibration: false,
            fisher_mode: FisherMode::Minibatch,
            v_floor: DEFAULT_V_FLOOR,
        }
    }
}

impl SisoConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.alpha_clip;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(domain(format!(
                "alpha clip must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
            )));
        }
        if !(self.v_floor > 0.0) {
            return Err(domain(format!("variance floor must be positive, got {}", self.v_floor)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SisoResult {
    pub extrinsic: SisoMessage,
    pub posterior_mean: Mat<f64>,
    pub posterior_variance: f64,
    pub alpha: f64,
    /// `1 - (v/N) J` before clipping.
    pub alpha_raw: f64,
    pub alpha_clipped: bool,
    pub fisher_estimate: f64,
    pub calibration: f64,
    /// The Stein denominator was degenerate and `c = 1` was used.
    pub calibration_fallback: bool,
}

/// `x_in + v_in * score`.
pub fn tweedie_posterior_mean(x_in: &[f64], v_in: f64, score: &[f64]) -> Result<Vec<f64>> {
    if !(v_in > 0.0) {
        return Err(domain(format!("input variance must be positive, got {v_in}")));
    }
    if x_in.len() != score.len() {
        return Err(dimension(format!(
            "x_in has length {}, score has length {}",
            x_in.len(),
            score.len()
        )));
    }
    Ok(x_in.iter().zip(score).map(|(x, s)| x + v_in * s).collect())
}

/// `Ĵ = (1/B) Σᵢ ‖sᵢ‖²`.
pub fn estimate_fisher_minibatch(scores: &[Vec<f64>], n: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyBatch("fisher estimate"));
    }
    if let Some(s) = scores.iter().find(|s| s.len() != n) {
        return Err(dimension(format!(
            "score of length {} in a batch of dimension {n}",
            s.len()
        )));
    }
    let norms: Vec<f64> = scores.iter().map(|s| norm_sq(s)).collect();
    Ok(pairwise_sum(&norms) / scores.len() as f64)
}

/// Batch form of [`estimate_fisher_minibatch`] over the columns of `scores`.
pub fn fisher_of_batch(scores: MatRef<'_, f64>) -> Result<f64> {
    if scores.ncols() == 0 {
        return Err(Error::EmptyBatch("fisher estimate"));
    }
    let norms: Vec<f64> = (0..scores.ncols())
        .map(|j| norm_sq(scores.col(j).try_as_col_major().expect("contiguous column").as_slice()))
        .collect();
    Ok(pairwise_sum(&norms) / scores.ncols() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Onsager {
    pub alpha: f64,
    pub raw: f64,
    pub clipped: bool,
}

/// `α = clamp(1 - (v_in/N) J, lo, hi)`.
pub fn onsager_coefficient(v_in: f64, fisher: f64, n: usize, clip: (f64, f64)) -> Result<Onsager> {
    if !(v_in > 0.0) {
        return Err(domain(format!("input variance must be positive, got {v_in}")));
    }
    if !(fisher >= 0.0) {
        return Err(domain(format!("fisher information must be non-negative, got {fisher}")));
    }
    let raw = 1.0 - v_in / n as f64 * fisher;
    let alpha = raw.clamp(clip.0, clip.1);
    Ok(Onsager {
        alpha,
        raw,
        clipped: alpha != raw,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub c: f64,
    pub fallback: bool,
}

fn calibration_from_moment(moment: f64, n: usize) -> Calibration {
    let n = n as f64;
    if !(moment.abs() >= 1e-12 * n) {
        Calibration { c: 1.0, fallback: true }
    } else {
        Calibration {
            c: -n / moment,
            fallback: false,
        }
    }
}

/// `c = -N / ((1/B) Σ rᵢᵀ sᵢ)`, falling back to `c = 1` when the denominator
/// is below `1e-12 N` in magnitude.
pub fn stein_calibration(inputs: &[Vec<f64>], scores: &[Vec<f64>], n: usize) -> Result<Calibration> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch("stein calibration"));
    }
    if inputs.len() != scores.len() {
        return Err(dimension(format!(
            "{} inputs but {} scores",
            inputs.len(),
            scores.len()
        )));
    }
    let mut terms = Vec::with_capacity(inputs.len());
    for (r, s) in inputs.iter().zip(scores) {
        if r.len() != n || s.len() != n {
            return Err(dimension(format!("expected vectors of length {n}")));
        }
        terms.push(dot(r, s));
    }
    Ok(calibration_from_moment(pairwise_sum(&terms) / inputs.len() as f64, n))
}

fn stein_calibration_batch(inputs: MatRef<'_, f64>, scores: MatRef<'_, f64>) -> Calibration {
    let terms: Vec<f64> = (0..inputs.ncols())
        .map(|j| {
            let r = inputs.col(j).try_as_col_major().expect("contiguous column");
            let s = scores.col(j).try_as_col_major().expect("contiguous column");
            dot(r.as_slice(), s.as_slice())
        })
        .collect();
    calibration_from_moment(pairwise_sum(&terms) / inputs.ncols() as f64, inputs.nrows())
}

/// Removes the input's contribution: mean `(x_post - α x_in)/(1-α)`,
/// variance `v_in α/(1-α)`.
pub fn extrinsic_message(x_in: MatRef<'_, f64>, v_in: f64, x_post: MatRef<'_, f64>, alpha: f64) -> Result<SisoMessage> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!(
            "alpha must lie strictly inside (0, 1), got {alpha}"
        )));
    }
    if x_in.nrows() != x_post.nrows() || x_in.ncols() != x_post.ncols() {
        return Err(dimension("x_in and x_post shapes differ"));
    }
    let k = 1.0 - alpha;
    let mean = Mat::from_fn(x_in.nrows(), x_in.ncols(), |i, j| {
        (x_post[(i, j)] - alpha * x_in[(i, j)]) / k
    });
    SisoMessage::new(mean, v_in * alpha / k)
}

/// Completes a SISO evaluation once scores on the batch are available.
///
/// `expected_fisher` is consulted only in [`FisherMode::Expected`].
pub fn siso_from_scores(
    input: &SisoMessage,
    scores: Mat<f64>,
    expected_fisher: Option<f64>,
    config: &SisoConfig,
) -> Result<SisoResult> {
    config.validate()?;
    let x_in = input.mean.as_ref();
    let v = input.variance;
    if scores.nrows() != x_in.nrows() || scores.ncols() != x_in.ncols() {
        return Err(dimension(format!(
            "scores are {}x{}, input is {}x{}",
            scores.nrows(),
            scores.ncols(),
            x_in.nrows(),
            x_in.ncols()
        )));
    }
    if x_in.ncols() == 0 {
        return Err(Error::EmptyBatch("siso batch"));
    }
    let cal = if config.stein_calibration {
        stein_calibration_batch(x_in, scores.as_ref())
    } else {
        Calibration {
            c: 1.0,
            fallback: false,
        }
    };
    let mut scores = scores;
    if cal.c != 1.0 {
        for j in 0..scores.ncols() {
            for s in scores.col_as_slice_mut(j) {
                *s *= cal.c;
            }
        }
    }
    let fisher = match config.fisher_mode {
        FisherMode::Minibatch => fisher_of_batch(scores.as_ref())?,
        FisherMode::Expected => {
            let j = expected_fisher.ok_or_else(|| domain("model has no closed-form Fisher information"))?;
            cal.c * cal.c * j
        }
    };
    let onsager = onsager_coefficient(v, fisher, x_in.nrows(), config.alpha_clip)?;
    let x_post = Mat::from_fn(x_in.nrows(), x_in.ncols(), |i, j| x_in[(i, j)] + v * scores[(i, j)]);
    let extrinsic = extrinsic_message(x_in, v, x_post.as_ref(), onsager.alpha)?;
    Ok(SisoResult {
        extrinsic,
        posterior_mean: x_post,
        posterior_variance: v * onsager.alpha,
        alpha: onsager.alpha,
        alpha_raw: onsager.raw,
        alpha_clipped: onsager.clipped,
        fisher_estimate: fisher,
        calibration: cal.c,
        calibration_fallback: cal.fallback,
    })
}

/// Runs one module: scores on the whole batch, optional Stein calibration,
/// batch Fisher estimate, Onsager coefficient, Tweedie and extrinsic output.
pub fn siso_forward(
    model: &dyn ScoreModel,
    input: &SisoMessage,
    y: Option<MatRef<'_, f64>>,
    config: &SisoConfig,
) -> Result<SisoResult> {
    let scores = model.score_batch(input.mean.as_ref(), input.variance, y)?;
    let expected = match config.fisher_mode {
        FisherMode::Expected => model.expected_fisher(input.variance),
        FisherMode::Minibatch => None,
    };
    siso_from_scores(input, scores, expected, config)
}
