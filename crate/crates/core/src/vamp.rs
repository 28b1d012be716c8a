//! The two-module message-passing loop.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{dimension, domain, Error, Result};
use crate::numerics::pairwise_sum;
use crate::score::ScoreModel;
use crate::siso::{siso_forward, SisoConfig, SisoMessage, SisoResult};

/// Which posterior is returned as the final estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalEstimate {
    #[default]
    ModuleB,
    ModuleA,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScVampConfig {
    pub max_iterations: usize,
    pub v_init: f64,
    /// Convex weight on the new message; `1.0` disables damping.
    pub damping: f64,
    pub stop_tolerance: f64,
    pub record_mse: bool,
    pub final_estimate: FinalEstimate,
    pub siso_a: SisoConfig,
    pub siso_b: SisoConfig,
    /// Keep Module B's input mean at this iteration.
    pub capture_iteration: Option<usize>,
}

impl Default for ScVampConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            v_init: 1.0,
            damping: 1.0,
            stop_tolerance: 1e-8,
            record_mse: true,
            final_estimate: FinalEstimate::ModuleB,
            siso_a: SisoConfig::default(),
            siso_b: SisoConfig::default(),
            capture_iteration: None,
        }
    }
}

impl ScVampConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_init > 0.0 && self.v_init.is_finite()) {
            return Err(domain(format!(
                "v_init must be positive and finite, got {}",
                self.v_init
            )));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(domain(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.stop_tolerance >= 0.0) {
            return Err(domain(format!(
                "stop tolerance must be non-negative, got {}",
                self.stop_tolerance
            )));
        }
        self.siso_a.validate()?;
        self.siso_b.validate()
    }
}

/// `B` problem instances, one per column.
#[derive(Clone, Debug)]
pub struct ProblemBatch {
    pub y: Mat<f64>,
    pub truth: Option<Mat<f64>>,
}

impl ProblemBatch {
    pub fn batch_size(&self) -> usize {
        self.y.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub v_in_a: f64,
    pub v_out_a: f64,
    pub v_in_b: f64,
    pub v_out_b: f64,
    pub alpha_a: f64,
    pub alpha_b: f64,
    pub fisher_a: f64,
    pub fisher_b: f64,
    pub calib_a: f64,
    pub calib_b: f64,
    pub mse_actual: Option<f64>,
    pub mse_se: Option<f64>,
    pub clip_events: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    /// Row 0 is the initialization; row `t` is iteration `t`.
    pub rows: Vec<TraceRow>,
    pub converged_at: Option<usize>,
    pub damping: f64,
    pub calibration_fallbacks: usize,
    pub variance_clamps: usize,
}

impl RunTrace {
    pub fn iterations(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub estimate: Mat<f64>,
    pub trace: RunTrace,
    pub captured_x_in_b: Option<Mat<f64>>,
}

/// `(1/(B N)) Σ ‖x̂ - x‖²`.
pub fn batch_mse(estimates: MatRef<'_, f64>, truths: MatRef<'_, f64>) -> Result<f64> {
    if estimates.nrows() != truths.nrows() || estimates.ncols() != truths.ncols() {
        return Err(dimension(format!(
            "estimates are {}x{}, truths are {}x{}",
            estimates.nrows(),
            estimates.ncols(),
            truths.nrows(),
            truths.ncols()
        )));
    }
    if estimates.ncols() == 0 || estimates.nrows() == 0 {
        return Err(Error::EmptyBatch("mse"));
    }
    let per_instance: Vec<f64> = (0..estimates.ncols())
        .map(|j| {
            let sq: Vec<f64> = (0..estimates.nrows())
                .map(|i| {
                    let d = estimates[(i, j)] - truths[(i, j)];
                    d * d
                })
                .collect();
            pairwise_sum(&sq)
        })
        .collect();
    Ok(pairwise_sum(&per_instance) / (estimates.ncols() * estimates.nrows()) as f64)
}

/// Zero mean with variance `v_init` for every instance.
pub fn init_messages(config: &ScVampConfig, n: usize, batch_size: usize) -> Result<SisoMessage> {
    SisoMessage::new(Mat::zeros(n, batch_size), config.v_init)
}

fn damp(new: SisoMessage, old: Option<&SisoMessage>, eta: f64) -> Result<SisoMessage> {
    match old {
        Some(old) if eta < 1.0 => {
            let mean = Mat::from_fn(new.mean.nrows(), new.mean.ncols(), |i, j| {
                eta * new.mean[(i, j)] + (1.0 - eta) * old.mean[(i, j)]
            });
            SisoMessage::new(mean, eta * new.variance + (1.0 - eta) * old.variance)
        }
        _ => Ok(new),
    }
}

fn relative_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / old.abs()
}

fn abort(iteration: usize, reason: impl Into<String>, trace: RunTrace) -> Error {
    Error::RunAborted {
        iteration,
        reason: reason.into(),
        trace: Box::new(trace),
    }
}

fn check_result(r: &SisoResult, module: &str, iteration: usize, trace: &RunTrace) -> Result<()> {
    if !r.extrinsic.is_finite() || !r.posterior_mean.col_iter().all(|c| c.iter().all(|v| v.is_finite())) {
        return Err(abort(
            iteration,
            format!("non-finite message from module {module}"),
            trace.clone(),
        ));
    }
    Ok(())
}

/// Alternates Module A (conditioned on `y`) and Module B from a zero-mean
/// start, stopping after `max_iterations` or once both output variances
/// change by less than `stop_tolerance` relative.
pub fn run_scvamp(
    config: &ScVampConfig,
    module_a: &dyn ScoreModel,
    module_b: &dyn ScoreModel,
    batch: &ProblemBatch,
) -> Result<RunOutput> {
    config.validate()?;
    let n = module_b.dim();
    if module_a.dim() != n {
        return Err(dimension(format!(
            "module A has dimension {}, module B {}",
            module_a.dim(),
            n
        )));
    }
    let b = batch.batch_size();
    if b == 0 {
        return Err(Error::EmptyBatch("problem batch"));
    }
    if let Some(t) = &batch.truth {
        if t.nrows() != n || t.ncols() != b {
            return Err(dimension(format!(
                "truth is {}x{}, expected {n}x{b}",
                t.nrows(),
                t.ncols()
            )));
        }
    }
    let mse_of = |est: MatRef<'_, f64>| -> Result<Option<f64>> {
        match (&batch.truth, config.record_mse) {
            (Some(t), true) => batch_mse(est, t.as_ref()).map(Some),
            _ => Ok(None),
        }
    };

    let mut out_b = init_messages(config, n, b)?;
    let mut estimate = Mat::zeros(n, b);
    let mut trace = RunTrace {
        damping: config.damping,
        ..Default::default()
    };
    trace.rows.push(TraceRow {
        iter: 0,
        v_in_a: f64::NAN,
        v_out_a: f64::NAN,
        v_in_b: f64::NAN,
        v_out_b: config.v_init,
        alpha_a: f64::NAN,
        alpha_b: f64::NAN,
        fisher_a: f64::NAN,
        fisher_b: f64::NAN,
        calib_a: f64::NAN,
        calib_b: f64::NAN,
        mse_actual: mse_of(estimate.as_ref())?,
        mse_se: None,
        clip_events: 0,
    });
    let mut out_a: Option<SisoMessage> = None;
    let mut prev_b: Option<SisoMessage> = None;
    let mut captured = None;

    for t in 1..=config.max_iterations {
        let v_in_a = out_b.variance;
        let ra = siso_forward(module_a, &out_b, Some(batch.y.as_ref()), &config.siso_a)
            .map_err(|e| annotate(e, t, &trace))?;
        check_result(&ra, "A", t, &trace)?;
        let prev_a_var = out_a.as_ref().map(|m| m.variance);
        let new_a = damp(ra.extrinsic.clone(), out_a.as_ref(), config.damping)?;

        let v_in_b = new_a.variance;
        if config.capture_iteration == Some(t) {
            captured = Some(new_a.mean.clone());
        }
        let rb = siso_forward(module_b, &new_a, None, &config.siso_b).map_err(|e| annotate(e, t, &trace))?;
        check_result(&rb, "B", t, &trace)?;
        let new_b = damp(rb.extrinsic.clone(), prev_b.as_ref(), config.damping)?;

        estimate = match config.final_estimate {
            FinalEstimate::ModuleB => rb.posterior_mean.clone(),
            FinalEstimate::ModuleA => ra.posterior_mean.clone(),
        };
        trace.calibration_fallbacks += ra.calibration_fallback as usize + rb.calibration_fallback as usize;
        trace.rows.push(TraceRow {
            iter: t,
            v_in_a,
            v_out_a: new_a.variance,
            v_in_b,
            v_out_b: new_b.variance,
            alpha_a: ra.alpha,
            alpha_b: rb.alpha,
            fisher_a: ra.fisher_estimate,
            fisher_b: rb.fisher_estimate,
            calib_a: ra.calibration,
            calib_b: rb.calibration,
            mse_actual: mse_of(estimate.as_ref())?,
            mse_se: None,
            clip_events: ra.alpha_clipped as usize + rb.alpha_clipped as usize,
        });

        let converged = match (prev_a_var, prev_b.as_ref()) {
            (Some(pa), Some(pb)) => {
                relative_change(new_a.variance, pa) < config.stop_tolerance
                    && relative_change(new_b.variance, pb.variance) < config.stop_tolerance
            }
            _ => false,
        };
        out_a = Some(new_a);
        prev_b = Some(new_b.clone());
        out_b = new_b;
        if converged {
            trace.converged_at = Some(t);
            break;
        }
    }
    trace.variance_clamps = module_a.variance_clamps() + module_b.variance_clamps();
    Ok(RunOutput {
        estimate,
        trace,
        captured_x_in_b: captured,
    })
}

fn annotate(e: Error, iteration: usize, trace: &RunTrace) -> Error {
    match e {
        Error::NonFinite { .. } => abort(iteration, e.to_string(), trace.clone()),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SensingMatrix;
    use crate::score::{GaussianPriorParams, GaussianPriorScore, LinearLikelihood, LinearLmmseScore};
    use std::sync::Arc;

    fn scalar_setup(y: &[f64]) -> (LinearLmmseScore, GaussianPriorScore, ProblemBatch) {
        let a =
            LinearLmmseScore::new(LinearLikelihood::new(Arc::new(SensingMatrix::scalar(1.0).unwrap()), 0.25).unwrap());
        let b = GaussianPriorScore {
            dim: 1,
            params: GaussianPriorParams::new(1.0).unwrap(),
        };
        let batch = ProblemBatch {
            y: Mat::from_fn(1, y.len(), |_, j| y[j]),
            truth: None,
        };
        (a, b, batch)
    }

    #[test]
    fn init_is_zero_mean() {
        let cfg = ScVampConfig {
            v_init: 100.0,
            ..Default::default()
        };
        let m = init_messages(&cfg, 4, 1).unwrap();
        assert_eq!(m.variance, 100.0);
        assert!(m.mean.col_as_slice(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_iterations_returns_prior_mean() {
        let (a, b, batch) = scalar_setup(&[1.0, -2.0]);
        let cfg = ScVampConfig {
            max_iterations: 0,
            ..Default::default()
        };
        let out = run_scvamp(&cfg, &a, &b, &batch).unwrap();
        assert_eq!(out.trace.rows.len(), 1);
        assert!(out.estimate.col_iter().all(|c| c.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn batch_mse_examples() {
        let x = Mat::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        assert_eq!(batch_mse(x.as_ref(), x.as_ref()).unwrap(), 0.0);
        let ones = Mat::from_fn(4, 3, |_, _| 1.0);
        let zeros = Mat::<f64>::zeros(4, 3);
        assert_eq!(batch_mse(zeros.as_ref(), ones.as_ref()).unwrap(), 1.0);
        assert!(batch_mse(zeros.as_ref(), x.as_ref()).is_err());
    }

    #[test]
    fn invalid_damping_rejected() {
        let (a, b, batch) = scalar_setup(&[1.0]);
        let cfg = ScVampConfig {
            damping: 0.0,
            ..Default::default()
        };
        assert!(matches!(run_scvamp(&cfg, &a, &b, &batch), Err(Error::Domain(_))));
    }
}
