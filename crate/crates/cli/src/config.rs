//! Experiment configuration (TOML) and its kind-dependent defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scvamp_core::dsm::DsmConfig;
use scvamp_core::langevin::LangevinConfig;
use scvamp_core::score::{BernoulliGaussianParams, GaussianPriorParams, PairwiseGaussianParams, Prior};
use scvamp_core::siso::{FisherMode, SisoConfig};
use scvamp_core::vamp::FinalEstimate;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ScalarGaussian,
    #[default]
    LinearBg,
    CorrelatedLearned,
    LangevinDemo,
    SeOnly,
    Exit,
    Diagnostics,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ScalarGaussian => "scalar-gaussian",
            ExperimentKind::LinearBg => "linear-bg",
            ExperimentKind::CorrelatedLearned => "correlated-learned",
            ExperimentKind::LangevinDemo => "langevin-demo",
            ExperimentKind::SeOnly => "se-only",
            ExperimentKind::Exit => "exit",
            ExperimentKind::Diagnostics => "diagnostics",
        }
    }
}

/// How `snr_db` fixes the noise variance.
///
/// * `per-measurement`: `σ_n² = E‖Ax‖² / (M · 10^(SNR/10))` with
///   `E‖Ax‖² = E[x_i²] · Σ d_k²` for an RRI matrix.
/// * `per-component`: `σ_n² = E[x_i²] / 10^(SNR/10)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnrConvention {
    #[default]
    PerMeasurement,
    PerComponent,
}

pub const SNR_FORMULA: &str = "per-measurement: sigma_n^2 = E[x_i^2] * sum(d_k^2) / (M * 10^(snr_db/10)); \
per-component: sigma_n^2 = E[x_i^2] / 10^(snr_db/10)";

/// Singular values of the sensing matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Spectrum {
    #[default]
    Unit,
    /// `d_k = κ^(-k/(r-1))`, from 1 down to `1/κ`.
    Geometric { condition: f64 },
}

impl Spectrum {
    pub fn values(&self, rank: usize) -> Vec<f64> {
        match *self {
            Spectrum::Unit => vec![1.0; rank],
            Spectrum::Geometric { condition } => (0..rank)
                .map(|k| {
                    if rank == 1 {
                        1.0
                    } else {
                        condition.powf(-(k as f64) / (rank - 1) as f64)
                    }
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    Analytic,
    LearnedMlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardKind {
    Linear,
    #[default]
    Tanh,
    Clip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LangevinSection {
    pub forward: ForwardKind,
    /// Saturation level of the `clip` model.
    pub clip_level: f64,
    pub sampler: LangevinConfig,
}

impl Default for LangevinSection {
    fn default() -> Self {
        Self {
            forward: ForwardKind::Tanh,
            clip_level: 1.0,
            sampler: LangevinConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Iteration whose Module B input errors are analysed.
    pub iteration: usize,
    pub lags: usize,
    /// Extra seeds for the N-scaling trend; `0` skips it.
    pub trend_seeds: usize,
    /// Signal dimension the trend compares against.
    pub trend_small_n: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            iteration: 3,
            lags: 5,
            trend_seeds: 0,
            trend_small_n: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExitSection {
    pub v_min: f64,
    pub v_max: f64,
    pub points: usize,
}

impl Default for ExitSection {
    fn default() -> Self {
        Self {
            v_min: 1e-4,
            v_max: 10.0,
            points: 200,
        }
    }
}

/// Everything one experiment needs. Fields left as `None` are filled by
/// [`ExperimentConfig::resolve`] according to `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub batch: Option<usize>,
    /// Maximum iterations `T`.
    pub iterations: usize,
    pub snr_db: Option<f64>,
    pub snr_convention: SnrConvention,
    /// Overrides `snr_db` when set.
    pub noise_variance: Option<f64>,
    pub v_init: Option<f64>,
    pub prior: Option<Prior>,
    pub spectrum: Spectrum,
    pub score: Option<ScoreSource>,
    /// Weight file for `learned-mlp`; trained in-process from `dsm` when absent.
    pub weights: Option<PathBuf>,
    pub damping: f64,
    pub stop_tolerance: f64,
    pub final_estimate: FinalEstimate,
    /// Module A defaults to its closed-form Fisher except in the Langevin demo.
    pub siso_a: Option<SisoConfig>,
    pub siso_b: Option<SisoConfig>,
    pub dsm: DsmConfig,
    pub langevin: LangevinSection,
    pub diagnostics: DiagnosticsSection,
    pub exit: ExitSection,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::LinearBg,
            seed: 0,
            n: None,
            m: None,
            batch: None,
            iterations: 20,
            snr_db: None,
            snr_convention: SnrConvention::PerMeasurement,
            noise_variance: None,
            v_init: None,
            prior: None,
            spectrum: Spectrum::Unit,
            score: None,
            weights: None,
            damping: 1.0,
            stop_tolerance: 1e-8,
            final_estimate: FinalEstimate::ModuleB,
            siso_a: None,
            siso_b: None,
            dsm: DsmConfig::default(),
            langevin: LangevinSection::default(),
            diagnostics: DiagnosticsSection::default(),
            exit: ExitSection::default(),
            output: None,
        }
    }
}

/// A configuration problem tied to the offending field.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn bad(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map_or_else(|| "<document>".to_string(), |s| format!("bytes {}..{}", s.start, s.end));
            bad(&field, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn n(&self) -> usize {
        self.n.expect("resolved config")
    }

    pub fn m(&self) -> usize {
        self.m.expect("resolved config")
    }

    pub fn batch(&self) -> usize {
        self.batch.expect("resolved config")
    }

    pub fn prior(&self) -> Prior {
        self.prior.expect("resolved config")
    }

    pub fn siso_a(&self) -> SisoConfig {
        self.siso_a.expect("resolved config")
    }

    pub fn siso_b(&self) -> SisoConfig {
        self.siso_b.expect("resolved config")
    }

    /// Fills kind-dependent defaults and validates every field.
    pub fn resolve(&self) -> Result<Self, ConfigError> {
        use ExperimentKind::*;
        let mut c = self.clone();
        let sparse_bg = Prior::BernoulliGaussian(BernoulliGaussianParams {
            sparsity: 0.1,
            active_variance: 1.0,
        });
        let (n, m, b, prior) = match c.kind {
            ScalarGaussian => (1, 1, 10_000, Prior::Gaussian(GaussianPriorParams { power: 1.0 })),
            LinearBg | SeOnly | Exit | Diagnostics => (2000, 1000, 200, sparse_bg),
            CorrelatedLearned => (
                2000,
                1000,
                1000,
                Prior::PairwiseGaussian(PairwiseGaussianParams {
                    variance: 1.0,
                    correlation: 0.9,
                }),
            ),
            LangevinDemo => (64, 64, 8, Prior::Gaussian(GaussianPriorParams { power: 1.0 })),
        };
        c.n.get_or_insert(n);
        c.m.get_or_insert(m);
        c.batch.get_or_insert(b);
        c.prior.get_or_insert(prior);
        if c.noise_variance.is_none() && c.snr_db.is_none() {
            match c.kind {
                ScalarGaussian => c.noise_variance = Some(0.25),
                LangevinDemo => c.noise_variance = Some(0.01),
                _ => c.snr_db = Some(20.0),
            }
        }
        c.score.get_or_insert(match c.kind {
            CorrelatedLearned => ScoreSource::LearnedMlp,
            _ => ScoreSource::Analytic,
        });
        c.siso_a.get_or_insert(SisoConfig {
            fisher_mode: match c.kind {
                LangevinDemo => FisherMode::Minibatch,
                _ => FisherMode::Expected,
            },
            ..SisoConfig::default()
        });
        if c.siso_b.is_none() {
            c.siso_b = Some(SisoConfig {
                stein_calibration: c.score == Some(ScoreSource::LearnedMlp),
                ..SisoConfig::default()
            });
        }
        if c.v_init.is_none() {
            c.v_init = Some(c.prior().variance());
        }
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let (n, m, b) = (self.n(), self.m(), self.batch());
        for (name, v) in [("n", n), ("m", m), ("batch", b)] {
            if v == 0 {
                return Err(bad(name, "must be positive"));
            }
        }
        if self.kind == ExperimentKind::ScalarGaussian && (n != 1 || m != 1) {
            return Err(bad("n", "scalar-gaussian needs n = m = 1"));
        }
        if self.kind == ExperimentKind::ScalarGaussian && !matches!(self.prior(), Prior::Gaussian(_)) {
            return Err(bad("prior", "scalar-gaussian needs a gaussian prior"));
        }
        if let Prior::PairwiseGaussian(_) = self.prior() {
            if n % 2 != 0 {
                return Err(bad("n", format!("pairwise prior needs an even dimension, got {n}")));
            }
        }
        match self.prior() {
            Prior::Gaussian(p) => GaussianPriorParams::new(p.power).map(|_| ()),
            Prior::BernoulliGaussian(p) => BernoulliGaussianParams::new(p.sparsity, p.active_variance).map(|_| ()),
            Prior::PairwiseGaussian(p) => PairwiseGaussianParams::new(p.variance, p.correlation).map(|_| ()),
        }
        .map_err(|e| bad("prior", e.to_string()))?;
        if self.score == Some(ScoreSource::LearnedMlp) && !matches!(self.prior(), Prior::PairwiseGaussian(_)) {
            return Err(bad(
                "score",
                "learned-mlp is a pair network and needs the pairwise-gaussian prior",
            ));
        }
        if let Some(v) = self.noise_variance {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad("noise_variance", format!("must be positive and finite, got {v}")));
            }
        }
        if let Some(s) = self.snr_db {
            if !s.is_finite() {
                return Err(bad("snr_db", "must be finite"));
            }
        }
        if let Spectrum::Geometric { condition } = self.spectrum {
            if !(condition >= 1.0 && condition.is_finite()) {
                return Err(bad(
                    "spectrum.condition",
                    format!("must be at least 1, got {condition}"),
                ));
            }
        }
        let v0 = self.v_init.unwrap_or(1.0);
        if !(v0 > 0.0 && v0.is_finite()) {
            return Err(bad("v_init", format!("must be positive and finite, got {v0}")));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(bad("damping", format!("must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.stop_tolerance >= 0.0) {
            return Err(bad("stop_tolerance", "must be non-negative"));
        }
        self.siso_a().validate().map_err(|e| bad("siso_a", e.to_string()))?;
        self.siso_b().validate().map_err(|e| bad("siso_b", e.to_string()))?;
        self.dsm.validate().map_err(|e| bad("dsm", e.to_string()))?;
        self.langevin
            .sampler
            .validate()
            .map_err(|e| bad("langevin.sampler", e.to_string()))?;
        if self.kind == ExperimentKind::LangevinDemo && self.langevin.forward != ForwardKind::Linear && m != n {
            return Err(bad("m", "elementwise forward models need m = n"));
        }
        if !(self.langevin.clip_level > 0.0) {
            return Err(bad("langevin.clip_level", "must be positive"));
        }
        if self.kind == ExperimentKind::Diagnostics
            && (self.diagnostics.iteration == 0 || self.diagnostics.iteration > self.iterations)
        {
            return Err(bad(
                "diagnostics.iteration",
                format!(
                    "must lie in 1..={}, got {}",
                    self.iterations, self.diagnostics.iteration
                ),
            ));
        }
        if self.diagnostics.trend_small_n == 0 {
            return Err(bad("diagnostics.trend_small_n", "must be positive"));
        }
        let e = &self.exit;
        if !(e.v_min > 0.0 && e.v_min < e.v_max && e.points >= 2) {
            return Err(bad("exit", "needs 0 < v_min < v_max and at least 2 points"));
        }
        Ok(())
    }

    /// Noise variance implied by the SNR convention for singular values `d`.
    pub fn noise_variance_for(&self, d: &[f64]) -> f64 {
        if let Some(v) = self.noise_variance {
            return v;
        }
        let snr = 10f64.powf(self.snr_db.unwrap_or(20.0) / 10.0);
        let power = self.prior().variance();
        match self.snr_convention {
            SnrConvention::PerMeasurement => {
                let energy: f64 = d.iter().map(|x| x * x).sum();
                power * energy / (self.m() as f64 * snr)
            }
            SnrConvention::PerComponent => power / snr,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_kind() {
        let c = ExperimentConfig {
            kind: ExperimentKind::CorrelatedLearned,
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!((c.n(), c.m(), c.batch()), (2000, 1000, 1000));
        assert!(c.siso_b().stein_calibration);
        assert_eq!(c.siso_a().fisher_mode, FisherMode::Expected);
        assert_eq!(c.siso_b().fisher_mode, FisherMode::Minibatch);
        assert_eq!(c.v_init, Some(1.0));
        assert!((c.noise_variance_for(&vec![1.0; 1000]) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn bg_noise_level() {
        let c = ExperimentConfig::default().resolve().unwrap();
        assert!((c.noise_variance_for(&vec![1.0; 1000]) - 1e-3).abs() < 1e-15);
        assert_eq!(c.v_init, Some(0.1));
    }

    #[test]
    fn unknown_field_is_named() {
        let err = ExperimentConfig::from_toml("kind = \"linear-bg\"\nbogus = 3\n").unwrap_err();
        assert!(err.message.contains("bogus"), "{err}");
    }

    #[test]
    fn invalid_dimension_is_named() {
        let err = ExperimentConfig {
            n: Some(0),
            ..Default::default()
        }
        .resolve()
        .unwrap_err();
        assert_eq!(err.field, "n");
    }

    #[test]
    fn geometric_spectrum_endpoints() {
        let d = Spectrum::Geometric { condition: 100.0 }.values(3);
        assert_eq!(d[0], 1.0);
        assert!((d[1] - 0.1).abs() < 1e-15);
        assert!((d[2] - 0.01).abs() < 1e-15);
    }
}
