//! Empirical Gaussianity and decoupling statistics for error vectors.

use faer::MatRef;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::numerics::pairwise_sum;

/// Range the spacing-based KL estimate falls in for exactly Gaussian data at
/// `n ≈ 10⁵`.
pub const KL_BAND: (f64, f64) = (-0.01, 0.02);
/// Largest accepted `|excess kurtosis|` in a decoupling report.
pub const KURTOSIS_LIMIT: f64 = 0.1;

fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample excess kurtosis with the usual small-sample correction
/// `G₂ = ((n+1) g₂ + 6)(n-1)/((n-2)(n-3))`.
pub fn excess_kurtosis(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 4 {
        return Err(domain(format!("kurtosis needs at least 4 samples, got {n}")));
    }
    let mu = mean(samples);
    let d2: Vec<f64> = samples.iter().map(|x| (x - mu) * (x - mu)).collect();
    let d4: Vec<f64> = d2.iter().map(|d| d * d).collect();
    let m2 = mean(&d2);
    let m4 = mean(&d4);
    // rounding leaves a tiny m2 for constant input
    if !(m2 > 1e-24 * (mu * mu + m2)) {
        return Err(domain("kurtosis of a sample with zero variance"));
    }
    let g2 = m4 / (m2 * m2) - 3.0;
    let n = n as f64;
    Ok(((n + 1.0) * g2 + 6.0) * (n - 1.0) / ((n - 2.0) * (n - 3.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub kl: f64,
    pub entropy: f64,
    pub window: usize,
}

/// Vasicek spacing estimate of differential entropy with window `m`.
pub fn vasicek_entropy(samples: &[f64], m: usize) -> Result<f64> {
    let n = samples.len();
    if m == 0 || 2 * m >= n {
        return Err(domain(format!("window {m} is invalid for {n} samples")));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let scale = n as f64 / (2 * m) as f64;
    let terms: Vec<f64> = (0..n)
        .map(|i| {
            let hi = x[(i + m).min(n - 1)];
            let lo = x[i.saturating_sub(m)];
            (scale * (hi - lo)).ln()
        })
        .collect();
    Ok(mean(&terms))
}

/// `D(P ‖ N(0, v)) ≈ -Ĥ + ½ ln(2πv) + E[x²]/(2v)` with the Vasicek entropy
/// at window `⌊√n⌋`.
pub fn kl_to_gaussian(samples: &[f64], v: f64) -> Result<KlEstimate> {
    if !(v > 0.0) {
        return Err(domain(format!("reference variance must be positive, got {v}")));
    }
    let n = samples.len();
    if n < 1000 {
        return Err(domain(format!("KL estimate needs at least 1000 samples, got {n}")));
    }
    let window = (n as f64).sqrt().floor() as usize;
    let entropy = vasicek_entropy(samples, window)?;
    let sq: Vec<f64> = samples.iter().map(|x| x * x).collect();
    let m2 = mean(&sq);
    Ok(KlEstimate {
        kl: -entropy + 0.5 * (2.0 * std::f64::consts::PI * v).ln() + m2 / (2.0 * v),
        entropy,
        window,
    })
}

/// Uncentered within-instance autocorrelation of the columns of `errors`,
/// pooled over instances, for lags `1..=lags`.
pub fn pooled_autocorrelation(errors: MatRef<'_, f64>, lags: usize) -> Vec<f64> {
    let n = errors.nrows();
    let cols: Vec<Vec<f64>> = (0..errors.ncols())
        .map(|j| (0..n).map(|i| errors[(i, j)]).collect())
        .collect();
    let energy: Vec<f64> = cols
        .iter()
        .map(|c| pairwise_sum(&c.iter().map(|x| x * x).collect::<Vec<_>>()))
        .collect();
    let den = pairwise_sum(&energy);
    (1..=lags)
        .map(|l| {
            if l >= n || den == 0.0 {
                return 0.0;
            }
            let nums: Vec<f64> = cols
                .iter()
                .map(|c| pairwise_sum(&(0..n - l).map(|i| c[i] * c[i + l]).collect::<Vec<_>>()))
                .collect();
            pairwise_sum(&nums) / den * n as f64 / (n - l) as f64
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingChecks {
    pub kurtosis: bool,
    pub kl: bool,
    pub autocorrelation: bool,
}

impl DecouplingChecks {
    pub fn all(&self) -> bool {
        self.kurtosis && self.kl && self.autocorrelation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub sample_size: usize,
    pub dimension: usize,
    /// Mean square of all error entries.
    pub variance: f64,
    pub v_claimed: f64,
    /// Kurtosis of the flattened errors, including the spread of per-instance variances.
    pub excess_kurtosis: Option<f64>,
    /// Kurtosis after scaling each instance to unit mean square; this one is checked.
    pub instance_excess_kurtosis: Option<f64>,
    pub kl: Option<f64>,
    pub kl_window: usize,
    /// Lags `1..=L`.
    pub autocorrelation: Vec<f64>,
    pub max_abs_autocorrelation: f64,
    pub autocorrelation_limit: f64,
    pub checks: DecouplingChecks,
}

/// Flattens `errors` (one instance per column) and reports its variance,
/// excess kurtosis, KL to `N(0, v_claimed)` and autocorrelations up to `lags`.
/// The kurtosis check scales every instance to unit mean square first, so a
/// spread of per-instance variances does not read as heavy tails.
/// The autocorrelation check uses the lag-1 value against `3/√N`.
pub fn error_decoupling_report(errors: MatRef<'_, f64>, v_claimed: f64, lags: usize) -> Result<GaussianityReport> {
    let (n, b) = (errors.nrows(), errors.ncols());
    if n * b < 1000 {
        return Err(domain(format!(
            "decoupling report needs at least 1000 entries, got {}",
            n * b
        )));
    }
    if !(v_claimed > 0.0) {
        return Err(domain(format!("claimed variance must be positive, got {v_claimed}")));
    }
    let flat: Vec<f64> = (0..b).flat_map(|j| (0..n).map(move |i| errors[(i, j)])).collect();
    let sq: Vec<f64> = flat.iter().map(|x| x * x).collect();
    let variance = mean(&sq);
    let kurt = excess_kurtosis(&flat).ok();
    let scaled: Vec<f64> = flat
        .chunks(n)
        .flat_map(|c| {
            let rms = mean(&c.iter().map(|x| x * x).collect::<Vec<_>>()).sqrt();
            c.iter().map(move |x| if rms > 0.0 { x / rms } else { 0.0 })
        })
        .collect();
    let instance_kurt = if scaled.iter().any(|x| *x != 0.0) {
        excess_kurtosis(&scaled).ok()
    } else {
        None
    };
    let kl = if variance > 0.0 {
        kl_to_gaussian(&flat, v_claimed).ok()
    } else {
        None
    };
    let autocorrelation = pooled_autocorrelation(errors, lags.max(1));
    let max_abs = autocorrelation.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let limit = 3.0 / (n as f64).sqrt();
    let checks = DecouplingChecks {
        kurtosis: instance_kurt.is_some_and(|k| k.abs() < KURTOSIS_LIMIT),
        kl: kl.is_some_and(|k| k.kl.is_finite() && k.kl >= KL_BAND.0 && k.kl <= KL_BAND.1),
        autocorrelation: autocorrelation[0].abs() < limit,
    };
    Ok(GaussianityReport {
        sample_size: n * b,
        dimension: n,
        variance,
        v_claimed,
        excess_kurtosis: kurt,
        instance_excess_kurtosis: instance_kurt,
        kl: kl.map(|k| k.kl),
        kl_window: kl.map_or(0, |k| k.window),
        autocorrelation,
        max_abs_autocorrelation: max_abs,
        autocorrelation_limit: limit,
        checks,
    })
}
