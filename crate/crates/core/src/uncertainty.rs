//! Predictive-uncertainty metrics. Every metric is oriented so that a larger
//! value means a less confident prediction.
//!
//! NLL and Brier are scored against the predicted class (one-hot of the
//! argmax) because test-time labels are unavailable. ODIN is the
//! temperature-scaled max-softmax score without input perturbation. MCD is the
//! entropy of the mean softmax over stochastic passes. GradNorm is the negated
//! L1 norm of a last-layer gradient computed upstream.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prediction_store::{argmax, softmax, PredictionRecord};

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Entropy,
    Nll,
    Brier,
    Odin,
    Mcd,
    GradNorm,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Entropy,
        MetricKind::Nll,
        MetricKind::Brier,
        MetricKind::Odin,
        MetricKind::Mcd,
        MetricKind::GradNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Entropy => "entropy",
            MetricKind::Nll => "nll",
            MetricKind::Brier => "brier",
            MetricKind::Odin => "odin",
            MetricKind::Mcd => "mcd",
            MetricKind::GradNorm => "gradnorm",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown metric '{s}' (expected one of entropy, nll, brier, odin, mcd, gradnorm)"
                ))
            })
    }
}

fn default_odin_temperature() -> f64 {
    1000.0
}

fn default_mcd_min_samples() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub kind: MetricKind,
    #[serde(default = "default_odin_temperature")]
    pub odin_temperature: f64,
    #[serde(default = "default_mcd_min_samples")]
    pub mcd_min_samples: usize,
}

impl MetricConfig {
    pub fn new(kind: MetricKind) -> Self {
        MetricConfig {
            kind,
            odin_temperature: default_odin_temperature(),
            mcd_min_samples: default_mcd_min_samples(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.odin_temperature.is_finite() && self.odin_temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "odin_temperature must be positive, got {}",
                self.odin_temperature
            )));
        }
        if self.mcd_min_samples < 2 {
            return Err(Error::InvalidConfig(format!(
                "mcd_min_samples must be at least 2, got {}",
                self.mcd_min_samples
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub value: f64,
    pub metric: MetricKind,
}

impl Uncertainty {
    fn new(value: f64, metric: MetricKind) -> Self {
        Uncertainty { value, metric }
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidInput("empty probability vector".into()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput(
            "probabilities must be finite and nonnegative".into(),
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

fn shannon(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<Uncertainty> {
    check_distribution(p)?;
    Ok(Uncertainty::new(shannon(p), MetricKind::Entropy))
}

/// `-ln(max_k p_k)`: negative log likelihood of the predicted class.
pub fn nll(p: &[f64]) -> Result<Uncertainty> {
    check_distribution(p)?;
    let top = p[argmax(p)];
    Ok(Uncertainty::new((-top.ln()).max(0.0), MetricKind::Nll))
}

/// Squared distance to the one-hot of the predicted class.
pub fn brier(p: &[f64]) -> Result<Uncertainty> {
    check_distribution(p)?;
    let top = argmax(p);
    let value = p
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let target = if k == top { 1.0 } else { 0.0 };
            (v - target).powi(2)
        })
        .sum();
    Ok(Uncertainty::new(value, MetricKind::Brier))
}

/// `1 - max softmax(logits / temperature)`.
pub fn odin(logits: &[f64], temperature: f64) -> Result<Uncertainty> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "ODIN temperature must be positive, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let p = softmax(&scaled)?;
    Ok(Uncertainty::new(1.0 - p[argmax(&p)], MetricKind::Odin))
}

/// Mean softmax over stochastic passes.
pub fn mean_softmax(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("no stochastic samples".into()))?;
    let mut mean = vec![0.0; first.len()];
    for z in samples {
        if z.len() != mean.len() {
            return Err(Error::InvalidInput(
                "stochastic samples have differing lengths".into(),
            ));
        }
        for (acc, p) in mean.iter_mut().zip(softmax(z)?) {
            *acc += p;
        }
    }
    let m = samples.len() as f64;
    mean.iter_mut().for_each(|v| *v /= m);
    Ok(mean)
}

/// Predictive entropy of the mean softmax over `samples`.
pub fn mcd(samples: &[Vec<f64>], min_samples: usize) -> Result<Uncertainty> {
    if samples.len() < min_samples.max(1) {
        return Err(Error::InvalidInput(format!(
            "MCD needs at least {min_samples} stochastic samples, got {}",
            samples.len()
        )));
    }
    let p = mean_softmax(samples)?;
    Ok(Uncertainty::new(shannon(&p), MetricKind::Mcd))
}

/// Larger gradient norm reads as higher confidence, so uncertainty is `-grad_l1`.
pub fn gradnorm_uncertainty(grad_l1: f64) -> Result<Uncertainty> {
    if !(grad_l1.is_finite() && grad_l1 >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "grad_l1 must be finite and nonnegative, got {grad_l1}"
        )));
    }
    Ok(Uncertainty::new(-grad_l1, MetricKind::GradNorm))
}

pub fn uncertainty_of_view(
    record: &PredictionRecord,
    view: &str,
    cfg: &MetricConfig,
) -> Result<Uncertainty> {
    let pred = record.view(view)?;
    let unavailable = |reason: String| Error::MetricUnavailable {
        metric: cfg.kind,
        sample_id: record.sample_id.clone(),
        view: view.to_string(),
        reason,
    };
    match cfg.kind {
        MetricKind::Entropy => entropy(&softmax(&pred.logits)?),
        MetricKind::Nll => nll(&softmax(&pred.logits)?),
        MetricKind::Brier => brier(&softmax(&pred.logits)?),
        MetricKind::Odin => odin(&pred.logits, cfg.odin_temperature),
        MetricKind::Mcd => {
            let samples = pred
                .mc_logits
                .as_deref()
                .ok_or_else(|| unavailable("record has no mc_logits".into()))?;
            if samples.len() < cfg.mcd_min_samples {
                return Err(unavailable(format!(
                    "{} stochastic samples, need at least {}",
                    samples.len(),
                    cfg.mcd_min_samples
                )));
            }
            mcd(samples, cfg.mcd_min_samples)
        }
        MetricKind::GradNorm => {
            let g = pred
                .grad_l1
                .ok_or_else(|| unavailable("record has no grad_l1".into()))?;
            gradnorm_uncertainty(g)
        }
    }
}
