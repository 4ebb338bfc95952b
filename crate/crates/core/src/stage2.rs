//! Uncertainty-gated test-time augmentation.
//!
//! The default view's uncertainty is compared against `tau`. When it is
//! strictly larger (or `force_apply` is set) the optimal view for the
//! default prediction's class is looked up, and the two softmax vectors are
//! averaged. Otherwise the default prediction is final.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prediction_store::{argmax, softmax, Manifest, PredictionRecord, ViewId};
use crate::stage1::OptimalViewTable;
use crate::uncertainty::{uncertainty_of_view, MetricConfig, Uncertainty};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() {
            Ok(Threshold(tau))
        } else {
            Err(Error::InvalidInput(format!("threshold must be finite, got {tau}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Strict comparison: the gate opens only when `u` surpasses the threshold.
    pub fn is_exceeded_by(self, u: f64) -> bool {
        u > self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaDecision {
    pub sample_id: String,
    pub u_default: Uncertainty,
    pub applied: bool,
    pub chosen_view: Option<ViewId>,
    pub p_default: Vec<f64>,
    pub p_aug: Option<Vec<f64>>,
    pub p_final: Vec<f64>,
    pub predicted_class: usize,
}

fn check_table(vtable: &OptimalViewTable, cfg: &MetricConfig, num_classes: usize) -> Result<()> {
    if vtable.metric != *cfg {
        return Err(Error::MetricMismatch {
            table: vtable.metric.kind,
            requested: cfg.kind,
        });
    }
    if vtable.num_classes() != num_classes {
        return Err(Error::InvalidInput(format!(
            "view table covers {} classes, manifest has {num_classes}",
            vtable.num_classes()
        )));
    }
    Ok(())
}

/// Gate and fuse one record given its precomputed default-view uncertainty.
pub(crate) fn decide(
    record: &PredictionRecord,
    default_view: &str,
    u_default: Uncertainty,
    vtable: &OptimalViewTable,
    tau: Threshold,
    force_apply: bool,
) -> Result<TtaDecision> {
    let p_default = softmax(&record.view(default_view)?.logits)?;
    let top = argmax(&p_default);
    if !(force_apply || tau.is_exceeded_by(u_default.value)) {
        return Ok(TtaDecision {
            sample_id: record.sample_id.clone(),
            u_default,
            applied: false,
            chosen_view: None,
            p_final: p_default.clone(),
            p_default,
            p_aug: None,
            predicted_class: top,
        });
    }
    let view = vtable.view_for_class(top).ok_or_else(|| {
        Error::InvalidInput(format!("view table has no entry for class {top}"))
    })?;
    let p_aug = softmax(&record.view(view)?.logits)?;
    let p_final: Vec<f64> = p_default
        .iter()
        .zip(&p_aug)
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    let predicted_class = argmax(&p_final);
    Ok(TtaDecision {
        sample_id: record.sample_id.clone(),
        u_default,
        applied: true,
        chosen_view: Some(view.to_string()),
        p_default,
        p_aug: Some(p_aug),
        p_final,
        predicted_class,
    })
}

pub fn infer_one(
    record: &PredictionRecord,
    default_view: &str,
    vtable: &OptimalViewTable,
    tau: Threshold,
    cfg: &MetricConfig,
    force_apply: bool,
) -> Result<TtaDecision> {
    if vtable.metric != *cfg {
        return Err(Error::MetricMismatch {
            table: vtable.metric.kind,
            requested: cfg.kind,
        });
    }
    let u = uncertainty_of_view(record, default_view, cfg)?;
    decide(record, default_view, u, vtable, tau, force_apply)
}

/// Decisions for every record; does not need labels.
pub fn infer_decisions(
    test: &Manifest,
    vtable: &OptimalViewTable,
    tau: Threshold,
    cfg: &MetricConfig,
    force_apply: bool,
) -> Result<Vec<TtaDecision>> {
    check_table(vtable, cfg, test.num_classes)?;
    test.records
        .iter()
        .map(|r| infer_one(r, &test.view_set.default_view, vtable, tau, cfg, force_apply))
        .collect()
}

/// Fraction of decisions whose predicted class matches the record label.
pub fn decision_accuracy(test: &Manifest, decisions: &[TtaDecision]) -> Result<f64> {
    if test.records.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut correct = 0usize;
    for (record, decision) in test.records.iter().zip(decisions) {
        if record.label()? == decision.predicted_class {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.records.len() as f64)
}

pub fn infer_all(
    test: &Manifest,
    vtable: &OptimalViewTable,
    tau: Threshold,
    cfg: &MetricConfig,
    force_apply: bool,
) -> Result<(Vec<TtaDecision>, f64)> {
    if test.records.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let decisions = infer_decisions(test, vtable, tau, cfg, force_apply)?;
    let accuracy = decision_accuracy(test, &decisions)?;
    Ok((decisions, accuracy))
}

/// Writes decisions as JSON Lines for auditing.
pub fn save_decisions(decisions: &[TtaDecision], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for d in decisions {
        serde_json::to_writer(&mut out, d).map_err(|e| Error::json(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
