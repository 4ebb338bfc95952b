//! Baselines and the threshold sweep.

mod report;

pub use report::{report, ReportFiles, SweepFile};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prediction_store::{argmax, softmax, Manifest};
use crate::stage1::OptimalViewTable;
use crate::stage2::{decide, Threshold};
use crate::uncertainty::{uncertainty_of_view, MetricConfig, Uncertainty};

pub const DEFAULT_SWEEP_POINTS: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub single_view_accuracy: f64,
    pub random_aug_accuracy: f64,
    pub rng_seed: u64,
}

impl BaselineReport {
    pub fn compute(test: &Manifest, seed: u64) -> Result<Self> {
        Ok(BaselineReport {
            single_view_accuracy: single_view_accuracy(test)?,
            random_aug_accuracy: random_aug_accuracy(test, seed)?,
            rng_seed: seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub metric: MetricConfig,
    pub taus: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub n_augmented: Vec<usize>,
    pub best_index: usize,
    pub best_accuracy: f64,
}

impl SweepResult {
    /// Accuracy at the lowest threshold, where every sample is augmented.
    pub fn min_tau_accuracy(&self) -> f64 {
        self.accuracies[0]
    }
}

fn ensure_non_empty(test: &Manifest) -> Result<()> {
    if test.records.is_empty() {
        Err(Error::Empty("test set"))
    } else {
        Ok(())
    }
}

fn fraction(correct: usize, total: usize) -> f64 {
    correct as f64 / total as f64
}

/// Accuracy of the default view alone.
pub fn single_view_accuracy(test: &Manifest) -> Result<f64> {
    ensure_non_empty(test)?;
    let mut correct = 0;
    for record in &test.records {
        let p = softmax(&record.view(&test.view_set.default_view)?.logits)?;
        if argmax(&p) == record.label()? {
            correct += 1;
        }
    }
    Ok(fraction(correct, test.records.len()))
}

/// Uniform index in `0..n` from one 64-bit ChaCha8 draw (multiply-shift).
fn draw_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    ((u128::from(rng.next_u64()) * n as u128) >> 64) as usize
}

/// Fuses every sample with one uniformly drawn augmentation view.
///
/// The generator is `ChaCha8Rng::seed_from_u64(seed)`; one `u64` is drawn per
/// record in manifest order and mapped to a view index by
/// `(draw * N) >> 64`.
pub fn random_aug_accuracy(test: &Manifest, seed: u64) -> Result<f64> {
    ensure_non_empty(test)?;
    let views = &test.view_set.augmentation_views;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0;
    for record in &test.records {
        let view = &views[draw_index(&mut rng, views.len())];
        let p_default = softmax(&record.view(&test.view_set.default_view)?.logits)?;
        let p_aug = softmax(&record.view(view)?.logits)?;
        let fused: Vec<f64> = p_default
            .iter()
            .zip(&p_aug)
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        if argmax(&fused) == record.label()? {
            correct += 1;
        }
    }
    Ok(fraction(correct, test.records.len()))
}

/// `points` equidistant thresholds from the smallest to the largest value.
/// The last point is exactly the maximum.
pub fn tau_grid(uncertainties: &[f64], points: usize) -> Result<Vec<f64>> {
    if uncertainties.is_empty() {
        return Err(Error::Empty("uncertainty list"));
    }
    if points < 2 {
        return Err(Error::InvalidInput(format!(
            "a threshold grid needs at least 2 points, got {points}"
        )));
    }
    if uncertainties.iter().any(|u| !u.is_finite()) {
        return Err(Error::InvalidInput("non-finite uncertainty".into()));
    }
    let min = uncertainties.iter().copied().fold(f64::INFINITY, f64::min);
    let max = uncertainties.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let step = (max - min) / (points - 1) as f64;
    let mut grid: Vec<f64> = (0..points).map(|i| min + i as f64 * step).collect();
    grid[points - 1] = max;
    Ok(grid)
}

/// Accuracy and augmentation count across the threshold grid.
///
/// Point 0 force-applies augmentation to every sample; later points gate on
/// `u > tau`. The last threshold equals the largest observed uncertainty, so
/// the final point reduces to single-view accuracy.
pub fn sweep(
    test: &Manifest,
    vtable: &OptimalViewTable,
    cfg: &MetricConfig,
    points: usize,
) -> Result<SweepResult> {
    ensure_non_empty(test)?;
    if vtable.metric != *cfg {
        return Err(Error::MetricMismatch {
            table: vtable.metric.kind,
            requested: cfg.kind,
        });
    }
    if vtable.num_classes() != test.num_classes {
        return Err(Error::InvalidInput(format!(
            "view table covers {} classes, manifest has {}",
            vtable.num_classes(),
            test.num_classes
        )));
    }
    let default_view = &test.view_set.default_view;
    let labels = test
        .records
        .iter()
        .map(|r| r.label())
        .collect::<Result<Vec<_>>>()?;
    let us: Vec<Uncertainty> = test
        .records
        .iter()
        .map(|r| uncertainty_of_view(r, default_view, cfg))
        .collect::<Result<_>>()?;
    let values: Vec<f64> = us.iter().map(|u| u.value).collect();
    let taus = tau_grid(&values, points)?;

    let mut accuracies = Vec::with_capacity(points);
    let mut n_augmented = Vec::with_capacity(points);
    for (i, tau) in taus.iter().enumerate() {
        let tau = Threshold::new(*tau)?;
        let force = i == 0;
        let mut correct = 0;
        let mut augmented = 0;
        for ((record, u), label) in test.records.iter().zip(&us).zip(&labels) {
            let d = decide(record, default_view, *u, vtable, tau, force)?;
            correct += usize::from(d.predicted_class == *label);
            augmented += usize::from(d.applied);
        }
        accuracies.push(fraction(correct, test.records.len()));
        n_augmented.push(augmented);
    }

    let mut best_index = 0;
    for (i, a) in accuracies.iter().enumerate() {
        if *a > accuracies[best_index] {
            best_index = i;
        }
    }
    Ok(SweepResult {
        metric: *cfg,
        best_accuracy: accuracies[best_index],
        best_index,
        taus,
        accuracies,
        n_augmented,
    })
}
