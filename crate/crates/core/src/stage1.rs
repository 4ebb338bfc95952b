//! Per-class optimal augmentation view selection.
//!
//! For every training record the augmentation view with the lowest
//! uncertainty is counted against the record's class in a K×N selection
//! matrix; each class then takes its most frequently selected view.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prediction_store::{argmin, Manifest, PredictionRecord, ViewId, ViewSet};
use crate::uncertainty::{uncertainty_of_view, MetricConfig};

/// K×N counts: how often augmentation view `n` was the lowest-uncertainty
/// choice for training records of class `c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMatrix {
    counts: Vec<Vec<u64>>,
}

impl SelectionMatrix {
    pub fn zeros(num_classes: usize, num_views: usize) -> Self {
        SelectionMatrix {
            counts: vec![vec![0; num_views]; num_classes],
        }
    }

    pub fn from_rows(counts: Vec<Vec<u64>>) -> Result<Self> {
        let width = counts.first().map_or(0, Vec::len);
        if counts.is_empty() || width == 0 || counts.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidInput(
                "selection matrix must be a non-empty rectangle".into(),
            ));
        }
        Ok(SelectionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn num_views(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn get(&self, class: usize, view: usize) -> u64 {
        self.counts[class][view]
    }

    pub fn row(&self, class: usize) -> &[u64] {
        &self.counts[class]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn increment(&mut self, class: usize, view: usize) {
        self.counts[class][view] += 1;
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn column_sums(&self) -> Vec<u64> {
        let mut sums = vec![0; self.num_views()];
        for row in &self.counts {
            for (s, c) in sums.iter_mut().zip(row) {
                *s += c;
            }
        }
        sums
    }
}

fn argmax_count(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, c) in counts.iter().enumerate().skip(1) {
        if *c > counts[best] {
            best = i;
        }
    }
    best
}

/// Stage-1 output: the augmentation view to consult for each predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalViewTable {
    pub metric: MetricConfig,
    pub augmentation_views: Vec<ViewId>,
    pub per_class: Vec<ViewId>,
    pub source_counts: SelectionMatrix,
    pub fallback_classes: BTreeSet<usize>,
}

impl OptimalViewTable {
    /// Derives the table from selection counts. Classes without any training
    /// record take the globally most selected view and are listed in
    /// `fallback_classes`.
    pub fn from_counts(
        metric: MetricConfig,
        view_set: &ViewSet,
        counts: SelectionMatrix,
    ) -> Result<Self> {
        if counts.num_views() != view_set.num_augmentations() {
            return Err(Error::InvalidInput(format!(
                "selection matrix has {} columns but the view set has {} augmentation views",
                counts.num_views(),
                view_set.num_augmentations()
            )));
        }
        let global = argmax_count(&counts.column_sums());
        let mut fallback_classes = BTreeSet::new();
        let per_class = (0..counts.num_classes())
            .map(|c| {
                let idx = if counts.row_sum(c) == 0 {
                    fallback_classes.insert(c);
                    global
                } else {
                    argmax_count(counts.row(c))
                };
                view_set.augmentation_views[idx].clone()
            })
            .collect();
        Ok(OptimalViewTable {
            metric,
            augmentation_views: view_set.augmentation_views.clone(),
            per_class,
            source_counts: counts,
            fallback_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn view_for_class(&self, class: usize) -> Option<&str> {
        self.per_class.get(class).map(String::as_str)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.metric.check() {
            out.push(e.to_string());
        }
        for (c, v) in self.per_class.iter().enumerate() {
            if !self.augmentation_views.contains(v) {
                out.push(format!("class {c}: view '{v}' is not an augmentation view"));
            }
        }
        if self.source_counts.num_classes() != self.per_class.len()
            || self.source_counts.num_views() != self.augmentation_views.len()
        {
            out.push(format!(
                "selection matrix is {}x{}, expected {}x{}",
                self.source_counts.num_classes(),
                self.source_counts.num_views(),
                self.per_class.len(),
                self.augmentation_views.len()
            ));
        }
        if let Some(c) = self.fallback_classes.iter().find(|c| **c >= self.per_class.len()) {
            out.push(format!("fallback class {c} out of range"));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: OptimalViewTable =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let violations = table.violations();
        if violations.is_empty() {
            Ok(table)
        } else {
            Err(Error::Validation(violations))
        }
    }
}

/// Index (in `views.augmentation_views` order) of the least uncertain
/// augmentation view. The default view never competes.
pub fn select_optimal_view(
    record: &PredictionRecord,
    cfg: &MetricConfig,
    views: &ViewSet,
) -> Result<usize> {
    select_with(record, views, |r, v| uncertainty_of_view(r, v, cfg).map(|u| u.value))
}

fn select_with<F>(record: &PredictionRecord, views: &ViewSet, score: F) -> Result<usize>
where
    F: Fn(&PredictionRecord, &str) -> Result<f64>,
{
    let scores = views
        .augmentation_views
        .iter()
        .map(|v| score(record, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmin(&scores))
}

/// Fits the selection matrix and view table with the given metric.
pub fn fit(train: &Manifest, cfg: &MetricConfig) -> Result<(SelectionMatrix, OptimalViewTable)> {
    fit_with(train, cfg, |r, v| uncertainty_of_view(r, v, cfg).map(|u| u.value))
}

/// Like [`fit`], with a caller-supplied per-view uncertainty score.
pub fn fit_with<F>(
    train: &Manifest,
    cfg: &MetricConfig,
    score: F,
) -> Result<(SelectionMatrix, OptimalViewTable)>
where
    F: Fn(&PredictionRecord, &str) -> Result<f64>,
{
    cfg.check()?;
    if train.records.is_empty() {
        return Err(Error::Empty("training manifest"));
    }
    let mut counts = SelectionMatrix::zeros(train.num_classes, train.view_set.num_augmentations());
    for record in &train.records {
        let class = record.label()?;
        if class >= train.num_classes {
            return Err(Error::InvalidInput(format!(
                "record '{}': true_class {class} out of range",
                record.sample_id
            )));
        }
        let best = select_with(record, &train.view_set, &score)?;
        counts.increment(class, best);
    }
    let table = OptimalViewTable::from_counts(*cfg, &train.view_set, counts.clone())?;
    Ok((counts, table))
}
