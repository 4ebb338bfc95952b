use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prediction_store::{ViewId, ViewSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub sample_id: String,
    pub true_class: usize,
    pub views: IndexMap<ViewId, Vec<f64>>,
}

/// Per-view feature vectors for a set of samples. Stored like a manifest:
/// a JSON header line followed by one sample per line.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub name: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub view_set: ViewSet,
    pub samples: Vec<FeatureSample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    num_classes: usize,
    feature_dim: usize,
    default_view: ViewId,
    augmentation_views: Vec<ViewId>,
}

impl FeatureSet {
    pub fn violations(&self) -> Vec<String> {
        let mut out = self.view_set.violations();
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(&s.sample_id) {
                out.push(format!("duplicate sample_id '{}'", s.sample_id));
            }
            if s.true_class >= self.num_classes {
                out.push(format!("sample '{}': true_class out of range", s.sample_id));
            }
            for view in self.view_set.iter() {
                match s.views.get(view) {
                    None => out.push(format!("sample '{}': missing view '{view}'", s.sample_id)),
                    Some(x) if x.len() != self.feature_dim => out.push(format!(
                        "sample '{}', view '{view}': expected {} features, got {}",
                        s.sample_id,
                        self.feature_dim,
                        x.len()
                    )),
                    Some(x) if x.iter().any(|v| !v.is_finite()) => out.push(format!(
                        "sample '{}', view '{view}': non-finite feature",
                        s.sample_id
                    )),
                    Some(_) => {}
                }
            }
            if s.views.len() != self.view_set.iter().count() {
                out.push(format!("sample '{}': unexpected extra views", s.sample_id));
            }
        }
        out
    }
}

pub fn save_features(features: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let violations = features.violations();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let header = Header {
        name: features.name.clone(),
        num_classes: features.num_classes,
        feature_dim: features.feature_dim,
        default_view: features.view_set.default_view.clone(),
        augmentation_views: features.view_set.augmentation_views.clone(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for s in &features.samples {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, message: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut set: Option<FeatureSet> = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match set.as_mut() {
            None => {
                let h: Header = serde_json::from_str(&line)
                    .map_err(|e| malformed(idx + 1, format!("malformed header: {e}")))?;
                set = Some(FeatureSet {
                    name: h.name,
                    num_classes: h.num_classes,
                    feature_dim: h.feature_dim,
                    view_set: ViewSet {
                        default_view: h.default_view,
                        augmentation_views: h.augmentation_views,
                    },
                    samples: Vec::new(),
                });
            }
            Some(set) => {
                let s: FeatureSample = serde_json::from_str(&line)
                    .map_err(|e| malformed(idx + 1, format!("malformed sample: {e}")))?;
                set.samples.push(s);
            }
        }
    }
    let set = set.ok_or_else(|| malformed(1, "missing header line".into()))?;
    let violations = set.violations();
    if violations.is_empty() {
        Ok(set)
    } else {
        Err(Error::Validation(violations))
    }
}
