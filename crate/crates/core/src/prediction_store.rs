//! Prediction data model and the line-delimited manifest format.
//!
//! A manifest file is UTF-8 JSON Lines. Line 1 is the header
//! `{name, num_classes, default_view, augmentation_views}`; every following
//! non-blank line is one record
//! `{sample_id, true_class, views: {view_id: {logits, mc_logits?, grad_l1?}}}`.
//! Logits are stored rather than probabilities so temperature scaling stays
//! computable downstream. Floats are written in shortest round-trip form and
//! parsed with correct rounding, so save/load is lossless.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ViewId = String;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSet {
    pub default_view: ViewId,
    pub augmentation_views: Vec<ViewId>,
}

impl ViewSet {
    pub fn new(default_view: impl Into<ViewId>, augmentation_views: Vec<ViewId>) -> Result<Self> {
        let set = ViewSet {
            default_view: default_view.into(),
            augmentation_views,
        };
        let violations = set.violations();
        if violations.is_empty() {
            Ok(set)
        } else {
            Err(Error::Validation(violations))
        }
    }

    pub fn num_augmentations(&self) -> usize {
        self.augmentation_views.len()
    }

    pub fn augmentation_index(&self, view: &str) -> Option<usize> {
        self.augmentation_views.iter().position(|v| v == view)
    }

    pub fn contains(&self, view: &str) -> bool {
        self.default_view == view || self.augmentation_index(view).is_some()
    }

    /// Default view first, then augmentations in order.
    pub fn iter(&self) -> impl Iterator<Item = &ViewId> {
        std::iter::once(&self.default_view).chain(self.augmentation_views.iter())
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.augmentation_views.is_empty() {
            out.push("view set needs at least one augmentation view".to_string());
        }
        if self.augmentation_views.contains(&self.default_view) {
            out.push(format!(
                "default view '{}' is also listed as an augmentation view",
                self.default_view
            ));
        }
        let mut seen = HashSet::new();
        for view in &self.augmentation_views {
            if !seen.insert(view) {
                out.push(format!("duplicate augmentation view '{view}'"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPrediction {
    pub logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_logits: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_l1: Option<f64>,
}

impl ViewPrediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        ViewPrediction {
            logits,
            mc_logits: None,
            grad_l1: None,
        }
    }
}

/// One sample's predictions across views.
///
/// `true_class` is `None` for unlabeled (pure inference) records; every
/// accuracy computation rejects such records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub true_class: Option<usize>,
    pub views: IndexMap<ViewId, ViewPrediction>,
}

impl PredictionRecord {
    pub fn view(&self, view: &str) -> Result<&ViewPrediction> {
        self.views.get(view).ok_or_else(|| Error::MissingView {
            sample_id: self.sample_id.clone(),
            view: view.to_string(),
        })
    }

    pub fn label(&self) -> Result<usize> {
        self.true_class.ok_or_else(|| Error::Unlabeled {
            sample_id: self.sample_id.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub num_classes: usize,
    pub view_set: ViewSet,
    pub records: Vec<PredictionRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    name: String,
    num_classes: usize,
    default_view: ViewId,
    augmentation_views: Vec<ViewId>,
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".to_string()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest entry; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

fn vector_violations(what: &str, values: &[f64], k: usize, out: &mut Vec<String>) {
    if values.len() != k {
        out.push(format!(
            "{what}: logit length mismatch (expected {k}, got {})",
            values.len()
        ));
    }
    if values.iter().any(|z| !z.is_finite()) {
        out.push(format!("{what}: non-finite logit"));
    }
}

/// Invariant violations for a single record against a header.
pub fn record_violations(view_set: &ViewSet, num_classes: usize, record: &PredictionRecord) -> Vec<String> {
    let id = &record.sample_id;
    let mut out = Vec::new();
    if let Some(c) = record.true_class {
        if c >= num_classes {
            out.push(format!(
                "record '{id}': true_class {c} out of range for {num_classes} classes"
            ));
        }
    }
    if !record.views.contains_key(&view_set.default_view) {
        out.push(format!(
            "record '{id}': missing default view '{}'",
            view_set.default_view
        ));
    }
    for (view, pred) in &record.views {
        if !view_set.contains(view) {
            out.push(format!("record '{id}': unknown view id '{view}'"));
            continue;
        }
        vector_violations(&format!("record '{id}', view '{view}'"), &pred.logits, num_classes, &mut out);
        if let Some(samples) = &pred.mc_logits {
            if samples.len() < 2 {
                out.push(format!(
                    "record '{id}', view '{view}': mc_logits needs at least 2 samples, got {}",
                    samples.len()
                ));
            }
            for (m, z) in samples.iter().enumerate() {
                vector_violations(
                    &format!("record '{id}', view '{view}', mc sample {m}"),
                    z,
                    num_classes,
                    &mut out,
                );
            }
        }
        if let Some(g) = pred.grad_l1 {
            if !(g.is_finite() && g >= 0.0) {
                out.push(format!(
                    "record '{id}', view '{view}': grad_l1 must be finite and nonnegative, got {g}"
                ));
            }
        }
    }
    out
}

fn header_violations(name: &str, num_classes: usize, view_set: &ViewSet) -> Vec<String> {
    let mut out = Vec::new();
    if num_classes < 2 {
        out.push(format!("manifest '{name}': num_classes must be at least 2, got {num_classes}"));
    }
    out.extend(view_set.violations());
    out
}

/// All invariant violations of a manifest; empty iff it is well formed.
pub fn validate(manifest: &Manifest) -> Vec<String> {
    let mut out = header_violations(&manifest.name, manifest.num_classes, &manifest.view_set);
    let mut seen = HashSet::new();
    for record in &manifest.records {
        if !seen.insert(record.sample_id.as_str()) {
            out.push(format!("duplicate sample_id '{}'", record.sample_id));
        }
        out.extend(record_violations(&manifest.view_set, manifest.num_classes, record));
    }
    out
}

/// Parses a manifest stream. `source` is only used in error messages.
pub fn read_manifest<R: BufRead>(reader: R, source: &Path) -> Result<Manifest> {
    let malformed = |line: usize, message: String| Error::Malformed {
        path: source.to_path_buf(),
        line,
        message,
    };

    let mut header: Option<Manifest> = None;
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match header.as_mut() {
            None => {
                let h: Header = serde_json::from_str(&line)
                    .map_err(|e| malformed(lineno, format!("malformed header: {e}")))?;
                let view_set = ViewSet {
                    default_view: h.default_view,
                    augmentation_views: h.augmentation_views,
                };
                if let Some(v) = header_violations(&h.name, h.num_classes, &view_set).into_iter().next() {
                    return Err(malformed(lineno, v));
                }
                header = Some(Manifest {
                    name: h.name,
                    num_classes: h.num_classes,
                    view_set,
                    records: Vec::new(),
                });
            }
            Some(manifest) => {
                let record: PredictionRecord = serde_json::from_str(&line)
                    .map_err(|e| malformed(lineno, format!("malformed record: {e}")))?;
                if let Some(v) = record_violations(&manifest.view_set, manifest.num_classes, &record)
                    .into_iter()
                    .next()
                {
                    return Err(malformed(lineno, v));
                }
                if !seen.insert(record.sample_id.clone()) {
                    return Err(malformed(
                        lineno,
                        format!("duplicate sample_id '{}'", record.sample_id),
                    ));
                }
                manifest.records.push(record);
            }
        }
    }
    header.ok_or_else(|| malformed(1, "missing header line".to_string()))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(BufReader::new(file), path)
}

pub fn write_manifest<W: Write>(manifest: &Manifest, mut out: W) -> std::io::Result<()> {
    let header = Header {
        name: manifest.name.clone(),
        num_classes: manifest.num_classes,
        default_view: manifest.view_set.default_view.clone(),
        augmentation_views: manifest.view_set.augmentation_views.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for record in &manifest.records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Validates, then writes. Nothing is written if validation fails.
pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let violations = validate(manifest);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest(manifest, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn views() -> ViewSet {
        ViewSet::new("front", vec!["left".into(), "back".into()]).unwrap()
    }

    fn record(id: &str, class: usize, k: usize) -> PredictionRecord {
        let mut views_map = IndexMap::new();
        for (i, v) in ["front", "left", "back"].iter().enumerate() {
            let logits = (0..k).map(|j| (i * k + j) as f64 * 0.1 - 0.3).collect();
            views_map.insert(v.to_string(), ViewPrediction::from_logits(logits));
        }
        PredictionRecord {
            sample_id: id.into(),
            true_class: Some(class),
            views: views_map,
        }
    }

    fn manifest(records: Vec<PredictionRecord>) -> Manifest {
        Manifest {
            name: "unit".into(),
            num_classes: 3,
            view_set: views(),
            records,
        }
    }

    fn parse(text: &str) -> Result<Manifest> {
        read_manifest(text.as_bytes(), Path::new("mem.jsonl"))
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
        let p = softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[f64::NAN, 0.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(softmax(&[f64::INFINITY, 0.0]), Err(Error::InvalidInput(_))));
        assert!(softmax(&[1.0]).is_err());
    }

    #[test]
    fn view_set_rules() {
        assert!(ViewSet::new("a", vec![]).is_err());
        assert!(ViewSet::new("a", vec!["a".into()]).is_err());
        assert!(ViewSet::new("a", vec!["b".into(), "b".into()]).is_err());
        assert!(ViewSet::new("a", vec!["b".into()]).is_ok());
    }

    #[test]
    fn validate_examples() {
        let m = manifest(vec![record("a", 0, 3), record("b", 1, 3)]);
        assert!(validate(&m).is_empty());

        let m = manifest(vec![record("a", 0, 3), record("a", 1, 3)]);
        let v = validate(&m);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("'a'"));

        let mut r = record("a", 0, 3);
        r.views.get_mut("left").unwrap().grad_l1 = Some(-1.0);
        assert_eq!(validate(&manifest(vec![r])).len(), 1);
    }

    #[test]
    fn validate_catches_structural_problems() {
        let mut r = record("a", 5, 3);
        r.views.insert("top".into(), ViewPrediction::from_logits(vec![0.0; 3]));
        r.views.get_mut("back").unwrap().mc_logits = Some(vec![vec![0.0; 3]]);
        let v = validate(&manifest(vec![r]));
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn load_two_records() {
        let text = r#"{"name":"t","num_classes":2,"default_view":"d","augmentation_views":["a"]}
{"sample_id":"s1","true_class":0,"views":{"d":{"logits":[1.0,0.0]},"a":{"logits":[0.5,0.1],"grad_l1":0.3}}}
{"sample_id":"s2","true_class":1,"views":{"d":{"logits":[0.0,1.0],"mc_logits":[[0.0,1.0],[0.2,0.9]]}}}
"#;
        let m = parse(text).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].views["a"].grad_l1, Some(0.3));
        assert!(validate(&m).is_empty());
    }

    #[test]
    fn load_reports_missing_default_view_with_line() {
        let text = r#"{"name":"t","num_classes":2,"default_view":"d","augmentation_views":["a"]}
{"sample_id":"s1","true_class":0,"views":{"a":{"logits":[1.0,0.0]}}}
"#;
        let err = parse(text).unwrap_err().to_string();
        assert!(err.contains("missing default view"), "{err}");
        assert!(err.contains("mem.jsonl:2"), "{err}");
    }

    #[test]
    fn load_reports_short_logits() {
        let text = r#"{"name":"t","num_classes":3,"default_view":"d","augmentation_views":["a"]}
{"sample_id":"s1","true_class":0,"views":{"d":{"logits":[1.0,0.0,0.0]}}}
{"sample_id":"s2","true_class":0,"views":{"d":{"logits":[1.0,0.0]}}}
"#;
        let err = parse(text).unwrap_err().to_string();
        assert!(err.contains("logit length mismatch"), "{err}");
        assert!(err.contains(":3:"), "{err}");
    }

    #[test]
    fn load_rejects_unknown_view_and_duplicates() {
        let head = r#"{"name":"t","num_classes":2,"default_view":"d","augmentation_views":["a"]}"#;
        let unknown = format!(
            "{head}\n{}\n",
            r#"{"sample_id":"s1","true_class":0,"views":{"d":{"logits":[1,0]},"z":{"logits":[1,0]}}}"#
        );
        assert!(parse(&unknown).unwrap_err().to_string().contains("unknown view id"));
        let row = r#"{"sample_id":"s1","true_class":0,"views":{"d":{"logits":[1,0]}}}"#;
        let dup = format!("{head}\n{row}\n{row}\n");
        assert!(parse(&dup).unwrap_err().to_string().contains("duplicate sample_id"));
        let garbage = format!("{head}\nnot json\n");
        assert!(parse(&garbage).unwrap_err().to_string().contains("malformed record"));
        assert!(parse("").unwrap_err().to_string().contains("missing header"));
    }

    #[test]
    fn unlabeled_records_load() {
        let text = r#"{"name":"t","num_classes":2,"default_view":"d","augmentation_views":["a"]}
{"sample_id":"s1","true_class":null,"views":{"d":{"logits":[1.0,0.0]}}}
"#;
        let m = parse(text).unwrap();
        assert!(matches!(m.records[0].label(), Err(Error::Unlabeled { .. })));
    }

    #[test]
    fn save_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut r = record("a", 2, 3);
        r.views.get_mut("front").unwrap().mc_logits = Some(vec![vec![0.1, 1e-300, -7.25e10]; 2]);
        r.views.get_mut("front").unwrap().grad_l1 = Some(std::f64::consts::PI);
        let m = manifest(vec![r, record("b", 0, 3)]);
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);

        let empty = manifest(vec![]);
        save_manifest(&empty, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(load_manifest(&path).unwrap(), empty);
    }

    #[test]
    fn save_invalid_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = manifest(vec![record("a", 0, 3), record("a", 0, 3)]);
        assert!(matches!(save_manifest(&m, &path), Err(Error::Validation(_))));
        assert!(!path.exists());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_manifest("/nonexistent/dir/m.jsonl").unwrap_err().to_string();
        assert!(err.contains("/nonexistent/dir/m.jsonl"));
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in prop::collection::vec(-50.0f64..50.0, 2..12)) {
            let p = softmax(&z).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|v| *v > 0.0));
            prop_assert_eq!(argmax(&p), argmax(&z));
        }

        #[test]
        fn softmax_shift_invariant(
            z in prop::collection::vec(-50.0f64..50.0, 2..12),
            c in -1000.0f64..1000.0,
        ) {
            let p = softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn save_load_is_lossless(
            rows in prop::collection::vec(
                (prop::collection::vec(prop::num::f64::NORMAL, 3), prop::option::of(0.0f64..1e6)),
                0..6,
            ),
        ) {
            let records = rows.into_iter().enumerate().map(|(i, (logits, g))| {
                let mut r = record(&format!("s{i}"), i % 3, 3);
                r.views.get_mut("front").unwrap().logits = logits;
                r.views.get_mut("back").unwrap().grad_l1 = g;
                r
            }).collect();
            let m = manifest(records);
            let mut buf = Vec::new();
            write_manifest(&m, &mut buf).unwrap();
            let loaded = read_manifest(buf.as_slice(), Path::new("mem")).unwrap();
            let mut again = Vec::new();
            write_manifest(&loaded, &mut again).unwrap();
            prop_assert_eq!(&loaded, &m);
            prop_assert_eq!(buf, again);
        }
    }
}
