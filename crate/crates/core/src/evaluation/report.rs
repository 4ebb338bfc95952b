use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BaselineReport, SweepResult};
use crate::error::{Error, Result};

/// What the `sweep` subcommand writes and `report` reads back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    pub baselines: BaselineReport,
    pub sweep: SweepResult,
}

impl SweepFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub comparison_csv: PathBuf,
    pub per_metric_csv: PathBuf,
    pub summary_json: PathBuf,
    pub curves: Vec<PathBuf>,
}

#[derive(Serialize)]
struct MetricSummary<'a> {
    metric: &'a str,
    min_tau_accuracy: f64,
    best_accuracy: f64,
    best_index: usize,
    taus: &'a [f64],
    accuracies: &'a [f64],
    n_augmented: &'a [usize],
}

#[derive(Serialize)]
struct Summary<'a> {
    baselines: &'a BaselineReport,
    int_tta_best: f64,
    metrics: Vec<MetricSummary<'a>>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pct(fraction: f64) -> String {
    format!("{:.2}", 100.0 * fraction)
}

/// Int. TTA accuracy: mean over metrics of each metric's best sweep accuracy.
pub fn int_tta_best(sweeps: &[SweepResult]) -> f64 {
    sweeps.iter().map(|s| s.best_accuracy).sum::<f64>() / sweeps.len() as f64
}

/// Writes `comparison.csv`, `per_metric.csv`, `summary.json` and one
/// `sweep_<metric>.svg` per sweep into `out_dir`.
pub fn report(baselines: &BaselineReport, sweeps: &[SweepResult], out_dir: &Path) -> Result<ReportFiles> {
    if sweeps.is_empty() {
        return Err(Error::Empty("sweep list"));
    }
    let mut seen = BTreeSet::new();
    for s in sweeps {
        if !seen.insert(s.metric.kind) {
            return Err(Error::InvalidInput(format!(
                "more than one sweep for metric {}",
                s.metric.kind
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let int_tta = int_tta_best(sweeps);
    let comparison_csv = out_dir.join("comparison.csv");
    let text = format!(
        "single_view,random_aug,int_tta\n{},{},{}\n",
        pct(baselines.single_view_accuracy),
        pct(baselines.random_aug_accuracy),
        pct(int_tta)
    );
    fs::write(&comparison_csv, text).map_err(|e| Error::io(&comparison_csv, e))?;

    let per_metric_csv = out_dir.join("per_metric.csv");
    let mut text = String::from("metric,min_tau_accuracy,best_accuracy,best_tau_index\n");
    for s in sweeps {
        let _ = writeln!(
            text,
            "{},{},{},{}",
            s.metric.kind,
            pct(s.min_tau_accuracy()),
            pct(s.best_accuracy),
            s.best_index
        );
    }
    fs::write(&per_metric_csv, text).map_err(|e| Error::io(&per_metric_csv, e))?;

    let summary_json = out_dir.join("summary.json");
    let summary = Summary {
        baselines,
        int_tta_best: int_tta,
        metrics: sweeps
            .iter()
            .map(|s| MetricSummary {
                metric: s.metric.kind.name(),
                min_tau_accuracy: s.min_tau_accuracy(),
                best_accuracy: s.best_accuracy,
                best_index: s.best_index,
                taus: &s.taus,
                accuracies: &s.accuracies,
                n_augmented: &s.n_augmented,
            })
            .collect(),
    };
    write_json(&summary_json, &summary)?;

    let mut curves = Vec::new();
    for s in sweeps {
        let path = out_dir.join(format!("sweep_{}.svg", s.metric.kind));
        fs::write(&path, sweep_svg(s, baselines.single_view_accuracy))
            .map_err(|e| Error::io(&path, e))?;
        curves.push(path);
    }

    Ok(ReportFiles {
        comparison_csv,
        per_metric_csv,
        summary_json,
        curves,
    })
}

fn ordinal(i: usize) -> String {
    let suffix = match (i % 10, i % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{i}{suffix}")
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

/// Accuracy-vs-threshold-index curve with the single-view baseline as a
/// dashed horizontal line. Thresholds are labelled by ordinal index only,
/// since their scale differs between metrics.
pub fn sweep_svg(sweep: &SweepResult, single_view_accuracy: f64) -> String {
    let n = sweep.accuracies.len();
    let lo = sweep
        .accuracies
        .iter()
        .copied()
        .fold(single_view_accuracy, f64::min);
    let hi = sweep
        .accuracies
        .iter()
        .copied()
        .fold(single_view_accuracy, f64::max);
    let pad = ((hi - lo) * 0.1).max(0.01);
    let (lo, hi) = ((lo - pad).max(0.0), (hi + pad).min(1.0));
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |i: usize| LEFT + plot_w * i as f64 / (n.max(2) - 1) as f64;
    let y = |acc: f64| TOP + plot_h * (hi - acc) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">Threshold sweep ({})</text>"#,
        WIDTH / 2.0,
        sweep.metric.kind
    );
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0:.1} {y0:.1} L{x0:.1} {y1:.1} L{x1:.1} {y1:.1}" fill="none" stroke="black"/>"#
    );
    for t in 0..=4 {
        let acc = lo + (hi - lo) * t as f64 / 4.0;
        let ty = y(acc);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            ty + 4.0,
            pct(acc)
        );
    }
    for i in 0..n {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x(i),
            y1 + 18.0,
            ordinal(i)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">threshold index</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 14.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">accuracy (%)</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    let by = y(single_view_accuracy);
    let _ = writeln!(
        svg,
        r##"<line class="baseline" x1="{x0:.1}" y1="{by:.1}" x2="{x1:.1}" y2="{by:.1}" stroke="#555" stroke-dasharray="6 4"/>"##
    );
    let points: Vec<String> = sweep
        .accuracies
        .iter()
        .enumerate()
        .map(|(i, a)| format!("{:.1},{:.1}", x(i), y(*a)))
        .collect();
    let _ = writeln!(
        svg,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        points.join(" ")
    );
    for (i, a) in sweep.accuracies.iter().enumerate() {
        let _ = writeln!(
            svg,
            r##"<circle class="point" cx="{:.1}" cy="{:.1}" r="4" fill="#1f77b4"/>"##,
            x(i),
            y(*a)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
