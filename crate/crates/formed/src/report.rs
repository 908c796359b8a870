//! Metric CSV files and SVG plots.
//!
//! Every metric CSV has the columns
//! `dataset,split,seed,ratio,accuracy,precision,recall,f1,auroc,auprc`;
//! `ratio` is empty outside few-shot runs. Floats are written in the shortest
//! form that parses back to the same value.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use formed_core::metrics::{Aggregate, MetricReport, Scores, METRIC_NAMES};

use crate::error::{CliError, Result};

pub const REPORTS_CSV: &str = "reports.csv";
pub const DELTAS_CSV: &str = "deltas.csv";
pub const FEWSHOT_CSV: &str = "fewshot.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const DELTAS_SVG: &str = "deltas.svg";
pub const FEWSHOT_SVG: &str = "fewshot.svg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Row {
    dataset: String,
    split: String,
    seed: u64,
    ratio: Option<f64>,
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    auroc: f64,
    auprc: f64,
}

impl From<&MetricReport> for Row {
    fn from(r: &MetricReport) -> Self {
        let s = &r.scores;
        Row {
            dataset: r.dataset.clone(),
            split: r.split.clone(),
            seed: r.seed,
            ratio: r.ratio,
            accuracy: s.accuracy,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            auroc: s.auroc,
            auprc: s.auprc,
        }
    }
}

impl From<Row> for MetricReport {
    fn from(r: Row) -> Self {
        let scores = Scores::from_array([r.accuracy, r.precision, r.recall, r.f1, r.auroc, r.auprc]);
        MetricReport::new(&r.dataset, &r.split, r.seed, r.ratio, scores)
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

pub fn write_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    if reports.is_empty() {
        w.write_record(header()).map_err(csv_err(path))?;
    }
    for r in reports {
        w.serialize(Row::from(r)).map_err(csv_err(path))?;
    }
    w.flush().map_err(CliError::io(path))?;
    Ok(())
}

fn header() -> Vec<&'static str> {
    let mut h = vec!["dataset", "split", "seed", "ratio"];
    h.extend(METRIC_NAMES);
    h
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let got: Vec<String> = r.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    if got != header() {
        return Err(CliError::Data(format!("{}: unexpected header {got:?}", path.display())));
    }
    r.deserialize::<Row>()
        .map(|row| row.map(MetricReport::from).map_err(csv_err(path)))
        .collect()
}

/// One row per `(dataset, split, ratio)` with `mean_*` and `std_*` columns.
pub fn write_summary(path: &Path, aggregates: &[Aggregate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut h = vec!["dataset".to_string(), "split".into(), "ratio".into(), "seeds".into()];
    h.extend(METRIC_NAMES.iter().map(|m| format!("mean_{m}")));
    h.extend(METRIC_NAMES.iter().map(|m| format!("std_{m}")));
    w.write_record(&h).map_err(csv_err(path))?;
    for a in aggregates {
        let mut rec = vec![a.dataset.clone(), a.split.clone(), a.ratio.map(|r| r.to_string()).unwrap_or_default(), a.seeds.to_string()];
        rec.extend(a.mean.to_array().iter().map(f64::to_string));
        rec.extend(a.std.to_array().iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(CliError::io(path))?;
    Ok(())
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const M: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_axis(s: &mut String, lo: f64, hi: f64) {
    let _ = writeln!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M);
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = H - M - (H - 2.0 * M) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, M - 4.0, y + 4.0);
        let _ = writeln!(s, r##"<line x1="{M}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, W - M);
    }
}

/// Min/max range of each metric's test-minus-validation delta, per dataset.
pub fn deltas_svg(deltas: &[MetricReport]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    for d in deltas {
        if !datasets.contains(&d.dataset.as_str()) {
            datasets.push(&d.dataset);
        }
    }
    let all = deltas.iter().flat_map(|d| d.scores.to_array());
    let bound = all.fold(0.05f64, |m, v| m.max(v.abs()));
    let (lo, hi) = (-bound, bound);
    let to_y = |v: f64| H - M - (v - lo) / (hi - lo) * (H - 2.0 * M);
    let mut s = svg_open("test - validation delta");
    y_axis(&mut s, lo, hi);
    let slot = (W - 2.0 * M) / datasets.len().max(1) as f64;
    for (di, name) in datasets.iter().enumerate() {
        let x0 = M + slot * di as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x0 + slot / 2.0, H - M + 16.0, escape(name));
        for m in 0..6 {
            let vals: Vec<f64> = deltas.iter().filter(|d| d.dataset == *name).map(|d| d.scores.to_array()[m]).collect();
            let (mn, mx) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let x = x0 + slot * (m as f64 + 1.0) / 7.0;
            let _ = writeln!(s, r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="{}" stroke-width="3"/>"#, to_y(mn), to_y(mx), COLORS[m]);
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{}" r="2" fill="{}"/>"#, to_y((mn + mx) / 2.0), COLORS[m]);
        }
    }
    legend(&mut s);
    s.push_str("</svg>\n");
    s
}

fn legend(s: &mut String) {
    for (m, name) in METRIC_NAMES.iter().enumerate() {
        let x = M + 90.0 * m as f64;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, H - 22.0, COLORS[m]);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{name}</text>"#, x + 14.0, H - 13.0);
    }
}

/// Mean metric against training-data ratio, one line per metric.
pub fn fewshot_svg(aggregates: &[Aggregate]) -> String {
    let mut pts: Vec<&Aggregate> = aggregates.iter().filter(|a| a.ratio.is_some()).collect();
    pts.sort_by(|a, b| a.ratio.partial_cmp(&b.ratio).unwrap());
    let title = pts.first().map(|a| format!("few-shot {}", a.dataset)).unwrap_or_else(|| "few-shot".into());
    let mut s = svg_open(&title);
    y_axis(&mut s, 0.0, 1.0);
    let to_x = |r: f64| M + r * (W - 2.0 * M);
    let to_y = |v: f64| H - M - v.clamp(0.0, 1.0) * (H - 2.0 * M);
    let _ = writeln!(s, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M);
    for a in &pts {
        let r = a.ratio.unwrap();
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{r}</text>"#, to_x(r), H - M + 14.0);
    }
    for m in 0..6 {
        let line: Vec<String> =
            pts.iter().map(|a| format!("{},{}", to_x(a.ratio.unwrap()), to_y(a.mean.to_array()[m]))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{}"/>"#, line.join(" "), COLORS[m]);
    }
    legend(&mut s);
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    fs::write(path, svg).map_err(CliError::io(path))
}
