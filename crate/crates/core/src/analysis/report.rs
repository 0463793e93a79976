//! CSV, JSON and SVG output of analysis results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ablation::RobustnessCurve;
use super::benchmark::{benchmark_csv, BenchmarkEntry};
use super::flow::GradientFlowRecord;
use crate::error::{create_dir_all, write_json, Error, Result};

pub const FLOW_CSV: &str = "flow.csv";
pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const ROBUSTNESS_SUMMARY_CSV: &str = "robustness_summary.csv";
pub const BENCHMARK_CSV: &str = "benchmark.csv";
pub const REPORT_JSON: &str = "report.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Report {
    pub flow: Vec<GradientFlowRecord>,
    pub robustness: Vec<RobustnessCurve>,
    pub benchmark: Vec<BenchmarkEntry>,
}

fn num(v: f64) -> String {
    format!("{v:.9}")
}

pub fn flow_csv(records: &[GradientFlowRecord]) -> String {
    let mut out = String::from("step,module,value,fraction\n");
    for r in records {
        for m in &r.modules {
            let frac = m.fraction.map_or_else(String::new, num);
            let _ = writeln!(out, "{},{},{},{frac}", r.step, m.module, num(m.value));
        }
    }
    out
}

/// One row per `(model, ratio, repeat)`.
pub fn robustness_csv(curves: &[RobustnessCurve]) -> String {
    let mut out = String::from("model,ratio,repeat,seed,miou,overall_accuracy\n");
    for c in curves {
        for p in &c.points {
            for r in 0..p.seeds.len() {
                let _ = writeln!(
                    out,
                    "{},{:.2},{r},{},{},{}",
                    c.model,
                    p.ratio,
                    p.seeds[r],
                    num(p.miou[r]),
                    num(p.overall_accuracy[r])
                );
            }
        }
    }
    out
}

pub fn robustness_summary_csv(curves: &[RobustnessCurve]) -> String {
    let mut out = String::from("model,ratio,miou_mean,miou_std,oa_mean,oa_std\n");
    for c in curves {
        for p in &c.points {
            let (m, ms) = p.miou_stats();
            let (a, as_) = p.oa_stats();
            let _ = writeln!(out, "{},{:.2},{},{},{},{}", c.model, p.ratio, num(m), num(ms), num(a), num(as_));
        }
    }
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// A static line chart with one polyline per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 150.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let (ax0, ax1, ay0, ay1) = (left, w - right, h - bottom, top);
    let _ = writeln!(s, r#"<path d="M{ax0},{ay1} L{ax0},{ay0} L{ax1},{ay0}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(fx), ay0 + 16.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, ax0 - 6.0, sy(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (ax0 + ax1) / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (ay0 + ay1) / 2.0,
        (ay0 + ay1) / 2.0,
        escape(y_label)
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{:.1}" width="12" height="3" fill="{color}"/>"#, ax1 + 10.0, ly);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}">{}</text>"#, ax1 + 28.0, ly + 5.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn flow_chart(records: &[GradientFlowRecord]) -> String {
    let mut modules: Vec<&str> = records.iter().flat_map(|r| r.modules.iter().map(|m| m.module.as_str())).collect();
    modules.sort_unstable();
    modules.dedup();
    let series: Vec<(String, Vec<(f64, f64)>)> = modules
        .iter()
        .map(|&name| {
            let pts = records
                .iter()
                .filter_map(|r| {
                    let m = r.modules.iter().find(|m| m.module == name)?;
                    Some((r.step as f64, m.fraction?))
                })
                .collect();
            (name.to_string(), pts)
        })
        .collect();
    line_chart("Gradient flow share per module", "step", "fraction of predicted decrease", &series)
}

fn robustness_chart(curves: &[RobustnessCurve]) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|c| (c.model.clone(), c.points.iter().map(|p| (p.ratio, p.miou_stats().0)).collect()))
        .collect();
    line_chart("Optical acquisitions removed at inference", "kept optical ratio", "mIoU", &series)
}

fn put(dir: &Path, name: &str, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes every non-empty section of `report` under `out_dir` (created if
/// missing) and returns the written paths. File names are fixed.
pub fn report_emit(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir_all(out_dir)?;
    let mut written = Vec::new();
    if !report.flow.is_empty() {
        put(out_dir, FLOW_CSV, &flow_csv(&report.flow), &mut written)?;
        put(out_dir, "flow.svg", &flow_chart(&report.flow), &mut written)?;
    }
    if !report.robustness.is_empty() {
        put(out_dir, ROBUSTNESS_CSV, &robustness_csv(&report.robustness), &mut written)?;
        put(out_dir, ROBUSTNESS_SUMMARY_CSV, &robustness_summary_csv(&report.robustness), &mut written)?;
        put(out_dir, "robustness.svg", &robustness_chart(&report.robustness), &mut written)?;
    }
    if !report.benchmark.is_empty() {
        put(out_dir, BENCHMARK_CSV, &benchmark_csv(&report.benchmark), &mut written)?;
    }
    let json = out_dir.join(REPORT_JSON);
    write_json(&json, report)?;
    written.push(json);
    Ok(written)
}
