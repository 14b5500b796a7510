//! Robustness curves: value against corruption ratio, one series per model
//! variant, seeds averaged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use k3m::corruption::Split;
use k3m::trainer::MetricRecord;

use crate::CliError;

type Key = (String, String, String);

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub ratio: u32,
    pub variant: String,
    pub value: f64,
    pub seeds: usize,
}

fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), k + 1)))
        })
        .collect()
}

/// Test-split points grouped by (task, kind, metric).
pub fn series(records: &[MetricRecord]) -> BTreeMap<Key, Vec<Point>> {
    let mut acc: BTreeMap<Key, BTreeMap<(u32, String), Vec<f64>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == Split::Test) {
        let Some(s) = r.setting else { continue };
        let key = (r.task.to_string(), s.kind.to_string(), r.metric_name.clone());
        acc.entry(key)
            .or_default()
            .entry((s.ratio, r.variant.clone()))
            .or_default()
            .push(r.value);
    }
    acc.into_iter()
        .map(|(key, cells)| {
            let points = cells
                .into_iter()
                .map(|((ratio, variant), vals)| Point {
                    ratio,
                    variant,
                    value: vals.iter().sum::<f64>() / vals.len() as f64,
                    seeds: vals.len(),
                })
                .collect();
            (key, points)
        })
        .collect()
}

pub fn csv(points: &[Point]) -> String {
    let mut out = String::from("ratio,variant,value,seeds\n");
    for p in points {
        let _ = writeln!(out, "{},{},{:.6},{}", p.ratio, p.variant, p.value, p.seeds);
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub fn svg(title: &str, metric: &str, points: &[Point]) -> String {
    let (w, h, left, right, top, bottom) = (560.0, 360.0, 60.0, 150.0, 30.0, 45.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let lo = points.iter().map(|p| p.value).fold(f64::INFINITY, f64::min).min(0.0);
    let hi = points.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max).max(100.0);
    let x = |r: u32| left + pw * r as f64 / 100.0;
    let y = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" font-size="13">{}</text>"#, left, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for t in 0..=5 {
        let r = t * 20;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{r}</text>"#,
            x(r),
            top + ph + 15.0
        );
        let v = lo + (hi - lo) * t as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.0}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">corruption ratio (%)</text>"#,
        left + pw / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(14 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        top + ph / 2.0,
        escape(metric)
    );

    let mut by_variant: BTreeMap<&str, Vec<&Point>> = BTreeMap::new();
    for p in points {
        by_variant.entry(&p.variant).or_default().push(p);
    }
    for (k, (variant, pts)) in by_variant.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}{:.1} {:.1}", if i == 0 { "M" } else { "L" }, x(p.ratio), y(p.value)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.join(" "));
        for p in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                x(p.ratio),
                y(p.value)
            );
        }
        let ly = top + 14.0 * k as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw + 12.0,
            ly - 8.0,
            left + pw + 26.0,
            ly + 1.0,
            escape(variant)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn file_stem(task: &str, kind: &str, metric: &str) -> String {
    format!("{task}_{kind}_{}", metric.replace('@', "_at_"))
}

/// Writes a CSV and an SVG per series into `out`; returns the paths written.
pub fn plot(metrics: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let records = read_metrics(metrics)?;
    let all = series(&records);
    if all.is_empty() {
        return Err(CliError::Usage(format!(
            "{} holds no test metrics of a corruption setting",
            metrics.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| CliError::Io(out.to_path_buf(), e))?;
    let mut written = Vec::new();
    for ((task, kind, metric), points) in &all {
        let stem = file_stem(task, kind, metric);
        for (ext, body) in [
            ("csv", csv(points)),
            ("svg", svg(&format!("{task} / {kind}"), metric, points)),
        ] {
            let path = out.join(format!("{stem}.{ext}"));
            fs::write(&path, body).map_err(|e| CliError::Io(path.clone(), e))?;
            written.push(path);
        }
    }
    Ok(written)
}
