//! Metric tables on disk (CSV and JSON) and a bar chart of one metric with
//! its bootstrap intervals as standalone SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use qbin_core::evaluation::{MetricReport, MetricRow};

use crate::fieldio::{FieldIoError, Result};

pub fn write_csv(report: &MetricReport, path: &Path) -> Result<()> {
    write_text(path, &report.to_csv())
}

pub fn write_json(report: &MetricReport, path: &Path) -> Result<()> {
    let text =
        serde_json::to_string_pretty(report).map_err(|e| FieldIoError::Config(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| FieldIoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| FieldIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Inverse of [`MetricReport::to_csv`].
pub fn parse_csv(text: &str) -> Result<MetricReport> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == MetricReport::CSV_HEADER => {}
        other => {
            return Err(FieldIoError::BadHeader(format!(
                "unexpected CSV header {other:?}"
            )))
        }
    }
    let mut report = MetricReport::default();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(FieldIoError::BadHeader(format!(
                "row {} has {} columns",
                i + 2,
                f.len()
            )));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| FieldIoError::BadHeader(format!("row {}: {s:?}", i + 2)))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| FieldIoError::BadHeader(format!("row {}: {s:?}", i + 2)))
        };
        report.push(MetricRow {
            metric: f[0].to_string(),
            lead_week: int(f[1])? as u32,
            region: f[2].to_string(),
            score: num(f[3])?,
            ci_lower: num(f[4])?,
            ci_upper: num(f[5])?,
            significant: f[6]
                .parse()
                .map_err(|_| FieldIoError::BadHeader(format!("row {}: {:?}", i + 2, f[6])))?,
            n_samples: int(f[7])?,
        })?;
    }
    Ok(report)
}

pub fn read_csv(path: &Path) -> Result<MetricReport> {
    parse_csv(
        &fs::read_to_string(path).map_err(|source| FieldIoError::Io {
            path: path.to_path_buf(),
            source,
        })?,
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Bars of `metric` for every (lead week, region) row, whiskers at the
/// interval bounds, significant bars filled darker.
pub fn bar_chart_svg(report: &MetricReport, metric: &str) -> Result<String> {
    let rows: Vec<&MetricRow> = report.rows.iter().filter(|r| r.metric == metric).collect();
    if rows.is_empty() {
        return Err(FieldIoError::BadHeader(format!(
            "no rows for metric {metric}"
        )));
    }
    let (w, h, pad, bar) = (120.0 + 70.0 * rows.len() as f64, 320.0, 50.0, 40.0);
    let lo = rows
        .iter()
        .map(|r| r.ci_lower.min(r.score))
        .fold(0.0_f64, f64::min);
    let hi = rows
        .iter()
        .map(|r| r.ci_upper.max(r.score))
        .fold(0.0_f64, f64::max);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y = |v: f64| pad + (hi - v) / span * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-size="14">{}</text>"#,
        pad,
        escape(metric)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" x2="{}" y1="{y0:.2}" y2="{y0:.2}" stroke="black"/>"#,
        w - 10.0,
        y0 = y(0.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="5" y="{:.2}">{hi:.3}</text><text x="5" y="{:.2}">{lo:.3}</text>"#,
        y(hi) + 4.0,
        y(lo) + 4.0
    );
    for (i, r) in rows.iter().enumerate() {
        let x = pad + 20.0 + 70.0 * i as f64;
        let (top, bottom) = (y(r.score.max(0.0)), y(r.score.min(0.0)));
        let fill = if r.significant { "#2b6cb0" } else { "#a0c4e8" };
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{top:.2}" width="{bar}" height="{:.2}" fill="{fill}"/>"#,
            bottom - top
        );
        let cx = x + bar / 2.0;
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.2}" x2="{cx:.2}" y1="{:.2}" y2="{:.2}" stroke="black"/>"#,
            y(r.ci_upper),
            y(r.ci_lower)
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}">w{} {}</text>"#,
            h - pad + 18.0,
            r.lead_week,
            escape(&r.region)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_bar_chart(report: &MetricReport, metric: &str, path: &Path) -> Result<()> {
    write_text(path, &bar_chart_svg(report, metric)?)
}
