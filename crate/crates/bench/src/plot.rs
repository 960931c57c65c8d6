//! Deterministic SVG line charts of metrics CSVs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ValueEnum;

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum XAxis {
    Time,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum YAxis {
    Loss,
    Accuracy,
    /// Cumulative bytes in both directions.
    Bytes,
}

impl XAxis {
    fn columns(self) -> &'static [&'static str] {
        match self {
            XAxis::Time => &["sim_time_ms"],
            XAxis::Step => &["step"],
        }
    }

    fn title(self) -> &'static str {
        match self {
            XAxis::Time => "simulated time (ms)",
            XAxis::Step => "exchange",
        }
    }
}

impl YAxis {
    fn columns(self) -> &'static [&'static str] {
        match self {
            YAxis::Loss => &["loss"],
            YAxis::Accuracy => &["acc"],
            YAxis::Bytes => &["cum_bytes_up", "cum_bytes_down"],
        }
    }

    fn title(self) -> &'static str {
        match self {
            YAxis::Loss => "training loss",
            YAxis::Accuracy => "training accuracy",
            YAxis::Bytes => "cumulative bytes",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn column_indices(headers: &csv::StringRecord, wanted: &[&str], path: &Path) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|&name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| BenchError::UnknownColumn {
                    path: path.to_path_buf(),
                    column: name.to_string(),
                })
        })
        .collect()
}

/// Sum of the selected cells, or `None` if any is blank.
fn cell_sum(record: &csv::StringRecord, cols: &[usize], path: &Path, line: usize) -> Result<Option<f64>> {
    let mut total = 0.0;
    for &c in cols {
        let raw = record.get(c).unwrap_or("").trim();
        if raw.is_empty() {
            return Ok(None);
        }
        total += raw.parse::<f64>().map_err(|_| BenchError::BadCsv {
            path: path.to_path_buf(),
            line,
            message: format!("`{raw}` is not a number"),
        })?;
    }
    Ok(Some(total))
}

/// Reads one series from a metrics CSV; rows without a y value are skipped.
pub fn read_series(path: &Path, x: XAxis, y: YAxis) -> Result<Series> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| BenchError::BadCsv {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| BenchError::BadCsv {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let xs = column_indices(&headers, x.columns(), path)?;
    let ys = column_indices(&headers, y.columns(), path)?;
    let mut points = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| BenchError::BadCsv {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if let (Some(px), Some(py)) = (cell_sum(&record, &xs, path, line)?, cell_sum(&record, &ys, path, line)?) {
            points.push((px, py));
        }
    }
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Series { label, points })
}

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" {
            "0".into()
        } else {
            s.into()
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        let pad = if lo == 0.0 { 0.5 } else { lo.abs() * 0.05 };
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

pub fn render(series: &[Series], x: XAxis, y: YAxis) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = range(all().map(|p| p.0));
    let (y0, y1) = range(all().map(|p| p.1));
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |v: f64| LEFT + (v - x0) / (x1 - x0) * pw;
    let sy = |v: f64| TOP + ph - (v - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<g class="axes" stroke="black" stroke-width="1"><line x1="{LEFT}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{b}"/></g>"#,
        b = TOP + ph,
        r = LEFT + pw
    );
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let (vx, vy) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(vx), sy(vy));
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{b}" x2="{px:.2}" y2="{t}" stroke="black"/><text x="{px:.2}" y="{ty}" text-anchor="middle">{}</text>"#,
            tick_label(vx),
            b = TOP + ph,
            t = TOP + ph + 4.0,
            ty = TOP + ph + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{l}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{tx}" y="{ty:.2}" text-anchor="end">{}</text>"#,
            tick_label(vy),
            l = LEFT - 4.0,
            tx = LEFT - 6.0,
            ty = py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{cx}" y="{ty}" text-anchor="middle">{}</text>"#,
        x.title(),
        cx = LEFT + pw / 2.0,
        ty = HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {cy}) rotate(-90)" text-anchor="middle">{}</text>"#,
        y.title(),
        cy = TOP + ph / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !s.points.is_empty() {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(a, b)| format!("{:.2},{:.2}", sx(a), sy(b)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 16.0;
        let _ = writeln!(
            svg,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn plot(inputs: &[PathBuf], out: &Path, x: XAxis, y: YAxis) -> Result<()> {
    let series = inputs
        .iter()
        .map(|p| read_series(p, x, y))
        .collect::<Result<Vec<_>>>()?;
    std::fs::write(out, render(&series, x, y)).map_err(|e| BenchError::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_compact() {
        assert_eq!(tick_label(0.0), "0");
        assert_eq!(tick_label(0.5), "0.5");
        assert_eq!(tick_label(12.0), "12");
        assert_eq!(tick_label(2.5e6), "2.50e6");
    }

    #[test]
    fn flat_series_gets_a_nonzero_range() {
        assert_eq!(range([3.0, 3.0].into_iter()), (2.85, 3.15));
        assert_eq!(range(std::iter::empty()), (0.0, 1.0));
    }

    #[test]
    fn labels_are_escaped() {
        let s = Series {
            label: "a<b".into(),
            points: vec![(0.0, 1.0), (1.0, 0.5)],
        };
        let svg = render(&[s], XAxis::Step, YAxis::Loss);
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }
}
