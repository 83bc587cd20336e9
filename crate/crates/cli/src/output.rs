//! Report tables, CSV and JSON rendering, SVG charts and the manifest.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
    Empty,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            // 17 significant digits
            Cell::Float(x) => format!("{x:.16e}"),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(i) => json!(i),
            Cell::Float(x) => json!(x),
            Cell::Text(s) => json!(s),
            Cell::Empty => Value::Null,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(i) => Some(*i as f64),
            Cell::Float(x) => Some(*x),
            _ => None,
        }
    }
}

/// A line chart request: x column against one or more y columns.
#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub x: String,
    pub ys: Vec<String>,
    pub log_y: bool,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub diagnostic: String,
    pub engine: Option<String>,
    pub seed: Option<u64>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub summary: Map<String, Value>,
    pub plot: Option<PlotSpec>,
}

impl Report {
    pub fn new(diagnostic: &str, columns: &[&str]) -> Self {
        Report {
            diagnostic: diagnostic.to_string(),
            engine: None,
            seed: None,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            summary: Map::new(),
            plot: None,
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.iter().map(Cell::csv).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<Value> = self.rows.iter().map(|r| Value::Array(r.iter().map(Cell::json).collect())).collect();
        let v = json!({
            "schema": "syncrds-report/1",
            "diagnostic": self.diagnostic,
            "engine": self.engine,
            "seed": self.seed,
            "columns": self.columns,
            "rows": rows,
            "summary": self.summary,
        });
        let mut s = serde_json::to_string_pretty(&v).expect("report serializes");
        s.push('\n');
        s
    }

    fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        self.rows.iter().map(|r| r[j].as_f64()).collect()
    }

    pub fn to_svg(&self) -> Option<String> {
        let spec = self.plot.as_ref()?;
        let xs = self.column(&spec.x)?;
        let series: Vec<(String, Vec<f64>)> =
            spec.ys.iter().filter_map(|y| self.column(y).map(|v| (y.clone(), v))).collect();
        Some(line_chart(&self.diagnostic, &spec.x, &xs, &series, spec.log_y))
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Self-contained SVG line chart.
pub fn line_chart(title: &str, x_label: &str, xs: &[f64], series: &[(String, Vec<f64>)], log_y: bool) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 20.0, 40.0, 50.0);
    let tf = |v: f64| if log_y { v.max(1e-300).log10() } else { v };
    let finite = |v: &f64| v.is_finite();
    let (x0, x1) = bounds(xs.iter().cloned().filter(finite));
    let (y0, y1) = bounds(series.iter().flat_map(|(_, v)| v.iter().map(|y| tf(*y))).filter(finite));
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (tf(y) - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let (ax0, ax1, ay0, ay1) = (left, w - right, h - bottom, top);
    let _ = writeln!(s, r#"<path d="M{ax0},{ay1} L{ax0},{ay0} L{ax1},{ay0}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let xp = left + f * (w - left - right);
        let yp = h - bottom - f * (h - top - bottom);
        let ylab = if log_y { format!("1e{yv:.1}") } else { format!("{yv:.3}") };
        let _ = writeln!(s, r#"<text x="{xp:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{xv:.3}</text>"#, ay0 + 16.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{ylab}</text>"#, ax0 - 6.0, yp + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#, w / 2.0, h - 10.0, escape(x_label));
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(x, y)| x.is_finite() && tf(**y).is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#, ax1 - 120.0, top + 14.0 * (k + 1) as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo <= 1e-12 * lo.abs().max(1.0) {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes each artifact and then `manifest.json` describing them.
pub fn write_artifacts(dir: &Path, artifacts: &[(String, Vec<u8>)], manifest_head: Map<String, Value>) -> Result<(), CliError> {
    let io = |e: std::io::Error, p: &Path| CliError::Config(format!("cannot write {}: {e}", p.display()));
    std::fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    let mut listed = Vec::new();
    for (name, bytes) in artifacts {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| io(e, &p))?;
        listed.push(json!({ "file": name, "bytes": bytes.len(), "sha256": sha256_hex(bytes) }));
    }
    let mut m = manifest_head;
    m.insert("artifacts".into(), Value::Array(listed));
    let mut text = serde_json::to_string_pretty(&Value::Object(m)).expect("manifest serializes");
    text.push('\n');
    let p = dir.join("manifest.json");
    std::fs::write(&p, text).map_err(|e| io(e, &p))
}
