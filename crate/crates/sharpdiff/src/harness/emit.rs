//! CSV tables, standalone SVG plots and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub use crate::metrics::fmt_f64 as num;

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("no records to write"));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(Error::invalid(format!("row has {} fields, header has {}", bad.len(), header.len())));
    }
    let mut out = header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let body = csv_string(header, rows)?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Scatter,
    Line,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub color: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub kind: PlotKind,
    pub series: Vec<Series>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn px(v: f64) -> String {
    format!("{:.2}", v)
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

/// Renders a plot as a self-contained SVG document.
pub fn render_svg(plot: &Plot) -> Result<String> {
    let pts: Vec<(f64, f64)> = plot.series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::invalid("plot has no points"));
    }
    if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::invalid("plot points must be finite"));
    }
    let (x0, x1) = range(pts.iter().map(|p| p.0));
    let (y0, y1) = range(pts.iter().map(|p| p.1));
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        px(LEFT + pw / 2.0),
        esc(&plot.title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        px(pw),
        px(ph)
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (gx, gy) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/><text x="{0}" y="{3}" text-anchor="middle" font-family="sans-serif" font-size="11">{4}</text>"#,
            px(gx),
            px(TOP + ph),
            px(TOP + ph + 5.0),
            px(TOP + ph + 18.0),
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{2}" x2="{1}" y2="{2}" stroke="black"/><text x="{3}" y="{4}" text-anchor="end" font-family="sans-serif" font-size="11">{5}</text>"#,
            px(LEFT - 5.0),
            px(LEFT),
            px(gy),
            px(LEFT - 8.0),
            px(gy + 4.0),
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        px(LEFT + pw / 2.0),
        px(H - 10.0),
        esc(&plot.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {0})">{1}</text>"#,
        px(TOP + ph / 2.0),
        esc(&plot.y_label)
    );
    for (k, ser) in plot.series.iter().enumerate() {
        let color = esc(&ser.color);
        match plot.kind {
            PlotKind::Scatter => {
                for &(x, y) in &ser.points {
                    let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="2.5" fill="{color}" fill-opacity="0.7"/>"#, px(sx(x)), px(sy(y)));
                }
            }
            PlotKind::Line => {
                let path: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{},{}", px(sx(x)), px(sy(y)))).collect();
                let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" "));
            }
        }
        let ly = TOP + 12.0 + 18.0 * k as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            px(lx),
            px(ly - 9.0),
            px(lx + 15.0),
            px(ly),
            esc(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_svg(path: &Path, plot: &Plot) -> Result<()> {
    let body = render_svg(plot)?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
}

/// Run record written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub kind: String,
    pub spec_sha256: String,
    pub seed: u64,
    pub outputs: Vec<OutputEntry>,
}

impl Manifest {
    pub fn new(kind: &str, spec_json: &str, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            kind: kind.to_string(),
            spec_sha256: sha256_hex(spec_json.as_bytes()),
            seed,
            outputs: Vec::new(),
        }
    }

    /// Hashes the named files in `dir` and writes `manifest.json`.
    pub fn write(mut self, dir: &Path, files: &[String]) -> Result<()> {
        for f in files {
            let p = dir.join(f);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            self.outputs.push(OutputEntry { file: f.clone(), sha256: sha256_hex(&bytes) });
        }
        let path = dir.join("manifest.json");
        let mut body = serde_json::to_string_pretty(&self).map_err(|e| Error::Config(e.to_string()))?;
        body.push('\n');
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_record_two_lines() {
        let s = csv_string(&["a", "b"], &[vec![num(0.1), num(1e-300)]]).unwrap();
        assert_eq!(s, "a,b\n0.1,1e-300\n");
        assert!(csv_string(&["a"], &[]).is_err());
    }

    #[test]
    fn quoting() {
        let s = csv_string(&["x"], &[vec!["a,b".into()]]).unwrap();
        assert_eq!(s, "x\n\"a,b\"\n");
    }

    #[test]
    fn empty_plot_is_an_error() {
        let plot = Plot { title: "t".into(), x_label: "x".into(), y_label: "y".into(), kind: PlotKind::Line, series: vec![] };
        assert!(render_svg(&plot).is_err());
    }

    #[test]
    fn svg_is_standalone() {
        let plot = Plot {
            title: "a < b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            kind: PlotKind::Scatter,
            series: vec![Series { name: "s".into(), color: "#c00".into(), points: vec![(0.0, 1.0), (1.0, 2.0)] }],
        };
        let svg = render_svg(&plot).unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a &lt; b"));
        assert!(!svg.contains("href"));
    }
}
