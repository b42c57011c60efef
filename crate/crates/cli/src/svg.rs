//! Standalone SVG rendering of FROC and ROC curves. Output depends only on the
//! input data, so identical inputs give identical bytes.

use std::fmt::Write;

use lungbench_core::detect_eval::{interpolate_sensitivity, CPM_FP_RATES};
use lungbench_core::OperatingPoint;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Froc,
    Roc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(x, y)` in data units, drawn in order.
    pub points: Vec<(f64, f64)>,
    /// Highlighted points such as the CPM rates.
    pub markers: Vec<(f64, f64)>,
}

/// FROC polyline over the visible FP range `[1/8, 8]` with markers at the
/// CPM rates.
pub fn froc_series(label: String, points: &[OperatingPoint]) -> Series {
    let (lo, hi) = (CPM_FP_RATES[0], CPM_FP_RATES[CPM_FP_RATES.len() - 1]);
    let mut xy = vec![(lo, interpolate_sensitivity(points, lo))];
    xy.extend(points.iter().filter(|p| p.fp_per_scan > lo && p.fp_per_scan < hi).map(|p| (p.fp_per_scan, p.sensitivity)));
    xy.push((hi, interpolate_sensitivity(points, hi)));
    let markers = CPM_FP_RATES.iter().map(|&f| (f, interpolate_sensitivity(points, f))).collect();
    Series { label, points: xy, markers }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn px(kind: CurveKind, x: f64) -> f64 {
    let t = match kind {
        CurveKind::Froc => (x.log2() + 3.0) / 6.0,
        CurveKind::Roc => x,
    };
    LEFT + t.clamp(0.0, 1.0) * (WIDTH - LEFT - RIGHT)
}

fn py(y: f64) -> f64 {
    HEIGHT - BOTTOM - y.clamp(0.0, 1.0) * (HEIGHT - TOP - BOTTOM)
}

/// Renders `series` on FROC (log2 FP axis over `[1/8, 8]`) or ROC axes.
pub fn render(kind: CurveKind, title: &str, series: &[Series]) -> Result<String, String> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err("cannot render an empty curve".into());
    }
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(w, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));

    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let xticks: Vec<(f64, String)> = match kind {
        CurveKind::Froc => CPM_FP_RATES.iter().map(|&f| (f, format!("{f}"))).collect(),
        CurveKind::Roc => (0..=5).map(|i| (i as f64 / 5.0, format!("{:.1}", i as f64 / 5.0))).collect(),
    };
    for (x, label) in &xticks {
        let p = px(kind, *x);
        let _ = writeln!(w, r##"<line x1="{p:.2}" y1="{y0:.2}" x2="{p:.2}" y2="{y1:.2}" stroke="#e0e0e0"/>"##);
        let _ = writeln!(w, r#"<text x="{p:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#, y1 + 16.0);
    }
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let p = py(y);
        let _ = writeln!(w, r##"<line x1="{x0:.2}" y1="{p:.2}" x2="{x1:.2}" y2="{p:.2}" stroke="#e0e0e0"/>"##);
        let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.1}</text>"#, x0 - 6.0, p + 4.0);
    }
    let _ = writeln!(
        w,
        r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y1 - y0
    );
    let (xlabel, ylabel) = match kind {
        CurveKind::Froc => ("Average false positives per scan", "Sensitivity"),
        CurveKind::Roc => ("False positive rate", "True positive rate"),
    };
    let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xlabel}</text>"#, (x0 + x1) / 2.0, HEIGHT - 16.0);
    let _ = writeln!(
        w,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{ylabel}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    if kind == CurveKind::Roc {
        let _ = writeln!(
            w,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999999" stroke-dasharray="4 4"/>"##,
            px(kind, 0.0),
            py(0.0),
            px(kind, 1.0),
            py(1.0)
        );
    }

    for (n, s) in series.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(kind, x), py(y))).collect();
        let _ = writeln!(w, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        for &(x, y) in &s.markers {
            let _ = writeln!(w, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(kind, x), py(y));
        }
        let ly = y1 - 12.0 - 18.0 * (series.len() - 1 - n) as f64;
        let lx = x1 - 300.0;
        let _ = writeln!(w, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.label));
    }
    out.push_str("</svg>\n");
    Ok(out)
}
