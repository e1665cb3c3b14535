//! Hand-written SVG for reliability diagrams and risk–coverage curves.
//! Output depends only on the input table, so re-rendering is byte-stable.

use std::fmt::Write;

use crate::report::ReportTable;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PLOT: f64 = WIDTH - 2.0 * MARGIN;
/// Longest polyline drawn for the risk–coverage curve.
const MAX_CURVE_POINTS: usize = 500;

fn px(v: f64) -> f64 {
    MARGIN + v.clamp(0.0, 1.0) * PLOT
}

fn py(v: f64) -> f64 {
    HEIGHT - MARGIN - v.clamp(0.0, 1.0) * PLOT
}

fn open(out: &mut String, title: &str, x_label: &str, y_label: &str, y_max: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#,
        WIDTH / 2.0
    );
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let _ = writeln!(
            out,
            r##"<line x1="{x}" y1="{y0}" x2="{x}" y2="{y1}" stroke="#000"/><text x="{x}" y="{ty}" text-anchor="middle">{t:.1}</text>"##,
            x = px(t),
            y0 = py(0.0),
            y1 = py(0.0) + 4.0,
            ty = py(0.0) + 18.0,
        );
        let _ = writeln!(
            out,
            r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#000"/><text x="{tx}" y="{ty}" text-anchor="end">{label:.2}</text>"##,
            x0 = px(0.0) - 4.0,
            x1 = px(0.0),
            y = py(t),
            tx = px(0.0) - 8.0,
            ty = py(t) + 4.0,
            label = t * y_max,
        );
    }
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{PLOT}" height="{PLOT}" fill="none" stroke="#000"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{y_label}</text>"#,
        y = HEIGHT / 2.0
    );
}

/// Per-bin accuracy bars with mean-confidence outlines, the identity line
/// and the ECE in the corner.
pub fn reliability_diagram(t: &ReportTable) -> String {
    let mut out = String::new();
    open(&mut out, "Reliability diagram", "Confidence", "Accuracy", 1.0);
    for b in t.bins.iter().filter(|b| b.count > 0) {
        let x = px(b.lower);
        let w = px(b.upper) - x;
        let _ = writeln!(
            out,
            r##"<rect class="accuracy" x="{x:.3}" y="{y:.3}" width="{w:.3}" height="{h:.3}" fill="#3b6ea8" stroke="#1d3a5c"/>"##,
            y = py(b.accuracy),
            h = py(0.0) - py(b.accuracy),
        );
        let _ = writeln!(
            out,
            r##"<rect class="confidence" x="{x:.3}" y="{y:.3}" width="{w:.3}" height="{h:.3}" fill="none" stroke="#d0473c" stroke-dasharray="4 2"/>"##,
            y = py(b.mean_confidence),
            h = py(0.0) - py(b.mean_confidence),
        );
    }
    let _ = writeln!(
        out,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#888" stroke-dasharray="2 2"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let ece = t.metric("ece").unwrap_or(f64::NAN);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}">ECE = {}</text>"#,
        px(0.0) + 8.0,
        py(1.0) + 18.0,
        if ece.is_nan() {
            "NaN".to_string()
        } else {
            format!("{:.4}", ece)
        }
    );
    out.push_str("</svg>\n");
    out
}

/// Risk as a function of coverage, with the y axis scaled to the largest risk.
pub fn risk_coverage(t: &ReportTable) -> String {
    let y_max = t.curve.iter().map(|p| p.1).fold(0.0f64, f64::max).max(1e-3);
    let mut out = String::new();
    open(&mut out, "Risk-coverage curve", "Coverage", "Risk", y_max);
    let stride = t.curve.len().div_ceil(MAX_CURVE_POINTS).max(1);
    let mut points = String::new();
    for (i, (c, r)) in t.curve.iter().enumerate() {
        if i % stride == 0 || i + 1 == t.curve.len() {
            let _ = write!(points, "{:.3},{:.3} ", px(*c), py(r / y_max));
        }
    }
    let _ = writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#3b6ea8" stroke-width="2"/>"##,
        points.trim_end()
    );
    if let Some(aurc) = t.metric("aurc") {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}">AURC = {aurc:.4}</text>"#,
            px(0.0) + 8.0,
            py(1.0) + 18.0
        );
    }
    out.push_str("</svg>\n");
    out
}
