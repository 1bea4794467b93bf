//! Minimal SVG line charts for degradation curves and training traces.
//! Hand-rendered so output bytes are fully deterministic.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ensure_arg, Result};

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 52.0;

/// Render a line chart to an SVG file.
pub fn render_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    path: &Path,
) -> Result<()> {
    ensure_arg!(!series.is_empty(), "no series to plot");
    ensure_arg!(
        series.iter().any(|s| !s.points.is_empty()),
        "all series are empty"
    );
    let finite = |v: f64| v.is_finite();
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            if finite(x) && finite(y) {
                xs.push(x);
                ys.push(y);
            }
        }
    }
    ensure_arg!(!xs.is_empty(), "no finite points to plot");
    let (x0, x1) = padded_range(&xs);
    let (y0, y1) = padded_range(&ys);

    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (W - MARGIN_L - MARGIN_R);
    let py = |y: f64| H - MARGIN_B - (y - y0) / (y1 - y0) * (H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = write!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );

    // Axes.
    let _ = write!(
        svg,
        r#"<line x1="{l}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/>"#,
        l = MARGIN_L,
        r = W - MARGIN_R,
        t = MARGIN_T,
        b = H - MARGIN_B
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = write!(
            svg,
            r#"<line x1="{x}" y1="{b}" x2="{x}" y2="{b2}" stroke="black"/><text x="{x}" y="{ty}" font-family="sans-serif" font-size="11" text-anchor="middle">{v}</text>"#,
            x = px(fx),
            b = H - MARGIN_B,
            b2 = H - MARGIN_B + 5.0,
            ty = H - MARGIN_B + 18.0,
            v = fmt_tick(fx)
        );
        let _ = write!(
            svg,
            r#"<line x1="{l}" y1="{y}" x2="{l2}" y2="{y}" stroke="black"/><text x="{tx}" y="{ty}" font-family="sans-serif" font-size="11" text-anchor="end">{v}</text>"#,
            l = MARGIN_L - 5.0,
            l2 = MARGIN_L,
            y = py(fy),
            tx = MARGIN_L - 8.0,
            ty = py(fy) + 4.0,
            v = fmt_tick(fy)
        );
    }
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        (MARGIN_L + W - MARGIN_R) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = write!(
        svg,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (MARGIN_T + H - MARGIN_B) / 2.0,
        (MARGIN_T + H - MARGIN_B) / 2.0,
        escape(y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        if pts.len() >= 2 {
            let _ = write!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
                pts.join(" ")
            );
        }
        for p in &pts {
            let (cx, cy) = p.split_once(',').unwrap();
            let _ = write!(svg, r#"<circle cx="{cx}" cy="{cy}" r="2.6" fill="{color}"/>"#);
        }
        // Legend.
        let ly = MARGIN_T + 16.0 * i as f64;
        let _ = write!(
            svg,
            r#"<rect x="{x}" y="{y}" width="12" height="4" fill="{color}"/><text x="{tx}" y="{ty}" font-family="sans-serif" font-size="11">{label}</text>"#,
            x = W - MARGIN_R - 150.0,
            y = ly,
            tx = W - MARGIN_R - 132.0,
            ty = ly + 6.0,
            label = escape(&s.label)
        );
    }
    svg.push_str("</svg>");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}

fn padded_range(vals: &[f64]) -> (f64, f64) {
    let mut lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Parse a two-column CSV (`x,y` with a header line) written by the sweep
/// and report writers.
pub fn parse_xy_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let x = cols.next().and_then(|t| t.trim().parse::<f64>().ok());
        let y = cols.next().and_then(|t| t.trim().parse::<f64>().ok());
        if let (Some(x), Some(y)) = (x, y) {
            points.push((x, y));
        }
    }
    ensure_arg!(!points.is_empty(), "no numeric rows in CSV");
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_deterministic_svg() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![
            Series { label: "a".into(), points: vec![(0.0, 0.9), (0.1, 0.5), (0.3, 0.7)] },
            Series { label: "b".into(), points: vec![(0.0, 0.2), (0.3, 0.4)] },
        ];
        let p1 = dir.path().join("a.svg");
        let p2 = dir.path().join("b.svg");
        render_line_chart("t", "x", "y", &s, &p1).unwrap();
        render_line_chart("t", "x", "y", &s, &p2).unwrap();
        let (a, b) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(a, b);
        assert!(String::from_utf8(a).unwrap().starts_with("<svg"));
    }

    #[test]
    fn parses_sweep_csv() {
        let pts = parse_xy_csv("ratio,ap\n0,0.9\n0.5,0.4\n").unwrap();
        assert_eq!(pts, vec![(0.0, 0.9), (0.5, 0.4)]);
        assert!(parse_xy_csv("header,only\n").is_err());
    }
}
