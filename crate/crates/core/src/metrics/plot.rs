//! Minimal SVG plots: line charts for training curves and a rank strip chart.

use std::fmt::Write;

use super::rank::RankSummary;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn frame(title: &str, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64)) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    )
    .unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel)).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    )
    .unwrap();
    for (v, px) in [(x.0, MARGIN), (x.1, W - MARGIN)] {
        writeln!(s, r#"<text x="{px}" y="{}" text-anchor="middle">{v:.4}</text>"#, H - MARGIN + 16.0).unwrap();
    }
    for (v, py) in [(y.0, H - MARGIN), (y.1, MARGIN)] {
        writeln!(s, r#"<text x="{}" y="{py}" text-anchor="end">{v:.4}</text>"#, MARGIN - 4.0).unwrap();
    }
    s
}

fn project(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

/// One polyline per series, with a legend.
pub fn line_plot_svg(series: &[Series], title: &str, xlabel: &str, ylabel: &str) -> String {
    let x = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let y = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut s = frame(title, xlabel, ylabel, x, y);
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(px, py)| {
                format!(
                    "{:.2},{:.2}",
                    project(px, x, MARGIN, W - MARGIN),
                    project(py, y, H - MARGIN, MARGIN)
                )
            })
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - MARGIN - 120.0,
            MARGIN + 16.0 + 14.0 * k as f64,
            escape(&ser.name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Bootstrap rank distribution per method: the 5–95% range as a bar and the
/// mean rank as a dot.
pub fn rank_plot_svg(summary: &RankSummary, title: &str) -> String {
    let m = summary.methods.len();
    let y = (0.5, m as f64 + 0.5);
    let x = (1.0, m.max(2) as f64);
    let mut s = frame(title, "aggregated rank", "", x, (0.0, 0.0));
    for k in 0..m {
        let color = COLORS[k % COLORS.len()];
        let py = project(k as f64 + 1.0, y, MARGIN, H - MARGIN);
        let (lo, hi) = (summary.quantile(k, 0.05), summary.quantile(k, 0.95));
        writeln!(
            s,
            r#"<line x1="{:.2}" x2="{:.2}" y1="{py:.2}" y2="{py:.2}" stroke="{color}" stroke-width="6"/>"#,
            project(lo, x, MARGIN, W - MARGIN),
            project(hi, x, MARGIN, W - MARGIN)
        )
        .unwrap();
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{py:.2}" r="5" fill="black"/>"#,
            project(summary.mean_rank[k], x, MARGIN, W - MARGIN)
        )
        .unwrap();
        writeln!(s, r#"<text x="{}" y="{:.2}">{}</text>"#, MARGIN + 4.0, py - 8.0, escape(&summary.methods[k])).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
