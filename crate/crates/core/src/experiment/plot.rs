use std::fmt::Write as _;

use super::pipeline::SweepReport;
use crate::causal::Variant;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 50.0;

/// Two panels, CHAIR_s and BLEU-4 against alpha, one line per variant and a
/// dashed line for the vanilla continuation. Alphas are evenly spaced in
/// sweep order.
pub fn sweep_svg(report: &SweepReport) -> String {
    let width = 2.0 * (PANEL_W + 2.0 * MARGIN);
    let height = PANEL_H + 2.0 * MARGIN;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let panels: [(&str, fn(&super::pipeline::SweepRow) -> f64); 2] = [("CHAIR_s", |r| r.chair_s), ("BLEU-4", |r| r.bleu4)];
    for (p, (title, metric)) in panels.iter().enumerate() {
        let x0 = p as f64 * (PANEL_W + 2.0 * MARGIN) + MARGIN;
        panel(&mut svg, report, x0, title, *metric);
    }
    svg.push_str("</svg>\n");
    svg
}

fn panel(svg: &mut String, report: &SweepReport, x0: f64, title: &str, metric: fn(&super::pipeline::SweepRow) -> f64) {
    let y0 = MARGIN;
    let (alphas, _, _) = report.series(Variant::Te);
    let alphas = if alphas.is_empty() { report.series(Variant::Nde).0 } else { alphas };
    let values: Vec<f64> = report
        .rows
        .iter()
        .map(metric)
        .chain(std::iter::once(metric(&report.vanilla)))
        .collect();
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-6 {
        lo -= 0.01;
        hi += 0.01;
    }
    let pad = 0.1 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let n = alphas.len().max(2) as f64;
    let x = |i: usize| x0 + PANEL_W * (i as f64 + 0.5) / n;
    let y = |v: f64| y0 + PANEL_H * (1.0 - (v - lo) / (hi - lo));

    let _ = writeln!(svg, r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{title} vs alpha</text>"#, x0 + PANEL_W / 2.0, y0 - 15.0);
    for (i, a) in alphas.iter().enumerate() {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{a}</text>"#, x(i), y0 + PANEL_H + 15.0);
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 5.0, y(v) + 4.0);
    }
    let vy = y(metric(&report.vanilla));
    let _ = writeln!(
        svg,
        r#"<line x1="{x0}" y1="{vy:.1}" x2="{}" y2="{vy:.1}" stroke="gray" stroke-dasharray="4 3"/>"#,
        x0 + PANEL_W
    );
    for (variant, color, dy) in [(Variant::Te, "#d62728", 0.0), (Variant::Nde, "#1f77b4", 14.0)] {
        let rows: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.variant == Some(variant))
            .map(metric)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let points: Vec<String> = rows.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, points.join(" "));
        for (i, &v) in rows.iter().enumerate() {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, x(i), y(v));
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            x0 + 8.0,
            y0 + 14.0 + dy,
            variant.name().to_uppercase()
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" fill="gray">vanilla</text>"#, x0 + 8.0, y0 + 42.0);
}
