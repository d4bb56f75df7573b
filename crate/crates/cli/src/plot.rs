//! Minimal SVG line plots of closed-loop trajectories.

use std::fmt::Write as _;

use cssmpc::sim::TrialRecord;

const WIDTH: f64 = 640.0;
const PANEL: f64 = 160.0;
const MARGIN: f64 = 48.0;

/// One panel per series, sharing the step axis.
pub fn trajectory_svg(record: &TrialRecord, series: &[(String, Vec<f64>)]) -> String {
    let steps = record.rows.len().max(2) - 1;
    let height = series.len() as f64 * (PANEL + MARGIN) + MARGIN;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (i, (label, values)) in series.iter().enumerate() {
        let top = MARGIN + i as f64 * (PANEL + MARGIN);
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let (lo, hi) = if !lo.is_finite() {
            (-1.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 1.0, hi + 1.0)
        } else {
            (lo, hi)
        };
        let left = MARGIN;
        let right = WIDTH - MARGIN / 2.0;
        let x = |k: usize| left + (right - left) * k as f64 / steps as f64;
        let y = |v: f64| top + PANEL * (hi - v) / (hi - lo);
        writeln!(
            out,
            r##"<rect x="{left}" y="{top}" width="{}" height="{PANEL}" fill="none" stroke="#888"/>"##,
            right - left
        )
        .unwrap();
        writeln!(out, r#"<text x="{left}" y="{}">{label}</text>"#, top - 6.0).unwrap();
        writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{hi:.3}</text>"#, left - 4.0, top + 10.0).unwrap();
        writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{lo:.3}</text>"#, left - 4.0, top + PANEL).unwrap();
        let points: Vec<String> = values.iter().enumerate().map(|(k, &v)| format!("{:.2},{:.2}", x(k), y(v))).collect();
        writeln!(out, r##"<polyline fill="none" stroke="#1f5fa8" stroke-width="1.5" points="{}"/>"##, points.join(" "))
            .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">step k</text>"#,
        WIDTH / 2.0,
        height - MARGIN / 3.0
    )
    .unwrap();
    out.push_str("</svg>\n");
    out
}
