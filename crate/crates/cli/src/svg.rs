use std::fmt::Write;

use mlrn::metrics::PrPoint;

const SIZE: f64 = 320.0;
const MARGIN: f64 = 40.0;

/// A self-contained SVG line plot of precision against recall.
pub fn pr_curve(title: &str, points: &[PrPoint]) -> String {
    let span = SIZE - 2.0 * MARGIN;
    let x = |r: f64| MARGIN + r * span;
    let y = |p: f64| SIZE - MARGIN - p * span;
    let path: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", x(p.recall), y(p.precision)))
        .collect();

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<path d="M{x0},{y0} H{x1} M{x0},{y0} V{y1}" stroke="black" fill="none"/>"#,
        x0 = x(0.0),
        y0 = y(0.0),
        x1 = x(1.0),
        y1 = y(1.0)
    );
    let _ = writeln!(
        out,
        r#"<polyline points="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#,
        path.join(" ")
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#,
        SIZE / 2.0,
        MARGIN / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">recall</text>"#,
        SIZE / 2.0,
        SIZE - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">precision</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
