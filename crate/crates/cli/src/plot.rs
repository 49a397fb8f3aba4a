//! Hand-written SVG bar charts. Output depends only on the input numbers.

use std::fmt::Write;

const BAR_W: f64 = 28.0;
const GAP: f64 = 8.0;
const LEFT: f64 = 48.0;
const TOP: f64 = 28.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Draws one chart of signed values in `[-1, 1]` starting `y0` below the top.
/// The bar at `highlight` is drawn in a second colour.
fn panel(
    out: &mut String,
    y0: f64,
    height: f64,
    title: &str,
    labels: &[String],
    values: &[f64],
    highlight: Option<usize>,
) {
    let half = height / 2.0;
    let axis = y0 + TOP + half;
    let width = labels.len() as f64 * (BAR_W + GAP);
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="13">{}</text>"#,
        LEFT,
        y0 + 18.0,
        escape(title)
    )
    .unwrap();
    for (tick, v) in [(1.0, "1"), (0.0, "0"), (-1.0, "-1")] {
        let y = axis - tick * half;
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v}</text>"#,
            LEFT - 6.0,
            y + 3.0
        )
        .unwrap();
    }
    writeln!(
        out,
        r##"<line x1="{:.1}" y1="{axis:.1}" x2="{:.1}" y2="{axis:.1}" stroke="#444"/>"##,
        LEFT,
        LEFT + width
    )
    .unwrap();
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let v = v.clamp(-1.0, 1.0);
        let x = LEFT + i as f64 * (BAR_W + GAP) + GAP / 2.0;
        let h = v.abs() * half;
        let y = if v >= 0.0 { axis - h } else { axis };
        let fill = if highlight == Some(i) { "#c0392b" } else { "#2e86c1" };
        writeln!(
            out,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{BAR_W:.1}" height="{h:.1}" fill="{fill}"/>"#
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="middle">{}</text>"#,
            x + BAR_W / 2.0,
            axis + half + 14.0,
            escape(label)
        )
        .unwrap();
    }
}

fn frame(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// Bar chart of a normalized fingerprint.
pub fn fingerprint_svg(title: &str, labels: &[String], values: &[f64], highlight: Option<usize>) -> String {
    let chart_h = 160.0;
    let mut body = String::new();
    panel(&mut body, 0.0, chart_h, title, labels, values, highlight);
    let width = LEFT + labels.len() as f64 * (BAR_W + GAP) + 16.0;
    frame(width, TOP + chart_h + 28.0, &body)
}

/// One small fingerprint chart per row, stacked vertically.
pub fn small_multiples_svg(title: &str, labels: &[String], rows: &[(String, Vec<f64>, Option<usize>)]) -> String {
    let chart_h = 80.0;
    let step = TOP + chart_h + 24.0;
    let mut body = String::new();
    writeln!(
        body,
        r#"<text x="{LEFT:.1}" y="18" font-size="14">{}</text>"#,
        escape(title)
    )
    .unwrap();
    for (k, (name, values, hi)) in rows.iter().enumerate() {
        panel(&mut body, 24.0 + k as f64 * step, chart_h, name, labels, values, *hi);
    }
    let width = LEFT + labels.len() as f64 * (BAR_W + GAP) + 16.0;
    frame(width, 24.0 + rows.len() as f64 * step + 8.0, &body)
}
