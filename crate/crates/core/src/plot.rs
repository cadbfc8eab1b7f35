//! Minimal SVG line plots: trajectory overlays and error-vs-time curves.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 540.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 6] = ["#000000", "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Line,
    /// Small dots, for registered map points.
    Points,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

impl Series {
    pub fn line(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), points, style: Style::Line }
    }

    pub fn points(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), points, style: Style::Points }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Same scale on both axes (trajectory plots).
    pub equal_aspect: bool,
}

/// Data extrema widened by 5% of the span on each side; a degenerate span
/// gets ±0.5 around the value.
pub fn axis_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    let span = hi - lo;
    if span <= 1e-12 * lo.abs().max(1.0) {
        return Some((lo - 0.5, hi + 0.5));
    }
    Some((lo - 0.05 * span, hi + 0.05 * span))
}

/// Tick positions at 1, 2 or 5 × 10^k spacing, about `target` of them.
pub fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let raw = (hi - lo) / target.max(1) as f64;
    if !(raw > 0.0) || !raw.is_finite() {
        return vec![lo];
    }
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{:.6}", if v.abs() < 1e-12 { 0.0 } else { v });
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, spec: &PlotSpec) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(&spec.title));
}

/// Renders `series` into a standalone SVG document. With no finite data the
/// plot is a frame with a "no data" message.
pub fn render(spec: &PlotSpec, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, spec);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let xs = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (Some((mut x0, mut x1)), Some((mut y0, mut y1))) = (xs, ys) else {
        let _ = writeln!(out, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>"##);
        let _ = writeln!(out, r##"<text class="placeholder" x="{}" y="{}" text-anchor="middle" fill="#555">no data to plot</text>"##, LEFT + pw / 2.0, TOP + ph / 2.0);
        out.push_str("</svg>\n");
        return out;
    };
    if spec.equal_aspect {
        // grow the tighter axis so one unit has the same length on both
        let scale = ((x1 - x0) / pw).max((y1 - y0) / ph);
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        (x0, x1) = (cx - scale * pw / 2.0, cx + scale * pw / 2.0);
        (y0, y1) = (cy - scale * ph / 2.0, cy + scale * ph / 2.0);
    }
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let _ = writeln!(out, r##"<g class="axes" stroke="#888" fill="none"><rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}"/></g>"##);
    let _ = writeln!(out, r#"<g class="ticks" font-size="11">"#);
    for t in ticks(x0, x1, 8) {
        let x = sx(t);
        let _ = writeln!(out, r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#888"/>"##, TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(out, r#"<text class="xtick" x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, TOP + ph + 18.0, fmt_tick(t));
    }
    for t in ticks(y0, y1, 8) {
        let y = sy(t);
        let _ = writeln!(out, r##"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#888"/>"##, LEFT - 5.0);
        let _ = writeln!(out, r#"<text class="ytick" x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 8.0, y + 4.0, fmt_tick(t));
    }
    out.push_str("</g>\n");
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 12.0, escape(&spec.x_label));
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&spec.y_label)
    );

    let mut color = 0;
    let mut legend = Vec::new();
    for s in series {
        let c = match s.style {
            Style::Points => "#6baed6",
            Style::Line => {
                color += 1;
                PALETTE[(color - 1) % PALETTE.len()]
            }
        };
        let finite = s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite());
        match s.style {
            Style::Line => {
                let pts: Vec<String> = finite.map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(out, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
            }
            Style::Points => {
                let _ = writeln!(out, r#"<g class="scatter" fill="{c}">"#);
                for &(x, y) in finite {
                    let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.2"/>"#, sx(x), sy(y));
                }
                out.push_str("</g>\n");
            }
        }
        legend.push((s.label.as_str(), c, s.style));
    }

    let _ = writeln!(out, r#"<g class="legend">"#);
    for (i, (label, c, style)) in legend.iter().enumerate() {
        let (x, y) = (WIDTH - RIGHT + 15.0, TOP + 10.0 + 20.0 * i as f64);
        match style {
            Style::Line => {
                let _ = writeln!(out, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{c}" stroke-width="2"/>"#, x + 20.0);
            }
            Style::Points => {
                let _ = writeln!(out, r#"<circle cx="{}" cy="{y}" r="3" fill="{c}"/>"#, x + 10.0);
            }
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 26.0, y + 4.0, escape(label));
    }
    out.push_str("</g>\n</svg>\n");
    out
}
