//! Minimal static SVG charts.

use std::fmt::Write;

const W: f64 = 720.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut f = Frame { x0: f64::MAX, x1: f64::MIN, y0: f64::MAX, y1: f64::MIN };
        for (x, y) in points.filter(|p| p.0.is_finite() && p.1.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if f.x0 > f.x1 {
            f = Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        if f.x1 - f.x0 < 1e-300 {
            f.x1 = f.x0 + 1.0;
        }
        if f.y1 - f.y0 < 1e-300 {
            f.y0 -= 0.5;
            f.y1 += 0.5;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }

    fn axes(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let _ = write!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>
<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>
<text x="{PAD}" y="{}" text-anchor="start">{:.4}</text>
<text x="{}" y="{}" text-anchor="end">{:.4}</text>
<text x="{}" y="{}" text-anchor="end">{:.4}</text>
<text x="{}" y="{}" text-anchor="end">{:.4}</text>
"#,
            W - 2.0 * PAD,
            H - 2.0 * PAD,
            W / 2.0,
            escape(title),
            W / 2.0,
            H - 8.0,
            escape(xlabel),
            H / 2.0,
            H / 2.0,
            escape(ylabel),
            H - PAD + 16.0,
            self.x0,
            W - PAD,
            H - PAD + 16.0,
            self.x1,
            PAD - 4.0,
            H - PAD,
            self.y0,
            PAD - 4.0,
            PAD + 4.0,
            self.y1,
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of one or more series; non-finite points break the line.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|s| s.1.iter().copied()));
    let mut out = String::new();
    frame.axes(&mut out, title, xlabel, ylabel);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for run in pts.split(|p| !(p.0.is_finite() && p.1.is_finite())) {
            if run.is_empty() {
                continue;
            }
            out.push_str(&format!(r#"<polyline fill="none" stroke="{color}" stroke-width="1" points=""#));
            for &(x, y) in run {
                let _ = write!(out, "{:.2},{:.2} ", frame.px(x), frame.py(y));
            }
            out.push_str("\"/>\n");
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{}</text>"#,
            W - PAD - 4.0,
            PAD + 14.0 * (i + 1) as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter chart with one colour per integer class.
pub fn class_chart(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64, u32)]) -> String {
    let frame = Frame::fit(points.iter().map(|p| (p.0, p.1)));
    let mut out = String::new();
    frame.axes(&mut out, title, xlabel, ylabel);
    let mut classes: Vec<u32> = points.iter().map(|p| p.2).collect();
    classes.sort_unstable();
    classes.dedup();
    for &(x, y, c) in points {
        let color = COLORS[c as usize % COLORS.len()];
        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#, frame.px(x), frame.py(y));
    }
    for (i, c) in classes.iter().enumerate() {
        let color = COLORS[*c as usize % COLORS.len()];
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">N* = {c}</text>"#,
            W - PAD - 4.0,
            PAD + 14.0 * (i + 1) as f64
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_breaks_on_gaps() {
        let pts = vec![(0.0, 0.0), (1.0, 1.0), (2.0, f64::NAN), (3.0, 0.5), (4.0, 0.2)];
        let svg = line_chart("x <t>", "t", "x", &[("run", pts)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("x &lt;t&gt;"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn degenerate_frames_are_padded() {
        let svg = class_chart("c", "B", "A", &[(1.0, 1.0, 0), (1.0, 1.0, 2)]);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(!svg.contains("NaN"));
    }
}
