// SPDX-License-Identifier: Apache-2.0

//! Minimal self-contained SVG line plots.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 80.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Draw markers instead of a polyline.
    pub markers: bool,
}

impl Series {
    pub fn line(name: &str, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.to_string(),
            points,
            markers: false,
        }
    }

    pub fn markers(name: &str, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.to_string(),
            points,
            markers: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_log: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return None;
    }
    if hi - lo < 1e-300 {
        let pad = if lo == 0.0 { 1.0 } else { 0.05 * lo.abs() };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Plot {
            title: title.to_string(),
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            log_log: false,
            series: Vec::new(),
        }
    }

    pub fn log_log(mut self) -> Self {
        self.log_log = true;
        self
    }

    pub fn with(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    fn transform(&self, (x, y): (f64, f64)) -> Option<(f64, f64)> {
        if self.log_log {
            (x > 0.0 && y > 0.0).then(|| (x.log10(), y.log10()))
        } else {
            (x.is_finite() && y.is_finite()).then_some((x, y))
        }
    }

    pub fn render(&self) -> String {
        let pts: Vec<Vec<(f64, f64)>> = self
            .series
            .iter()
            .map(|s| s.points.iter().filter_map(|&p| self.transform(p)).collect())
            .collect();
        let xb = bounds(pts.iter().flatten().map(|p| p.0)).unwrap_or((0.0, 1.0));
        let yb = bounds(pts.iter().flatten().map(|p| p.1)).unwrap_or((0.0, 1.0));
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - xb.0) / (xb.1 - xb.0) * pw;
        let sy = |y: f64| MARGIN_T + ph - (y - yb.0) / (yb.1 - yb.0) * ph;

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            MARGIN_L + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = xb.0 + f * (xb.1 - xb.0);
            let yv = yb.0 + f * (yb.1 - yb.0);
            let (xl, yl) = if self.log_log {
                (format!("1e{xv:.2}"), format!("1e{yv:.2}"))
            } else {
                (format!("{xv:.4}"), format!("{yv:.4}"))
            };
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                sx(xv),
                MARGIN_T + ph + 18.0,
                xl
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                MARGIN_L - 6.0,
                sy(yv) + 4.0,
                yl
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_L + pw / 2.0,
            HEIGHT - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            MARGIN_T + ph / 2.0,
            MARGIN_T + ph / 2.0,
            escape(&self.y_label)
        );
        for (k, (s, p)) in self.series.iter().zip(&pts).enumerate() {
            let color = COLORS[k % COLORS.len()];
            if s.markers {
                for &(x, y) in p {
                    let _ = writeln!(
                        out,
                        r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                        sx(x),
                        sy(y)
                    );
                }
            } else if !p.is_empty() {
                let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
                    path.join(" ")
                );
            }
            let ly = MARGIN_T + 14.0 + 18.0 * k as f64;
            let lx = MARGIN_L + pw + 12.0;
            let _ = writeln!(
                out,
                r#"<rect x="{lx}" y="{:.2}" width="12" height="4" fill="{color}"/><text x="{}" y="{:.2}">{}</text>"#,
                ly - 4.0,
                lx + 18.0,
                ly + 1.0,
                escape(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}
