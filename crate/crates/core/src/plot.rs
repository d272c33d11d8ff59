//! Minimal SVG line and scatter plots. Output is a pure function of the
//! input data: fixed layout, fixed palette, fixed number formatting.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Line,
    Scatter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    /// Non-finite points are dropped; a line breaks across them.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub style: Style,
    pub log_x: bool,
    pub series: Vec<Series>,
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str, style: Style) -> Self {
        Plot {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            style,
            log_x: false,
            series: Vec::new(),
        }
    }

    pub fn log_x(mut self) -> Self {
        self.log_x = true;
        self
    }

    /// Series `ys` against column `x` of a CSV table with a header row.
    /// Empty cells read as missing values.
    pub fn with_csv_columns(mut self, csv_text: &str, x: &str, ys: &[&str]) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
        let header = rdr.headers()?.clone();
        let col = |name: &str| {
            header.iter().position(|h| h == name).ok_or_else(|| Error::Format(format!("no column {name:?} in table")))
        };
        let xi = col(x)?;
        let yi: Vec<usize> = ys.iter().map(|y| col(y)).collect::<Result<_>>()?;
        let mut series: Vec<Series> = ys.iter().map(|y| Series { name: y.to_string(), points: Vec::new() }).collect();
        for rec in rdr.records() {
            let rec = rec?;
            let cell = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
            let xv = cell(xi);
            for (s, &i) in series.iter_mut().zip(&yi) {
                s.points.push((xv, cell(i)));
            }
        }
        self.series.extend(series);
        Ok(self)
    }

    fn tx(&self, x: f64) -> f64 {
        if self.log_x {
            x.log10()
        } else {
            x
        }
    }

    fn usable(&self, p: (f64, f64)) -> bool {
        let x = self.tx(p.0);
        x.is_finite() && p.1.is_finite()
    }

    pub fn to_svg(&self) -> String {
        let pts = || self.series.iter().flat_map(|s| s.points.iter().copied()).filter(|&p| self.usable(p));
        let (x0, x1) = padded_range(pts().map(|p| self.tx(p.0)));
        let (y0, y1) = padded_range(pts().map(|p| p.1));
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (self.tx(x) - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#, LEFT + pw / 2.0, esc(&self.title));

        for t in ticks(y0, y1) {
            let y = sy(t);
            let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/>"##, LEFT + pw);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, fmt_tick(t));
        }
        let xt: Vec<(f64, f64)> = if self.log_x {
            let (lo, hi) = (x0.floor() as i32, x1.ceil() as i32);
            (lo..=hi).map(|e| 10f64.powi(e)).filter(|v| (x0..=x1).contains(&v.log10())).map(|v| (v, v)).collect()
        } else {
            ticks(x0, x1).into_iter().map(|t| (t, t)).collect()
        };
        for (t, label) in xt {
            let x = sx(t);
            let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e0e0e0"/>"##, TOP + ph);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, fmt_tick(label));
        }
        let _ = writeln!(s, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 10.0, esc(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );

        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            match self.style {
                Style::Line => {
                    for run in series.points.split(|&p| !self.usable(p)).filter(|r| !r.is_empty()) {
                        let path: Vec<String> = run.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                        if path.len() == 1 {
                            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#, sx(run[0].0), sy(run[0].1));
                        } else {
                            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
                        }
                    }
                }
                Style::Scatter => {
                    for &(x, y) in series.points.iter().filter(|&&p| self.usable(p)) {
                        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
                    }
                }
            }
            let ly = TOP + 12.0 + 16.0 * i as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(s, r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="4" fill="{color}"/>"#, ly - 4.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 18.0, esc(&series.name));
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_svg())?;
        Ok(())
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Round tick positions: steps of 1, 2 or 5 times a power of ten.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let v = if v.abs() < 1e-12 { 0.0 } else { v };
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: &str = "step,a,b\n0,0.1,\n50,0.3,0.2\n100,0.2,0.4\n";

    #[test]
    fn csv_columns_become_series() {
        let p = Plot::new("t", "step", "v", Style::Line).with_csv_columns(TABLE, "step", &["a", "b"]).unwrap();
        assert_eq!(p.series.len(), 2);
        assert!(p.series[1].points[0].1.is_nan());
        assert_eq!(p.series[0].points[2], (100.0, 0.2));
        assert!(Plot::new("t", "x", "y", Style::Line).with_csv_columns(TABLE, "step", &["zz"]).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let make = || Plot::new("a < b", "step", "v", Style::Line).with_csv_columns(TABLE, "step", &["a", "b"]).unwrap().to_svg();
        let s = make();
        assert_eq!(s, make());
        assert!(s.starts_with("<svg"));
        assert!(s.contains("a &lt; b"));
        assert_eq!(s.matches("<polyline").count(), 2);
    }

    #[test]
    fn scatter_log_axis_and_empty() {
        let text = "eps,r\n1,0.9\n10,0.8\n100,0.3\n";
        let s = Plot::new("s", "eps", "r", Style::Scatter).log_x().with_csv_columns(text, "eps", &["r"]).unwrap().to_svg();
        assert_eq!(s.matches("r=\"3\"").count(), 3);
        assert!(s.contains(">100<"));
        let empty = Plot::new("e", "x", "y", Style::Line).to_svg();
        assert!(empty.ends_with("</svg>\n"));
    }

    #[test]
    fn tick_steps() {
        assert_eq!(ticks(0.0, 1.0), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        assert_eq!(fmt_tick(0.6000000000000001), "0.6");
    }
}
