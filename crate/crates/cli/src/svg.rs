//! Minimal deterministic SVG charts: stacked panels of line and dot series.
//!
//! Output depends only on the input values; every number is printed with a
//! fixed precision so identical data gives identical bytes.

use std::fmt::Write;

const PANEL_W: f64 = 560.0;
const PANEL_H: f64 = 320.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;
const TICKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Line,
    Dot,
    Ring,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub mark: Mark,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Thin connectors drawn beneath the series.
    pub links: Vec<((f64, f64), (f64, f64), &'static str)>,
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    step: f64,
}

fn nice_step(span: f64) -> f64 {
    let raw = span / TICKS as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let frac = raw / mag;
    let nice = if frac <= 1.0 {
        1.0
    } else if frac <= 2.0 {
        2.0
    } else if frac <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
            lo -= pad;
            hi += pad;
        }
        let step = nice_step(hi - lo);
        Self {
            lo: (lo / step).floor() * step,
            hi: (hi / step).ceil() * step,
            step,
        }
    }

    fn ticks(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step).round() as usize;
        (0..=n).map(|i| self.lo + i as f64 * self.step).collect()
    }

    fn decimals(&self) -> usize {
        (-self.step.log10().floor()).max(0.0) as usize
    }

    fn map(&self, v: f64, from: f64, to: f64) -> f64 {
        from + (v - self.lo) / (self.hi - self.lo) * (to - from)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn finite(p: &(f64, f64)) -> bool {
    p.0.is_finite() && p.1.is_finite()
}

fn draw_panel(out: &mut String, panel: &Panel, top: f64) {
    let all = panel
        .series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .chain(panel.links.iter().flat_map(|(a, b, _)| [*a, *b]))
        .filter(finite);
    let pts: Vec<(f64, f64)> = all.collect();
    let xa = Axis::fit(pts.iter().map(|p| p.0));
    let ya = Axis::fit(pts.iter().map(|p| p.1));
    let (x0, x1) = (MARGIN_L, PANEL_W - MARGIN_R);
    let (y0, y1) = (top + PANEL_H - MARGIN_B, top + MARGIN_T);
    let px = |v: f64| xa.map(v, x0, x1);
    let py = |v: f64| ya.map(v, y0, y1);

    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        top + 20.0,
        escape(&panel.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
        x1 - x0,
        y0 - y1
    );
    for t in xa.ticks() {
        let x = px(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" font-size="10" text-anchor="middle">{:.*}</text>"##,
            y0 + 4.0,
            y0 + 16.0,
            xa.decimals(),
            t
        );
    }
    for t in ya.ticks() {
        let y = py(t);
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{:.*}</text>"##,
            x0 - 4.0,
            x0 - 6.0,
            y + 3.0,
            ya.decimals(),
            t
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        y0 + 34.0,
        escape(&panel.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        x0 - 44.0,
        (y0 + y1) / 2.0,
        x0 - 44.0,
        (y0 + y1) / 2.0,
        escape(&panel.y_label)
    );

    for (a, b, color) in panel.links.iter().filter(|(a, b, _)| finite(a) && finite(b)) {
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="0.6" stroke-opacity="0.5"/>"#,
            px(a.0),
            py(a.1),
            px(b.0),
            py(b.1)
        );
    }
    for s in &panel.series {
        let pts: Vec<(f64, f64)> = s.points.iter().copied().filter(finite).collect();
        match s.mark {
            Mark::Line => {
                let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
                let _ = writeln!(
                    out,
                    r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.8"/>"#,
                    path.join(" "),
                    s.color
                );
                for &(x, y) in &pts {
                    let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#, px(x), py(y), s.color);
                }
            }
            Mark::Dot | Mark::Ring => {
                let fill = if s.mark == Mark::Dot { s.color } else { "none" };
                for &(x, y) in &pts {
                    let _ = writeln!(
                        out,
                        r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{fill}" stroke="{}" fill-opacity="0.8"/>"#,
                        px(x),
                        py(y),
                        s.color
                    );
                }
            }
        }
    }
    for (i, s) in panel.series.iter().enumerate() {
        let lx = x1 + 14.0;
        let ly = y1 + 12.0 + 18.0 * i as f64;
        let marker = match s.mark {
            Mark::Line => format!(
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="1.8"/>"#,
                lx + 16.0,
                s.color
            ),
            Mark::Dot | Mark::Ring => format!(
                r#"<circle cx="{:.2}" cy="{ly:.2}" r="3.5" fill="{}" stroke="{}"/>"#,
                lx + 8.0,
                if s.mark == Mark::Dot { s.color } else { "none" },
                s.color
            ),
        };
        let _ = writeln!(
            out,
            r#"{marker}<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            lx + 22.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
}

/// Renders `panels` stacked top to bottom.
pub fn render(panels: &[Panel]) -> String {
    let height = PANEL_H * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W:.0}" height="{height:.0}" viewBox="0 0 {PANEL_W:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut out, p, PANEL_H * i as f64);
    }
    out.push_str("</svg>\n");
    out
}
