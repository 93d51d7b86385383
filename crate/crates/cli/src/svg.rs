//! Self-contained SVG bar charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

pub struct BarChart<'a> {
    pub title: String,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub values: &'a [f64],
    pub errors: Option<&'a [f64]>,
    /// Reference values drawn as a dashed line.
    pub theory: Option<&'a [f64]>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f < 1.5 {
        1.0
    } else if f < 3.0 {
        2.0
    } else if f < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

impl BarChart<'_> {
    pub fn render(&self) -> String {
        let n = self.values.len().max(1);
        let err = |i: usize| self.errors.map_or(0.0, |e| e[i]);
        let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
        let mut lo: f64 = 0.0;
        let mut hi: f64 = 0.0;
        for (i, v) in self.values.iter().enumerate() {
            lo = lo.min(finite(v - err(i)));
            hi = hi.max(finite(v + err(i)));
        }
        if let Some(t) = self.theory {
            t.iter().for_each(|v| {
                lo = lo.min(finite(*v));
                hi = hi.max(finite(*v));
            });
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        let step = nice_step(hi - lo);
        lo = (lo / step).floor() * step;
        hi = (hi / step).ceil() * step;

        let plot_w = WIDTH - LEFT - RIGHT;
        let plot_h = HEIGHT - TOP - BOTTOM;
        let sx = |i: f64| LEFT + (i + 0.5) * plot_w / n as f64;
        let sy = |v: f64| TOP + (hi - v) / (hi - lo) * plot_h;
        let bar_w = 0.6 * plot_w / n as f64;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );

        let mut tick = lo;
        while tick <= hi + 1e-9 * step {
            let y = sy(tick);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                WIDTH - RIGHT,
                LEFT - 6.0,
                y + 4.0,
                format_tick(tick, step)
            );
            tick += step;
        }
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
            sy(0.0f64.clamp(lo, hi)),
            WIDTH - RIGHT,
            sy(0.0f64.clamp(lo, hi))
        );
        let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}" stroke="black"/>"#, HEIGHT - BOTTOM);

        let zero = sy(0.0f64.clamp(lo, hi));
        for (i, v) in self.values.iter().enumerate() {
            let x = sx(i as f64);
            let y = sy(finite(*v));
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{bar_w:.2}" height="{:.2}" fill="#4c78a8"/>"##,
                x - bar_w / 2.0,
                y.min(zero),
                (y - zero).abs()
            );
            if self.errors.is_some() {
                let (y0, y1) = (sy(finite(v - err(i))), sy(finite(v + err(i))));
                let cap = bar_w / 4.0;
                let _ = writeln!(
                    s,
                    r#"<path d="M{:.2} {y0:.2}V{y1:.2}M{:.2} {y0:.2}h{:.2}M{:.2} {y1:.2}h{:.2}" stroke="black" fill="none"/>"#,
                    x,
                    x - cap,
                    2.0 * cap,
                    x - cap,
                    2.0 * cap
                );
            }
            let _ =
                writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{i}</text>"#, HEIGHT - BOTTOM + 16.0);
        }
        if let Some(t) = self.theory {
            let pts: Vec<String> =
                t.iter().enumerate().map(|(i, v)| format!("{:.2},{:.2}", sx(i as f64), sy(finite(*v)))).collect();
            let _ = writeln!(
                s,
                r##"<polyline points="{}" fill="none" stroke="#e45756" stroke-width="2" stroke-dasharray="6 4"/>"##,
                pts.join(" ")
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + plot_w / 2.0,
            HEIGHT - 10.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + plot_h / 2.0,
            escape(self.y_label)
        );
        s.push_str("</svg>\n");
        s
    }
}

fn format_tick(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let v = if v.abs() < 1e-12 * step { 0.0 } else { v };
    format!("{v:.decimals$}")
}
