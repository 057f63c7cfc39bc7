//! Minimal self-contained SVG line plots (polylines plus axes); enough for
//! the gate-weight timeline and PR curves.

use std::fmt::Write as _;

pub struct LinePlot {
    title: String,
    x_label: String,
    y_label: String,
    x_range: (f64, f64),
    y_range: (f64, f64),
    series: Vec<(String, String, Vec<(f64, f64)>)>,
}

const W: f64 = 860.0;
const H: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

impl LinePlot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> LinePlot {
        LinePlot {
            title: title.to_string(),
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            x_range: (f64::INFINITY, f64::NEG_INFINITY),
            y_range: (0.0, 1.0),
            series: Vec::new(),
        }
    }

    pub fn add_series(&mut self, name: &str, color: &str, points: Vec<(f64, f64)>) {
        for &(x, _) in &points {
            self.x_range.0 = self.x_range.0.min(x);
            self.x_range.1 = self.x_range.1.max(x);
        }
        self.series.push((name.to_string(), color.to_string(), points));
    }

    fn sx(&self, x: f64) -> f64 {
        let span = (self.x_range.1 - self.x_range.0).max(1e-9);
        MARGIN_L + (x - self.x_range.0) / span * (W - MARGIN_L - MARGIN_R)
    }

    fn sy(&self, y: f64) -> f64 {
        let span = (self.y_range.1 - self.y_range.0).max(1e-9);
        H - MARGIN_B - (y - self.y_range.0) / span * (H - MARGIN_T - MARGIN_B)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(
            s,
            r#"<rect width="{W}" height="{H}" fill="white"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
            W / 2.0,
            self.title
        );
        // axes
        let x0 = MARGIN_L;
        let x1 = W - MARGIN_R;
        let y0 = H - MARGIN_B;
        let y1 = MARGIN_T;
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
        );
        // y ticks at 0, 0.25, .., 1
        for i in 0..=4 {
            let v = self.y_range.0 + (self.y_range.1 - self.y_range.0) * i as f64 / 4.0;
            let y = self.sy(v);
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/>"#,
                x0 - 4.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.2}</text>"#,
                x0 - 8.0,
                y + 4.0
            );
        }
        // x ticks at range ends and midpoint
        for v in [
            self.x_range.0,
            (self.x_range.0 + self.x_range.1) / 2.0,
            self.x_range.1,
        ] {
            let x = self.sx(v);
            let _ = writeln!(
                s,
                r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/>"#,
                y0 + 4.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.0}</text>"#,
                y0 + 18.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 12.0,
            self.x_label
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            self.y_label
        );
        // series
        for (i, (name, color, points)) in self.series.iter().enumerate() {
            let mut path = String::new();
            for (x, y) in points {
                let _ = write!(path, "{:.2},{:.2} ", self.sx(*x), self.sy(*y));
            }
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.trim_end()
            );
            let ly = MARGIN_T + 16.0 * i as f64;
            let lx = W - MARGIN_R + 10.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
                lx + 18.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{name}</text>"#,
                lx + 24.0,
                ly + 4.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
