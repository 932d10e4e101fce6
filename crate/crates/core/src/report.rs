//! CSV tables and standalone SVG plots.
//!
//! Every CSV begins with `# key: value` comment lines describing how it was
//! produced, then a header row. Plots are drawn from the same rows.

use std::fmt::Write as _;

/// A CSV document under construction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Csv {
    comments: Vec<(String, String)>,
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn comment(&mut self, key: impl Into<String>, value: impl Into<String>) -> &mut Self {
        self.comments.push((key.into(), value.into()));
        self
    }

    pub fn row(&mut self, cells: Vec<String>) -> &mut Self {
        assert_eq!(cells.len(), self.columns.len(), "row width");
        self.rows.push(cells);
        self
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.comments {
            let _ = writeln!(out, "# {k}: {}", v.replace('\n', " "));
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

/// Fixed-precision float cell.
pub fn f(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str, x: (f64, f64), y: (f64, f64)) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>
<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
"#,
        W / 2.0,
        escape(title),
        H - MARGIN,
        W - MARGIN,
        H - MARGIN,
        H - MARGIN,
        W / 2.0,
        H - 16.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label),
    );
    for (i, (lo, hi)) in [x, y].into_iter().enumerate() {
        for t in 0..=4 {
            let v = lo + (hi - lo) * t as f64 / 4.0;
            let frac = t as f64 / 4.0;
            if i == 0 {
                let px = MARGIN + frac * (W - 2.0 * MARGIN);
                let _ = writeln!(out, r#"<text x="{px:.1}" y="{}" text-anchor="middle">{v:.3}</text>"#, H - MARGIN + 16.0);
            } else {
                let py = H - MARGIN - frac * (H - 2.0 * MARGIN);
                let _ = writeln!(out, r#"<text x="{}" y="{py:.1}" text-anchor="end">{v:.3}</text>"#, MARGIN - 6.0);
            }
        }
    }
}

/// Line-and-marker plot of one or more named series.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let xs = span(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let ys = span(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let px = |v: f64| MARGIN + (v - xs.0) / (xs.1 - xs.0) * (W - 2.0 * MARGIN);
    let py = |v: f64| H - MARGIN - (v - ys.0) / (ys.1 - ys.0) * (H - 2.0 * MARGIN);
    let mut out = String::new();
    frame(&mut out, title, x_label, y_label, xs, ys);
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        if pts.len() > 1 {
            let _ = writeln!(out, r#"<polyline fill="none" stroke="{colour}" points="{}"/>"#, path.join(" "));
        }
        for &(x, y) in pts {
            let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{colour}"/>"#, px(x), py(y));
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            W - MARGIN - 120.0,
            MARGIN + 16.0 * i as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bar chart.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let mut out = String::new();
    frame(&mut out, title, "", y_label, (0.0, bars.len() as f64), (0.0, top));
    let slot = (W - 2.0 * MARGIN) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = v / top * (H - 2.0 * MARGIN);
        let x = MARGIN + slot * i as f64;
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="#1f77b4"/>"##,
            x + slot * 0.1,
            H - MARGIN - h,
            slot * 0.8
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="end" font-size="9" transform="rotate(-60 {:.1} {})">{}</text>"#,
            x + slot / 2.0,
            H - MARGIN + 28.0,
            x + slot / 2.0,
            H - MARGIN + 28.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}
