//! Minimal SVG charts: line plots, bar charts and scatter plots.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }

    fn axes(&self, out: &mut String, title: &str) {
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
        let _ = writeln!(
            out,
            r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
            H - PAD,
            W - PAD
        );
        for (v, y) in [(self.y.0, H - PAD), (self.y.1, PAD)] {
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, PAD - 4.0, y + 4.0);
        }
        for (v, x) in [(self.x.0, PAD), (self.x.1, W - PAD)] {
            let _ = writeln!(out, r#"<text x="{x}" y="{}" text-anchor="middle">{v:.3}</text>"#, H - PAD + 16.0);
        }
    }

    fn legend(out: &mut String, names: &[&str]) {
        for (i, name) in names.iter().enumerate() {
            let y = PAD + 14.0 * i as f64;
            let colour = PALETTE[i % PALETTE.len()];
            let _ = writeln!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{colour}"/>"#, W - PAD - 120.0, y - 9.0);
            let _ = writeln!(out, r#"<text x="{}" y="{y}">{}</text>"#, W - PAD - 106.0, escape(name));
        }
    }
}

pub fn line_chart_svg(title: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let frame = Frame {
        x: bounds(all().map(|p| p.0)),
        y: bounds(all().map(|p| p.1)),
    };
    let mut out = String::new();
    frame.axes(&mut out, title);
    for (i, s) in series.iter().enumerate() {
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            path.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    Frame::legend(&mut out, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Vertical bars; `None` values are drawn as an `n/a` label.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[Option<f64>]) -> String {
    let frame = Frame {
        x: (0.0, labels.len().max(1) as f64),
        y: (0.0, values.iter().flatten().copied().fold(1.0, f64::max)),
    };
    let mut out = String::new();
    frame.axes(&mut out, title);
    let slot = (W - 2.0 * PAD) / labels.len().max(1) as f64;
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let x = PAD + slot * i as f64;
        match v {
            Some(v) => {
                let top = frame.py(*v);
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                    x + slot * 0.1,
                    slot * 0.8,
                    H - PAD - top,
                    PALETTE[i % PALETTE.len()]
                );
            }
            None => {
                let _ = writeln!(out, r#"<text x="{:.2}" y="{}" text-anchor="middle">n/a</text>"#, x + slot / 2.0, H - PAD - 4.0);
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x + slot / 2.0,
            H - PAD + 30.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Points coloured by group index, with one legend entry per group name.
pub fn scatter_svg(title: &str, points: &[(f64, f64, usize)], group_names: &[String]) -> String {
    let frame = Frame {
        x: bounds(points.iter().map(|p| p.0)),
        y: bounds(points.iter().map(|p| p.1)),
    };
    let mut out = String::new();
    frame.axes(&mut out, title);
    for &(x, y, g) in points {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            frame.px(x),
            frame.py(y),
            PALETTE[g % PALETTE.len()]
        );
    }
    Frame::legend(&mut out, &group_names.iter().map(String::as_str).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let line = line_chart_svg(
            "loss <total>",
            &[Series {
                name: "total".into(),
                points: vec![(0.0, 2.0), (1.0, 1.0), (2.0, f64::NAN)],
            }],
        );
        assert!(line.starts_with("<svg") && line.trim_end().ends_with("</svg>"));
        assert!(line.contains("&lt;total&gt;"));
        assert_eq!(line.matches("<polyline").count(), 1);
        let bars = bar_chart_svg("iou", &["a".into(), "b".into()], &[Some(0.5), None]);
        assert!(bars.contains("n/a"));
        let scatter = scatter_svg("proj", &[(0.0, 0.0, 0), (1.0, 1.0, 1)], &["x".into(), "y".into()]);
        assert_eq!(scatter.matches("<circle").count(), 2);
    }
}
