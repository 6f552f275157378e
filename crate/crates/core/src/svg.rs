//! Minimal deterministic SVG charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, zero_y: bool) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            it.filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (mut x0, mut x1) = span(&mut xs.clone());
        let (mut y0, mut y1) = span(&mut ys.clone());
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        if zero_y {
            y0 = y0.min(0.0);
            y1 = y1.max(0.0);
        }
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.05 * (y1 - y0);
        Self {
            x0,
            x1,
            y0: if zero_y && y0 == 0.0 { 0.0 } else { y0 - pad },
            y1: y1 + pad,
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn open(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (W - RIGHT + LEFT) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (W - RIGHT + LEFT) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    s
}

fn axes(s: &mut String, f: &Frame) {
    let _ = writeln!(
        s,
        r#"<path d="M{:.2} {:.2} V{:.2} H{:.2}" stroke="black" fill="none"/>"#,
        LEFT,
        TOP,
        H - BOTTOM,
        W - RIGHT
    );
    for i in 0..=4 {
        let y = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#,
            LEFT - 4.0,
            f.py(y) + 4.0,
            y
        );
    }
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            W - RIGHT + 10.0,
            y,
            PALETTE[i % PALETTE.len()],
            W - RIGHT + 24.0,
            y + 9.0,
            escape(name)
        );
    }
}

/// One polyline per series of `(x, y)` points.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let f = Frame::new(
        series.iter().flat_map(|s| s.1.iter().map(|p| p.0)),
        series.iter().flat_map(|s| s.1.iter().map(|p| p.1)),
        true,
    );
    let mut s = open(title, x_label, y_label);
    axes(&mut s, &f);
    let xs: std::collections::BTreeSet<u64> = series.iter().flat_map(|s| s.1.iter().map(|p| p.0.to_bits())).collect();
    for x in xs {
        let x = f64::from_bits(x);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            f.px(x),
            H - BOTTOM + 16.0,
            x
        );
    }
    for (i, (_, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            d.join(" ")
        );
        for (x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, f.px(*x), f.py(*y));
        }
    }
    legend(&mut s, &series.iter().map(|x| x.0.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let f = Frame::new(
        [0.0, categories.len() as f64].into_iter(),
        series.iter().flat_map(|s| s.1.iter().copied()),
        true,
    );
    let mut s = open(title, "", y_label);
    axes(&mut s, &f);
    let group = (W - LEFT - RIGHT) / categories.len().max(1) as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    for (c, name) in categories.iter().enumerate() {
        let gx = LEFT + group * c as f64 + group * 0.1;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            gx + group * 0.4,
            H - BOTTOM + 16.0,
            escape(name)
        );
        for (i, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(c).copied().unwrap_or(0.0);
            let (ya, yb) = (f.py(v.max(0.0)), f.py(v.min(0.0)));
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + bar * i as f64,
                ya,
                bar,
                (yb - ya).max(0.0),
                PALETTE[i % PALETTE.len()]
            );
        }
    }
    legend(&mut s, &series.iter().map(|x| x.0.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Labelled points, coloured by group.
pub fn scatter(title: &str, groups: &[(String, Vec<(String, f64, f64)>)]) -> String {
    let f = Frame::new(
        groups.iter().flat_map(|g| g.1.iter().map(|p| p.1)),
        groups.iter().flat_map(|g| g.1.iter().map(|p| p.2)),
        false,
    );
    let mut s = open(title, "component 1", "component 2");
    axes(&mut s, &f);
    for (i, (_, pts)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for (label, x, y) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/><text x="{:.2}" y="{:.2}" font-size="9">{}</text>"#,
                f.px(*x),
                f.py(*y),
                f.px(*x) + 5.0,
                f.py(*y) - 3.0,
                escape(label)
            );
        }
    }
    legend(&mut s, &groups.iter().map(|g| g.0.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed_and_deterministic() {
        let series = vec![("a<b".to_string(), vec![(0.0, 1.0), (1.0, 2.0)])];
        let svg = line_chart("t", "layer", "diff", &series);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg, line_chart("t", "layer", "diff", &series));
        let bars = bar_chart("t", "score", &["x".into()], &[("s".into(), vec![-0.5])]);
        assert!(bars.contains("<rect x="));
        let sc = scatter("p", &[("m".into(), vec![("0".into(), 1.0, 1.0)])]);
        assert!(sc.contains("<circle"));
    }
}
