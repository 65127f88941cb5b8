//! Static SVG line and bar charts. Output depends only on the inputs, so
//! regenerating a chart is byte-for-byte reproducible.

use std::fmt::Write as _;

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, title: &str, metadata: &str) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, "<title>{}</title>", escape(title)).unwrap();
    writeln!(out, "<metadata>{}</metadata>", escape(metadata)).unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title)
    )
    .unwrap();
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn axes(out: &mut String, x_label: &str, y_label: &str, y_range: (f64, f64)) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    for i in 0..=5 {
        let v = y_range.0 + (y_range.1 - y_range.0) * i as f64 / 5.0;
        let y = y0 - (y0 - y1) * i as f64 / 5.0;
        writeln!(
            out,
            r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
            x0 - 6.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 18.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    )
    .unwrap();
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 15.0;
        writeln!(
            out,
            r#"<rect x="{x}" y="{:.2}" width="12" height="12" fill="{}"/><text x="{}" y="{:.2}">{}</text>"#,
            y - 10.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            escape(n)
        )
        .unwrap();
    }
}

/// Line chart. `x_ticks` labels categorical x positions; `y_range` fixes the
/// vertical axis (otherwise fitted to the data).
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    x_ticks: Option<&[(f64, String)]>,
    y_range: Option<(f64, f64)>,
    metadata: &str,
) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut xl, mut xh, mut yl, mut yh) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        xl = xl.min(x);
        xh = xh.max(x);
        yl = yl.min(y);
        yh = yh.max(y);
    }
    if let Some(t) = x_ticks {
        for (x, _) in t {
            xl = xl.min(*x);
            xh = xh.max(*x);
        }
    }
    let xr = nice_range(xl, xh);
    let yr = y_range.unwrap_or_else(|| nice_range(yl, yh));
    let sx = |x: f64| LEFT + (x - xr.0) / (xr.1 - xr.0) * (W - RIGHT - LEFT);
    let sy = |y: f64| H - BOTTOM - (y - yr.0) / (yr.1 - yr.0) * (H - BOTTOM - TOP);

    let mut out = String::new();
    header(&mut out, title, metadata);
    axes(&mut out, x_label, y_label, yr);
    match x_ticks {
        Some(ticks) => {
            for (x, label) in ticks {
                writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                    sx(*x),
                    H - BOTTOM + 18.0,
                    escape(label)
                )
                .unwrap();
            }
        }
        None => {
            for i in 0..=5 {
                let v = xr.0 + (xr.1 - xr.0) * i as f64 / 5.0;
                writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.1}</text>"#,
                    sx(v),
                    H - BOTTOM + 18.0
                )
                .unwrap();
            }
        }
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        )
        .unwrap();
        if s.points.len() <= 20 {
            for &(x, y) in &s.points {
                writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y)).unwrap();
            }
        }
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Vertical bar chart with values printed above the bars.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)], y_range: (f64, f64), metadata: &str) -> String {
    let mut out = String::new();
    header(&mut out, title, metadata);
    axes(&mut out, "", y_label, y_range);
    let n = bars.len().max(1) as f64;
    let slot = (W - RIGHT - LEFT) / n;
    let sy = |y: f64| H - BOTTOM - (y - y_range.0) / (y_range.1 - y_range.0) * (H - BOTTOM - TOP);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let y = sy(v.clamp(y_range.0, y_range.1));
        writeln!(
            out,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            slot * 0.7,
            H - BOTTOM - y,
            PALETTE[i % PALETTE.len()]
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.3}</text>"#,
            x + slot * 0.35,
            y - 4.0
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            x + slot * 0.35,
            H - BOTTOM + 16.0,
            escape(label)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
