//! Standalone SVG plots: labelled scatter series, points on the 3-level
//! simplex, and per-candidate rank intervals.

use std::fmt::Write as _;

use crate::inference::RankReport;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Scatter plot with one colour per named series, points joined in order.
pub fn scatter_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#,
            sx(xv),
            H - MARGIN + 16.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            MARGIN - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let finite: Vec<&(f64, f64)> =
            pts.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        if finite.len() > 1 {
            let path: Vec<String> = finite
                .iter()
                .map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-opacity="0.5"/>"#,
                path.join(" ")
            );
        }
        for p in finite {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{colour}"/>"#,
                sx(p.0),
                sy(p.1)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            W - MARGIN + 6.0,
            MARGIN + 14.0 * i as f64 + 10.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Points on the 3-level simplex drawn as a triangle with level 1 at the
/// bottom left, level 2 at the bottom right and level 3 at the top.
/// `vertices` (judge columns) are drawn as hollow squares and joined.
pub fn simplex_svg(title: &str, points: &[(String, [f64; 3])], vertices: &[[f64; 3]]) -> String {
    let side = (W - 2.0 * MARGIN).min((H - 2.0 * MARGIN) / 0.866);
    let left = (W - side) / 2.0;
    let bottom = H - MARGIN + 10.0;
    let corners = [
        (left, bottom),
        (left + side, bottom),
        (left + side / 2.0, bottom - side * 3f64.sqrt() / 2.0),
    ];
    let place = |p: &[f64; 3]| {
        let s: f64 = p.iter().sum();
        let w: Vec<f64> = p.iter().map(|v| v / s).collect();
        (
            w[0] * corners[0].0 + w[1] * corners[1].0 + w[2] * corners[2].0,
            w[0] * corners[0].1 + w[1] * corners[1].1 + w[2] * corners[2].1,
        )
    };
    let mut out = String::new();
    header(&mut out, title);
    let tri: Vec<String> = corners.iter().map(|c| format!("{:.1},{:.1}", c.0, c.1)).collect();
    let _ = writeln!(
        out,
        r#"<polygon points="{}" fill="none" stroke="black"/>"#,
        tri.join(" ")
    );
    for (i, c) in corners.iter().enumerate() {
        let dy = if i == 2 { -8.0 } else { 16.0 };
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">level {}</text>"#,
            c.0,
            c.1 + dy,
            i + 1
        );
    }
    if !vertices.is_empty() {
        let hull: Vec<String> = vertices
            .iter()
            .map(|v| {
                let (x, y) = place(v);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polygon points="{}" fill="whitesmoke" stroke="gray" stroke-dasharray="4 3"/>"#,
            hull.join(" ")
        );
        for v in vertices {
            let (x, y) = place(v);
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="8" height="8" fill="white" stroke="gray"/>"#,
                x - 4.0,
                y - 4.0
            );
        }
    }
    for (i, (name, p)) in points.iter().enumerate() {
        let (x, y) = place(p);
        let colour = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<circle cx="{x:.1}" cy="{y:.1}" r="4" fill="{colour}"/><text x="{:.1}" y="{:.1}" fill="{colour}">{}</text>"#,
            x + 6.0,
            y - 6.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Horizontal rank intervals, best candidate on top, with mean ranks marked.
pub fn rank_interval_svg(title: &str, report: &RankReport) -> String {
    let k = report.candidates.len().max(1);
    let sx = |r: f64| 120.0 + (r - 0.5) / k as f64 * (W - 120.0 - MARGIN);
    let row = (H - 2.0 * MARGIN) / k as f64;
    let mut out = String::new();
    header(&mut out, title);
    for r in 1..=k {
        let _ = writeln!(
            out,
            r#"<line x1="{x:.1}" x2="{x:.1}" y1="{MARGIN}" y2="{:.1}" stroke="gainsboro"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{r}</text>"#,
            H - MARGIN,
            H - MARGIN + 16.0,
            x = sx(r as f64)
        );
    }
    for (i, id) in report.ranking.order.iter().enumerate() {
        let Some(s) = report.candidates.get(id) else {
            continue;
        };
        let y = MARGIN + (i as f64 + 0.5) * row;
        let _ = writeln!(
            out,
            r#"<text x="110" y="{:.1}" text-anchor="end">{}</text>"#,
            y + 4.0,
            escape(id)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" x2="{:.1}" y1="{y:.1}" y2="{y:.1}" stroke="{}" stroke-width="3"/>"#,
            sx(s.rank_interval.0 as f64),
            sx(s.rank_interval.1 as f64),
            PALETTE[0]
        );
        let _ = writeln!(
            out,
            r#"<circle cx="{:.1}" cy="{y:.1}" r="4" fill="black"/>"#,
            sx(s.mean_rank)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_is_well_formed() {
        let svg = scatter_svg(
            "corr <vs> omega",
            "omega",
            "correlation",
            &[("beta 0".into(), vec![(0.0, 1.0), (1.0, 0.9), (2.0, f64::NAN)])],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("&lt;vs&gt;"));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn simplex_corners_land_on_triangle() {
        let svg = simplex_svg(
            "prevalences",
            &[("a".into(), [1.0, 0.0, 0.0]), ("b".into(), [0.0, 0.0, 1.0])],
            &[[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]],
        );
        assert_eq!(svg.matches("<circle").count(), 2);
        assert_eq!(svg.matches("<polygon").count(), 2);
    }
}
