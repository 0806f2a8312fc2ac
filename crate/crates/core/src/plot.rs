//! Static SVG charts: training curves as polylines and confusion heatmaps.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// A named polyline; `None` values leave a gap.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, Option<f64>)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / count as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

/// Line chart with axes, ticks and a legend, one polyline per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let values = || series.iter().flat_map(|s| s.points.iter());
    let xs: Vec<f64> = values().map(|p| p.0).collect();
    let ys: Vec<f64> = values().filter_map(|p| p.1).collect();
    let bounds = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        match (lo.is_finite(), hi > lo) {
            (false, _) => (0.0, 1.0),
            (true, true) => (lo, hi),
            (true, false) => (lo - 0.5, lo + 0.5),
        }
    };
    let (x0, x1) = bounds(&xs);
    let (mut y0, y1) = bounds(&ys);
    if y0 > 0.0 && y0 < 0.3 * y1 {
        y0 = 0.0;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(title)).unwrap();
    writeln!(
        out,
        r#"<g class="axes" stroke="black"><line x1="{LEFT}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{b}"/></g>"#,
        b = TOP + ph,
        r = LEFT + pw
    )
    .unwrap();
    for t in nice_ticks(x0, x1, 8) {
        let x = sx(t);
        writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{b2}" stroke="black"/><text x="{x:.2}" y="{ty}" text-anchor="middle">{}</text>"#,
            fmt_tick(t),
            b = TOP + ph,
            b2 = TOP + ph + 5.0,
            ty = TOP + ph + 19.0
        )
        .unwrap();
    }
    for t in nice_ticks(y0, y1, 6) {
        let y = sy(t);
        writeln!(
            out,
            r##"<line x1="{l2}" y1="{y:.2}" x2="{r}" y2="{y:.2}" stroke="#dddddd"/><text x="{tx}" y="{ty:.2}" text-anchor="end">{}</text>"##,
            fmt_tick(t),
            l2 = LEFT - 5.0,
            r = LEFT + pw,
            tx = LEFT - 8.0,
            ty = y + 4.0
        )
        .unwrap();
    }
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 15.0, escape(x_label)).unwrap();
    writeln!(
        out,
        r#"<text x="18" y="{y}" text-anchor="middle" transform="rotate(-90 18 {y})">{}</text>"#,
        escape(y_label),
        y = TOP + ph / 2.0
    )
    .unwrap();

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        // gaps split the series into separate polylines
        let mut runs: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for &(x, y) in &s.points {
            match y {
                Some(y) => runs.last_mut().unwrap().push((x, y)),
                None if !runs.last().unwrap().is_empty() => runs.push(Vec::new()),
                None => {}
            }
        }
        for run in runs.iter().filter(|r| !r.is_empty()) {
            let pts: Vec<String> = run.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            writeln!(
                out,
                r#"<polyline class="series" data-name="{}" fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
                escape(&s.name),
                pts.join(" ")
            )
            .unwrap();
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 15.0;
        writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 22.0,
            lx + 28.0,
            ly + 4.0,
            escape(&s.name)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

/// Square heatmap with every cell annotated to two decimals. Rows are the
/// true class, columns the predicted class.
pub fn heatmap(title: &str, matrix: &[Vec<f64>]) -> String {
    let n = matrix.len().max(1);
    let cell = (360.0 / n as f64).max(24.0);
    let (ox, oy) = (90.0, 60.0);
    let w = ox + cell * n as f64 + 30.0;
    let h = oy + cell * n as f64 + 60.0;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title)).unwrap();
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let text = if v > 0.5 { "white" } else { "black" };
            let (x, y) = (ox + cell * j as f64, oy + cell * i as f64);
            writeln!(
                out,
                r##"<rect class="cell" x="{x:.1}" y="{y:.1}" width="{cell:.1}" height="{cell:.1}" fill="rgb({shade},{shade},255)" stroke="#888888"/><text x="{:.1}" y="{:.1}" text-anchor="middle" fill="{text}">{v:.2}</text>"##,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            )
            .unwrap();
        }
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{i}</text>"#,
            ox - 6.0,
            oy + cell * i as f64 + cell / 2.0 + 4.0
        )
        .unwrap();
    }
    for j in 0..matrix.len() {
        writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{j}</text>"#, ox + cell * j as f64 + cell / 2.0, oy - 6.0)
            .unwrap();
    }
    writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">predicted class</text>"#, ox + cell * n as f64 / 2.0, h - 20.0)
        .unwrap();
    writeln!(
        out,
        r#"<text x="30" y="{y:.1}" text-anchor="middle" transform="rotate(-90 30 {y:.1})">true class</text>"#,
        y = oy + cell * n as f64 / 2.0
    )
    .unwrap();
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_heatmap_labels_diagonal_one() {
        let m: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let svg = heatmap("cm", &m);
        assert_eq!(svg.matches(">1.00</text>").count(), 3);
        assert_eq!(svg.matches(">0.00</text>").count(), 6);
        assert_eq!(svg.matches(r#"class="cell""#).count(), 9);
    }

    #[test]
    fn one_polyline_per_series_with_all_points() {
        let s = |name: &str, ys: &[f64]| Series {
            name: name.into(),
            points: ys.iter().enumerate().map(|(i, &y)| (i as f64, Some(y))).collect(),
        };
        let svg = line_chart("loss", "epoch", "cce", &[s("fold 0", &[2.0, 1.0]), s("fold 1", &[1.5, 0.7])]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        let first = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(first.split(' ').count(), 2);
        assert!(svg.contains(">fold 1</text>"));
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn gaps_split_polylines() {
        let s = Series { name: "p".into(), points: vec![(0.0, Some(0.5)), (1.0, None), (2.0, Some(0.7)), (3.0, Some(0.8))] };
        let svg = line_chart("t", "x", "y", &[s]);
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn ticks_are_round_numbers() {
        let labels = |lo, hi, n| nice_ticks(lo, hi, n).into_iter().map(fmt_tick).collect::<Vec<_>>();
        assert_eq!(labels(0.0, 1.0, 5), ["0", "0.2", "0.4", "0.6", "0.8", "1"]);
        assert_eq!(labels(0.0, 29.0, 8), ["0", "5", "10", "15", "20", "25"]);
        assert_eq!(labels(-0.3, 0.3, 3), ["-0.2", "0", "0.2"]);
    }
}
