//! Minimal SVG line charts. Output depends only on the input numbers, so the
//! same records always produce byte-identical files.

use std::fmt::Write as _;

use crate::trainer::RunRecord;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * hi.abs().max(1.0) {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e5) {
        format!("{v:.2e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders one chart with a polyline per series (a single marker for one-point series) and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(title)).unwrap();
    writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#).unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        writeln!(s, r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#ddd"/>"##, TOP, TOP + ph).unwrap();
        writeln!(s, r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/>"##, LEFT + pw).unwrap();
        writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, tick_label(xv)).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, py + 4.0, tick_label(yv)).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 12.0, escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    )
    .unwrap();

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        match ser.points.as_slice() {
            [] => {}
            [(x, y)] => {
                writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#, sx(*x), sy(*y)).unwrap();
            }
            pts => {
                let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" ")).unwrap();
            }
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/>"#, lx + 18.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 24.0, ly + 4.0, escape(&ser.label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// One validation-loss chart per tracked dataset plus a learning-rate chart,
/// as `(file name, svg)` pairs.
pub fn emit_plots(runs: &[(String, Vec<RunRecord>)]) -> Vec<(String, String)> {
    let Some(datasets) = runs.iter().flat_map(|(_, r)| r.first()).map(|r| r.datasets.clone()).next() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (i, d) in datasets.iter().enumerate() {
        let series: Vec<Series> = runs
            .iter()
            .map(|(name, records)| Series {
                label: name.clone(),
                points: records
                    .iter()
                    .flat_map(|r| r.rows.iter())
                    .filter_map(|row| row.val_loss.get(i).map(|&l| (row.step as f64, l)))
                    .collect(),
            })
            .collect();
        out.push((format!("val_{d}.svg"), line_chart(&format!("{d} validation loss"), "step", "loss (nats)", &series)));
    }
    let lr: Vec<Series> = runs
        .iter()
        .map(|(name, records)| Series {
            label: name.clone(),
            points: records.iter().flat_map(|r| r.rows.iter()).map(|row| (row.step as f64, row.lr)).collect(),
        })
        .collect();
    out.push(("lr.svg".to_string(), line_chart("learning rate", "step", "lr", &lr)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_gets_a_marker() {
        let svg = line_chart("t", "x", "y", &[Series { label: "a".into(), points: vec![(1.0, 2.0)] }]);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches("<polyline").count(), 0);
    }

    #[test]
    fn two_runs_two_lines_and_legend() {
        let series = [
            Series { label: "run <a>".into(), points: vec![(0.0, 1.0), (1.0, 0.5)] },
            Series { label: "run b".into(), points: vec![(0.0, 2.0), (1.0, 1.5), (2.0, 1.0)] },
        ];
        let svg = line_chart("loss", "step", "nats", &series);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("run &lt;a&gt;") && svg.contains(">run b<"));
        assert_eq!(svg, line_chart("loss", "step", "nats", &series));
    }
}
