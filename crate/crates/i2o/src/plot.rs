//! Self-contained SVG line charts rendered from report CSV files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::csvio::{self, Schema};
use crate::error::{CliError, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const MAX_LEGEND: usize = 16;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Dashed vertical reference line.
    pub vline: Option<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn padded_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.04 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
        (lo - pad, hi + pad)
    }
}

/// About five round tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn tick_label(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let a = x.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{x:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_owned()
    } else {
        format!("{x:.2e}")
    }
}

impl Chart {
    pub fn to_svg(&self) -> Result<String> {
        let finite: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        if finite.is_empty() {
            return Err(CliError::Run("nothing to plot".into()));
        }
        let fold = |f: fn(&(f64, f64)) -> f64| {
            finite
                .iter()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
        };
        let (mut x_lo, mut x_hi) = fold(|p| p.0);
        if let Some(v) = self.vline {
            x_lo = x_lo.min(v);
            x_hi = x_hi.max(v);
        }
        let (x_lo, x_hi) = padded_range(x_lo, x_hi);
        let (y_lo, y_hi) = fold(|p| p.1);
        let (y_lo, y_hi) = padded_range(y_lo, y_hi);
        let plot_w = WIDTH - LEFT - RIGHT;
        let plot_h = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
        let sy = |y: f64| TOP + (y_hi - y) / (y_hi - y_lo) * plot_h;

        let mut svg = String::new();
        let w = &mut svg;
        writeln!(
            w,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(
            w,
            r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
        )
        .unwrap();
        writeln!(
            w,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + plot_w / 2.0,
            escape(&self.title)
        )
        .unwrap();
        writeln!(w, r#"<g class="axes" stroke="black" fill="none">"#).unwrap();
        writeln!(
            w,
            r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}"/>"#
        )
        .unwrap();
        writeln!(w, "</g>").unwrap();
        writeln!(w, r##"<g class="ticks" fill="#333">"##).unwrap();
        for t in ticks(x_lo, x_hi) {
            let x = sx(t);
            writeln!(
                w,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                TOP + plot_h,
                TOP + plot_h + 5.0,
                TOP + plot_h + 18.0,
                tick_label(t)
            )
            .unwrap();
        }
        for t in ticks(y_lo, y_hi) {
            let y = sy(t);
            writeln!(
                w,
                r#"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                LEFT - 5.0,
                LEFT - 8.0,
                y + 4.0,
                tick_label(t)
            )
            .unwrap();
        }
        writeln!(w, "</g>").unwrap();
        writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + plot_w / 2.0,
            HEIGHT - 15.0,
            escape(&self.x_label)
        )
        .unwrap();
        writeln!(
            w,
            r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            TOP + plot_h / 2.0,
            TOP + plot_h / 2.0,
            escape(&self.y_label)
        )
        .unwrap();
        if let Some(v) = self.vline {
            let x = sx(v);
            writeln!(
                w,
                r#"<line class="reference" x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="black" stroke-dasharray="6 4"/>"#,
                TOP + plot_h
            )
            .unwrap();
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            writeln!(
                w,
                r#"<polyline class="series" data-label="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                escape(&s.label),
                pts.join(" ")
            )
            .unwrap();
        }
        writeln!(w, r#"<g class="legend">"#).unwrap();
        for (i, s) in self.series.iter().take(MAX_LEGEND).enumerate() {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let x = WIDTH - RIGHT + 15.0;
            writeln!(
                w,
                r#"<line x1="{x}" y1="{y}" x2="{:.1}" y2="{y}" stroke="{}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                x + 20.0,
                PALETTE[i % PALETTE.len()],
                x + 26.0,
                y + 4.0,
                escape(&s.label)
            )
            .unwrap();
        }
        if self.series.len() > MAX_LEGEND {
            writeln!(
                w,
                r#"<text x="{:.1}" y="{:.1}">+{} more</text>"#,
                WIDTH - RIGHT + 15.0,
                TOP + 14.0 + 18.0 * MAX_LEGEND as f64,
                self.series.len() - MAX_LEGEND
            )
            .unwrap();
        }
        writeln!(w, "</g>\n</svg>").unwrap();
        Ok(svg)
    }
}

/// Loss after `N + ΔN` iterations against `ΔN`, one series per `(seed, N)`.
/// Rows at `ΔN = ∞` have no abscissa and are left out.
pub fn sweep_chart(rows: &[i2o_core::I2ORow]) -> Chart {
    let mut groups: BTreeMap<(u64, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let entry = groups.entry((r.seed, r.n)).or_default();
        if let i2o_core::DeltaN::Steps(d) = r.delta_n {
            entry.push((d as f64, r.loss_n_dn));
        }
    }
    Chart {
        title: "Outer loss after N + ΔN inner iterations".into(),
        x_label: "ΔN".into(),
        y_label: "loss".into(),
        series: groups
            .into_iter()
            .map(|((seed, n), mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    label: format!("seed {seed}, N = {n}"),
                    points,
                }
            })
            .collect(),
        vline: Some(0.0),
    }
}

/// Seed mean of `−lower_bound` against `d_θ`, one series per `N`.
pub fn avgcase_chart(cells: &[(u64, i2o_core::theory::SeedCell)]) -> Chart {
    let mut sums: BTreeMap<usize, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for (_, c) in cells {
        let e = sums.entry(c.n).or_default().entry(c.d_theta).or_default();
        e.0 += -c.lower_bound;
        e.1 += 1;
    }
    Chart {
        title: "Mean lower-bound magnitude".into(),
        x_label: "d_theta".into(),
        y_label: "mean |lower bound|".into(),
        series: sums
            .into_iter()
            .map(|(n, by_d)| Series {
                label: format!("N = {n}"),
                points: by_d
                    .into_iter()
                    .map(|(d, (s, k))| (d as f64, s / k as f64))
                    .collect(),
            })
            .collect(),
        vline: None,
    }
}

/// Renders `csv_path` to `out`. Nothing is written when the CSV is rejected.
pub fn plot_csv(csv_path: &Path, out: &Path) -> Result<Schema> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| CliError::io(csv_path, e))?;
    let schema = csvio::detect_schema(&text, csv_path)?;
    let chart = match schema {
        Schema::Sweep => sweep_chart(&csvio::parse_sweep(&text, csv_path)?),
        Schema::AvgCase => avgcase_chart(&csvio::parse_avgcase(&text, csv_path)?),
    };
    let svg = chart.to_svg()?;
    std::fs::write(out, svg).map_err(|e| CliError::io(out, e))?;
    Ok(schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_positions_are_round() {
        assert_eq!(ticks(0.0, 10.0), vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(ticks(-0.3, 0.3), vec![-0.2, 0.0, 0.2]);
    }

    #[test]
    fn chart_has_series_and_reference_line() {
        let chart = Chart {
            title: "t <&>".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![
                Series {
                    label: "a".into(),
                    points: vec![(-1.0, 1.0), (0.0, 0.5), (2.0, 0.7)],
                },
                Series {
                    label: "b".into(),
                    points: vec![(-1.0, 2.0), (3.0, 2.0)],
                },
            ],
            vline: Some(0.0),
        };
        let svg = chart.to_svg().unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("stroke-dasharray").count(), 1);
        assert!(svg.contains("t &lt;&amp;&gt;"));
    }

    #[test]
    fn empty_chart_is_rejected() {
        let chart = Chart {
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            series: vec![],
            vline: None,
        };
        assert!(chart.to_svg().is_err());
    }
}
