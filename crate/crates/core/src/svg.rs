//! Self-contained SVG line plots: one `<polyline>` per series, optional
//! log axes, text-only output with no external assets. Rendering is
//! deterministic, so identical inputs give byte-identical files.

use std::fmt::Write;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisScale {
    Linear,
    Log2,
    Log10,
}

impl AxisScale {
    fn map(&self, v: f64) -> f64 {
        match self {
            AxisScale::Linear => v,
            AxisScale::Log2 => v.log2(),
            AxisScale::Log10 => v.log10(),
        }
    }

    fn is_log(&self) -> bool {
        !matches!(self, AxisScale::Linear)
    }
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_scale: AxisScale,
    pub y_scale: AxisScale,
    /// Tick positions in data coordinates; labels print the raw values.
    pub x_ticks: Vec<f64>,
}

const W: f64 = 800.0;
const H: f64 = 500.0;
const ML: f64 = 70.0; // margins
const MR: f64 = 20.0;
const MT: f64 = 40.0;
const MB: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

/// Render series into an SVG document. Log axes reject non-positive values,
/// naming the offending series and x position.
pub fn render(series: &[Series], spec: &PlotSpec) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::DegenerateInput("nothing to plot".into()));
    }
    for s in series {
        for &(x, y) in &s.points {
            if (spec.x_scale.is_log() && x <= 0.0) || (spec.y_scale.is_log() && y <= 0.0) {
                return Err(Error::NonPositiveLogValue {
                    model: s.label.clone(),
                    axis_value: x as u64,
                    value: y,
                });
            }
        }
    }

    let all = series.iter().flat_map(|s| s.points.iter());
    let mut xs: Vec<f64> = all.clone().map(|&(x, _)| spec.x_scale.map(x)).collect();
    xs.extend(spec.x_ticks.iter().map(|&t| spec.x_scale.map(t)));
    let ys: Vec<f64> = all.map(|&(_, y)| spec.y_scale.map(y)).collect();
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let sx = |x: f64| ML + (spec.x_scale.map(x) - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (spec.y_scale.map(y) - y0) / (y1 - y0) * (H - MT - MB);

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="22" font-family="monospace" font-size="15" text-anchor="middle">{}</text>"#,
        fmt(W / 2.0),
        spec.title
    )
    .unwrap();

    // Axes.
    writeln!(
        out,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        fmt(ML),
        fmt(H - MB),
        fmt(W - MR),
        fmt(H - MB)
    )
    .unwrap();
    writeln!(
        out,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        fmt(ML),
        fmt(MT),
        fmt(ML),
        fmt(H - MB)
    )
    .unwrap();

    // X ticks at the sweep grid values.
    for &t in &spec.x_ticks {
        let x = sx(t);
        writeln!(
            out,
            r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>"#,
            fmt(x),
            fmt(H - MB),
            fmt(H - MB + 5.0)
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="11" text-anchor="middle">{}</text>"#,
            fmt(x),
            fmt(H - MB + 18.0),
            fmt_tick(t)
        )
        .unwrap();
    }

    // Y ticks: decades for log10, else 5 evenly spaced.
    let y_ticks: Vec<f64> = if spec.y_scale == AxisScale::Log10 {
        let lo = y0.floor() as i32;
        let hi = y1.ceil() as i32;
        (lo..=hi).map(|e| 10f64.powi(e)).collect()
    } else {
        (0..=4)
            .map(|i| {
                let f = i as f64 / 4.0;
                match spec.y_scale {
                    AxisScale::Linear => y0 + f * (y1 - y0),
                    AxisScale::Log2 => (y0 + f * (y1 - y0)).exp2(),
                    AxisScale::Log10 => unreachable!(),
                }
            })
            .collect()
    };
    for &t in &y_ticks {
        let mapped = spec.y_scale.map(t);
        if mapped < y0 - 1e-9 || mapped > y1 + 1e-9 {
            continue;
        }
        let y = sy(t);
        writeln!(
            out,
            r#"<line x1="{0}" y1="{2}" x2="{1}" y2="{2}" stroke="black"/>"#,
            fmt(ML - 5.0),
            fmt(ML),
            fmt(y)
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="11" text-anchor="end">{}</text>"#,
            fmt(ML - 8.0),
            fmt(y + 4.0),
            fmt_tick(t)
        )
        .unwrap();
    }

    // Axis labels.
    writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="monospace" font-size="13" text-anchor="middle">{}</text>"#,
        fmt((ML + W - MR) / 2.0),
        fmt(H - 15.0),
        spec.x_label
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="18" y="{}" font-family="monospace" font-size="13" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        fmt((MT + H - MB) / 2.0),
        fmt((MT + H - MB) / 2.0),
        spec.y_label
    )
    .unwrap();

    // Data polylines and legend.
    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y))))
            .collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            color,
            pts.join(" ")
        )
        .unwrap();
        let ly = MT + 16.0 * i as f64;
        writeln!(
            out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="2"/>"#,
            fmt(W - MR - 140.0),
            fmt(ly),
            fmt(W - MR - 115.0),
            fmt(ly),
            color
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="12">{}</text>"#,
            fmt(W - MR - 110.0),
            fmt(ly + 4.0),
            s.label
        )
        .unwrap();
    }
    writeln!(out, "</svg>").unwrap();
    Ok(out)
}

fn span(vals: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if (hi - lo).abs() < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Vec<Series>, PlotSpec) {
        let series = vec![
            Series {
                label: "a".into(),
                points: vec![(256.0, 1.0), (1024.0, 1.5), (4096.0, 2.0)],
            },
            Series {
                label: "b".into(),
                points: vec![(256.0, 1.0), (1024.0, 4.0), (4096.0, 16.0)],
            },
        ];
        let spec = PlotSpec {
            title: "latency".into(),
            x_label: "candidates".into(),
            y_label: "ms".into(),
            x_scale: AxisScale::Log2,
            y_scale: AxisScale::Log10,
            x_ticks: vec![256.0, 1024.0, 4096.0],
        };
        (series, spec)
    }

    #[test]
    fn two_models_three_points_two_polylines() {
        let (series, spec) = sample();
        let svg = render(&series, &spec).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn tick_labels_match_grid_values() {
        let (series, spec) = sample();
        let svg = render(&series, &spec).unwrap();
        for t in ["256", "1024", "4096"] {
            assert!(svg.contains(&format!(">{t}</text>")), "missing tick {t}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let (series, spec) = sample();
        assert_eq!(render(&series, &spec).unwrap(), render(&series, &spec).unwrap());
    }

    #[test]
    fn non_positive_on_log_axis_names_the_row() {
        let (mut series, spec) = sample();
        series[1].points[1].1 = 0.0;
        match render(&series, &spec) {
            Err(Error::NonPositiveLogValue { model, axis_value, .. }) => {
                assert_eq!(model, "b");
                assert_eq!(axis_value, 1024);
            }
            other => panic!("expected log-axis error, got {other:?}"),
        }
    }
}
