//! Static SVG plots of a metrics log: loss, learning rate and training
//! accuracy against step, one panel each.

use std::fmt::Write as _;
use std::path::Path;

use mvsa_core::training::MetricRecord;

use crate::error::{read_text, Error, Result};

const WIDTH: f64 = 720.0;
const PANEL_HEIGHT: f64 = 200.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_Y: f64 = 30.0;

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| MetricRecord::parse_line(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn format_metrics(records: &[MetricRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

fn panel(svg: &mut String, index: usize, title: &str, points: &[(f64, f64)]) {
    let top = index as f64 * (PANEL_HEIGHT + MARGIN_Y) + MARGIN_Y;
    let (x0, x1) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
    let (y0, y1) = (top + PANEL_HEIGHT, top);
    let finite = points.iter().filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in finite.clone() {
        (xmin, xmax, ymin, ymax) = (xmin.min(x), xmax.max(x), ymin.min(y), ymax.max(y));
    }
    if xmin > xmax {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        (ymin, ymax) = (ymin - 0.5, ymax + 0.5);
    }
    let sx = |x: f64| x0 + (x - xmin) / (xmax - xmin) * (x1 - x0);
    let sy = |y: f64| y0 + (y - ymin) / (ymax - ymin) * (y1 - y0);
    let w = |s: &mut String, t: std::fmt::Arguments| s.write_fmt(t).expect("string write");
    w(svg, format_args!("<g class=\"panel\" id=\"{title}\">\n"));
    w(
        svg,
        format_args!(
            "<rect x=\"{x0}\" y=\"{y1}\" width=\"{}\" height=\"{PANEL_HEIGHT}\" fill=\"none\" stroke=\"#888\"/>\n",
            x1 - x0
        ),
    );
    w(svg, format_args!("<text x=\"{}\" y=\"{}\" font-size=\"13\">{title}</text>\n", x0, y1 - 8.0));
    w(svg, format_args!("<text x=\"4\" y=\"{}\" font-size=\"10\">{ymax:.4e}</text>\n", y1 + 10.0));
    w(svg, format_args!("<text x=\"4\" y=\"{y0}\" font-size=\"10\">{ymin:.4e}</text>\n"));
    w(svg, format_args!("<text x=\"{x0}\" y=\"{}\" font-size=\"10\">{xmin}</text>\n", y0 + 12.0));
    w(
        svg,
        format_args!("<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{xmax}</text>\n", x1, y0 + 12.0),
    );
    let path: Vec<String> = finite.map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    w(
        svg,
        format_args!("<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>\n", path.join(" ")),
    );
    svg.push_str("</g>\n");
}

pub fn render_svg(records: &[MetricRecord]) -> String {
    let height = 3.0 * (PANEL_HEIGHT + MARGIN_Y) + MARGIN_Y;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" font-family=\"sans-serif\">\n"
    );
    let series = |f: fn(&MetricRecord) -> f64| -> Vec<(f64, f64)> { records.iter().map(|r| (r.step as f64, f(r))).collect() };
    panel(&mut svg, 0, "loss", &series(|r| r.loss));
    panel(&mut svg, 1, "learning rate", &series(|r| r.lr));
    panel(&mut svg, 2, "train accuracy (%)", &series(|r| r.acc));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_three_panels_with_every_point() {
        let recs: Vec<MetricRecord> = (1..=5)
            .map(|s| MetricRecord {
                step: s * 10,
                lr: 1e-4 * s as f64,
                loss: 3.0 / s as f64,
                acc: 20.0 * s as f64,
            })
            .collect();
        let svg = render_svg(&recs);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 3);
        let first = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(first.split(' ').count(), 5);
    }

    #[test]
    fn empty_or_constant_series_still_render() {
        assert_eq!(render_svg(&[]).matches("<g class").count(), 3);
        let r = MetricRecord {
            step: 1,
            lr: 0.0,
            loss: f64::NAN,
            acc: 50.0,
        };
        assert!(!render_svg(&[r]).contains("NaN"));
    }
}
