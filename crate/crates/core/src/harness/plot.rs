//! Dependency-free SVG line plots of metrics CSVs.

use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 840.0;
const HEIGHT: f64 = 520.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PHASE_COLORS: &[(&str, &str)] = &[
    ("train", "#1f77b4"),
    ("eval", "#d62728"),
    ("pretrain", "#2ca02c"),
];

/// One polyline per phase of `column` against iteration.
pub fn render_csv(csv_path: &Path, column: &str, out_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(csv_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", csv_path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let col_idx = cols
        .iter()
        .position(|&c| c == column)
        .ok_or_else(|| Error::Config(format!("column {column:?} not in header {header:?}")))?;
    let iter_idx = cols
        .iter()
        .position(|&c| c == "iteration")
        .ok_or_else(|| Error::Config("CSV has no iteration column".into()))?;

    // phase -> (iteration, value) series.
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Config(format!("ragged CSV row {line:?}")));
        }
        let phase = fields[0].to_string();
        let x: f64 = fields[iter_idx]
            .parse()
            .map_err(|_| Error::Config(format!("bad iteration in {line:?}")))?;
        let y: f64 = fields[col_idx]
            .parse()
            .map_err(|_| Error::Config(format!("bad value in {line:?}")))?;
        if !y.is_finite() {
            continue;
        }
        match series.iter_mut().find(|(p, _)| *p == phase) {
            Some((_, pts)) => pts.push((x, y)),
            None => series.push((phase, vec![(x, y)])),
        }
    }
    if series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::Config(format!("no finite values for {column:?}")));
    }

    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.clone()).collect();
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if x_hi == x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi == y_lo {
        y_hi = y_lo + 1.0;
    }
    let pad = 0.05 * (y_hi - y_lo);
    y_lo -= pad;
    y_hi += pad;

    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let px = MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R);
        let py = HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B);
        (px, py)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"16\">{} vs iteration</text>\n",
        MARGIN_L, column
    ));

    // Axes.
    let (x0px, y0px) = to_px(x_lo, y_lo);
    let (x1px, _) = to_px(x_hi, y_lo);
    let (_, y1px) = to_px(x_lo, y_hi);
    svg.push_str(&format!(
        "<line x1=\"{x0px}\" y1=\"{y0px}\" x2=\"{x1px}\" y2=\"{y0px}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{x0px}\" y1=\"{y0px}\" x2=\"{x0px}\" y2=\"{y1px}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{x0px}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">{x_lo:.0}</text>\n",
        y0px + 18.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"end\">{x_hi:.0}</text>\n",
        x1px, y0px + 18.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"end\">{y_lo:.3}</text>\n",
        x0px - 6.0, y0px
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"end\">{y_hi:.3}</text>\n",
        x0px - 6.0,
        y1px + 4.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">iteration</text>\n",
        (x0px + x1px) / 2.0 - 30.0,
        HEIGHT - 12.0
    ));

    let mut legend_y = MARGIN_T + 8.0;
    for (phase, pts) in &series {
        if pts.is_empty() {
            continue;
        }
        let color = PHASE_COLORS
            .iter()
            .find(|(p, _)| p == phase)
            .map(|(_, c)| *c)
            .unwrap_or("#7f7f7f");
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (px, py) = to_px(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{legend_y}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">{phase}</text>\n",
            WIDTH - MARGIN_R - 80.0
        ));
        legend_y += 16.0;
    }
    svg.push_str("</svg>\n");

    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out_path, svg)?;
    Ok(())
}
