use std::path::Path;

use plotters::prelude::*;

use super::{Metric, SweepResult};
use crate::error::{Error, Result};

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::invalid(format!("plot: {e}"))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let pad = ((hi - lo) * 0.1).max(1e-3);
    (lo - pad, hi + pad)
}

/// One line per tag of `metric` against SNR, as SVG.
pub fn plot_metric_curves(result: &SweepResult, metric: Metric, path: &Path) -> Result<()> {
    let rows: Vec<_> = result.rows.iter().filter(|r| r.metric == metric).collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!("no {metric:?} rows to plot")));
    }
    let (x0, x1) = bounds(rows.iter().map(|r| r.snr_db));
    let (y0, y1) = bounds(rows.iter().map(|r| r.mean));
    let root = SVGBackend::new(path, (640, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("SNR (dB)")
        .y_desc(metric.label())
        .draw()
        .map_err(plot_err)?;
    for (k, tag) in result.tags().iter().enumerate() {
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| &r.tag == tag)
            .map(|r| (r.snr_db, r.mean))
            .collect();
        if pts.is_empty() {
            continue;
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(tag.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Grouped bars of the paired PSNR gain, one group per SNR.
pub fn plot_gain_bars(result: &SweepResult, path: &Path) -> Result<()> {
    let rows: Vec<_> = result.rows.iter().filter(|r| r.metric == Metric::PsnrGain).collect();
    if rows.is_empty() {
        return Err(Error::invalid("no PSNR gain rows to plot"));
    }
    let tags = result.tags();
    let mut snrs: Vec<f64> = rows.iter().map(|r| r.snr_db).collect();
    snrs.sort_by(|a, b| a.total_cmp(b));
    snrs.dedup();
    let (y0, y1) = bounds(rows.iter().map(|r| r.mean).chain([0.0]));
    let width = 1.0 / (tags.len() as f64 + 1.0);
    let root = SVGBackend::new(path, (640, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.5..(snrs.len() as f64 - 0.5), y0..y1)
        .map_err(plot_err)?;
    let labels = snrs.clone();
    chart
        .configure_mesh()
        .x_desc("SNR (dB)")
        .y_desc(Metric::PsnrGain.label())
        .x_labels(snrs.len())
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < labels.len() {
                format!("{}", labels[i as usize])
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(plot_err)?;
    for (k, tag) in tags.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let bars: Vec<_> = rows
            .iter()
            .filter(|r| &r.tag == tag)
            .filter_map(|r| {
                let g = snrs.iter().position(|s| *s == r.snr_db)? as f64;
                let left = g - 0.5 + width * (k as f64 + 0.5);
                Some(Rectangle::new([(left, 0.0), (left + width, r.mean)], color.filled()))
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(tag.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
