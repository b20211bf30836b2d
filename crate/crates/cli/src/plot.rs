//! SVG figures.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

fn zscore(x: &[f64]) -> Vec<f64> {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    x.iter().map(|v| (v - mean) / sd).collect()
}

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

/// Predicted and ground-truth signals, each standardised, on one axis.
pub fn signal_overlay(path: &Path, title: &str, pred: &[f64], gt: &[f64]) -> Result<()> {
    let (p, g) = (zscore(pred), zscore(gt));
    let n = p.len().max(g.len()).max(2);
    let ymax = p.iter().chain(&g).fold(1.0_f64, |m, v| m.max(v.abs())) * 1.1;
    let root = SVGBackend::new(path, (800, 300)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(0..n - 1, -ymax..ymax)
        .map_err(err)?;
    chart.configure_mesh().x_desc("frame").y_desc("z-score").draw().map_err(err)?;
    chart
        .draw_series(LineSeries::new(g.iter().copied().enumerate(), &BLACK))
        .map_err(err)?
        .label("ground truth")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 20, y)], BLACK));
    chart
        .draw_series(LineSeries::new(p.iter().copied().enumerate(), &RED))
        .map_err(err)?
        .label("predicted")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 20, y)], RED));
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(err)?;
    root.present().map_err(err)
}

/// MAE per schedule, schedules on a categorical axis in the given order.
pub fn mae_vs_resolution(path: &Path, points: &[(String, f64)]) -> Result<()> {
    let n = points.len().max(1);
    let ymax = points.iter().map(|p| p.1).filter(|v| v.is_finite()).fold(1.0_f64, f64::max) * 1.15;
    let labels: Vec<String> = points.iter().map(|p| p.0.clone()).collect();
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("MAE vs face resolution", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(-0.5..n as f64 - 0.5, 0.0..ymax)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                labels.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc("schedule")
        .y_desc("MAE (bpm)")
        .draw()
        .map_err(err)?;
    let xy: Vec<(f64, f64)> = points.iter().enumerate().map(|(i, p)| (i as f64, p.1)).collect();
    chart.draw_series(LineSeries::new(xy.iter().copied(), &BLUE)).map_err(err)?;
    chart.draw_series(xy.iter().map(|&p| Circle::new(p, 4, BLUE.filled()))).map_err(err)?;
    root.present().map_err(err)
}
