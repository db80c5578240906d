//! Static SVG charts of a run's telemetry.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use tfsod_detector::TelemetryRecord;

use crate::HarnessError;

/// Bars wider than this many iterations are averaged.
const MAX_BARS: usize = 200;

pub fn read_jsonl(path: &Path) -> Result<Vec<TelemetryRecord>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::MissingArtifact {
        path: path.to_path_buf(),
        source: Some(source),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| HarnessError::Corrupt {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// First iteration of a bin, then mean active, negative and potential counts.
type Bar = (u64, f64, f64, f64);

/// Legend name, fill and the vertical span a role covers within a bar.
type Layer = (&'static str, RGBColor, fn(&Bar) -> (f64, f64));

fn binned(records: &[TelemetryRecord]) -> Vec<Bar> {
    let width = records.len().div_ceil(MAX_BARS).max(1);
    records
        .chunks(width)
        .map(|c| {
            let n = c.len() as f64;
            let sum = |f: fn(&TelemetryRecord) -> usize| c.iter().map(|r| f(r) as f64).sum::<f64>() / n;
            (
                c[0].iteration,
                sum(TelemetryRecord::active),
                sum(TelemetryRecord::negative),
                sum(TelemetryRecord::potential),
            )
        })
        .collect()
}

fn plot_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

/// Stacked bars of active, potential and negative anchors per iteration.
pub fn anchor_chart(records: &[TelemetryRecord], title: &str, out: &Path) -> Result<(), HarnessError> {
    let bars = binned(records);
    let ymax = bars.iter().map(|b| b.1 + b.2 + b.3).fold(1.0, f64::max);
    let root = SVGBackend::new(out, (900, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0f64..bars.len() as f64, 0f64..ymax * 1.05)
        .map_err(plot_err)?;
    let labels: Vec<u64> = bars.iter().map(|b| b.0).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_desc("iteration")
        .y_desc("anchors")
        .x_label_formatter(&|x| labels.get(*x as usize).map_or(String::new(), |i| i.to_string()))
        .draw()
        .map_err(plot_err)?;
    let layers: [Layer; 3] = [
        ("active", RGBColor(46, 125, 50), |b| (0.0, b.1)),
        ("potential", RGBColor(230, 120, 20), |b| (b.1, b.1 + b.3)),
        ("negative", RGBColor(150, 160, 175), |b| (b.1 + b.3, b.1 + b.3 + b.2)),
    ];
    for (name, color, span) in layers {
        chart
            .draw_series(bars.iter().enumerate().map(|(i, b)| {
                let (lo, hi) = span(b);
                Rectangle::new([(i as f64 + 0.1, lo), (i as f64 + 0.9, hi)], color.filled())
            }))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Bars of the potential-anchor count alone, where the gate's activity is visible.
pub fn potential_chart(records: &[TelemetryRecord], title: &str, out: &Path) -> Result<(), HarnessError> {
    let bars = binned(records);
    let ymax = bars.iter().map(|b| b.3).fold(1.0, f64::max);
    let root = SVGBackend::new(out, (900, 320)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0f64..bars.len() as f64, 0f64..ymax * 1.05)
        .map_err(plot_err)?;
    let labels: Vec<u64> = bars.iter().map(|b| b.0).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_desc("iteration")
        .y_desc("potential anchors")
        .x_label_formatter(&|x| labels.get(*x as usize).map_or(String::new(), |i| i.to_string()))
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, b)| {
            Rectangle::new(
                [(i as f64 + 0.1, 0.0), (i as f64 + 0.9, b.3)],
                RGBColor(230, 120, 20).filled(),
            )
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

pub fn loss_chart(records: &[TelemetryRecord], title: &str, out: &Path) -> Result<(), HarnessError> {
    let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.iteration as f64, r.loss_total)).collect();
    let xmax = pts.last().map_or(1.0, |p| p.0.max(1.0));
    let ymax = pts.iter().map(|p| p.1).filter(|v| v.is_finite()).fold(1e-6, f64::max);
    let root = SVGBackend::new(out, (900, 320)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0f64..xmax, 0f64..ymax * 1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("total loss")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(pts, &RGBColor(30, 90, 180)))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Renders every chart for each stage log present in `run_dir`.
pub fn plot_run(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    for stage in ["pretrain", "finetune"] {
        let log = run_dir.join(format!("{stage}.jsonl"));
        if !log.exists() {
            continue;
        }
        let records = read_jsonl(&log)?;
        if records.is_empty() {
            continue;
        }
        fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io {
            path: out_dir.to_path_buf(),
            source,
        })?;
        let anchors = out_dir.join(format!("{stage}-anchors.svg"));
        anchor_chart(&records, &format!("{stage}: sampled anchors per iteration"), &anchors)?;
        let potential = out_dir.join(format!("{stage}-potential.svg"));
        potential_chart(
            &records,
            &format!("{stage}: potential anchors per iteration"),
            &potential,
        )?;
        let loss = out_dir.join(format!("{stage}-loss.svg"));
        loss_chart(&records, &format!("{stage}: total loss"), &loss)?;
        written.extend([anchors, potential, loss]);
    }
    if written.is_empty() {
        return Err(HarnessError::MissingArtifact {
            path: run_dir.join("pretrain.jsonl"),
            source: None,
        });
    }
    Ok(written)
}
