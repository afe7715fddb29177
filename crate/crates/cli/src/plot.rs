//! PNG line plots for the ablation sweep.

use std::path::Path;
use std::sync::Once;

use anyhow::{anyhow, Result};
use nightseg::ablation::RunRecord;
use nightseg::trainer::{MetricRecord, Variant};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

const FONT: &[u8] = include_bytes!("../assets/DejaVuSans.ttf");
const SIZE: (u32, u32) = (960, 600);

fn ensure_font() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        // The bundled file is a valid font; a failure here would show up
        // as missing labels, not a crash.
        let _ = register_font("sans-serif", FontStyle::Normal, FONT);
    });
}

/// Trailing moving average, so per-iteration losses stay readable.
fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn bounds(series: &[(String, Vec<(f64, f64)>)]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x1, mut y0, mut y1) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    (0.0, x1, y0 - pad, y1 + pad)
}

fn draw(path: &Path, title: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    ensure_font();
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let (x0, x1, y0, y1) = bounds(series);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc(y_label)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| anyhow!("{e}"))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

/// Loss components of one run against iteration.
pub fn loss_components(path: &Path, title: &str, history: &[MetricRecord]) -> Result<()> {
    let window = (history.len() / 50).max(1);
    let pick: [(&str, fn(&MetricRecord) -> f64); 6] = [
        ("seg_d", |r| r.seg_d),
        ("seg_n", |r| r.seg_n),
        ("pseudo", |r| r.pseudo),
        ("cdc", |r| r.cdc),
        ("cds", |r| r.cds),
        ("total", |r| r.total),
    ];
    let series: Vec<_> = pick
        .iter()
        .map(|(name, f)| {
            let ys: Vec<f64> = history.iter().map(f).collect();
            let pts = history.iter().zip(smooth(&ys, window)).map(|(r, y)| (r.iter as f64, y)).collect();
            (name.to_string(), pts)
        })
        .collect();
    draw(path, title, "loss", &series)
}

/// Validation mIoU (percent, mean over seeds) per variant.
pub fn miou_per_variant(path: &Path, runs: &[RunRecord], variants: &[Variant]) -> Result<()> {
    let series: Vec<_> = variants
        .iter()
        .filter_map(|v| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.variant == *v).collect();
            let first = mine.first()?;
            let pts = first
                .history
                .iter()
                .enumerate()
                .filter_map(|(i, rec)| {
                    rec.val_miou?;
                    let vals: Vec<f64> = mine.iter().filter_map(|r| r.history.get(i)?.val_miou).collect();
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    Some(((rec.iter + 1) as f64, 100.0 * mean))
                })
                .collect();
            Some((v.label().to_string(), pts))
        })
        .collect();
    draw(path, "night mIoU per variant", "mIoU (%)", &series)
}
