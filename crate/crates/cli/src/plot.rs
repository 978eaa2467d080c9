use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;
use subskill_vae::evaluation::AggregateRow;
use subskill_vae::{Error, Result};

/// Points per objective.
type Series<'a> = BTreeMap<&'a str, Vec<(f64, f64)>>;

const COLORS: [RGBColor; 6] = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// One line chart per metric, one series per objective, written as `<metric>.svg`.
pub fn write_metric_charts(dir: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut by_metric: BTreeMap<&str, Series> = BTreeMap::new();
    for r in rows {
        if r.mean.is_finite() {
            by_metric
                .entry(&r.metric)
                .or_default()
                .entry(&r.objective)
                .or_default()
                .push((r.epoch as f64, r.mean));
        }
    }
    for (metric, series) in &by_metric {
        let pts = series.values().flatten();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        let pad = ((y1 - y0) * 0.05).max(1e-9);
        let path = dir.join(format!("{metric}.svg"));
        let root = SVGBackend::new(&path, (800, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(*metric, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc(*metric)
            .draw()
            .map_err(plot_err)?;
        for (i, (objective, pts)) in series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color))
                .map_err(plot_err)?
                .label(*objective)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(())
}
