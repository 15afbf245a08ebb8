use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consolidation::{PseudoLabelSet, SelectionConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::selector::{self, confidence_select};

/// Quantity / quality of the PA+HCPR row on DomainNet real→clipart with a
/// ResNet-50 backbone, kept as a documented reference point.
pub const REFERENCE_PA_HCPR_RW_CL: (f64, f64) = (24.65, 90.76);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub method: String,
    pub selected: usize,
    pub total: usize,
    pub quantity_pct: f64,
    /// `None` when nothing was selected.
    pub quality_pct: Option<f64>,
}

impl AnalysisRow {
    pub fn from_set(method: &str, set: &PseudoLabelSet, dataset: &Dataset) -> Result<Self> {
        if !dataset.has_labels() {
            return Err(Error::Input("pseudo-label analysis needs evaluation labels".into()));
        }
        Ok(Self {
            method: method.to_string(),
            selected: set.len(),
            total: set.total(),
            quantity_pct: set.quantity_pct(),
            quality_pct: set.quality_pct(dataset),
        })
    }
}

/// Compare selections on the source model and on the pre-adapted model:
/// confidence thresholding, near-centroid and HCPR on each.
pub fn analyze_pseudo_labels(source: &Model, adapted: &Model, target: &Dataset, config: &SelectionConfig) -> Result<Vec<AnalysisRow>> {
    if !target.has_labels() {
        return Err(Error::Input("pseudo-label analysis needs evaluation labels".into()));
    }
    let hcpr = selector::lookup("hcpr")?;
    let near = selector::lookup("near_centroid")?;
    let mut rows = Vec::new();
    for (tag, model) in [("source", source), ("pa", adapted)] {
        let conf = confidence_select(model, target, config.confidence_tau)?;
        rows.push(AnalysisRow::from_set(&format!("confidence_{tag}"), &conf, target)?);
        let nc = near.select(model, target, config)?.pseudo;
        rows.push(AnalysisRow::from_set(&format!("near_centroid_{tag}"), &nc, target)?);
        let hc = hcpr.select(model, target, config)?.pseudo;
        rows.push(AnalysisRow::from_set(&format!("hcpr_{tag}"), &hc, target)?);
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Static SVG line chart; one line per named series.
pub fn plot_series(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let points: Vec<&(f64, f64)> = series.iter().flat_map(|(_, s)| s.iter()).collect();
    if points.is_empty() {
        return Ok(());
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &&(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1.0);
    let fail = |e: &dyn std::fmt::Display| Error::Format(format!("plot {}: {e}", path.display()));
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| fail(&e))?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(|e| fail(&e))?;
    for (i, (name, data)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(data.iter().copied(), color.stroke_width(2)))
            .map_err(|e| fail(&e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| fail(&e))?;
    root.present().map_err(|e| fail(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DomainTag;
    use ndarray::Array4;
    use std::collections::BTreeMap;

    #[test]
    fn all_correct_tenth() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let ds = Dataset::new(DomainTag::Target, 2, Array4::zeros((100, 1, 1, 1)), (0..100).collect(), Some(labels.clone())).unwrap();
        let picked: BTreeMap<u64, usize> = (0..10u64).map(|i| (i, labels[i as usize])).collect();
        let set = PseudoLabelSet::from_labels(ds.ids(), picked);
        let row = AnalysisRow::from_set("x", &set, &ds).unwrap();
        assert_eq!(row.quantity_pct, 10.0);
        assert_eq!(row.quality_pct, Some(100.0));
    }

    #[test]
    fn svg_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.svg");
        plot_series(&p, "t", "epoch", "%", &[("a", vec![(0.0, 1.0), (1.0, 2.0)]), ("b", vec![(0.0, 3.0)])]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("<svg"));
    }
}
