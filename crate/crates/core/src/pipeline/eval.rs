use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Top-1 accuracy over all samples, percent.
    pub accuracy: f64,
    /// Per-class Top-1, percent; `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    /// Mean of the defined per-class accuracies.
    pub mean_per_class: f64,
}

pub fn predict(model: &Model, dataset: &Dataset) -> Result<Vec<usize>> {
    let out = model.forward_chunked(dataset.images(), 256)?;
    Ok(out
        .posterior
        .rows()
        .into_iter()
        .map(|r| r.iter().enumerate().fold(0, |best, (k, &v)| if v > r[best] { k } else { best }))
        .collect())
}

pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<Evaluation> {
    let labels = dataset
        .evaluation_labels()
        .ok_or_else(|| Error::Input("dataset carries no evaluation labels".into()))?;
    score(&predict(model, dataset)?, labels, dataset.num_classes())
}

/// Accuracy of `predictions` against `labels`.
pub fn score(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Evaluation> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Input(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::Input(format!("label {y} out of range")));
        }
        totals[y] += 1;
        hits[y] += usize::from(p == y);
    }
    let per_class: Vec<Option<f64>> =
        hits.iter().zip(&totals).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64 * 100.0)).collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(Evaluation {
        accuracy: hits.iter().sum::<usize>() as f64 / labels.len() as f64 * 100.0,
        mean_per_class: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
    })
}
