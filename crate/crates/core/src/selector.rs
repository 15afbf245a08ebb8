//! Pseudo-label selectors, looked up by name at run time.

use std::collections::BTreeMap;

use crate::consolidation::{consolidate, near_centroid_select, ConsolidationReport, PseudoLabelSet, SelectionConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug)]
pub struct Selection {
    pub pseudo: PseudoLabelSet,
    /// Present only for selectors that build hypotheses.
    pub report: Option<ConsolidationReport>,
}

pub trait PseudoLabelSelector: Send + Sync {
    fn name(&self) -> &'static str;
    fn select(&self, model: &Model, target: &Dataset, config: &SelectionConfig) -> Result<Selection>;
}

/// Rationale-based consolidation.
pub struct Hcpr;

impl PseudoLabelSelector for Hcpr {
    fn name(&self) -> &'static str {
        "hcpr"
    }

    fn select(&self, model: &Model, target: &Dataset, config: &SelectionConfig) -> Result<Selection> {
        let c = consolidate(model, target, config)?;
        Ok(Selection { pseudo: c.pseudo, report: Some(c.report) })
    }
}

/// Per top-1 class, the instances nearest the class's mean embedding.
pub struct NearCentroid;

impl PseudoLabelSelector for NearCentroid {
    fn name(&self) -> &'static str {
        "near_centroid"
    }

    fn select(&self, model: &Model, target: &Dataset, config: &SelectionConfig) -> Result<Selection> {
        config.validate()?;
        Ok(Selection { pseudo: near_centroid_select(model, target, config.tau1_pct)?, report: None })
    }
}

/// Every instance whose top-1 posterior reaches `confidence_tau`.
pub struct ConfidenceThreshold;

impl PseudoLabelSelector for ConfidenceThreshold {
    fn name(&self) -> &'static str {
        "confidence_threshold"
    }

    fn select(&self, model: &Model, target: &Dataset, config: &SelectionConfig) -> Result<Selection> {
        config.validate()?;
        Ok(Selection { pseudo: confidence_select(model, target, config.confidence_tau)?, report: None })
    }
}

pub fn confidence_select(model: &Model, target: &Dataset, tau: f64) -> Result<PseudoLabelSet> {
    let out = model.forward_chunked(target.images(), 256)?;
    let mut labeled = BTreeMap::new();
    for (row, &id) in out.posterior.rows().into_iter().zip(target.ids()) {
        let (best, p) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
        if p >= tau {
            labeled.insert(id, best);
        }
    }
    Ok(PseudoLabelSet::from_labels(target.ids(), labeled))
}

pub fn registry() -> Vec<Box<dyn PseudoLabelSelector>> {
    vec![Box::new(Hcpr), Box::new(NearCentroid), Box::new(ConfidenceThreshold)]
}

pub fn lookup(name: &str) -> Result<Box<dyn PseudoLabelSelector>> {
    registry().into_iter().find(|s| s.name() == name).ok_or_else(|| {
        Error::Config(format!(
            "selector `{name}` is not registered (known: {})",
            registry().iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_resolve() {
        for n in ["hcpr", "near_centroid", "confidence_threshold"] {
            assert_eq!(lookup(n).unwrap().name(), n);
        }
        assert!(matches!(lookup("oracle"), Err(Error::Config(_))));
    }
}
