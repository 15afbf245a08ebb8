use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{quantity_pct, Hypothesis, PseudoLabelSet, RankPool, RationaleCentroids, SelectionConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: u64,
    pub hyp_labels: Vec<usize>,
    pub posterior_values: Vec<f64>,
    pub distances: Vec<f64>,
    pub ranks: Vec<usize>,
    pub selected: bool,
    pub selected_label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub num_samples: usize,
    pub num_selected: usize,
    pub quantity_pct: f64,
    pub k_tilde: usize,
    pub tau1_pct: f64,
    pub tau2_pct: f64,
    pub tau1_rank: usize,
    pub tau2_rank: usize,
    pub rank_pool: RankPool,
    pub per_class_selected: Vec<usize>,
    pub per_class_hypotheses: Vec<usize>,
    pub absent_classes: Vec<usize>,
}

/// Per-instance consolidation outcome plus a summary. Serialized as JSON; the
/// analysis and SSL commands read it back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationReport {
    pub summary: ReportSummary,
    pub instances: Vec<InstanceRecord>,
}

impl ConsolidationReport {
    pub fn build(
        hypotheses: &[Hypothesis],
        centroids: &RationaleCentroids,
        pseudo: &PseudoLabelSet,
        config: &SelectionConfig,
        (tau1_rank, tau2_rank): (usize, usize),
        num_classes: usize,
    ) -> Self {
        let mut grouped: BTreeMap<u64, Vec<&Hypothesis>> = BTreeMap::new();
        for h in hypotheses {
            grouped.entry(h.instance_id).or_default().push(h);
        }
        let instances = grouped
            .into_iter()
            .map(|(id, hs)| {
                let selected_label = pseudo.labeled.get(&id).copied();
                InstanceRecord {
                    id,
                    hyp_labels: hs.iter().map(|h| h.hyp_label).collect(),
                    posterior_values: hs.iter().map(|h| h.posterior_value).collect(),
                    distances: hs.iter().map(|h| h.distance.unwrap_or(f64::NAN)).collect(),
                    ranks: hs.iter().map(|h| h.rank.unwrap_or(usize::MAX)).collect(),
                    selected: selected_label.is_some(),
                    selected_label,
                }
            })
            .collect();
        let summary = ReportSummary {
            num_samples: pseudo.total(),
            num_selected: pseudo.len(),
            quantity_pct: pseudo.quantity_pct(),
            k_tilde: config.k_tilde,
            tau1_pct: config.tau1_pct,
            tau2_pct: config.tau2_pct,
            tau1_rank,
            tau2_rank,
            rank_pool: config.rank_pool,
            per_class_selected: pseudo.per_class_counts(num_classes),
            per_class_hypotheses: centroids.counts.clone(),
            absent_classes: centroids.absent_classes(),
        };
        Self { summary, instances }
    }

    /// Recover the labeled/unlabeled split recorded in the report.
    pub fn pseudo_label_set(&self) -> PseudoLabelSet {
        let ids: Vec<u64> = self.instances.iter().map(|r| r.id).collect();
        let labeled = self.instances.iter().filter_map(|r| r.selected_label.map(|l| (r.id, l))).collect();
        PseudoLabelSet::from_labels(&ids, labeled)
    }

    /// Quantity recomputed from the per-instance records.
    pub fn recomputed_quantity_pct(&self) -> f64 {
        quantity_pct(self.instances.iter().filter(|r| r.selected).count(), self.instances.len())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
