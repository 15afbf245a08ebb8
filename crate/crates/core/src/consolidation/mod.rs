//! Step 2: hypothesis consolidation.
//!
//! Every target instance gets its top-`k_tilde` classes as candidate labels.
//! Each candidate is described by a gradient-weighted pooling of the last conv
//! feature map (its rationale). Rationales are averaged per class into
//! centroids, each hypothesis is ranked by its distance to its class centroid,
//! and an instance is kept only if exactly one of its hypotheses ranks near
//! the front while all the others rank far back.

mod report;

pub use report::{ConsolidationReport, InstanceRecord, ReportSummary};

use std::collections::BTreeMap;

use ndarray::{ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Mode, Model};

/// Which hypotheses compete for rank positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPool {
    /// Each class ranks its own hypotheses.
    #[default]
    PerClass,
    /// All hypotheses share one ranking by distance to their own class centroid.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub k_tilde: usize,
    /// Front-rank cut-off, percent of the target set size.
    pub tau1_pct: f64,
    /// Back-rank cut-off, percent of the target set size.
    pub tau2_pct: f64,
    pub rank_pool: RankPool,
    /// Threshold used by the confidence baseline selector.
    pub confidence_tau: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { k_tilde: 4, tau1_pct: 0.8, tau2_pct: 1.6, rank_pool: RankPool::PerClass, confidence_tau: 0.95 }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_tilde < 2 {
            return Err(Error::Config(format!("selection.k_tilde must be >= 2, got {}", self.k_tilde)));
        }
        if !(self.tau1_pct > 0.0 && self.tau1_pct.is_finite()) {
            return Err(Error::Config(format!("selection.tau1_pct must be > 0, got {}", self.tau1_pct)));
        }
        if self.tau1_pct >= self.tau2_pct || !self.tau2_pct.is_finite() {
            return Err(Error::Config(format!(
                "selection.tau1_pct ({}) must be strictly below selection.tau2_pct ({})",
                self.tau1_pct, self.tau2_pct
            )));
        }
        if !(self.confidence_tau > 0.0 && self.confidence_tau < 1.0) {
            return Err(Error::Config(format!("selection.confidence_tau must lie in (0, 1), got {}", self.confidence_tau)));
        }
        Ok(())
    }

    /// Absolute rank cut-offs `(tau1, tau2)` for a target set of `n` samples,
    /// rounding half up.
    pub fn rank_cutoffs(&self, n: usize) -> Result<(usize, usize)> {
        let t1 = round_half_up(self.tau1_pct / 100.0 * n as f64);
        let t2 = round_half_up(self.tau2_pct / 100.0 * n as f64);
        if t1 >= t2 {
            return Err(Error::Config(format!(
                "selection.tau1_pct ({}) and selection.tau2_pct ({}) both round to rank cut-offs ({t1}, {t2}) for {n} samples; \
                 tau1 must stay strictly below tau2",
                self.tau1_pct, self.tau2_pct
            )));
        }
        Ok((t1, t2))
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub instance_id: u64,
    pub hyp_label: usize,
    pub posterior_value: f64,
    pub rationale: Vec<f64>,
    /// Distance to the class centroid, set by [`rank_hypotheses`].
    pub distance: Option<f64>,
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RationaleCentroids {
    pub centroids: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
}

impl RationaleCentroids {
    pub fn absent_classes(&self) -> Vec<usize> {
        self.centroids.iter().enumerate().filter(|(_, c)| c.is_none()).map(|(i, _)| i).collect()
    }
}

/// The labeled set and the ids left unlabeled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labeled: BTreeMap<u64, usize>,
    pub unlabeled_ids: Vec<u64>,
}

impl PseudoLabelSet {
    /// Split `ids` into the labeled map and the (order-preserving) remainder.
    pub fn from_labels(ids: &[u64], labeled: BTreeMap<u64, usize>) -> Self {
        let unlabeled_ids = ids.iter().copied().filter(|id| !labeled.contains_key(id)).collect();
        Self { labeled, unlabeled_ids }
    }

    pub fn len(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty()
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled_ids.len()
    }

    pub fn quantity_pct(&self) -> f64 {
        quantity_pct(self.labeled.len(), self.total())
    }

    pub fn per_class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &c in self.labeled.values() {
            counts[c] += 1;
        }
        counts
    }

    /// Precision of the labels against ground truth, in percent. `None` when
    /// the set is empty or the dataset has no evaluation labels.
    pub fn quality_pct(&self, dataset: &Dataset) -> Option<f64> {
        if self.labeled.is_empty() {
            return None;
        }
        let truth = dataset.evaluation_labels()?;
        let correct = self
            .labeled
            .iter()
            .filter(|(id, &label)| dataset.position_of(**id).is_some_and(|p| truth[p] == label))
            .count();
        Some(correct as f64 / self.labeled.len() as f64 * 100.0)
    }
}

pub fn quantity_pct(selected: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        selected as f64 / total as f64 * 100.0
    }
}

/// The `k` most probable classes, descending, ties to the lower class index.
pub fn top_k_hypotheses(posterior: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k > posterior.len() {
        return Err(Error::Config(format!("k_tilde ({k}) exceeds the number of classes ({})", posterior.len())));
    }
    let mut order: Vec<usize> = (0..posterior.len()).collect();
    order.sort_by(|&a, &b| posterior[b].total_cmp(&posterior[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).map(|c| (c, posterior[c])).collect())
}

/// `(1/HW) * sum_mn max(<grad_mn, phi_mn>, 0) * phi_mn` for one `H x W x d'`
/// feature map and its gradient.
pub fn rationale_representation(feature_map: ArrayView3<f64>, grad: ArrayView3<f64>) -> Result<Vec<f64>> {
    if feature_map.dim() != grad.dim() {
        return Err(Error::Input(format!("feature map {:?} and gradient {:?} differ in shape", feature_map.dim(), grad.dim())));
    }
    let (h, w, d) = feature_map.dim();
    let mut out = vec![0.0; d];
    for m in 0..h {
        for n in 0..w {
            let phi = feature_map.slice(ndarray::s![m, n, ..]);
            let g = grad.slice(ndarray::s![m, n, ..]);
            let weight = phi.dot(&g).max(0.0);
            if weight > 0.0 {
                for (o, &p) in out.iter_mut().zip(phi.iter()) {
                    *o += weight * p;
                }
            }
        }
    }
    let hw = (h * w) as f64;
    out.iter_mut().for_each(|v| *v /= hw);
    Ok(out)
}

/// Exactly `k_tilde` hypotheses per instance, in dataset order and then
/// hypothesis order. Uses evaluation mode; the model is not modified.
pub fn build_all_hypotheses(model: &Model, dataset: &Dataset, k_tilde: usize) -> Result<Vec<Hypothesis>> {
    let num_classes = model.config().num_classes;
    if k_tilde > num_classes {
        return Err(Error::Config(format!("k_tilde ({k_tilde}) exceeds the number of classes ({num_classes})")));
    }
    let positions: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Vec<Result<Vec<Hypothesis>>> = positions
        .par_chunks(128)
        .map(|chunk| {
            let pass = model.forward_pass(&dataset.gather(chunk), Mode::Eval)?;
            let tops: Vec<Vec<(usize, f64)>> = pass
                .outputs
                .posterior
                .rows()
                .into_iter()
                .map(|row| top_k_hypotheses(row.as_slice().expect("contiguous"), k_tilde))
                .collect::<Result<_>>()?;
            let mut grads: Vec<Option<ndarray::Array4<f64>>> = vec![None; num_classes];
            for top in &tops {
                for &(c, _) in top {
                    if grads[c].is_none() {
                        grads[c] = Some(model.logit_feature_gradient_from(&pass, c)?);
                    }
                }
            }
            let mut out = Vec::with_capacity(chunk.len() * k_tilde);
            for (i, (&pos, top)) in chunk.iter().zip(&tops).enumerate() {
                let fm = pass.outputs.feature_map.index_axis(Axis(0), i);
                for &(c, value) in top {
                    let g = grads[c].as_ref().expect("computed above");
                    out.push(Hypothesis {
                        instance_id: dataset.ids()[pos],
                        hyp_label: c,
                        posterior_value: value,
                        rationale: rationale_representation(fm, g.index_axis(Axis(0), i))?,
                        distance: None,
                        rank: None,
                    });
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(dataset.len() * k_tilde);
    for chunk in chunks {
        all.extend(chunk?);
    }
    Ok(all)
}

/// Per-class mean rationale over every hypothesis carrying that label.
pub fn class_centroids(hypotheses: &[Hypothesis], num_classes: usize) -> Result<RationaleCentroids> {
    let dim = hypotheses.first().map(|h| h.rationale.len()).ok_or_else(|| Error::Input("no hypotheses".into()))?;
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for h in hypotheses {
        if h.hyp_label >= num_classes {
            return Err(Error::Input(format!("hypothesis label {} out of range", h.hyp_label)));
        }
        if h.rationale.len() != dim {
            return Err(Error::Input("rationales differ in dimension".into()));
        }
        counts[h.hyp_label] += 1;
        for (s, v) in sums[h.hyp_label].iter_mut().zip(&h.rationale) {
            *s += v;
        }
    }
    let centroids = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    Ok(RationaleCentroids { centroids, counts })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Assign distances and ranks in place. Ranks within a pool are
/// `0..pool_len`, ascending by distance, ties by `(instance_id, hyp_label)`.
pub fn rank_hypotheses(hypotheses: &mut [Hypothesis], centroids: &RationaleCentroids, pool: RankPool) {
    for h in hypotheses.iter_mut() {
        let c = centroids.centroids[h.hyp_label].as_ref().expect("every present class has a centroid");
        h.distance = Some(euclidean(&h.rationale, c));
    }
    let mut pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, h) in hypotheses.iter().enumerate() {
        let key = match pool {
            RankPool::PerClass => h.hyp_label,
            RankPool::Global => 0,
        };
        pools.entry(key).or_default().push(i);
    }
    for members in pools.values_mut() {
        members.sort_by(|&a, &b| {
            let (ha, hb) = (&hypotheses[a], &hypotheses[b]);
            ha.distance
                .unwrap()
                .total_cmp(&hb.distance.unwrap())
                .then(ha.instance_id.cmp(&hb.instance_id))
                .then(ha.hyp_label.cmp(&hb.hyp_label))
        });
        for (rank, &i) in members.iter().enumerate() {
            hypotheses[i].rank = Some(rank);
        }
    }
}

/// Keep instance `i` with label `y_ik` iff `r_ik < tau1` and every other
/// hypothesis of `i` has `r_ij > tau2`.
pub fn select_reliable(ranked: &[Hypothesis], config: &SelectionConfig, ids: &[u64]) -> Result<PseudoLabelSet> {
    let (tau1, tau2) = config.rank_cutoffs(ids.len())?;
    let mut by_instance: BTreeMap<u64, Vec<&Hypothesis>> = BTreeMap::new();
    for h in ranked {
        if h.rank.is_none() {
            return Err(Error::State("select_reliable needs ranked hypotheses".into()));
        }
        by_instance.entry(h.instance_id).or_default().push(h);
    }
    let mut labeled = BTreeMap::new();
    for (id, hyps) in by_instance {
        if let Some(label) = reliable_label(&hyps, tau1, tau2) {
            labeled.insert(id, label);
        }
    }
    Ok(PseudoLabelSet::from_labels(ids, labeled))
}

fn reliable_label(hyps: &[&Hypothesis], tau1: usize, tau2: usize) -> Option<usize> {
    let front: Vec<&&Hypothesis> = hyps.iter().filter(|h| h.rank.unwrap() < tau1).collect();
    if front.len() != 1 {
        return None;
    }
    let chosen = front[0];
    hyps.iter()
        .filter(|h| !std::ptr::eq(**h, *chosen))
        .all(|h| h.rank.unwrap() > tau2)
        .then_some(chosen.hyp_label)
}

/// Everything one consolidation pass produces.
#[derive(Clone, Debug)]
pub struct Consolidation {
    pub hypotheses: Vec<Hypothesis>,
    pub centroids: RationaleCentroids,
    pub pseudo: PseudoLabelSet,
    pub report: ConsolidationReport,
}

/// Build, rank and select in one go.
pub fn consolidate(model: &Model, dataset: &Dataset, config: &SelectionConfig) -> Result<Consolidation> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("cannot consolidate an empty dataset".into()));
    }
    let num_classes = model.config().num_classes;
    let cutoffs = config.rank_cutoffs(dataset.len())?;
    let mut hypotheses = build_all_hypotheses(model, dataset, config.k_tilde)?;
    let centroids = class_centroids(&hypotheses, num_classes)?;
    rank_hypotheses(&mut hypotheses, &centroids, config.rank_pool);
    let pseudo = select_reliable(&hypotheses, config, dataset.ids())?;
    let report = ConsolidationReport::build(&hypotheses, &centroids, &pseudo, config, cutoffs, num_classes);
    Ok(Consolidation { hypotheses, centroids, pseudo, report })
}

/// Baseline: per pseudo-class (top-1), keep the `round(tau1_pct% * N)`
/// instances whose embeddings lie closest to the class's mean embedding.
pub fn near_centroid_select(model: &Model, dataset: &Dataset, tau1_pct: f64) -> Result<PseudoLabelSet> {
    if tau1_pct.is_nan() || tau1_pct <= 0.0 {
        return Err(Error::Config(format!("tau1_pct must be > 0, got {tau1_pct}")));
    }
    let tau1 = round_half_up(tau1_pct / 100.0 * dataset.len() as f64);
    let out = model.forward_chunked(dataset.images(), 256)?;
    let labels: Vec<usize> = out
        .posterior
        .rows()
        .into_iter()
        .map(|r| top_k_hypotheses(r.as_slice().expect("contiguous"), 1).map(|t| t[0].0))
        .collect::<Result<_>>()?;
    Ok(near_centroid_from(&out.embedding, &labels, dataset.ids(), model.config().num_classes, tau1))
}

/// The selection rule of [`near_centroid_select`] on precomputed embeddings.
pub fn near_centroid_from(
    embeddings: &ndarray::Array2<f64>,
    labels: &[usize],
    ids: &[u64],
    num_classes: usize,
    per_class: usize,
) -> PseudoLabelSet {
    let d = embeddings.ncols();
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (row, &c) in embeddings.rows().into_iter().zip(labels) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(row.iter()) {
            *s += v;
        }
    }
    let mut members: Vec<Vec<(f64, u64)>> = vec![Vec::new(); num_classes];
    for (i, (row, &c)) in embeddings.rows().into_iter().zip(labels).enumerate() {
        let centroid: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        members[c].push((euclidean(row.as_slice().expect("contiguous"), &centroid), ids[i]));
    }
    let mut labeled = BTreeMap::new();
    for (c, mut m) in members.into_iter().enumerate() {
        m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, id) in m.iter().take(per_class) {
            labeled.insert(id, c);
        }
    }
    PseudoLabelSet::from_labels(ids, labeled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn hyp(id: u64, label: usize, rationale: Vec<f64>) -> Hypothesis {
        Hypothesis { instance_id: id, hyp_label: label, posterior_value: 0.5, rationale, distance: None, rank: None }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_hypotheses(&[0.7, 0.2, 0.1], 2).unwrap(), vec![(0, 0.7), (1, 0.2)]);
        let u = [0.25; 4];
        let labels: Vec<usize> = top_k_hypotheses(&u, 3).unwrap().into_iter().map(|t| t.0).collect();
        assert_eq!(labels, vec![0, 1, 2]);
        assert!(matches!(top_k_hypotheses(&u, 5), Err(Error::Config(_))));
    }

    #[test]
    fn rationale_closed_forms() {
        let f = Array3::from_shape_vec((1, 1, 2), vec![1.0, 0.0]).unwrap();
        assert_eq!(rationale_representation(f.view(), f.view()).unwrap(), vec![1.0, 0.0]);
        let g = Array3::from_shape_vec((1, 1, 2), vec![-1.0, 3.0]).unwrap();
        assert_eq!(rationale_representation(f.view(), g.view()).unwrap(), vec![0.0, 0.0]);
        let bad = Array3::zeros((1, 2, 2));
        assert!(rationale_representation(f.view(), bad.view()).is_err());
    }

    #[test]
    fn centroid_means_and_absent_classes() {
        let hs = vec![hyp(0, 1, vec![1.0, 0.0]), hyp(1, 1, vec![0.0, 1.0]), hyp(2, 2, vec![3.0, 4.0])];
        let c = class_centroids(&hs, 4).unwrap();
        assert_eq!(c.centroids[1], Some(vec![0.5, 0.5]));
        assert_eq!(c.centroids[2], Some(vec![3.0, 4.0]));
        assert_eq!(c.absent_classes(), vec![0, 3]);
        assert_eq!(c.counts, vec![0, 2, 1, 0]);
    }

    #[test]
    fn ranks_follow_distance() {
        // Centroid of class 0 is (2,0); distances 2, 1, 3 after shifting.
        let mut hs = vec![hyp(0, 0, vec![0.0, 0.0]), hyp(1, 0, vec![3.0, 0.0]), hyp(2, 0, vec![5.0, 0.0]), hyp(3, 1, vec![9.0, 9.0])];
        let mut c = class_centroids(&hs, 2).unwrap();
        c.centroids[0] = Some(vec![2.0, 0.0]);
        rank_hypotheses(&mut hs, &c, RankPool::PerClass);
        let ranks: Vec<usize> = hs.iter().map(|h| h.rank.unwrap()).collect();
        assert_eq!(ranks, vec![1, 0, 2, 0]);
    }

    #[test]
    fn rank_ties_use_instance_then_label() {
        let mut hs = vec![hyp(5, 0, vec![1.0]), hyp(2, 0, vec![-1.0]), hyp(9, 0, vec![1.0])];
        let mut c = class_centroids(&hs, 1).unwrap();
        c.centroids[0] = Some(vec![0.0]);
        rank_hypotheses(&mut hs, &c, RankPool::PerClass);
        let ranks: Vec<usize> = hs.iter().map(|h| h.rank.unwrap()).collect();
        assert_eq!(ranks, vec![1, 0, 2]);
    }

    fn ranked(id: u64, label: usize, rank: usize) -> Hypothesis {
        Hypothesis { rank: Some(rank), distance: Some(rank as f64), ..hyp(id, label, vec![0.0]) }
    }

    #[test]
    fn figure_cases() {
        // 1000 samples, cut-offs at 10 and 20.
        let cfg = SelectionConfig { tau1_pct: 1.0, tau2_pct: 2.0, ..SelectionConfig::default() };
        let ids: Vec<u64> = (0..1000).collect();
        let hs = vec![
            // Instance 0: one front hypothesis, the others far back.
            ranked(0, 3, 2),
            ranked(0, 1, 40),
            ranked(0, 7, 55),
            // Instance 1: two hypotheses below tau2 conflict.
            ranked(1, 2, 1),
            ranked(1, 4, 15),
            ranked(1, 5, 60),
        ];
        let set = select_reliable(&hs, &cfg, &ids).unwrap();
        assert_eq!(set.labeled.get(&0), Some(&3));
        assert!(!set.labeled.contains_key(&1));
        assert_eq!(set.total(), 1000);
    }

    #[test]
    fn sibling_exactly_at_tau2_blocks_selection() {
        let cfg = SelectionConfig { tau1_pct: 1.0, tau2_pct: 2.0, ..SelectionConfig::default() };
        let ids: Vec<u64> = (0..1000).collect();
        let hs = vec![ranked(0, 0, 0), ranked(0, 1, 20)];
        assert!(select_reliable(&hs, &cfg, &ids).unwrap().is_empty());
    }

    #[test]
    fn cutoffs_round_half_up_and_reject_collapse() {
        let cfg = SelectionConfig::default();
        assert_eq!(cfg.rank_cutoffs(1000).unwrap(), (8, 16));
        assert_eq!(cfg.rank_cutoffs(625).unwrap(), (5, 10));
        // 0.8% of 125 = 1.0, 1.6% of 125 = 2.0.
        assert_eq!(cfg.rank_cutoffs(125).unwrap(), (1, 2));
        let half = SelectionConfig { tau1_pct: 2.5, tau2_pct: 7.5, ..cfg.clone() };
        assert_eq!(half.rank_cutoffs(20).unwrap(), (1, 2));
        assert!(matches!(cfg.rank_cutoffs(10), Err(Error::Config(_))));
        let bad = SelectionConfig { tau1_pct: 2.0, tau2_pct: 1.0, ..cfg };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("tau1_pct") && msg.contains("tau2_pct"));
    }

    #[test]
    fn near_centroid_single_member_classes() {
        let emb = ndarray::array![[0.0, 0.0], [5.0, 5.0], [9.0, 1.0]];
        let set = near_centroid_from(&emb, &[0, 1, 2], &[10, 11, 12], 3, 1);
        assert_eq!(set.len(), 3);
        assert!(set.unlabeled_ids.is_empty());
    }

    #[test]
    fn quantity_and_quality_arithmetic() {
        let ids: Vec<u64> = (0..100).collect();
        let labeled: BTreeMap<u64, usize> = (0..10).map(|i| (i, 0)).collect();
        let set = PseudoLabelSet::from_labels(&ids, labeled);
        assert_eq!(set.quantity_pct(), 10.0);
        assert_eq!(set.unlabeled_ids.len(), 90);
    }
}
