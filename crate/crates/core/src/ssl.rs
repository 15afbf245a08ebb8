//! Step 3: FixMatch training on the pseudo-labeled / unlabeled split.

use ndarray::{concatenate, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consolidation::PseudoLabelSet;
use crate::data::{AugmentationPolicy, Dataset};
use crate::error::{Error, Result};
use crate::model::{ForwardPass, Mode, Model};
use crate::optim::{OptimizerConfig, Sgd};
use crate::preadapt::LOG_EPS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SSLConfig {
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub confidence_tau: f64,
    /// `K2`, in epochs of `|target| / unlabeled_batch` steps.
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for SSLConfig {
    fn default() -> Self {
        Self { labeled_batch: 64, unlabeled_batch: 64, confidence_tau: 0.95, epochs: 31, optimizer: OptimizerConfig::default() }
    }
}

impl SSLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::Config("ssl.labeled_batch and ssl.unlabeled_batch must be >= 1".into()));
        }
        if !(self.confidence_tau > 0.0 && self.confidence_tau < 1.0) {
            return Err(Error::Config(format!("ssl.confidence_tau must lie in (0, 1), got {}", self.confidence_tau)));
        }
        self.optimizer.validate("ssl.optimizer")
    }

    pub fn steps_per_epoch(&self, target_len: usize) -> usize {
        (target_len / self.unlabeled_batch).max(1)
    }
}

/// Images for one step. The unlabeled weak and strong views are row-aligned.
#[derive(Clone, Debug)]
pub struct FixMatchBatch {
    pub labeled: Array4<f64>,
    pub labels: Vec<usize>,
    pub weak_unlabeled: Array4<f64>,
    pub strong_unlabeled: Array4<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixMatchStats {
    /// Mean cross-entropy over the labeled batch.
    pub supervised: f64,
    /// Masked cross-entropy summed over the unlabeled batch, divided by the
    /// nominal unlabeled batch size.
    pub unsupervised: f64,
    pub mask_rate: f64,
}

impl FixMatchStats {
    pub fn total(&self) -> f64 {
        self.supervised + self.unsupervised
    }
}

pub fn cross_entropy(posterior: &[f64], label: usize) -> f64 {
    -posterior[label].max(LOG_EPS).ln()
}

/// Forward all three views in one pass and return the pass, `dL/dlogits`
/// and the loss terms. The supervised term is normalized by
/// `config.labeled_batch`, the unsupervised one by `config.unlabeled_batch`,
/// so dropping an example never rescales the others. Pseudo-targets come
/// from the weak view and receive no gradient.
pub fn fixmatch_objective(model: &Model, batch: &FixMatchBatch, config: &SSLConfig, mode: Mode) -> Result<(ForwardPass, Array2<f64>, FixMatchStats)> {
    let bl = batch.labeled.dim().0;
    let bu = batch.weak_unlabeled.dim().0;
    if bl == 0 {
        return Err(Error::State("FixMatch step needs a non-empty labeled batch".into()));
    }
    if batch.labels.len() != bl || batch.strong_unlabeled.dim().0 != bu {
        return Err(Error::Input("FixMatch batch arrays are misaligned".into()));
    }
    let images = concatenate(Axis(0), &[batch.labeled.view(), batch.weak_unlabeled.view(), batch.strong_unlabeled.view()])
        .map_err(|e| Error::Input(e.to_string()))?;
    let pass = model.forward_pass(&images, mode)?;
    let post = &pass.outputs.posterior;
    let c = post.ncols();
    let mut dlogits = Array2::zeros((bl + 2 * bu, c));
    let mut stats = FixMatchStats::default();
    let nl = config.labeled_batch as f64;
    let nu = config.unlabeled_batch as f64;

    for (i, &y) in batch.labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Input(format!("pseudo-label {y} out of range")));
        }
        let p = post.row(i);
        stats.supervised += cross_entropy(p.as_slice().expect("contiguous"), y) / nl;
        for k in 0..c {
            dlogits[[i, k]] = (p[k] - f64::from(k == y)) / nl;
        }
    }
    let mut passed = 0usize;
    for u in 0..bu {
        let weak = post.row(bl + u);
        let (target, conf) = weak
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
        if conf < config.confidence_tau {
            continue;
        }
        passed += 1;
        let row = bl + bu + u;
        let p = post.row(row);
        stats.unsupervised += cross_entropy(p.as_slice().expect("contiguous"), target) / nu;
        for k in 0..c {
            dlogits[[row, k]] = (p[k] - f64::from(k == target)) / nu;
        }
    }
    stats.mask_rate = if bu == 0 { 0.0 } else { passed as f64 / bu as f64 };
    if !stats.total().is_finite() {
        return Err(Error::Numeric("non-finite FixMatch loss".into()));
    }
    Ok((pass, dlogits, stats))
}

/// Loss and parameter gradient of [`fixmatch_objective`].
pub fn fixmatch_loss(model: &Model, batch: &FixMatchBatch, config: &SSLConfig, mode: Mode) -> Result<(FixMatchStats, Vec<f64>)> {
    let (pass, dlogits, stats) = fixmatch_objective(model, batch, config, mode)?;
    Ok((stats, model.backward(&pass, &dlogits)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SslStep {
    pub step: usize,
    pub supervised: f64,
    pub unsupervised: f64,
    pub mask_rate: f64,
    /// Filled at epoch boundaries when evaluation is attached.
    pub eval_accuracy: Option<f64>,
}

/// Endless reshuffled passes over a fixed pool of dataset positions.
struct Cycler {
    pool: Vec<usize>,
    order: Vec<usize>,
    next: usize,
}

impl Cycler {
    fn new(pool: Vec<usize>) -> Self {
        Self { pool, order: Vec::new(), next: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.pool.is_empty() {
            return out;
        }
        while out.len() < n {
            if self.next == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(rng);
                self.next = 0;
            }
            out.push(self.order[self.next]);
            self.next += 1;
        }
        out
    }
}

fn augment_rows(dataset: &Dataset, positions: &[usize], policy: &AugmentationPolicy, rng: &mut dyn RngCore) -> Array4<f64> {
    let views: Vec<_> = positions.iter().map(|&p| policy.apply(&dataset.image(p).to_owned(), rng)).collect();
    if views.is_empty() {
        let [h, w, c] = dataset.image_shape();
        return Array4::zeros((0, h, w, c));
    }
    Dataset::stack(&views)
}

/// Run `config.epochs` epochs of FixMatch. The labeled stream cycles over
/// `pseudo.labeled`; the unlabeled stream cycles over `pseudo.unlabeled_ids`.
/// `on_epoch` runs after each epoch and may return an accuracy to log.
#[allow(clippy::too_many_arguments)]
pub fn ssl_train(
    model: &mut Model,
    pseudo: &PseudoLabelSet,
    dataset: &Dataset,
    config: &SSLConfig,
    weak: &AugmentationPolicy,
    strong: &AugmentationPolicy,
    rng: &mut dyn RngCore,
    on_epoch: &mut dyn FnMut(&Model, usize) -> Result<Option<f64>>,
) -> Result<Vec<SslStep>> {
    config.validate()?;
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    if pseudo.is_empty() {
        return Err(Error::State(
            "the pseudo-labeled set is empty, so FixMatch has no labeled stream; loosen selection.tau1_pct / selection.tau2_pct \
             (or selection.confidence_tau for the confidence selector)"
                .into(),
        ));
    }
    let locate = |id: u64| dataset.position_of(id).ok_or_else(|| Error::Input(format!("pseudo-label id {id} is not in the dataset")));
    let labeled: Vec<(usize, usize)> = pseudo.labeled.iter().map(|(&id, &y)| Ok((locate(id)?, y))).collect::<Result<_>>()?;
    let unlabeled: Vec<usize> = pseudo.unlabeled_ids.iter().map(|&id| locate(id)).collect::<Result<_>>()?;

    let mut weak_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut strong_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut l_stream = Cycler::new((0..labeled.len()).collect());
    let mut u_stream = Cycler::new(unlabeled);
    let mut optimizer = Sgd::new(config.optimizer.clone(), model.params().len());
    let steps_per_epoch = config.steps_per_epoch(dataset.len());
    let mut history = Vec::with_capacity(steps_per_epoch * config.epochs);

    for epoch in 0..config.epochs {
        for _ in 0..steps_per_epoch {
            let picks = l_stream.take(config.labeled_batch, rng);
            let l_pos: Vec<usize> = picks.iter().map(|&i| labeled[i].0).collect();
            let labels: Vec<usize> = picks.iter().map(|&i| labeled[i].1).collect();
            let u_pos = u_stream.take(config.unlabeled_batch, rng);
            let batch = FixMatchBatch {
                labeled: augment_rows(dataset, &l_pos, weak, &mut weak_rng),
                labels,
                weak_unlabeled: augment_rows(dataset, &u_pos, weak, &mut weak_rng),
                strong_unlabeled: augment_rows(dataset, &u_pos, strong, &mut strong_rng),
            };
            let (pass, dlogits, stats) = fixmatch_objective(model, &batch, config, Mode::Train)?;
            let grad = model.backward(&pass, &dlogits);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric("non-finite gradient during FixMatch".into()));
            }
            optimizer.step(model, &grad)?;
            model.update_running_stats(&pass);
            history.push(SslStep {
                step: history.len(),
                supervised: stats.supervised,
                unsupervised: stats.unsupervised,
                mask_rate: stats.mask_rate,
                eval_accuracy: None,
            });
        }
        let acc = on_epoch(model, epoch)?;
        if let Some(last) = history.last_mut() {
            last.eval_accuracy = acc;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvStage, ModelConfig};
    use rand::Rng;

    fn small_model() -> Model {
        let cfg = ModelConfig {
            num_classes: 3,
            embed_dim: 4,
            input_shape: [4, 4, 1],
            conv_stages: vec![ConvStage { channels: 3, kernel: 3, pool: false }],
            ..ModelConfig::default()
        };
        Model::new(cfg, 11).unwrap()
    }

    fn images(n: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((n, 4, 4, 1), || rng.random::<f64>())
    }

    fn batch(bl: usize, bu: usize) -> FixMatchBatch {
        FixMatchBatch {
            labeled: images(bl, 1),
            labels: (0..bl).map(|i| i % 3).collect(),
            weak_unlabeled: images(bu, 2),
            strong_unlabeled: images(bu, 3),
        }
    }

    #[test]
    fn confident_nothing_means_zero_unsupervised_term() {
        let model = small_model();
        let cfg = SSLConfig { confidence_tau: 0.99, labeled_batch: 4, unlabeled_batch: 5, ..SSLConfig::default() };
        let (_, _, stats) = fixmatch_objective(&model, &batch(4, 5), &cfg, Mode::Eval).unwrap();
        assert_eq!(stats.unsupervised, 0.0);
        assert_eq!(stats.mask_rate, 0.0);
    }

    #[test]
    fn matches_per_example_loop() {
        let model = small_model();
        let cfg = SSLConfig { confidence_tau: 0.34, labeled_batch: 4, unlabeled_batch: 6, ..SSLConfig::default() };
        let b = batch(4, 6);
        let (_, _, stats) = fixmatch_objective(&model, &b, &cfg, Mode::Eval).unwrap();
        let pl = model.forward(&b.labeled, Mode::Eval).unwrap().posterior;
        let pw = model.forward(&b.weak_unlabeled, Mode::Eval).unwrap().posterior;
        let ps = model.forward(&b.strong_unlabeled, Mode::Eval).unwrap().posterior;
        let mut sup = 0.0;
        for i in 0..4 {
            sup -= pl[[i, b.labels[i]]].ln();
        }
        let mut uns = 0.0;
        let mut n_pass = 0;
        for u in 0..6 {
            let mut best = 0;
            for k in 1..3 {
                if pw[[u, k]] > pw[[u, best]] {
                    best = k;
                }
            }
            if pw[[u, best]] >= 0.34 {
                n_pass += 1;
                uns -= ps[[u, best]].ln();
            }
        }
        assert!((stats.supervised - sup / 4.0).abs() <= 1e-5);
        assert!((stats.unsupervised - uns / 6.0).abs() <= 1e-5);
        assert!(n_pass > 0);
    }

    #[test]
    fn empty_labeled_batch_is_state_error() {
        let model = small_model();
        assert!(matches!(fixmatch_objective(&model, &batch(0, 2), &SSLConfig::default(), Mode::Eval), Err(Error::State(_))));
    }

    #[test]
    fn cycler_reuses_small_pools() {
        let mut c = Cycler::new(vec![7, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = c.take(5, &mut rng);
        assert_eq!(got.len(), 5);
        assert!(got.iter().all(|v| *v == 7 || *v == 8));
        assert!(Cycler::new(Vec::new()).take(3, &mut rng).is_empty());
    }
}
