//! Step 1: pre-adaptation by prediction smoothness over a memory queue.
//!
//! Each target sample is pulled toward the posteriors of its `z` nearest
//! queue entries (KL term) and pushed away from its `z` furthest ones
//! (posterior inner product, weighted by a decaying `lambda`). Queue entries
//! are snapshots from earlier batches and act as constants.

mod losses;
mod queue;

pub use losses::{
    far_grad, far_loss, kl_divergence, lambda_schedule, marginal_entropy, smoothness_grad, smoothness_loss, LOG_EPS,
};
pub use queue::{find_neighbors, MemoryQueue, NeighborSet};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{batches, AugmentationPolicy, Dataset};
use crate::error::{Error, Result};
use crate::model::{softmax_backward_row, ForwardPass, Mode, Model};
use crate::optim::{OptimizerConfig, Sgd};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreAdaptConfig {
    /// Registered pre-adaptation method (see [`registry`]).
    pub method: String,
    /// Nearest/furthest neighbors per sample.
    pub z: usize,
    pub lambda0: f64,
    pub batch_size: usize,
    /// `K1`, in epochs over the target set.
    pub epochs: usize,
    /// Defaults to `min(|target|, 4096)`.
    pub queue_capacity: Option<usize>,
    /// Apply the weak augmentation to pre-adaptation batches.
    pub augment: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for PreAdaptConfig {
    fn default() -> Self {
        Self {
            method: "smoothness".into(),
            z: 3,
            lambda0: 1.0,
            batch_size: 64,
            epochs: 9,
            queue_capacity: None,
            augment: true,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl PreAdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z == 0 {
            return Err(Error::Config("pre_adapt.z must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("pre_adapt.batch_size must be >= 1".into()));
        }
        if !self.lambda0.is_finite() || self.lambda0 < 0.0 {
            return Err(Error::Config(format!("pre_adapt.lambda0 must be finite and >= 0, got {}", self.lambda0)));
        }
        if let Some(cap) = self.queue_capacity {
            if cap < 2 * self.z {
                return Err(Error::Config(format!(
                    "pre_adapt.queue_capacity ({cap}) must be >= 2 * pre_adapt.z ({})",
                    2 * self.z
                )));
            }
        }
        if lookup(&self.method).is_none() {
            return Err(Error::Config(format!(
                "pre_adapt.method `{}` is not registered (known: {})",
                self.method,
                registry().iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
            )));
        }
        self.optimizer.validate("pre_adapt.optimizer")
    }

    pub fn resolved_queue_capacity(&self, target_len: usize) -> usize {
        self.queue_capacity.unwrap_or_else(|| target_len.min(4096))
    }

    /// Optimizer steps per epoch (full batches; one partial batch when the
    /// target set is smaller than a batch).
    pub fn steps_per_epoch(&self, target_len: usize) -> usize {
        (target_len / self.batch_size).max(1)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub smoothness: f64,
    pub far: f64,
    /// `lambda` at the last step of the epoch.
    pub lambda: f64,
    /// Mean over batches of the entropy of the batch-mean posterior.
    pub marginal_entropy: f64,
    pub target_accuracy: Option<f64>,
}

/// Per-batch loss values (sums over the batch).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub smoothness: f64,
    pub far: f64,
}

/// `dL/dlogits` for the batch objective `(1/B) sum_i [L_SM(i) + lambda L_FAR(i)]`
/// with neighbor posteriors read from the queue as constants.
pub fn batch_objective(pass: &ForwardPass, queue: &MemoryQueue, z: usize, lambda: f64, use_far: bool) -> Result<(Array2<f64>, BatchLosses)> {
    let out = &pass.outputs;
    let (b, c) = out.posterior.dim();
    let mut dlogits = Array2::zeros((b, c));
    let mut losses = BatchLosses::default();
    let mut dz = vec![0.0; c];
    for i in 0..b {
        let emb = out.embedding.row(i).to_vec();
        let p = out.posterior.row(i).to_vec();
        let nbrs = find_neighbors(&emb, queue, z)?;
        let near: Vec<&[f64]> = nbrs.nearest.iter().map(|&s| queue.posterior(s)).collect();
        let far: Vec<&[f64]> = nbrs.furthest.iter().map(|&s| queue.posterior(s)).collect();
        losses.smoothness += smoothness_loss(&p, &near)?;
        let mut grad_p = smoothness_grad(&p, &near);
        if use_far {
            losses.far += far_loss(&p, &far)?;
            for (g, f) in grad_p.iter_mut().zip(far_grad(&p, &far)) {
                *g += lambda * f;
            }
        }
        softmax_backward_row(&p, &grad_p, &mut dz);
        for (k, v) in dz.iter().enumerate() {
            dlogits[[i, k]] = v / b as f64;
        }
    }
    if !(losses.smoothness.is_finite() && losses.far.is_finite()) {
        return Err(Error::Numeric("non-finite pre-adaptation loss".into()));
    }
    Ok((dlogits, losses))
}

/// Fill the queue from an evaluation-mode pass over randomly chosen target
/// samples (as many as the capacity allows).
pub fn warm_up_queue(model: &Model, target: &Dataset, queue: &mut MemoryQueue, rng: &mut dyn RngCore) -> Result<()> {
    let n = queue.capacity().min(target.len());
    let mut picks = sample(rng, target.len(), n).into_vec();
    picks.sort_unstable();
    for chunk in picks.chunks(256) {
        let out = model.forward(&target.gather(chunk), Mode::Eval)?;
        queue.update(out.embedding.view(), out.posterior.view())?;
    }
    Ok(())
}

/// Training progress shared across epochs (for the `lambda` schedule).
#[derive(Clone, Debug)]
pub struct PreAdaptState {
    pub optimizer: Sgd,
    pub step: usize,
    pub max_steps: usize,
}

/// One epoch of pre-adaptation: forward, neighbor lookup, loss, one optimizer
/// step, then push the fresh batch outputs into the queue.
#[allow(clippy::too_many_arguments)]
pub fn pre_adapt_epoch(
    model: &mut Model,
    target: &Dataset,
    queue: &mut MemoryQueue,
    config: &PreAdaptConfig,
    state: &mut PreAdaptState,
    use_far: bool,
    augment: Option<&AugmentationPolicy>,
    epoch: usize,
    rng: &mut dyn RngCore,
) -> Result<EpochStats> {
    let drop_last = target.len() >= config.batch_size;
    let mut sums = (0.0, 0.0, 0.0);
    let mut seen = 0usize;
    let mut n_batches = 0usize;
    let mut lambda = 0.0;
    for positions in batches(target.len(), config.batch_size, rng, drop_last)? {
        let images = match augment {
            Some(policy) => {
                let views: Vec<_> = positions.iter().map(|&p| policy.apply(&target.image(p).to_owned(), rng)).collect();
                Dataset::stack(&views)
            }
            None => target.gather(&positions),
        };
        let pass = model.forward_pass(&images, Mode::Train)?;
        lambda = lambda_schedule(state.step.min(state.max_steps), state.max_steps.max(1), config.lambda0)?;
        let (dlogits, losses) = batch_objective(&pass, queue, config.z, lambda, use_far)?;
        let grad = model.backward(&pass, &dlogits);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient during pre-adaptation".into()));
        }
        state.optimizer.step(model, &grad)?;
        model.update_running_stats(&pass);
        queue.update(pass.outputs.embedding.view(), pass.outputs.posterior.view())?;
        state.step += 1;

        sums.0 += losses.smoothness;
        sums.1 += losses.far;
        sums.2 += marginal_entropy(pass.outputs.posterior.rows().into_iter().map(|r| r.to_slice().expect("row")));
        seen += positions.len();
        n_batches += 1;
    }
    Ok(EpochStats {
        epoch,
        smoothness: sums.0 / seen.max(1) as f64,
        far: sums.1 / seen.max(1) as f64,
        lambda,
        marginal_entropy: sums.2 / n_batches.max(1) as f64,
        target_accuracy: None,
    })
}

/// A step-1 method. The pipeline picks one by name.
pub trait PreAdaptation: Send + Sync {
    fn name(&self) -> &'static str;

    /// Run `config.epochs` epochs on `model`. `on_epoch` sees each epoch's
    /// stats (and the model) as it finishes, e.g. to attach evaluation.
    fn run(
        &self,
        model: &mut Model,
        target: &Dataset,
        config: &PreAdaptConfig,
        augment: Option<&AugmentationPolicy>,
        rng: &mut dyn RngCore,
        on_epoch: &mut dyn FnMut(&Model, &mut EpochStats) -> Result<()>,
    ) -> Result<Vec<EpochStats>>;
}

/// Neighborhood smoothness with (or, for the ablation, without) the far term.
pub struct NeighborSmoothness {
    pub use_far: bool,
}

impl PreAdaptation for NeighborSmoothness {
    fn name(&self) -> &'static str {
        if self.use_far {
            "smoothness"
        } else {
            "smoothness_no_far"
        }
    }

    fn run(
        &self,
        model: &mut Model,
        target: &Dataset,
        config: &PreAdaptConfig,
        augment: Option<&AugmentationPolicy>,
        rng: &mut dyn RngCore,
        on_epoch: &mut dyn FnMut(&Model, &mut EpochStats) -> Result<()>,
    ) -> Result<Vec<EpochStats>> {
        config.validate()?;
        if config.epochs == 0 {
            return Ok(Vec::new());
        }
        let cfg = model.config();
        let capacity = config.resolved_queue_capacity(target.len());
        if capacity < 2 * config.z {
            return Err(Error::Config(format!(
                "queue capacity {capacity} is below 2z = {}; the target set is too small",
                2 * config.z
            )));
        }
        let mut queue = MemoryQueue::new(capacity, cfg.embed_dim, cfg.num_classes)?;
        warm_up_queue(model, target, &mut queue, rng)?;
        let steps = config.steps_per_epoch(target.len()) * config.epochs;
        let mut state = PreAdaptState {
            optimizer: Sgd::new(config.optimizer.clone(), model.params().len()),
            step: 0,
            max_steps: steps,
        };
        let augment = if config.augment { augment } else { None };
        let mut history = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            let mut stats = pre_adapt_epoch(model, target, &mut queue, config, &mut state, self.use_far, augment, epoch, rng)?;
            on_epoch(model, &mut stats)?;
            history.push(stats);
        }
        Ok(history)
    }
}

/// Does nothing; lets a pipeline skip step 1 by name.
pub struct NoPreAdaptation;

impl PreAdaptation for NoPreAdaptation {
    fn name(&self) -> &'static str {
        "none"
    }

    fn run(
        &self,
        _: &mut Model,
        _: &Dataset,
        _: &PreAdaptConfig,
        _: Option<&AugmentationPolicy>,
        _: &mut dyn RngCore,
        _: &mut dyn FnMut(&Model, &mut EpochStats) -> Result<()>,
    ) -> Result<Vec<EpochStats>> {
        Ok(Vec::new())
    }
}

/// Every registered step-1 method.
pub fn registry() -> Vec<Box<dyn PreAdaptation>> {
    vec![
        Box::new(NeighborSmoothness { use_far: true }),
        Box::new(NeighborSmoothness { use_far: false }),
        Box::new(NoPreAdaptation),
    ]
}

pub fn lookup(name: &str) -> Option<Box<dyn PreAdaptation>> {
    registry().into_iter().find(|m| m.name() == name)
}
