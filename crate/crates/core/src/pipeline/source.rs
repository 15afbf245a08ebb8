use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::SourceConfig;
use crate::data::{batches, AugmentationPolicy, Dataset};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ModelConfig};
use crate::optim::{OptimizerState, Sgd};
use crate::ssl::cross_entropy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Plain supervised cross-entropy training on labeled source data.
pub fn train_source_model(
    source: &Dataset,
    model_config: &ModelConfig,
    config: &SourceConfig,
    augment: Option<&AugmentationPolicy>,
    seed: u64,
) -> Result<(Model, OptimizerState, Vec<SourceEpoch>)> {
    let labels = source.training_labels()?;
    let mut model = Model::new(model_config.clone(), seed)?;
    let mut optimizer = Sgd::new(config.optimizer.clone(), model.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f50_u64);
    let mut history = Vec::with_capacity(config.epochs);
    let drop_last = source.len() >= config.batch_size;
    for epoch in 0..config.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let order: Vec<Vec<usize>> = batches(source.len(), config.batch_size, &mut rng, drop_last)?.collect();
        for positions in order {
            let images = match augment {
                Some(policy) => {
                    let views: Vec<_> = positions.iter().map(|&p| policy.apply(&source.image(p).to_owned(), &mut rng as &mut dyn RngCore)).collect();
                    Dataset::stack(&views)
                }
                None => source.gather(&positions),
            };
            let pass = model.forward_pass(&images, Mode::Train)?;
            let post = &pass.outputs.posterior;
            let b = positions.len() as f64;
            let mut dlogits = Array2::zeros(post.dim());
            for (i, &pos) in positions.iter().enumerate() {
                let y = labels[pos];
                let row = post.row(i);
                loss_sum += cross_entropy(row.as_slice().expect("contiguous"), y);
                let argmax = row.iter().enumerate().fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
                correct += usize::from(argmax == y);
                for k in 0..row.len() {
                    dlogits[[i, k]] = (row[k] - f64::from(k == y)) / b;
                }
            }
            seen += positions.len();
            if !loss_sum.is_finite() {
                return Err(Error::Numeric(format!("source training diverged in epoch {epoch}")));
            }
            let grad = model.backward(&pass, &dlogits);
            optimizer.step(&mut model, &grad)?;
            model.update_running_stats(&pass);
        }
        history.push(SourceEpoch { epoch, loss: loss_sum / seen as f64, train_accuracy: correct as f64 / seen as f64 * 100.0 });
    }
    if config.epochs > 0 && source.len() > 1 {
        // Running averages lag behind the moving weights; replace them with
        // exact statistics of the finished model on clean source images.
        model.recalibrate_running_stats(source.images())?;
    }
    Ok((model, optimizer.state().clone(), history))
}
