//! Small conv classifier: conv trunk -> global average pool -> bottleneck
//! projection -> batch norm -> weight-normalized linear classifier.
//!
//! Parameters live in one flat `Vec<f64>` described by a [`ParamLayout`], which
//! keeps the optimizer, checkpointing and gradient checks trivial. The trunk is
//! evaluated per example (and in parallel across the batch); the head runs on
//! the whole batch because batch norm couples examples in training mode.

mod layers;

pub use layers::{softmax_backward_row, softmax_row};

use std::ops::Range;

use ndarray::{Array2, Array4, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// One conv block: `k x k` same-padded conv, ReLU, then an optional 2x2 max pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub pool: bool,
}

fn default_kernel() -> usize {
    3
}

/// Which activation of the last conv block is exposed as the feature map and
/// used as the rationale target layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    #[default]
    PostActivation,
    PreActivation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub embed_dim: usize,
    /// `(height, width, channels)`.
    pub input_shape: [usize; 3],
    pub conv_stages: Vec<ConvStage>,
    pub feature_tap: FeatureTap,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            embed_dim: 256,
            input_shape: [16, 16, 1],
            conv_stages: vec![
                ConvStage { channels: 8, kernel: 3, pool: true },
                ConvStage { channels: 16, kernel: 3, pool: false },
            ],
            feature_tap: FeatureTap::PostActivation,
        }
    }
}

impl ModelConfig {
    /// Channels of the last conv feature map (`d'`).
    pub fn feature_channels(&self) -> usize {
        self.conv_stages.last().map(|s| s.channels).unwrap_or(0)
    }

    /// Spatial size `(H, W)` of the last conv feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input_shape[0], self.input_shape[1]);
        for s in &self.conv_stages {
            if s.pool {
                h /= 2;
                w /= 2;
            }
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("model.num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("model.embed_dim must be > 0".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!("model.input_shape has a zero dimension: {:?}", self.input_shape)));
        }
        if self.conv_stages.is_empty() {
            return Err(Error::Config("model.conv_stages must contain at least one stage".into()));
        }
        let (mut h, mut w) = (self.input_shape[0], self.input_shape[1]);
        for (i, s) in self.conv_stages.iter().enumerate() {
            if s.channels == 0 {
                return Err(Error::Config(format!("model.conv_stages[{i}].channels must be > 0")));
            }
            if s.kernel == 0 || s.kernel % 2 == 0 {
                return Err(Error::Config(format!("model.conv_stages[{i}].kernel must be odd, got {}", s.kernel)));
            }
            if s.pool {
                if i + 1 == self.conv_stages.len() {
                    return Err(Error::Config(
                        "model.conv_stages: the last stage produces the feature map and cannot pool".into(),
                    ));
                }
                h /= 2;
                w /= 2;
                if h == 0 || w == 0 {
                    return Err(Error::Config(format!(
                        "model.conv_stages[{i}] pools the feature map down to zero spatial size for input {:?}",
                        self.input_shape
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Whether batch norm uses batch statistics (and later updates running ones)
/// or the frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Debug)]
struct ConvSlots {
    weight: Range<usize>,
    bias: Range<usize>,
}

/// Offsets of every parameter tensor inside the flat parameter vector.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    convs: Vec<ConvSlots>,
    bottleneck_w: Range<usize>,
    bottleneck_b: Range<usize>,
    bn_gamma: Range<usize>,
    bn_beta: Range<usize>,
    cls_v: Range<usize>,
    cls_g: Range<usize>,
    cls_b: Range<usize>,
    total: usize,
}

impl ParamLayout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let mut cin = cfg.input_shape[2];
        let mut convs = Vec::new();
        for s in &cfg.conv_stages {
            let weight = take(s.kernel * s.kernel * cin * s.channels);
            let bias = take(s.channels);
            convs.push(ConvSlots { weight, bias });
            cin = s.channels;
        }
        let (dp, d, c) = (cfg.feature_channels(), cfg.embed_dim, cfg.num_classes);
        let bottleneck_w = take(dp * d);
        let bottleneck_b = take(d);
        let bn_gamma = take(d);
        let bn_beta = take(d);
        let cls_v = take(c * d);
        let cls_g = take(c);
        let cls_b = take(c);
        Self { convs, bottleneck_w, bottleneck_b, bn_gamma, bn_beta, cls_v, cls_g, cls_b, total: off }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Contiguous ranges per optimizer group: the conv trunk is the backbone,
    /// everything from the bottleneck on is the head.
    pub fn groups(&self) -> Vec<(Range<usize>, ParamGroup)> {
        let head_start = self.bottleneck_w.start;
        vec![(0..head_start, ParamGroup::Backbone), (head_start..self.total, ParamGroup::Head)]
    }
}

/// Per-batch outputs of the forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    /// `B x H x W x d'` activation of the last conv block.
    pub feature_map: Array4<f64>,
    /// `B x d` post-batch-norm bottleneck embedding.
    pub embedding: Array2<f64>,
    pub logits: Array2<f64>,
    pub posterior: Array2<f64>,
}

struct StageCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    pool_idx: Option<Vec<usize>>,
}

struct TrunkCache {
    stages: Vec<StageCache>,
}

struct HeadCache {
    pooled: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    w_eff: Array2<f64>,
    mode: Mode,
}

/// A forward pass that keeps what backprop needs.
pub struct ForwardPass {
    pub outputs: ModelOutputs,
    trunks: Vec<TrunkCache>,
    head: HeadCache,
}

impl ForwardPass {
    pub fn batch_size(&self) -> usize {
        self.outputs.logits.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<f64>,
    bn_running_mean: Vec<f64>,
    bn_running_var: Vec<f64>,
}

impl Model {
    /// Seeded construction. Conv weights are He-normal, the bottleneck and the
    /// classifier direction are Xavier-normal, and the weight-norm magnitude
    /// starts at the norm of its direction row.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = config.input_shape[2];
        for (s, slots) in config.conv_stages.iter().zip(&layout.convs) {
            let fan_in = (s.kernel * s.kernel * cin) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            for p in &mut params[slots.weight.clone()] {
                *p = normal.sample(&mut rng);
            }
            cin = s.channels;
        }
        let (dp, d, c) = (config.feature_channels(), config.embed_dim, config.num_classes);
        let xavier = |fan_in: usize, fan_out: usize| Normal::new(0.0, (2.0 / (fan_in + fan_out) as f64).sqrt()).expect("valid std");
        let nb = xavier(dp, d);
        for p in &mut params[layout.bottleneck_w.clone()] {
            *p = nb.sample(&mut rng);
        }
        params[layout.bn_gamma.clone()].iter_mut().for_each(|g| *g = 1.0);
        let nc = xavier(d, c);
        for p in &mut params[layout.cls_v.clone()] {
            *p = nc.sample(&mut rng);
        }
        for row in 0..c {
            let v = &params[layout.cls_v.start + row * d..][..d];
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            params[layout.cls_g.start + row] = norm;
        }
        Ok(Self { config, params, bn_running_mean: vec![0.0; d], bn_running_var: vec![1.0; d] })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn bn_running_stats(&self) -> (&[f64], &[f64]) {
        (&self.bn_running_mean, &self.bn_running_var)
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f64>, mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.len() || mean.len() != config.embed_dim || var.len() != config.embed_dim {
            return Err(Error::Format(format!(
                "parameter arrays do not match the model config (expected {} params, got {})",
                layout.len(),
                params.len()
            )));
        }
        Ok(Self { config, params, bn_running_mean: mean, bn_running_var: var })
    }

    /// Zero the classifier magnitudes and biases so every logit is 0.
    pub fn zero_classifier(&mut self) {
        let layout = self.layout();
        self.params[layout.cls_g.clone()].iter_mut().for_each(|v| *v = 0.0);
        self.params[layout.cls_b.clone()].iter_mut().for_each(|v| *v = 0.0);
    }

    /// Effective classifier weights `g_c * v_c / |v_c|`, `C x d`.
    pub fn classifier_weights(&self) -> Array2<f64> {
        let layout = self.layout();
        let (c, d) = (self.config.num_classes, self.config.embed_dim);
        let mut w = Array2::zeros((c, d));
        for row in 0..c {
            let v = &self.params[layout.cls_v.start + row * d..][..d];
            let g = self.params[layout.cls_g.start + row];
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (j, &vj) in v.iter().enumerate() {
                w[[row, j]] = g * vj / norm;
            }
        }
        w
    }

    /// Rescale each direction row `v_c` to unit norm. The effective weights are
    /// unchanged, so calling this twice equals calling it once.
    pub fn renormalize_classifier(&mut self) {
        let layout = self.layout();
        let d = self.config.embed_dim;
        for row in 0..self.config.num_classes {
            let v = &mut self.params[layout.cls_v.start + row * d..][..d];
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 && (norm - 1.0).abs() > 4.0 * f64::EPSILON {
                v.iter_mut().for_each(|x| *x /= norm);
            }
        }
    }

    fn check_images(&self, images: &Array4<f64>) -> Result<()> {
        let s = images.shape();
        let [h, w, c] = self.config.input_shape;
        if s[1] != h || s[2] != w || s[3] != c {
            return Err(Error::Input(format!(
                "images have shape {:?}, model expects (B, {h}, {w}, {c})",
                &s[1..]
            )));
        }
        if s[0] == 0 {
            return Err(Error::Input("empty image batch".into()));
        }
        Ok(())
    }

    pub fn forward(&self, images: &Array4<f64>, mode: Mode) -> Result<ModelOutputs> {
        Ok(self.forward_pass(images, mode)?.outputs)
    }

    /// Evaluation-mode outputs for a large image set, processed in chunks to
    /// bound cache memory.
    pub fn forward_chunked(&self, images: &Array4<f64>, chunk: usize) -> Result<ModelOutputs> {
        self.check_images(images)?;
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            parts.push(self.forward(&images.slice(ndarray::s![start..end, .., .., ..]).to_owned(), Mode::Eval)?);
            start = end;
        }
        let cat2 = |f: &dyn Fn(&ModelOutputs) -> ndarray::ArrayView2<f64>| {
            ndarray::concatenate(ndarray::Axis(0), &parts.iter().map(f).collect::<Vec<_>>()).expect("same widths")
        };
        let embedding = cat2(&|o| o.embedding.view());
        let logits = cat2(&|o| o.logits.view());
        let posterior = cat2(&|o| o.posterior.view());
        let feature_map = ndarray::concatenate(
            ndarray::Axis(0),
            &parts.iter().map(|o| o.feature_map.view()).collect::<Vec<_>>(),
        )
        .expect("same shapes");
        Ok(ModelOutputs { feature_map, embedding, logits, posterior })
    }

    fn run_trunk(&self, image: &[f64]) -> (Vec<f64>, TrunkCache) {
        let layout = self.layout();
        let [mut h, mut w, mut cin] = self.config.input_shape;
        let mut x = image.to_vec();
        let mut stages = Vec::with_capacity(self.config.conv_stages.len());
        for (s, slots) in self.config.conv_stages.iter().zip(&layout.convs) {
            let mut pre = vec![0.0; h * w * s.channels];
            layers::conv_forward(
                &x,
                h,
                w,
                cin,
                &self.params[slots.weight.clone()],
                &self.params[slots.bias.clone()],
                s.kernel,
                s.channels,
                &mut pre,
            );
            let mut act = pre.clone();
            layers::relu_inplace(&mut act);
            let input = std::mem::replace(&mut x, act);
            let pool_idx = if s.pool {
                let (pooled, idx) = layers::maxpool_forward(&x, h, w, s.channels);
                x = pooled;
                h /= 2;
                w /= 2;
                Some(idx)
            } else {
                None
            };
            stages.push(StageCache { input, pre, pool_idx });
            cin = s.channels;
        }
        (x, TrunkCache { stages })
    }

    /// Full forward pass keeping caches for [`Model::backward`].
    pub fn forward_pass(&self, images: &Array4<f64>, mode: Mode) -> Result<ForwardPass> {
        self.check_images(images)?;
        let b = images.shape()[0];
        let images = images.as_standard_layout();
        let flat = images.as_slice().expect("standard layout");
        let per = flat.len() / b;
        let trunk: Vec<(Vec<f64>, TrunkCache)> = flat.par_chunks(per).map(|img| self.run_trunk(img)).collect();

        let (fh, fw) = self.config.feature_hw();
        let dp = self.config.feature_channels();
        let mut feature_map = Array4::zeros((b, fh, fw, dp));
        let mut post = Array4::zeros((b, fh, fw, dp));
        for (i, (act, cache)) in trunk.iter().enumerate() {
            let tapped: &[f64] = match self.config.feature_tap {
                FeatureTap::PostActivation => act,
                FeatureTap::PreActivation => &cache.stages.last().expect("non-empty").pre,
            };
            feature_map
                .index_axis_mut(ndarray::Axis(0), i)
                .as_slice_mut()
                .expect("contiguous")
                .copy_from_slice(tapped);
            post.index_axis_mut(ndarray::Axis(0), i).as_slice_mut().expect("contiguous").copy_from_slice(act);
        }
        let (embedding, logits, posterior, head) = self.head_forward(&post, mode);
        let trunks = trunk.into_iter().map(|(_, c)| c).collect();
        Ok(ForwardPass { outputs: ModelOutputs { feature_map, embedding, logits, posterior }, trunks, head })
    }

    /// Head from the post-activation feature map: GAP -> bottleneck -> BN -> classifier.
    fn head_forward(&self, post: &Array4<f64>, mode: Mode) -> (Array2<f64>, Array2<f64>, Array2<f64>, HeadCache) {
        let layout = self.layout();
        let b = post.shape()[0];
        let (fh, fw) = (post.shape()[1], post.shape()[2]);
        let dp = self.config.feature_channels();
        let (d, c) = (self.config.embed_dim, self.config.num_classes);
        let hw = (fh * fw) as f64;

        let mut pooled = Array2::zeros((b, dp));
        for i in 0..b {
            for m in 0..fh {
                for n in 0..fw {
                    for ch in 0..dp {
                        pooled[[i, ch]] += post[[i, m, n, ch]];
                    }
                }
            }
        }
        pooled.mapv_inplace(|v| v / hw);

        let wb = ArrayView2::from_shape((dp, d), &self.params[layout.bottleneck_w.clone()]).expect("layout");
        let bb = &self.params[layout.bottleneck_b.clone()];
        let mut z = pooled.dot(&wb);
        for mut row in z.rows_mut() {
            for (v, &bv) in row.iter_mut().zip(bb) {
                *v += bv;
            }
        }

        let (mean, var) = match mode {
            Mode::Train => {
                let mean: Vec<f64> = (0..d).map(|j| z.column(j).sum() / b as f64).collect();
                let var: Vec<f64> = (0..d)
                    .map(|j| z.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / b as f64)
                    .collect();
                (mean, var)
            }
            Mode::Eval => (self.bn_running_mean.clone(), self.bn_running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = &self.params[layout.bn_gamma.clone()];
        let beta = &self.params[layout.bn_beta.clone()];
        let mut xhat = z;
        let mut embedding = Array2::zeros((b, d));
        for i in 0..b {
            for j in 0..d {
                let xh = (xhat[[i, j]] - mean[j]) * inv_std[j];
                xhat[[i, j]] = xh;
                embedding[[i, j]] = gamma[j] * xh + beta[j];
            }
        }

        let w_eff = self.classifier_weights();
        let mut logits = embedding.dot(&w_eff.t());
        let cb = &self.params[layout.cls_b.clone()];
        for mut row in logits.rows_mut() {
            for (v, &bv) in row.iter_mut().zip(cb) {
                *v += bv;
            }
        }
        let mut posterior = Array2::zeros((b, c));
        for i in 0..b {
            let l = logits.row(i).to_vec();
            let mut p = vec![0.0; c];
            softmax_row(&l, &mut p);
            for (k, pv) in p.into_iter().enumerate() {
                posterior[[i, k]] = pv;
            }
        }
        let cache = HeadCache { pooled, xhat, inv_std, batch_mean: mean, batch_var: var, w_eff, mode };
        (embedding, logits, posterior, cache)
    }

    /// Head backward. Accumulates head parameter gradients into `grad` and
    /// returns the gradient w.r.t. the post-activation feature map (`B x HW*d'`,
    /// identical at every grid cell because of the average pool).
    fn head_backward(&self, head: &HeadCache, embedding: &Array2<f64>, dlogits: &Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let layout = self.layout();
        let b = dlogits.nrows();
        let (dp, d, c) = (self.config.feature_channels(), self.config.embed_dim, self.config.num_classes);

        // classifier bias and effective weights
        for i in 0..b {
            for k in 0..c {
                grad[layout.cls_b.start + k] += dlogits[[i, k]];
            }
        }
        let dw_eff = dlogits.t().dot(embedding); // C x d
        for row in 0..c {
            let v = &self.params[layout.cls_v.start + row * d..][..d];
            let g = self.params[layout.cls_g.start + row];
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let dw = dw_eff.row(row);
            let dot_vhat: f64 = dw.iter().zip(v).map(|(a, vv)| a * vv / norm).sum();
            grad[layout.cls_g.start + row] += dot_vhat;
            for j in 0..d {
                let vhat = v[j] / norm;
                grad[layout.cls_v.start + row * d + j] += g / norm * (dw[j] - dot_vhat * vhat);
            }
        }
        let de = dlogits.dot(&head.w_eff); // B x d

        // batch norm
        let gamma = &self.params[layout.bn_gamma.clone()];
        let mut dz = Array2::zeros((b, d));
        for j in 0..d {
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for i in 0..b {
                let dy = de[[i, j]];
                grad[layout.bn_gamma.start + j] += dy * head.xhat[[i, j]];
                grad[layout.bn_beta.start + j] += dy;
                let dxhat = dy * gamma[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * head.xhat[[i, j]];
            }
            for i in 0..b {
                let dxhat = de[[i, j]] * gamma[j];
                dz[[i, j]] = match head.mode {
                    Mode::Eval => dxhat * head.inv_std[j],
                    Mode::Train => {
                        head.inv_std[j] / b as f64 * (b as f64 * dxhat - sum_dxhat - head.xhat[[i, j]] * sum_dxhat_xhat)
                    }
                };
            }
        }

        // bottleneck
        let dwb = head.pooled.t().dot(&dz); // d' x d
        for (g, v) in grad[layout.bottleneck_w.clone()].iter_mut().zip(dwb.iter()) {
            *g += v;
        }
        for i in 0..b {
            for j in 0..d {
                grad[layout.bottleneck_b.start + j] += dz[[i, j]];
            }
        }
        let wb = ArrayView2::from_shape((dp, d), &self.params[layout.bottleneck_w.clone()]).expect("layout");
        dz.dot(&wb.t()) // B x d' gradient w.r.t. pooled features
    }

    /// Backprop `dL/dlogits` through the whole network. Returns the parameter
    /// gradient as a flat vector aligned with [`Model::params`]. The model is
    /// not modified.
    pub fn backward(&self, pass: &ForwardPass, dlogits: &Array2<f64>) -> Vec<f64> {
        let layout = self.layout();
        let mut grad = vec![0.0; layout.len()];
        let dpooled = self.head_backward(&pass.head, &pass.outputs.embedding, dlogits, &mut grad);
        let (fh, fw) = self.config.feature_hw();
        let hw = (fh * fw) as f64;
        let dp = self.config.feature_channels();

        let backbone_len = layout.bottleneck_w.start;
        let per_example: Vec<Vec<f64>> = pass
            .trunks
            .par_iter()
            .enumerate()
            .map(|(i, trunk)| {
                let mut g = vec![0.0; backbone_len];
                let cell: Vec<f64> = (0..dp).map(|ch| dpooled[[i, ch]] / hw).collect();
                let dfeat = cell.repeat(fh * fw);
                self.trunk_backward(trunk, dfeat, &layout, &mut g);
                g
            })
            .collect();
        for g in &per_example {
            for (acc, v) in grad[..backbone_len].iter_mut().zip(g) {
                *acc += v;
            }
        }
        grad
    }

    fn trunk_backward(&self, trunk: &TrunkCache, mut dact: Vec<f64>, layout: &ParamLayout, grad: &mut [f64]) {
        let mut dims = Vec::new();
        let [mut h, mut w, mut cin] = self.config.input_shape;
        for s in &self.config.conv_stages {
            dims.push((h, w, cin));
            if s.pool {
                h /= 2;
                w /= 2;
            }
            cin = s.channels;
        }
        for (idx, ((s, slots), cache)) in
            self.config.conv_stages.iter().zip(&layout.convs).zip(&trunk.stages).enumerate().rev()
        {
            let (h, w, cin) = dims[idx];
            if let Some(pidx) = &cache.pool_idx {
                dact = layers::maxpool_backward(&dact, pidx, h * w * s.channels);
            }
            for (g, &p) in dact.iter_mut().zip(&cache.pre) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
            let need_din = idx > 0;
            let mut din = if need_din { vec![0.0; h * w * cin] } else { Vec::new() };
            let (wslice, rest) = grad.split_at_mut(slots.bias.start);
            layers::conv_backward(
                &cache.input,
                h,
                w,
                cin,
                &self.params[slots.weight.clone()],
                s.kernel,
                s.channels,
                &dact,
                if need_din { Some(&mut din) } else { None },
                &mut wslice[slots.weight.clone()],
                &mut rest[..slots.bias.len()],
            );
            dact = din;
        }
    }

    /// Fold the batch statistics of a training-mode pass into the running
    /// statistics. No-op for evaluation-mode passes.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        if pass.head.mode != Mode::Train {
            return;
        }
        let b = pass.batch_size() as f64;
        let unbias = if b > 1.0 { b / (b - 1.0) } else { 1.0 };
        for j in 0..self.config.embed_dim {
            self.bn_running_mean[j] = (1.0 - BN_MOMENTUM) * self.bn_running_mean[j] + BN_MOMENTUM * pass.head.batch_mean[j];
            self.bn_running_var[j] =
                (1.0 - BN_MOMENTUM) * self.bn_running_var[j] + BN_MOMENTUM * pass.head.batch_var[j] * unbias;
        }
    }

    /// Replace the running statistics with the exact population statistics of
    /// the bottleneck over `images`, computed in chunks.
    pub fn recalibrate_running_stats(&mut self, images: &Array4<f64>) -> Result<()> {
        let n = images.dim().0;
        if n < 2 {
            return Err(Error::Input("recalibration needs at least two images".into()));
        }
        let d = self.config.embed_dim;
        let mut parts = Vec::new();
        for start in (0..n).step_by(512) {
            let chunk = images.slice(ndarray::s![start..(start + 512).min(n), .., .., ..]).to_owned();
            let pass = self.forward_pass(&chunk, Mode::Train)?;
            parts.push((chunk.dim().0 as f64, pass.head.batch_mean.clone(), pass.head.batch_var.clone()));
        }
        let total = n as f64;
        for j in 0..d {
            let mean = parts.iter().map(|(k, m, _)| k * m[j]).sum::<f64>() / total;
            let var = parts.iter().map(|(k, m, v)| k * (v[j] + (m[j] - mean).powi(2))).sum::<f64>() / total;
            self.bn_running_mean[j] = mean;
            self.bn_running_var[j] = var * total / (total - 1.0);
        }
        Ok(())
    }

    /// Evaluation-mode logits computed from a given feature map (in the tapped
    /// representation). Used to probe the head independently of the trunk.
    pub fn logits_from_feature_map(&self, feature_map: &Array4<f64>) -> Result<Array2<f64>> {
        let (fh, fw) = self.config.feature_hw();
        let s = feature_map.shape();
        if s[1] != fh || s[2] != fw || s[3] != self.config.feature_channels() {
            return Err(Error::Input(format!("feature map shape {:?} does not match the model", s)));
        }
        let post = match self.config.feature_tap {
            FeatureTap::PostActivation => feature_map.to_owned(),
            FeatureTap::PreActivation => feature_map.mapv(|v| v.max(0.0)),
        };
        Ok(self.head_forward(&post, Mode::Eval).1)
    }

    /// `d logit(class) / d feature_map` in evaluation mode. Parameters and
    /// running statistics are untouched.
    pub fn logit_feature_gradient(&self, images: &Array4<f64>, class: usize) -> Result<Array4<f64>> {
        let pass = self.forward_pass(images, Mode::Eval)?;
        self.logit_feature_gradient_from(&pass, class)
    }

    /// Same as [`Model::logit_feature_gradient`] but reuses an existing
    /// evaluation-mode forward pass.
    pub fn logit_feature_gradient_from(&self, pass: &ForwardPass, class: usize) -> Result<Array4<f64>> {
        let c = self.config.num_classes;
        if class >= c {
            return Err(Error::Input(format!("class index {class} out of range for {c} classes")));
        }
        if pass.head.mode != Mode::Eval {
            return Err(Error::State("feature gradients require an evaluation-mode pass".into()));
        }
        let b = pass.batch_size();
        let mut dlogits = Array2::zeros((b, c));
        dlogits.column_mut(class).fill(1.0);
        let mut scratch = vec![0.0; self.layout().len()];
        let dpooled = self.head_backward(&pass.head, &pass.outputs.embedding, &dlogits, &mut scratch);
        let (fh, fw) = self.config.feature_hw();
        let dp = self.config.feature_channels();
        let hw = (fh * fw) as f64;
        let mut grad = Array4::zeros((b, fh, fw, dp));
        for i in 0..b {
            for m in 0..fh {
                for n in 0..fw {
                    for ch in 0..dp {
                        let mut g = dpooled[[i, ch]] / hw;
                        if self.config.feature_tap == FeatureTap::PreActivation && pass.outputs.feature_map[[i, m, n, ch]] <= 0.0 {
                            g = 0.0;
                        }
                        grad[[i, m, n, ch]] = g;
                    }
                }
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            embed_dim: 5,
            input_shape: [6, 6, 2],
            conv_stages: vec![ConvStage { channels: 3, kernel: 3, pool: true }, ConvStage { channels: 4, kernel: 3, pool: false }],
            feature_tap: FeatureTap::PostActivation,
        }
    }

    fn random_images(b: usize, shape: [usize; 3], seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((b, shape[0], shape[1], shape[2]), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn shape_contract_for_small_image_model() {
        let cfg = ModelConfig {
            num_classes: 2,
            embed_dim: 8,
            input_shape: [16, 16, 1],
            conv_stages: vec![ConvStage { channels: 16, kernel: 3, pool: false }],
            feature_tap: FeatureTap::PostActivation,
        };
        let model = Model::new(cfg, 0).unwrap();
        let out = model.forward(&random_images(4, [16, 16, 1], 1), Mode::Eval).unwrap();
        assert_eq!(out.logits.shape(), &[4, 2]);
        assert_eq!(out.feature_map.shape(), &[4, 16, 16, 16]);
        assert_eq!(out.embedding.shape(), &[4, 8]);
        assert_eq!(out.posterior.shape(), &[4, 2]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(tiny_config(), 0).unwrap();
        let b = Model::new(tiny_config(), 0).unwrap();
        let c = Model::new(tiny_config(), 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn office_home_head_shape() {
        let cfg = ModelConfig { num_classes: 65, embed_dim: 256, ..ModelConfig::default() };
        let model = Model::new(cfg, 0).unwrap();
        assert_eq!(model.classifier_weights().shape(), &[65, 256]);
    }

    #[test]
    fn collapsing_feature_map_is_a_config_error() {
        let cfg = ModelConfig {
            input_shape: [2, 2, 1],
            conv_stages: vec![
                ConvStage { channels: 2, kernel: 3, pool: true },
                ConvStage { channels: 2, kernel: 3, pool: true },
                ConvStage { channels: 2, kernel: 3, pool: false },
            ],
            ..ModelConfig::default()
        };
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_image_shape_is_an_input_error() {
        let model = Model::new(tiny_config(), 0).unwrap();
        let bad = random_images(2, [5, 6, 2], 0);
        assert!(matches!(model.forward(&bad, Mode::Eval), Err(Error::Input(_))));
    }

    #[test]
    fn zero_image_and_zero_classifier_give_uniform_posterior() {
        let mut model = Model::new(tiny_config(), 3).unwrap();
        model.zero_classifier();
        let out = model.forward(&Array4::zeros((2, 6, 6, 2)), Mode::Eval).unwrap();
        for p in out.posterior.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_rows_are_distributions() {
        let model = Model::new(tiny_config(), 9).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let out = model.forward(&random_images(7, [6, 6, 2], 2), mode).unwrap();
            for row in out.posterior.rows() {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.sum() - 1.0).abs() < 1e-5);
            }
            // posterior is the softmax of the logits
            for (lrow, prow) in out.logits.rows().into_iter().zip(out.posterior.rows()) {
                let mut p = vec![0.0; 3];
                softmax_row(&lrow.to_vec(), &mut p);
                for (a, b) in p.iter().zip(prow) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn renormalization_is_idempotent_and_preserves_weights() {
        let mut model = Model::new(tiny_config(), 4).unwrap();
        let before = model.classifier_weights();
        model.renormalize_classifier();
        let once = model.params().to_vec();
        model.renormalize_classifier();
        assert_eq!(once, model.params());
        for (a, b) in before.iter().zip(model.classifier_weights().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn loss_of(model: &Model, images: &Array4<f64>, mode: Mode, weights: &Array2<f64>) -> f64 {
        let out = model.forward(images, mode).unwrap();
        (&out.logits * weights).sum()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for mode in [Mode::Eval, Mode::Train] {
            let mut model = Model::new(tiny_config(), 11).unwrap();
            // give BN non-trivial running stats
            let warm = model.forward_pass(&random_images(6, [6, 6, 2], 7), Mode::Train).unwrap();
            model.update_running_stats(&warm);
            let images = random_images(4, [6, 6, 2], 5);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let weights = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
            let pass = model.forward_pass(&images, mode).unwrap();
            let grad = model.backward(&pass, &weights);
            let eps = 1e-5;
            for i in (0..model.params().len()).step_by(3) {
                let orig = model.params()[i];
                model.params_mut()[i] = orig + eps;
                let lp = loss_of(&model, &images, mode, &weights);
                model.params_mut()[i] = orig - eps;
                let lm = loss_of(&model, &images, mode, &weights);
                model.params_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let tol = 1e-6 + 1e-4 * fd.abs().max(grad[i].abs());
                assert!((fd - grad[i]).abs() <= tol, "{mode:?} param {i}: fd {fd} vs analytic {}", grad[i]);
            }
        }
    }

    #[test]
    fn feature_gradient_of_linear_toy_head_is_constant_per_cell() {
        // One bottleneck unit path: gradient must be the same at every grid cell.
        let model = Model::new(tiny_config(), 2).unwrap();
        let g = model.logit_feature_gradient(&random_images(2, [6, 6, 2], 1), 1).unwrap();
        let (fh, fw) = model.config().feature_hw();
        for i in 0..2 {
            for m in 0..fh {
                for n in 0..fw {
                    for ch in 0..4 {
                        assert_eq!(g[[i, m, n, ch]], g[[i, 0, 0, ch]]);
                    }
                }
            }
        }
    }

    #[test]
    fn feature_gradient_rejects_bad_class_and_differs_by_class() {
        let model = Model::new(tiny_config(), 2).unwrap();
        let imgs = random_images(1, [6, 6, 2], 1);
        assert!(matches!(model.logit_feature_gradient(&imgs, 3), Err(Error::Input(_))));
        let g0 = model.logit_feature_gradient(&imgs, 0).unwrap();
        let g1 = model.logit_feature_gradient(&imgs, 1).unwrap();
        assert_ne!(g0, g1);
    }

    #[test]
    fn recalibrated_eval_matches_full_batch_train_mode() {
        let mut model = Model::new(tiny_config(), 4).unwrap();
        let imgs = random_images(700, [6, 6, 2], 3);
        model.recalibrate_running_stats(&imgs).unwrap();
        let train = model.forward(&imgs, Mode::Train).unwrap().logits;
        let eval = model.forward(&imgs, Mode::Eval).unwrap().logits;
        // Only the n/(n-1) variance correction separates the two.
        for (a, b) in train.iter().zip(eval.iter()) {
            assert!((a - b).abs() < 1e-2 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn feature_gradient_does_not_touch_the_model() {
        let model = Model::new(tiny_config(), 2).unwrap();
        let before = model.clone();
        let _ = model.logit_feature_gradient(&random_images(3, [6, 6, 2], 1), 0).unwrap();
        assert_eq!(before, model);
    }

    #[test]
    fn pre_activation_tap_gradient_matches_finite_differences() {
        let cfg = ModelConfig { feature_tap: FeatureTap::PreActivation, ..tiny_config() };
        let model = Model::new(cfg, 5).unwrap();
        let imgs = random_images(1, [6, 6, 2], 8);
        let fm = model.forward(&imgs, Mode::Eval).unwrap().feature_map;
        let g = model.logit_feature_gradient(&imgs, 2).unwrap();
        let eps = 1e-6;
        for (idx, &v) in fm.indexed_iter() {
            if v.abs() < 1e-3 {
                continue; // skip the ReLU kink
            }
            let mut p = fm.clone();
            p[idx] += eps;
            let mut m = fm.clone();
            m[idx] -= eps;
            let fd = (model.logits_from_feature_map(&p).unwrap()[[0, 2]] - model.logits_from_feature_map(&m).unwrap()[[0, 2]])
                / (2.0 * eps);
            assert!((fd - g[idx]).abs() <= 1e-6 + 1e-3 * fd.abs());
        }
    }
}
