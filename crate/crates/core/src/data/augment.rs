//! Weak (flip + shift) and strong (RandAugment-style + cutout) augmentation.
//!
//! Strong distortions are trait objects looked up by name in a fixed table,
//! so a policy is just an ordered list of names plus magnitudes. Every op is
//! the identity at magnitude 0, and every output is clipped to the declared
//! value range.

use ndarray::Array3;
use rand::seq::index::sample;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Image = Array3<f64>;

/// A stochastic image distortion with a magnitude in `[0, 1]`.
pub trait AugmentOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, image: &Image, magnitude: f64, range: (f64, f64), rng: &mut dyn RngCore) -> Image;
}

fn random_sign(rng: &mut dyn RngCore) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn clip(mut image: Image, (lo, hi): (f64, f64)) -> Image {
    image.mapv_inplace(|v| v.clamp(lo, hi));
    image
}

fn blend(image: &Image, target: &Image, amount: f64) -> Image {
    image + &((target - image) * amount)
}

/// Bilinear resampling through an inverse map from output to input pixel
/// coordinates (relative to the image center). Out-of-bounds samples read `fill`.
fn warp(image: &Image, fill: f64, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (h, w, c) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Image::from_elem((h, w, c), fill);
    let sample = |y: isize, x: isize, ch: usize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            fill
        } else {
            image[[y as usize, x as usize, ch]]
        }
    };
    for r in 0..h {
        for col in 0..w {
            let (sx, sy) = inverse(col as f64 - cx, r as f64 - cy);
            let (sx, sy) = (sx + cx, sy + cy);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * sample(y0, x0, ch) + fx * sample(y0, x0 + 1, ch))
                    + fy * ((1.0 - fx) * sample(y0 + 1, x0, ch) + fx * sample(y0 + 1, x0 + 1, ch));
                out[[r, col, ch]] = v;
            }
        }
    }
    out
}

struct Identity;
impl AugmentOp for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }
    fn apply(&self, image: &Image, _: f64, range: (f64, f64), _: &mut dyn RngCore) -> Image {
        clip(image.clone(), range)
    }
}

struct AutoContrast;
impl AugmentOp for AutoContrast {
    fn name(&self) -> &'static str {
        "auto_contrast"
    }
    fn apply(&self, image: &Image, m: f64, range: (f64, f64), _: &mut dyn RngCore) -> Image {
        if m == 0.0 {
            return clip(image.clone(), range);
        }
        let lo = image.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            return clip(image.clone(), range);
        }
        let stretched = image.mapv(|v| range.0 + (v - lo) / (hi - lo) * (range.1 - range.0));
        clip(blend(image, &stretched, m), range)
    }
}

struct Brightness;
impl AugmentOp for Brightness {
    fn name(&self) -> &'static str {
        "brightness"
    }
    fn apply(&self, image: &Image, m: f64, range: (f64, f64), rng: &mut dyn RngCore) -> Image {
        let delta = 0.3 * m * random_sign(rng) * (range.1 - range.0);
        clip(image.mapv(|v| v + delta), range)
    }
}

struct Contrast;
impl AugmentOp for Contrast {
    fn name(&self) -> &'static str {
        "contrast"
    }
    fn apply(&self, image: &Image, m: f64, range: (f64, f64), rng: &mut dyn RngCore) -> Image {
        let factor = 1.0 + 0.7 * m * random_sign(rng);
        let mean = image.mean().unwrap_or(0.0);
        clip(image.mapv(|v| mean + (v - mean) * factor), range)
    }
}

struct Posterize;
impl AugmentOp for Posterize {
    fn name(&self) -> &'static str {
        "posterize"
    }
    fn apply(&self, image: &Image, m: f64, range: (f64, f64), _: &mut dyn RngCore) -> Image {
        if m == 0.0 {
            return clip(image.clone(), range);
        }
        // 8 bits at m -> 0, 4 bits at m = 1
        let bits = 8.0 - (4.0 * m).round();
        let levels = 2f64.powf(bits) - 1.0;
        let span = range.1 - range.0;
        clip(image.mapv(|v| range.0 + ((v - range.0) / span * levels).floor() / levels * span), range)
    }
}

struct Solarize;
impl AugmentOp for Solarize {
    fn name(&self) -> &'static str {
        "solarize"
    }
    fn apply(&self, image: &Image, m: f64, range: (f64, f64), _: &mut dyn RngCore) -> Image {
        let threshold = range.1 - m * (range.1 - range.0);
        clip(image.mapv(|v| if v > threshold { range.0 + range.1 - v } else { v }), range)
    }
}

struct Sharpness;
impl AugmentOp for Sharpness {
    fn name(&self) -> &'static str {
        "sharpness"
    }
    fn apply(&self, image: &Image, m: f64, range: (f64, f64), rng: &mut dyn RngCore) -> Image {
        if m == 0.0 {
            return clip(image.clone(), range);
        }
        let (h, w, c) = image.dim();
        // 3x3 smoothing (13/5 weighted center), borders kept
        let mut smooth = image.clone();
        for r in 1..h.saturating_sub(1) {
            for col in 1..w.saturating_sub(1) {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dr in 0..3 {
                        for dc in 0..3 {
                            let wgt = if dr == 1 && dc == 1 { 5.0 } else { 1.0 };
                            acc += wgt * image[[r + dr - 1, col + dc - 1, ch]];
                        }
                    }
                    smooth[[r, col, ch]] = acc / 13.0;
                }
            }
        }
        // positive amount sharpens (extrapolates away from the blur), negative blurs
        let amount = 0.9 * m * random_sign(rng);
        clip(blend(image, &smooth, -amount), range)
    }
}

struct Rotate;
impl AugmentOp for Rotate {
    fn name(&self) -> &'static str {
        "rotate"
    }
    fn apply(&self, image: &Image, m: f64, range: (f64, f64), rng: &mut dyn RngCore) -> Image {
        if m == 0.0 {
            return clip(image.clone(), range);
        }
        let angle = (30.0 * m * random_sign(rng)).to_radians();
        let (s, c) = angle.sin_cos();
        clip(warp(image, range.0, |x, y| (c * x + s * y, -s * x + c * y)), range)
    }
}

struct ShearX;
impl AugmentOp for ShearX {
    fn name(&self) -> &'static str {
        "shear_x"
    }
    fn apply(&self, image: &Image, m: f64, range: (f64, f64), rng: &mut dyn RngCore) -> Image {
        if m == 0.0 {
            return clip(image.clone(), range);
        }
        let k = 0.3 * m * random_sign(rng);
        clip(warp(image, range.0, |x, y| (x + k * y, y)), range)
    }
}

struct ShearY;
impl AugmentOp for ShearY {
    fn name(&self) -> &'static str {
        "shear_y"
    }
    fn apply(&self, image: &Image, m: f64, range: (f64, f64), rng: &mut dyn RngCore) -> Image {
        if m == 0.0 {
            return clip(image.clone(), range);
        }
        let k = 0.3 * m * random_sign(rng);
        clip(warp(image, range.0, |x, y| (x, y + k * x)), range)
    }
}

struct TranslateX;
impl AugmentOp for TranslateX {
    fn name(&self) -> &'static str {
        "translate_x"
    }
    fn apply(&self, image: &Image, m: f64, range: (f64, f64), rng: &mut dyn RngCore) -> Image {
        let px = (0.3 * m * image.dim().1 as f64).round() * random_sign(rng);
        if px == 0.0 {
            return clip(image.clone(), range);
        }
        clip(warp(image, range.0, |x, y| (x - px, y)), range)
    }
}

struct TranslateY;
impl AugmentOp for TranslateY {
    fn name(&self) -> &'static str {
        "translate_y"
    }
    fn apply(&self, image: &Image, m: f64, range: (f64, f64), rng: &mut dyn RngCore) -> Image {
        let px = (0.3 * m * image.dim().0 as f64).round() * random_sign(rng);
        if px == 0.0 {
            return clip(image.clone(), range);
        }
        clip(warp(image, range.0, |x, y| (x, y - px)), range)
    }
}

/// Every strong distortion known to the policy, by name.
pub fn strong_op_table() -> Vec<Box<dyn AugmentOp>> {
    vec![
        Box::new(Identity),
        Box::new(AutoContrast),
        Box::new(Brightness),
        Box::new(Contrast),
        Box::new(Posterize),
        Box::new(Solarize),
        Box::new(Sharpness),
        Box::new(Rotate),
        Box::new(ShearX),
        Box::new(ShearY),
        Box::new(TranslateX),
        Box::new(TranslateY),
    ]
}

pub fn lookup_op(name: &str) -> Option<Box<dyn AugmentOp>> {
    strong_op_table().into_iter().find(|op| op.name() == name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Max translation as a fraction of the image side.
    pub shift_frac: f64,
    /// Names from [`strong_op_table`].
    pub strong_ops: Vec<String>,
    /// Distortions sampled per strong call.
    pub num_strong_ops: usize,
    /// Upper bound for the per-call magnitude draw.
    pub max_magnitude: f64,
    /// Max cutout square side as a fraction of the image side.
    pub cutout_frac: f64,
    pub value_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            shift_frac: 0.125,
            strong_ops: strong_op_table().iter().map(|o| o.name().to_string()).collect(),
            num_strong_ops: 2,
            max_magnitude: 1.0,
            cutout_frac: 0.5,
            value_range: (0.0, 1.0),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("augment.flip_prob must be in [0, 1], got {}", self.flip_prob)));
        }
        for (name, v) in [("shift_frac", self.shift_frac), ("cutout_frac", self.cutout_frac), ("max_magnitude", self.max_magnitude)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("augment.{name} must be in [0, 1], got {v}")));
            }
        }
        if self.value_range.0 >= self.value_range.1 {
            return Err(Error::Config("augment.value_range must be increasing".into()));
        }
        for name in &self.strong_ops {
            if lookup_op(name).is_none() {
                return Err(Error::Config(format!("augment.strong_ops: unknown op `{name}`")));
            }
        }
        if self.num_strong_ops > self.strong_ops.len() {
            return Err(Error::Config("augment.num_strong_ops exceeds the op list".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Weak,
    Strong,
}

pub struct AugmentationPolicy {
    kind: PolicyKind,
    config: AugmentConfig,
    ops: Vec<Box<dyn AugmentOp>>,
}

impl std::fmt::Debug for AugmentationPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AugmentationPolicy")
            .field("kind", &self.kind)
            .field("ops", &self.ops.iter().map(|o| o.name()).collect::<Vec<_>>())
            .finish()
    }
}

impl AugmentationPolicy {
    pub fn new(kind: PolicyKind, config: &AugmentConfig) -> Result<Self> {
        config.validate()?;
        let ops = match kind {
            PolicyKind::Weak => Vec::new(),
            PolicyKind::Strong => config.strong_ops.iter().map(|n| lookup_op(n).expect("validated")).collect(),
        };
        Ok(Self { kind, config: config.clone(), ops })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn op_names(&self) -> Vec<&'static str> {
        self.ops.iter().map(|o| o.name()).collect()
    }

    pub fn apply(&self, image: &Image, rng: &mut dyn RngCore) -> Image {
        let weak = weak_augment(image, &self.config, rng);
        match self.kind {
            PolicyKind::Weak => weak,
            PolicyKind::Strong => self.strong_tail(weak, rng),
        }
    }

    fn strong_tail(&self, mut image: Image, rng: &mut dyn RngCore) -> Image {
        let range = self.config.value_range;
        let n = self.config.num_strong_ops.min(self.ops.len());
        for idx in sample(rng, self.ops.len(), n).into_iter() {
            let m = rng.random::<f64>() * self.config.max_magnitude;
            image = self.ops[idx].apply(&image, m, range, rng);
        }
        cutout(image, self.config.cutout_frac, range, rng)
    }
}

/// Erase a random square (side up to `frac` of the image) with mid-range gray.
fn cutout(mut image: Image, frac: f64, range: (f64, f64), rng: &mut dyn RngCore) -> Image {
    let (h, w, c) = image.dim();
    let side = (frac * rng.random::<f64>() * h.min(w) as f64).round() as usize;
    if side == 0 {
        return clip(image, range);
    }
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    let fill = (range.0 + range.1) / 2.0;
    let (y0, x0) = (cy.saturating_sub(side / 2), cx.saturating_sub(side / 2));
    for r in y0..(y0 + side).min(h) {
        for col in x0..(x0 + side).min(w) {
            for ch in 0..c {
                image[[r, col, ch]] = fill;
            }
        }
    }
    clip(image, range)
}

pub fn hflip(image: &Image) -> Image {
    let mut out = image.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

/// Integer shift with reflect padding.
pub fn shift(image: &Image, dy: isize, dx: isize) -> Image {
    let (h, w, c) = image.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let mut j = i.rem_euclid(period);
        if j >= n {
            j = period - j;
        }
        j as usize
    };
    Image::from_shape_fn((h, w, c), |(r, col, ch)| {
        image[[reflect(r as isize - dy, h), reflect(col as isize - dx, w), ch]]
    })
}

/// Random horizontal flip then a random shift of up to `shift_frac` of each side.
pub fn weak_augment(image: &Image, config: &AugmentConfig, rng: &mut dyn RngCore) -> Image {
    let flip = rng.random_bool(config.flip_prob);
    let (h, w, _) = image.dim();
    let max_dy = (config.shift_frac * h as f64).round() as i64;
    let max_dx = (config.shift_frac * w as f64).round() as i64;
    let dy = rng.random_range(-max_dy..=max_dy) as isize;
    let dx = rng.random_range(-max_dx..=max_dx) as isize;
    let img = if flip { hflip(image) } else { image.clone() };
    let out = if dy == 0 && dx == 0 { img } else { shift(&img, dy, dx) };
    clip(out, config.value_range)
}

pub fn strong_augment(image: &Image, config: &AugmentConfig, rng: &mut dyn RngCore) -> Result<Image> {
    Ok(AugmentationPolicy::new(PolicyKind::Strong, config)?.apply(image, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_shape_fn((8, 8, 2), |_| rng.random::<f64>())
    }

    #[test]
    fn forced_identity_weak_draw() {
        let cfg = AugmentConfig { flip_prob: 0.0, shift_frac: 0.0, ..AugmentConfig::default() };
        let img = test_image(0);
        assert_eq!(weak_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(1)), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = test_image(2);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
    }

    #[test]
    fn weak_and_strong_replay_with_same_seed() {
        let cfg = AugmentConfig::default();
        let img = test_image(3);
        let a = weak_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = weak_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let s1 = strong_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let s2 = strong_augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn zero_magnitudes_make_strong_policy_identity() {
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            shift_frac: 0.0,
            max_magnitude: 0.0,
            cutout_frac: 0.0,
            num_strong_ops: 4,
            ..AugmentConfig::default()
        };
        let img = test_image(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(strong_augment(&img, &cfg, &mut rng).unwrap(), img);
        }
        for op in strong_op_table() {
            assert_eq!(op.apply(&img, 0.0, (0.0, 1.0), &mut rng), img, "{}", op.name());
        }
    }

    #[test]
    fn strong_policy_keeps_shape_and_range_over_many_draws() {
        let cfg = AugmentConfig::default();
        let policy = AugmentationPolicy::new(PolicyKind::Strong, &cfg).unwrap();
        let img = test_image(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let out = policy.apply(&img, &mut rng);
            assert_eq!(out.dim(), img.dim());
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn strong_op_list_is_pinned() {
        let names: Vec<_> = strong_op_table().iter().map(|o| o.name()).collect();
        assert!((8..=12).contains(&names.len()));
        let weak = AugmentationPolicy::new(PolicyKind::Weak, &AugmentConfig::default()).unwrap();
        assert!(weak.op_names().is_empty());
    }

    #[test]
    fn unknown_op_is_rejected() {
        let cfg = AugmentConfig { strong_ops: vec!["warp_drive".into()], num_strong_ops: 1, ..AugmentConfig::default() };
        assert!(matches!(AugmentationPolicy::new(PolicyKind::Strong, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn shift_moves_content() {
        let mut img = Image::zeros((4, 4, 1));
        img[[1, 1, 0]] = 1.0;
        let s = shift(&img, 1, 2);
        assert_eq!(s[[2, 3, 0]], 1.0);
    }
}
