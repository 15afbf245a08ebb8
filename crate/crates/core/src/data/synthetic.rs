//! Seeded source/target pairs with a controlled domain shift.
//!
//! Two generators:
//! - `blobs`: tabular Gaussian classes stored as `1 x 1 x F` images, with the
//!   target means shifted and covariance scaled.
//! - `digits`: seven-segment glyphs rendered at a small resolution with
//!   per-sample jitter; the target domain changes rotation, stroke width,
//!   contrast, background and noise.

use ndarray::{Array1, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DomainTag};
use crate::error::{Error, Result};

/// Per-class sample counts: one number for every class, or an explicit list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Counts {
    Uniform(usize),
    PerClass(Vec<usize>),
}

impl Counts {
    fn resolve(&self, num_classes: usize, field: &str) -> Result<Vec<usize>> {
        let counts = match self {
            Counts::Uniform(n) => vec![*n; num_classes],
            Counts::PerClass(v) => {
                if v.len() != num_classes {
                    return Err(Error::Config(format!(
                        "{field} lists {} counts for {num_classes} classes",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("{field}: class {c} has zero samples")));
        }
        Ok(counts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub source_counts: Counts,
    pub target_counts: Counts,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    pub noise_std: f64,
    /// Length of the offset added to every target mean (fixed random direction).
    pub shift: f64,
    /// Multiplier on the target noise standard deviation.
    pub target_scale: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            dim: 8,
            source_counts: Counts::Uniform(100),
            target_counts: Counts::Uniform(100),
            separation: 3.0,
            noise_std: 1.0,
            shift: 1.0,
            target_scale: 1.0,
        }
    }
}

/// Appearance of one digits domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DigitStyle {
    /// Mean glyph rotation in degrees.
    pub rotation_deg: f64,
    /// Per-sample rotation jitter (std, degrees).
    pub rotation_jitter_deg: f64,
    /// Stroke width as a fraction of the image side.
    pub stroke: f64,
    pub stroke_jitter: f64,
    /// Max translation as a fraction of the image side.
    pub translate: f64,
    pub scale_jitter: f64,
    /// Std of per-sample segment endpoint jitter (template units).
    pub wobble: f64,
    pub background: f64,
    pub contrast: f64,
    pub noise_std: f64,
    /// Shear along x applied to the glyph (slant).
    pub slant: f64,
}

impl Default for DigitStyle {
    fn default() -> Self {
        Self {
            rotation_deg: 0.0,
            rotation_jitter_deg: 5.0,
            stroke: 0.09,
            stroke_jitter: 0.015,
            translate: 0.06,
            scale_jitter: 0.06,
            wobble: 0.02,
            background: 0.0,
            contrast: 1.0,
            noise_std: 0.05,
            slant: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DigitSpec {
    pub size: usize,
    pub num_classes: usize,
    pub source_counts: Counts,
    pub target_counts: Counts,
    pub source_style: DigitStyle,
    pub target_style: DigitStyle,
}

impl Default for DigitSpec {
    fn default() -> Self {
        Self {
            size: 16,
            num_classes: 10,
            source_counts: Counts::Uniform(60),
            target_counts: Counts::Uniform(60),
            source_style: DigitStyle::default(),
            target_style: DigitStyle {
                rotation_deg: 12.0,
                stroke: 0.14,
                background: 0.25,
                contrast: 0.6,
                noise_std: 0.1,
                slant: 0.2,
                ..DigitStyle::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    Blobs(BlobSpec),
    Digits(DigitSpec),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec::Digits(DigitSpec::default())
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            SyntheticSpec::Blobs(b) => b.num_classes,
            SyntheticSpec::Digits(d) => d.num_classes,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            SyntheticSpec::Blobs(b) => [1, 1, b.dim],
            SyntheticSpec::Digits(d) => [d.size, d.size, 1],
        }
    }
}

/// Generate a `(source, target)` pair. Bit-exactly reproducible from `seed`.
pub fn make_synthetic_shift(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match spec {
        SyntheticSpec::Blobs(b) => make_blobs(b, seed),
        SyntheticSpec::Digits(d) => make_digits(d, seed),
    }
}

/// Shuffle `(label, payload)` pairs and assign ids in the shuffled order.
fn assemble<T>(
    mut items: Vec<(usize, T)>,
    rng: &mut ChaCha8Rng,
    domain: DomainTag,
    num_classes: usize,
    shape: [usize; 3],
    write: impl Fn(&T, &mut [f64]),
) -> Result<Dataset> {
    items.shuffle(rng);
    let n = items.len();
    let per = shape.iter().product::<usize>();
    let mut images = Array4::zeros((n, shape[0], shape[1], shape[2]));
    {
        let flat = images.as_slice_mut().expect("fresh array");
        for (i, (_, item)) in items.iter().enumerate() {
            write(item, &mut flat[i * per..(i + 1) * per]);
        }
    }
    let labels = items.iter().map(|(y, _)| *y).collect();
    Dataset::new(domain, num_classes, images, (0..n as u64).collect(), Some(labels))
}

fn make_blobs(spec: &BlobSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 || spec.dim == 0 {
        return Err(Error::Config("blobs need >= 2 classes and dim >= 1".into()));
    }
    let src_counts = spec.source_counts.resolve(spec.num_classes, "source_counts")?;
    let tgt_counts = spec.target_counts.resolve(spec.num_classes, "target_counts")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Array1<f64> = (0..spec.dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.dot(&v).sqrt().max(1e-12);
        v / n
    };
    let means: Vec<Array1<f64>> = (0..spec.num_classes).map(|_| unit(&mut rng) * spec.separation).collect();
    let offset = unit(&mut rng) * spec.shift;

    let draw = |counts: &[usize], shift: &Array1<f64>, std: f64, rng: &mut ChaCha8Rng| {
        let noise = Normal::new(0.0, std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let mut items = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let x: Vec<f64> = (0..spec.dim).map(|j| means[c][j] + shift[j] + noise.sample(rng)).collect();
                items.push((c, x));
            }
        }
        Ok::<_, Error>(items)
    };
    let zero = Array1::zeros(spec.dim);
    let src_items = draw(&src_counts, &zero, spec.noise_std, &mut rng)?;
    let tgt_items = draw(&tgt_counts, &offset, spec.noise_std * spec.target_scale, &mut rng)?;
    let shape = [1, 1, spec.dim];
    let copy = |x: &Vec<f64>, out: &mut [f64]| out.copy_from_slice(x);
    let source = assemble(src_items, &mut rng, DomainTag::Source, spec.num_classes, shape, copy)?;
    let target = assemble(tgt_items, &mut rng, DomainTag::Target, spec.num_classes, shape, copy)?;
    Ok((source, target))
}

// Seven-segment template in unit coordinates (x right, y down).
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((0.3, 0.2), (0.7, 0.2)), // a: top
    ((0.7, 0.2), (0.7, 0.5)), // b: upper right
    ((0.7, 0.5), (0.7, 0.8)), // c: lower right
    ((0.3, 0.8), (0.7, 0.8)), // d: bottom
    ((0.3, 0.5), (0.3, 0.8)), // e: lower left
    ((0.3, 0.2), (0.3, 0.5)), // f: upper left
    ((0.3, 0.5), (0.7, 0.5)), // g: middle
];

// Segment masks per digit, bit i = SEGMENTS[i].
const DIGIT_SEGMENTS: [u8; 10] = [
    0b0111111, // 0: abcdef
    0b0000110, // 1: bc
    0b1011011, // 2: abdeg
    0b1001111, // 3: abcdg
    0b1100110, // 4: bcfg
    0b1101101, // 5: acdfg
    0b1111101, // 6: acdefg
    0b0000111, // 7: abc
    0b1111111, // 8
    0b1101111, // 9: abcdfg
];

fn point_segment_distance(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Render one glyph into `out` (`size x size`, values clipped to `[0, 1]`).
fn render_digit(class: usize, style: &DigitStyle, size: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mask = DIGIT_SEGMENTS[class % DIGIT_SEGMENTS.len()];
    let segs: Vec<((f64, f64), (f64, f64))> = SEGMENTS
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, &((ax, ay), (bx, by)))| {
            let w = style.wobble;
            (
                (ax + w * gauss(rng), ay + w * gauss(rng)),
                (bx + w * gauss(rng), by + w * gauss(rng)),
            )
        })
        .collect();
    let angle = (style.rotation_deg + style.rotation_jitter_deg * gauss(rng)).to_radians();
    let scale = 1.0 + style.scale_jitter * gauss(rng);
    let tx = style.translate * rng.random_range(-1.0..=1.0);
    let ty = style.translate * rng.random_range(-1.0..=1.0);
    let stroke = (style.stroke + style.stroke_jitter * gauss(rng)).max(0.02);
    let (sin, cos) = angle.sin_cos();
    let soft = 0.5 / size as f64;
    for r in 0..size {
        for c in 0..size {
            // pixel center -> template coordinates (inverse of slant, rotate, scale, translate)
            let x = (c as f64 + 0.5) / size as f64 - 0.5 - tx;
            let y = (r as f64 + 0.5) / size as f64 - 0.5 - ty;
            let (x, y) = (x / scale, y / scale);
            let (x, y) = (cos * x + sin * y, -sin * x + cos * y);
            let x = x + style.slant * y;
            let (x, y) = (x + 0.5, y + 0.5);
            let d = segs.iter().map(|&(a, b)| point_segment_distance(x, y, a, b)).fold(f64::INFINITY, f64::min);
            let ink = ((stroke / 2.0 - d) / soft + 0.5).clamp(0.0, 1.0);
            let v = style.background + style.contrast * ink + style.noise_std * gauss(rng);
            out[r * size + c] = v.clamp(0.0, 1.0);
        }
    }
}

fn make_digits(spec: &DigitSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(2..=10).contains(&spec.num_classes) {
        return Err(Error::Config(format!("digits support 2..=10 classes, got {}", spec.num_classes)));
    }
    if spec.size < 4 {
        return Err(Error::Config(format!("digits image size must be >= 4, got {}", spec.size)));
    }
    let src_counts = spec.source_counts.resolve(spec.num_classes, "source_counts")?;
    let tgt_counts = spec.target_counts.resolve(spec.num_classes, "target_counts")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [spec.size, spec.size, 1];
    let build = |counts: &[usize], style: &DigitStyle, domain: DomainTag, rng: &mut ChaCha8Rng| {
        let mut items = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let mut img = vec![0.0; spec.size * spec.size];
                render_digit(c, style, spec.size, rng, &mut img);
                items.push((c, img));
            }
        }
        assemble(items, rng, domain, spec.num_classes, shape, |x, out| out.copy_from_slice(x))
    };
    let source = build(&src_counts, &spec.source_style, DomainTag::Source, &mut rng)?;
    let target = build(&tgt_counts, &spec.target_style, DomainTag::Target, &mut rng)?;
    Ok((source, target))
}
