//! Dataset manifests: one JSON file listing every example (id, label, domain,
//! payload location) with SHA-256 checksums for every referenced payload.
//!
//! Payloads are either rows of a single packed little-endian `f64` file,
//! lossless PNG images (8-bit, scaled to `[0, 1]`), or inline tabular rows.

use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DomainTag};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Payload {
    /// Row `index` of the manifest's packed array file.
    Packed { index: usize },
    /// A PNG file relative to the manifest directory.
    Image { path: String, sha256: String },
    Inline { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: u64,
    pub label: Option<usize>,
    pub domain: DomainTag,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackedFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub domain: DomainTag,
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    pub packed: Option<PackedFile>,
    pub records: Vec<Record>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadLayout {
    Packed,
    Png,
    Inline,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write `dataset` as `<dir>/<name>.manifest.json` plus its payload files.
/// Returns the manifest path.
pub fn write_manifest(dataset: &Dataset, dir: &Path, name: &str, layout: PayloadLayout) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shape = dataset.image_shape();
    let labels = dataset.evaluation_labels().map(|l| l.to_vec());
    let mut packed = None;
    let mut records = Vec::with_capacity(dataset.len());
    if layout == PayloadLayout::Packed {
        let mut bytes = Vec::with_capacity(dataset.images().len() * 8);
        for v in dataset.images().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let file = format!("{name}.f64le.bin");
        write(&dir.join(&file), &bytes)?;
        packed = Some(PackedFile { path: file, sha256: sha256_hex(&bytes) });
    }
    if layout == PayloadLayout::Png && !(shape[2] == 1 || shape[2] == 3) {
        return Err(Error::Config(format!("PNG payloads need 1 or 3 channels, got {}", shape[2])));
    }
    for (pos, &id) in dataset.ids().iter().enumerate() {
        let payload = match layout {
            PayloadLayout::Packed => Payload::Packed { index: pos },
            PayloadLayout::Inline => Payload::Inline { values: dataset.image(pos).iter().copied().collect() },
            PayloadLayout::Png => {
                let file = format!("{name}_{id}.png");
                let img = dataset.image(pos);
                let raw: Vec<u8> = img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
                let color = if shape[2] == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
                let mut encoded = Vec::new();
                image::ImageEncoder::write_image(
                    image::codecs::png::PngEncoder::new(&mut encoded),
                    &raw,
                    shape[1] as u32,
                    shape[0] as u32,
                    color,
                )
                .map_err(|e| Error::Format(e.to_string()))?;
                write(&dir.join(&file), &encoded)?;
                Payload::Image { path: file, sha256: sha256_hex(&encoded) }
            }
        };
        records.push(Record { id, label: labels.as_ref().map(|l| l[pos]), domain: dataset.domain(), payload });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        domain: dataset.domain(),
        num_classes: dataset.num_classes(),
        image_shape: shape,
        packed,
        records,
    };
    let path = dir.join(format!("{name}.manifest.json"));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write(&path, text.as_bytes())?;
    Ok(path)
}

/// Load a manifest, verifying every checksum.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "{}: manifest version {} is not supported (expected {MANIFEST_VERSION})",
            path.display(),
            manifest.format_version
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let shape = manifest.image_shape;
    let per: usize = shape.iter().product();
    let packed_values: Option<Vec<f64>> = match &manifest.packed {
        Some(p) => {
            let bytes = read(&base.join(&p.path))?;
            if sha256_hex(&bytes) != p.sha256 {
                return Err(Error::Format(format!("checksum mismatch for {}", p.path)));
            }
            if bytes.len() % 8 != 0 {
                return Err(Error::Format(format!("{} is not a whole number of f64 values", p.path)));
            }
            Some(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        }
        None => None,
    };
    let n = manifest.records.len();
    let mut images = Array4::zeros((n, shape[0], shape[1], shape[2]));
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let flat = images.as_slice_mut().expect("fresh array");
    for (i, rec) in manifest.records.iter().enumerate() {
        if rec.domain != manifest.domain {
            return Err(Error::Format(format!("record {} has domain {:?} in a {:?} manifest", rec.id, rec.domain, manifest.domain)));
        }
        let out = &mut flat[i * per..(i + 1) * per];
        match &rec.payload {
            Payload::Packed { index } => {
                let values = packed_values
                    .as_ref()
                    .ok_or_else(|| Error::Format(format!("record {} references a packed file but none is declared", rec.id)))?;
                let row = values
                    .get(index * per..(index + 1) * per)
                    .ok_or_else(|| Error::Format(format!("record {} packed index {index} out of range", rec.id)))?;
                out.copy_from_slice(row);
            }
            Payload::Inline { values } => {
                if values.len() != per {
                    return Err(Error::Format(format!("record {} has {} values, expected {per}", rec.id, values.len())));
                }
                out.copy_from_slice(values);
            }
            Payload::Image { path: rel, sha256 } => {
                let bytes = read(&base.join(rel))?;
                if &sha256_hex(&bytes) != sha256 {
                    return Err(Error::Format(format!("checksum mismatch for {rel}")));
                }
                let img = image::load_from_memory(&bytes).map_err(|e| Error::Format(format!("{rel}: {e}")))?;
                if img.height() as usize != shape[0] || img.width() as usize != shape[1] {
                    return Err(Error::Format(format!("{rel} is {}x{}, expected {}x{}", img.height(), img.width(), shape[0], shape[1])));
                }
                let raw = match shape[2] {
                    1 => img.to_luma8().into_raw(),
                    3 => img.to_rgb8().into_raw(),
                    c => return Err(Error::Format(format!("PNG payloads need 1 or 3 channels, manifest says {c}"))),
                };
                for (o, &b) in out.iter_mut().zip(&raw) {
                    *o = b as f64 / 255.0;
                }
            }
        }
        ids.push(rec.id);
        labels.push(rec.label);
    }
    let labels = if labels.iter().all(Option::is_some) {
        Some(labels.into_iter().map(|l| l.expect("checked")).collect())
    } else if labels.iter().all(Option::is_none) {
        None
    } else {
        return Err(Error::Format("manifest mixes labeled and unlabeled records".into()));
    };
    Dataset::new(manifest.domain, manifest.num_classes, images, ids, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{BlobSpec, Counts, DigitSpec};
    use crate::data::{make_synthetic_shift, SyntheticSpec};

    #[test]
    fn packed_and_inline_round_trip_bit_exactly() {
        let spec = SyntheticSpec::Blobs(BlobSpec { source_counts: Counts::Uniform(4), target_counts: Counts::Uniform(3), ..BlobSpec::default() });
        let (_, target) = make_synthetic_shift(&spec, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for layout in [PayloadLayout::Packed, PayloadLayout::Inline] {
            let path = write_manifest(&target, dir.path(), &format!("t{layout:?}"), layout).unwrap();
            let back = load_manifest(&path).unwrap();
            assert_eq!(back.images(), target.images());
            assert_eq!(back.ids(), target.ids());
            assert_eq!(back.domain(), DomainTag::Target);
            assert_eq!(back.evaluation_labels(), target.evaluation_labels());
        }
    }

    #[test]
    fn png_payloads_round_trip_to_8_bit_precision() {
        let spec = SyntheticSpec::Digits(DigitSpec { source_counts: Counts::Uniform(1), target_counts: Counts::Uniform(1), ..DigitSpec::default() });
        let (source, _) = make_synthetic_shift(&spec, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(&source, dir.path(), "src", PayloadLayout::Png).unwrap();
        let back = load_manifest(&path).unwrap();
        for (a, b) in back.images().iter().zip(source.images()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn tampered_payload_fails_checksum() {
        let spec = SyntheticSpec::Blobs(BlobSpec { source_counts: Counts::Uniform(2), target_counts: Counts::Uniform(2), ..BlobSpec::default() });
        let (source, _) = make_synthetic_shift(&spec, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(&source, dir.path(), "s", PayloadLayout::Packed).unwrap();
        let bin = dir.path().join("s.f64le.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&bin, bytes).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }
}
