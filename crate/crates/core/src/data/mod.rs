//! Datasets, synthetic domain-shift generators, augmentation policies, batch
//! iteration and on-disk manifests.

pub mod augment;
mod batching;
pub mod manifest;
pub mod synthetic;

pub use augment::{AugmentConfig, AugmentationPolicy, PolicyKind};
pub use batching::{batches, BatchIter};
pub use synthetic::{make_synthetic_shift, SyntheticSpec};

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

/// An ordered, immutable collection of images with stable instance ids.
///
/// Labels on a target dataset are evaluation-only: training code must go
/// through [`Dataset::training_labels`], which refuses target data, and every
/// read through [`Dataset::evaluation_labels`] is counted so tests can assert
/// that adaptation never touched them.
#[derive(Debug)]
pub struct Dataset {
    domain: DomainTag,
    num_classes: usize,
    images: Array4<f64>,
    ids: Vec<u64>,
    labels: Option<Vec<usize>>,
    position: HashMap<u64, usize>,
    label_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            domain: self.domain,
            num_classes: self.num_classes,
            images: self.images.clone(),
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            position: self.position.clone(),
            label_reads: AtomicUsize::new(0),
        }
    }
}

impl Dataset {
    pub fn new(
        domain: DomainTag,
        num_classes: usize,
        images: Array4<f64>,
        ids: Vec<u64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = images.shape()[0];
        if ids.len() != n {
            return Err(Error::Input(format!("{} ids for {n} images", ids.len())));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Input(format!("{} labels for {n} images", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= num_classes) {
                return Err(Error::Input(format!("label {bad} out of range for {num_classes} classes")));
            }
        }
        let mut position = HashMap::with_capacity(n);
        for (i, &id) in ids.iter().enumerate() {
            if position.insert(id, i).is_some() {
                return Err(Error::Input(format!("duplicate instance id {id}")));
            }
        }
        let images = images.as_standard_layout().into_owned();
        Ok(Self { domain, num_classes, images, ids, labels, position, label_reads: AtomicUsize::new(0) })
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `(H, W, C)` shared by every image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn images(&self) -> &Array4<f64> {
        &self.images
    }

    pub fn image(&self, pos: usize) -> ArrayView3<'_, f64> {
        self.images.index_axis(Axis(0), pos)
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.position.get(&id).copied()
    }

    /// Stack the images at the given positions into a batch.
    pub fn gather(&self, positions: &[usize]) -> Array4<f64> {
        self.images.select(Axis(0), positions)
    }

    /// Stack already-transformed images into a batch.
    pub fn stack(images: &[Array3<f64>]) -> Array4<f64> {
        let views: Vec<_> = images.iter().map(|i| i.view()).collect();
        ndarray::stack(Axis(0), &views).expect("images share one shape")
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Labels usable for supervised training. Only source data qualifies.
    pub fn training_labels(&self) -> Result<&[usize]> {
        match (self.domain, &self.labels) {
            (DomainTag::Source, Some(l)) => Ok(l),
            (DomainTag::Source, None) => Err(Error::State("source dataset carries no labels".into())),
            (DomainTag::Target, _) => {
                Err(Error::State("target labels are evaluation-only and cannot be used for training".into()))
            }
        }
    }

    /// Ground truth for evaluation and pseudo-label analysis. Every call is counted.
    pub fn evaluation_labels(&self) -> Option<&[usize]> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.labels.as_deref()
    }

    /// Number of [`Dataset::evaluation_labels`] calls so far.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(domain: DomainTag) -> Dataset {
        Dataset::new(domain, 2, Array4::zeros((3, 2, 2, 1)), vec![10, 11, 12], Some(vec![0, 1, 0])).unwrap()
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let err = Dataset::new(DomainTag::Source, 2, Array4::zeros((2, 1, 1, 1)), vec![1, 1], None).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn target_labels_are_gated() {
        let t = tiny(DomainTag::Target);
        assert!(t.training_labels().is_err());
        assert_eq!(t.label_reads(), 0);
        assert_eq!(t.evaluation_labels().unwrap(), &[0, 1, 0]);
        assert_eq!(t.label_reads(), 1);
        assert_eq!(tiny(DomainTag::Source).training_labels().unwrap(), &[0, 1, 0]);
    }

    #[test]
    fn positions_follow_ids() {
        let d = tiny(DomainTag::Source);
        assert_eq!(d.position_of(11), Some(1));
        assert_eq!(d.position_of(99), None);
        assert_eq!(d.gather(&[2, 0]).shape(), &[2, 2, 2, 1]);
    }
}
