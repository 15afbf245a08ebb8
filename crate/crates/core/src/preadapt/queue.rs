use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Fixed-capacity FIFO of `(embedding, posterior)` snapshots.
///
/// Slots are physical ring positions; once full, each insertion overwrites the
/// oldest slot. Stored values are plain copies and carry no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    embed_dim: usize,
    num_classes: usize,
    embeddings: Vec<f64>,
    posteriors: Vec<f64>,
    len: usize,
    write_cursor: usize,
}

/// `z` nearest and `z` furthest queue slots for one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSet {
    pub nearest: Vec<usize>,
    pub furthest: Vec<usize>,
}

impl MemoryQueue {
    pub fn new(capacity: usize, embed_dim: usize, num_classes: usize) -> Result<Self> {
        if capacity == 0 || embed_dim == 0 || num_classes == 0 {
            return Err(Error::Config("memory queue needs capacity, embed_dim and num_classes >= 1".into()));
        }
        Ok(Self {
            capacity,
            embed_dim,
            num_classes,
            embeddings: vec![0.0; capacity * embed_dim],
            posteriors: vec![0.0; capacity * num_classes],
            len: 0,
            write_cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn write_cursor(&self) -> usize {
        self.write_cursor
    }

    pub fn embedding(&self, slot: usize) -> &[f64] {
        assert!(slot < self.len, "slot {slot} out of range ({} filled)", self.len);
        &self.embeddings[slot * self.embed_dim..(slot + 1) * self.embed_dim]
    }

    pub fn posterior(&self, slot: usize) -> &[f64] {
        assert!(slot < self.len, "slot {slot} out of range ({} filled)", self.len);
        &self.posteriors[slot * self.num_classes..(slot + 1) * self.num_classes]
    }

    /// Slots from oldest to newest.
    pub fn slots_oldest_first(&self) -> Vec<usize> {
        if self.len < self.capacity {
            (0..self.len).collect()
        } else {
            (self.write_cursor..self.capacity).chain(0..self.write_cursor).collect()
        }
    }

    /// Insert a batch of rows in order.
    pub fn update(&mut self, embeddings: ArrayView2<f64>, posteriors: ArrayView2<f64>) -> Result<()> {
        if embeddings.nrows() != posteriors.nrows() {
            return Err(Error::Input(format!(
                "{} embeddings but {} posteriors",
                embeddings.nrows(),
                posteriors.nrows()
            )));
        }
        if embeddings.ncols() != self.embed_dim || posteriors.ncols() != self.num_classes {
            return Err(Error::Input(format!(
                "queue stores ({}, {}) rows, got ({}, {})",
                self.embed_dim,
                self.num_classes,
                embeddings.ncols(),
                posteriors.ncols()
            )));
        }
        for (e, p) in embeddings.rows().into_iter().zip(posteriors.rows()) {
            let slot = self.write_cursor;
            for (dst, &v) in self.embeddings[slot * self.embed_dim..].iter_mut().zip(e.iter()) {
                *dst = v;
            }
            for (dst, &v) in self.posteriors[slot * self.num_classes..].iter_mut().zip(p.iter()) {
                *dst = v;
            }
            self.write_cursor = (self.write_cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Squared Euclidean distance from `query` to every filled slot.
    pub fn squared_distances(&self, query: &[f64]) -> Vec<f64> {
        (0..self.len)
            .map(|s| self.embedding(s).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect()
    }
}

/// `z` nearest and `z` furthest slots by Euclidean distance; ties go to the
/// lower slot index.
pub fn find_neighbors(query: &[f64], queue: &MemoryQueue, z: usize) -> Result<NeighborSet> {
    if z == 0 {
        return Err(Error::Config("neighbor count z must be >= 1".into()));
    }
    if query.len() != queue.embed_dim {
        return Err(Error::Input(format!("query has dim {}, queue stores {}", query.len(), queue.embed_dim)));
    }
    if queue.len() < 2 * z {
        return Err(Error::State(format!(
            "memory queue holds {} entries but neighbor search needs {} (2z); warm up the queue first",
            queue.len(),
            2 * z
        )));
    }
    let dist = queue.squared_distances(query);
    if dist.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite embedding distance".into()));
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let nearest = order[..z].to_vec();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let furthest = order[..z].to_vec();
    Ok(NeighborSet { nearest, furthest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn insertion_preserves_order_until_full() {
        let mut q = MemoryQueue::new(8, 1, 2).unwrap();
        let e = Array2::from_shape_fn((5, 1), |(i, _)| i as f64);
        let p = Array2::from_shape_fn((5, 2), |(i, j)| if j == 0 { i as f64 / 10.0 } else { 1.0 - i as f64 / 10.0 });
        q.update(e.view(), p.view()).unwrap();
        assert_eq!(q.len(), 5);
        let vals: Vec<f64> = q.slots_oldest_first().iter().map(|&s| q.embedding(s)[0]).collect();
        assert_eq!(vals, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        for s in 0..5 {
            assert_eq!(q.posterior(s), p.row(s).as_slice().unwrap());
        }
    }

    #[test]
    fn fifo_overwrites_oldest() {
        let mut q = MemoryQueue::new(8, 1, 1).unwrap();
        for i in 0..10 {
            q.update(array![[i as f64]].view(), array![[1.0]].view()).unwrap();
        }
        assert_eq!(q.len(), 8);
        let vals: Vec<f64> = q.slots_oldest_first().iter().map(|&s| q.embedding(s)[0]).collect();
        assert_eq!(vals, (2..10).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut q = MemoryQueue::new(4, 2, 3).unwrap();
        assert!(q.update(array![[1.0]].view(), array![[1.0, 0.0, 0.0]].view()).is_err());
        assert!(q.update(array![[1.0, 2.0]].view(), array![[1.0, 0.0]].view()).is_err());
    }

    #[test]
    fn one_dimensional_line() {
        let mut q = MemoryQueue::new(4, 1, 1).unwrap();
        q.update(array![[0.0], [1.0], [2.0], [3.0]].view(), array![[1.0], [1.0], [1.0], [1.0]].view()).unwrap();
        let n = find_neighbors(&[0.0], &q, 1).unwrap();
        assert_eq!(n.nearest, vec![0]);
        assert_eq!(n.furthest, vec![3]);
    }

    #[test]
    fn ties_break_to_lower_slot() {
        let mut q = MemoryQueue::new(4, 1, 1).unwrap();
        q.update(array![[1.0], [-1.0], [1.0], [-1.0]].view(), array![[1.0], [1.0], [1.0], [1.0]].view()).unwrap();
        let n = find_neighbors(&[0.0], &q, 2).unwrap();
        assert_eq!(n.nearest, vec![0, 1]);
        assert_eq!(n.furthest, vec![0, 1]);
        assert_eq!(find_neighbors(&[0.0], &q, 2).unwrap(), n);
    }

    #[test]
    fn too_small_queue_is_a_state_error() {
        let mut q = MemoryQueue::new(4, 1, 1).unwrap();
        q.update(array![[0.0], [1.0], [2.0]].view(), array![[1.0], [1.0], [1.0]].view()).unwrap();
        assert!(matches!(find_neighbors(&[0.0], &q, 2), Err(Error::State(_))));
    }
}
