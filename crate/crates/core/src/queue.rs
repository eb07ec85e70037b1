//! Fixed-capacity FIFO of key embeddings.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numerics::{check_dims, norm, Matrix};

pub const DEFAULT_QUEUE_CAPACITY: usize = 16384;

/// Keys older than the newest `capacity` are evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
    total_enqueued: u64,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("queue_capacity", "must be >= 1"));
        }
        if dim == 0 {
            return Err(Error::invalid("embedding_dim", "must be >= 1"));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            total_enqueued: 0,
        })
    }

    /// Rebuilds a queue from stored rows (oldest first).
    pub(crate) fn restore(
        capacity: usize,
        dim: usize,
        rows: &Matrix,
        total_enqueued: u64,
    ) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        if rows.rows() > capacity {
            return Err(Error::corrupt("queue", "more entries than capacity"));
        }
        if !rows.is_empty() {
            check_dims(dim, rows.cols())?;
        }
        q.entries.extend(rows.iter_rows().map(<[f64]>::to_vec));
        q.total_enqueued = total_enqueued;
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_enqueued(&self) -> u64 {
        self.total_enqueued
    }

    /// Appends `batch` in order, evicting the oldest keys beyond capacity.
    /// Nothing is modified if any row fails validation.
    pub fn enqueue_batch<R: AsRef<[f64]>>(&mut self, batch: &[R]) -> Result<()> {
        for row in batch {
            let row = row.as_ref();
            check_dims(self.dim, row.len())?;
            let n = norm(row);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::NotNormalized(n));
            }
        }
        for row in batch {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(row.as_ref().to_vec());
        }
        self.total_enqueued += batch.len() as u64;
        Ok(())
    }

    /// Owned copy of the current entries, oldest first.
    pub fn negatives_snapshot(&self) -> Matrix {
        self.to_matrix()
    }

    /// All current entries as the sample pool for k-means.
    pub fn sample_pool(&self) -> Result<Matrix> {
        if self.is_empty() {
            return Err(Error::EmptyQueue);
        }
        Ok(self.to_matrix())
    }

    fn to_matrix(&self) -> Matrix {
        Matrix::from_rows(self.dim, self.entries.iter()).expect("queue rows share a dimension")
    }
}
