//! Bounded FIFO queue of momentum-side latents used as negatives by both
//! views.

use std::collections::VecDeque;

use crate::backend::Tensor;
use crate::error::{Error, Result};

const UNIT_TOLERANCE: f32 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    queue: VecDeque<Vec<f32>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("memory bank capacity and dim must be positive".into()));
        }
        Ok(MemoryBank {
            capacity,
            dim,
            queue: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.queue.iter().map(|v| v.as_slice())
    }

    /// Appends `vectors` in order and evicts the oldest entries beyond
    /// capacity. Nothing changes if any vector is invalid.
    pub fn enqueue_batch(&mut self, vectors: &[Vec<f32>]) -> Result<()> {
        if vectors.len() > self.capacity {
            return Err(Error::InvalidArgument(format!(
                "batch of {} vectors exceeds bank capacity {}",
                vectors.len(),
                self.capacity
            )));
        }
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != self.dim {
                return Err(Error::shape("enqueue_batch", &[self.dim], &[v.len()]));
            }
            let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32;
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidArgument(format!("vector {i} has norm {norm}, expected unit norm")));
            }
        }
        for v in vectors {
            self.queue.push_back(v.clone());
        }
        while self.queue.len() > self.capacity {
            self.queue.pop_front();
        }
        Ok(())
    }

    /// Snapshot of the current contents as `[len, dim]`.
    pub fn negatives(&self) -> Tensor {
        let data = self.queue.iter().flatten().copied().collect();
        Tensor::new(vec![self.queue.len(), self.dim], data).expect("consistent dims")
    }

    /// Restores a bank from a `[len, dim]` snapshot.
    pub fn from_snapshot(capacity: usize, snapshot: &Tensor) -> Result<Self> {
        let (n, d) = snapshot.dims2()?;
        let mut bank = Self::new(capacity, d)?;
        if n > capacity {
            return Err(Error::Checkpoint(format!("bank snapshot of {n} exceeds capacity {capacity}")));
        }
        bank.queue = (0..n).map(|r| snapshot.row(r).to_vec()).collect();
        Ok(bank)
    }
}
