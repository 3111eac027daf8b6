//! History pool of generated fakes shown to the global discriminators.
//!
//! Classic GAN stabilizer: each incoming fake either fills the pool, or with
//! probability one half swaps with a random stored fake (the critic then
//! sees the older one). Region discriminators are fed current-batch patches
//! instead, because pooled patches would mismatch the current boxes.

use ndarray::{Array3, Axis};
use rand_chacha::ChaCha8Rng;

use crate::nn::Batch;
use crate::rng::{uniform, uniform_usize};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct ImagePool<F: Scalar> {
    capacity: usize,
    items: Vec<Array3<F>>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> ImagePool<F> {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        ImagePool {
            capacity,
            items: Vec::with_capacity(capacity),
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Replace the draw stream (re-derived at every epoch boundary so that
    /// checkpoint resume reproduces the exact sequence).
    pub fn reseed(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Route a batch of fakes through the pool, one image at a time.
    pub fn query(&mut self, batch: &Batch<F>) -> Batch<F> {
        if self.capacity == 0 {
            return batch.clone();
        }
        let mut out = batch.clone();
        for i in 0..batch.dim().0 {
            let img = batch.index_axis(Axis(0), i).to_owned();
            let replacement = if self.items.len() < self.capacity {
                self.items.push(img.clone());
                img
            } else if uniform(&mut self.rng) < 0.5 {
                let k = uniform_usize(&mut self.rng, 0, self.capacity - 1);
                let old = self.items[k].clone();
                self.items[k] = img;
                old
            } else {
                img
            };
            out.index_axis_mut(Axis(0), i).assign(&replacement);
        }
        out
    }

    /// Stored images, oldest first; used by the checkpoint writer.
    pub fn items(&self) -> &[Array3<F>] {
        &self.items
    }

    pub fn restore_items(&mut self, items: Vec<Array3<F>>) {
        assert!(items.len() <= self.capacity);
        self.items = items;
    }
}
