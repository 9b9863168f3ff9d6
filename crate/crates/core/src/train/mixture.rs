use rand::Rng;

use crate::error::{usage, Result};

/// Datasets sampled with probability proportional to their size.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMixture {
    sizes: Vec<usize>,
    probs: Vec<f64>,
}

impl DatasetMixture {
    pub fn new(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return usage("dataset mixture needs at least one dataset");
        }
        if sizes.contains(&0) {
            return usage(format!("dataset sizes must be positive: {sizes:?}"));
        }
        let total: usize = sizes.iter().sum();
        let probs = sizes.iter().map(|&s| s as f64 / total as f64).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            probs,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Picks a dataset index using exactly one uniform draw from `rng`.
    pub fn sample_task<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        self.probs.len() - 1
    }
}
