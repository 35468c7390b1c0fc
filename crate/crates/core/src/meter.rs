//! Operation counters used as latency, energy and memory proxies.

use serde::{Deserialize, Serialize};

use crate::nn::{ActivationCache, CachePolicy};

/// Running totals for one operation or one whole run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    /// Samples pushed through a forward pass.
    pub forward_samples: u64,
    /// Samples whose loss contributed to a backward pass.
    pub backward_samples: u64,
    pub backward_passes: u64,
    /// Forward passes that retained activations for a backward pass.
    pub backward_caches: u64,
    /// BN running-statistic merges (one per layer per batch).
    pub stat_merges: u64,
    /// Largest retained-activation count seen in any single pass.
    pub peak_retained: usize,
}

impl Usage {
    pub fn record_forward(&mut self, cache: &ActivationCache) {
        self.forward_samples += cache.batch_size() as u64;
        if cache.policy() == CachePolicy::ForBackward {
            self.backward_caches += 1;
        }
        self.peak_retained = self.peak_retained.max(cache.retained());
    }

    pub fn record_backward(&mut self, contributing_samples: usize) {
        self.backward_passes += 1;
        self.backward_samples += contributing_samples as u64;
    }

    pub fn absorb(&mut self, other: &Usage) {
        self.forward_samples += other.forward_samples;
        self.backward_samples += other.backward_samples;
        self.backward_passes += other.backward_passes;
        self.backward_caches += other.backward_caches;
        self.stat_merges += other.stat_merges;
        self.peak_retained = self.peak_retained.max(other.peak_retained);
    }

    /// Compute proxy: a backward sample is weighted as three forward samples.
    pub fn compute_proxy(&self) -> u64 {
        self.forward_samples + 3 * self.backward_samples
    }
}
