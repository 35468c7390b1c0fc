//! Batch-norm layer state: statistics (mean/variance) and affine parameters
//! (scale/shift), the momentum merge of batch statistics, and whole-model
//! BN snapshots.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtaError};

/// Default BN epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Mean and (biased) variance of one BN layer's input, per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Batch statistics over the rows of a `B × dim` row-major buffer.
    pub fn from_rows(values: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(TtaError::Shape(format!("{} values do not form rows of {dim}", values.len())));
        }
        let b = values.len() / dim;
        if b < 2 {
            return Err(TtaError::SingletonBatch(b));
        }
        let n = b as f64;
        let mut mean = vec![0.0; dim];
        for row in values.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in values.chunks(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        Ok(Self { mean, var })
    }
}

/// One BN layer: running statistics plus learnable `gamma`/`beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayerState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl BnLayerState {
    /// Identity-initialised layer: mean 0, variance 1, gamma 1, beta 0.
    pub fn identity(dim: usize, eps: f64) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn stats(&self) -> BnStats {
        BnStats { mean: self.running_mean.clone(), var: self.running_var.clone() }
    }

    pub fn set_stats(&mut self, stats: BnStats) -> Result<()> {
        if stats.dim() != self.dim() || stats.var.len() != self.dim() {
            return Err(TtaError::Shape(format!("stats dim {} vs layer dim {}", stats.dim(), self.dim())));
        }
        if stats.var.iter().any(|v| *v < 0.0) {
            return Err(TtaError::InvalidArgument("negative variance".into()));
        }
        self.running_mean = stats.mean;
        self.running_var = stats.var;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.beta.len() != d || self.running_mean.len() != d || self.running_var.len() != d {
            return Err(TtaError::Shape("BN arrays differ in length".into()));
        }
        if self.running_var.iter().any(|v| *v < 0.0) {
            return Err(TtaError::InvalidArgument("negative running variance".into()));
        }
        if !(self.eps > 0.0) {
            return Err(TtaError::InvalidArgument("BN eps must be positive".into()));
        }
        let all = self.running_mean.iter().chain(&self.running_var).chain(&self.gamma).chain(&self.beta);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(TtaError::NonFinite("BN layer state"));
        }
        Ok(())
    }
}

/// Folds the current batch statistics into the accumulated ones:
/// `merged = momentum * prev + (1 - momentum) * batch`.
///
/// `momentum` weights the history, so values near 1 move slowly.
pub fn merge_stats(prev: &BnStats, batch: &BnStats, momentum: f64) -> Result<BnStats> {
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(TtaError::InvalidArgument(format!("momentum {momentum} outside (0, 1)")));
    }
    if prev.dim() != batch.dim() || prev.var.len() != batch.var.len() || prev.dim() != prev.var.len() {
        return Err(TtaError::Shape(format!("merge of dim {} with {}", prev.dim(), batch.dim())));
    }
    if batch.var.iter().any(|v| *v < 0.0) {
        return Err(TtaError::InvalidArgument("negative batch variance".into()));
    }
    let fresh = 1.0 - momentum;
    let blend = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(s, x)| momentum * s + fresh * x).collect()
    };
    Ok(BnStats { mean: blend(&prev.mean, &batch.mean), var: blend(&prev.var, &batch.var) })
}

/// All BN layers of a model, tagged with the fingerprint of its spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnSnapshot {
    pub fingerprint: String,
    pub layers: Vec<BnLayerState>,
}

impl BnSnapshot {
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| 4 * l.dim()).sum()
    }
}
