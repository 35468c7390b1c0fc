//! Decoupled BN adaptation over a cache of unlabeled samples.
//!
//! 1. Estimate the domain feature of the cache and restore the nearest pool
//!    candidate.
//! 2. Statistics phase: forward-only passes at `stats_batch`, folding each
//!    batch's BN statistics into the running ones.
//! 3. Parameter phase: entropy minimisation on gamma/beta at `param_batch`,
//!    using running statistics and skipping samples with entropy `>= tau`.

use serde::{Deserialize, Serialize};

use crate::batchnorm::{merge_stats, BnSnapshot};
use crate::error::{Result, TtaError};
use crate::meter::Usage;
use crate::nn::{entropy_logit_grad, softmax_entropy, BnMode, CachePolicy, Model};
use crate::pool::{CandidatePool, DomainFeature};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub cache_size: usize,
    pub stats_batch: usize,
    pub param_batch: usize,
    pub lr: f64,
    /// History weight when merging batch statistics.
    pub stats_momentum: f64,
    /// Entropy filter threshold as a fraction of `ln C`.
    pub tau_coeff: f64,
    pub param_passes: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            cache_size: 128,
            stats_batch: 16,
            param_batch: 1,
            lr: 1e-3,
            stats_momentum: 0.9,
            tau_coeff: 0.4,
            param_passes: 1,
        }
    }
}

impl AdaptConfig {
    /// Tuned for the 32-input, 10-class desk task: a 128-sample cache, 16-row
    /// statistics batches and two passes of single-sample updates.
    pub fn desk() -> Self {
        Self { lr: 0.05, stats_momentum: 0.5, param_passes: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TtaError::InvalidArgument(m.into()));
        if self.stats_batch < 2 || self.cache_size < self.stats_batch {
            return bad("need cache_size >= stats_batch >= 2");
        }
        if self.param_batch == 0 {
            return bad("param_batch must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.stats_momentum > 0.0 && self.stats_momentum < 1.0) {
            return bad("stats_momentum outside (0, 1)");
        }
        if !(self.tau_coeff > 0.0) {
            return bad("tau_coeff must be positive");
        }
        Ok(())
    }

    pub fn tau(&self, class_count: usize) -> f64 {
        self.tau_coeff * (class_count as f64).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPhaseOutcome {
    pub steps: usize,
    pub filtered_out: usize,
    pub survivors: usize,
    pub losses: Vec<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub selected_candidate: u64,
    pub selection_distance: f64,
    pub stats_batches: usize,
    pub param_steps: usize,
    pub samples_filtered_out: usize,
    pub param_survivors: usize,
    pub losses: Vec<f64>,
    pub param_phase_failed: bool,
    pub usage: Usage,
    pub stats_usage: Usage,
    pub param_usage: Usage,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub report: AdaptReport,
    /// BN state after adaptation, ready for the progressive pool.
    pub snapshot: BnSnapshot,
    /// Feature of the cached samples, stored alongside `snapshot`.
    pub feature: DomainFeature,
}

/// Full adaptation on `cached` (exactly `cfg.cache_size` rows). `model`
/// ends up carrying the adapted BN state. Labels never enter here.
pub fn adapt(model: &mut Model, pool: &CandidatePool, cached: &Tensor, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if cached.rows() != cfg.cache_size {
        return Err(TtaError::InvalidArgument(format!(
            "cache holds {} samples, expected {}",
            cached.rows(),
            cfg.cache_size
        )));
    }
    let mut usage = Usage::default();
    let feature = pool.estimate_feature(model, cached, cfg.stats_batch, &mut usage)?;
    let chosen = pool.select(&feature)?;
    let selection_distance = chosen.feature.distance(&feature);
    model.restore_bn(&chosen.snapshot)?;

    let mut stats_usage = Usage::default();
    let stats_batches = stats_phase(model, cached, cfg, &mut stats_usage)?;
    let mut param_usage = Usage::default();
    let param = param_phase(model, cached, cfg, &mut param_usage)?;
    usage.absorb(&stats_usage);
    usage.absorb(&param_usage);

    let report = AdaptReport {
        selected_candidate: chosen.id,
        selection_distance,
        stats_batches,
        param_steps: param.steps,
        samples_filtered_out: param.filtered_out,
        param_survivors: param.survivors,
        losses: param.losses,
        param_phase_failed: param.failed,
        usage,
        stats_usage,
        param_usage,
    };
    Ok(AdaptOutcome { report, snapshot: model.snapshot_bn(), feature })
}

/// Forward-only statistics update over `⌊N / stats_batch⌋` consecutive
/// batches. Returns the number of batches merged.
pub fn stats_phase(model: &mut Model, cached: &Tensor, cfg: &AdaptConfig, usage: &mut Usage) -> Result<usize> {
    cfg.validate()?;
    let batches = cached.rows() / cfg.stats_batch;
    if batches == 0 {
        return Err(TtaError::InvalidArgument("cache smaller than one statistics batch".into()));
    }
    for b in 0..batches {
        let batch = cached.slice_rows(b * cfg.stats_batch, (b + 1) * cfg.stats_batch)?;
        let (_, cache) = model.forward(&batch, BnMode::BatchStats, CachePolicy::None)?;
        usage.record_forward(&cache);
        let merged = model
            .bn_layers()
            .zip(cache.batch_stats())
            .map(|(bn, s)| merge_stats(&bn.stats(), s, cfg.stats_momentum))
            .collect::<Result<Vec<_>>>()?;
        for (bn, s) in model.bn_layers_mut().zip(merged) {
            bn.set_stats(s)?;
            usage.stat_merges += 1;
        }
    }
    Ok(batches)
}

/// Filtered entropy minimisation on BN gamma/beta. Running statistics are
/// left alone. A non-finite loss rolls the model back to its state on entry
/// and marks the phase failed.
pub fn param_phase(model: &mut Model, cached: &Tensor, cfg: &AdaptConfig, usage: &mut Usage) -> Result<ParamPhaseOutcome> {
    cfg.validate()?;
    let tau = cfg.tau(model.class_count());
    let entry = model.snapshot_bn();
    let mut out = ParamPhaseOutcome { steps: 0, filtered_out: 0, survivors: 0, losses: Vec::new(), failed: false };
    for _ in 0..cfg.param_passes {
        let mut start = 0;
        while start < cached.rows() {
            let end = (start + cfg.param_batch).min(cached.rows());
            let chunk = cached.slice_rows(start, end)?;
            start = end;
            let (logits, cache) = match model.forward(&chunk, BnMode::RunningStats, CachePolicy::ForBackward) {
                Ok(r) => r,
                Err(TtaError::NonFinite(_)) => return rollback(model, &entry, out),
                Err(e) => return Err(e),
            };
            usage.record_forward(&cache);
            let (_, entropies) = softmax_entropy(&logits)?;
            let keep: Vec<bool> = entropies.iter().map(|h| *h < tau).collect();
            let survivors = keep.iter().filter(|k| **k).count();
            out.filtered_out += keep.len() - survivors;
            if survivors == 0 {
                continue;
            }
            let loss = entropies.iter().zip(&keep).filter(|(_, k)| **k).map(|(h, _)| h).sum::<f64>() / survivors as f64;
            if !loss.is_finite() {
                return rollback(model, &entry, out);
            }
            let mut grad = entropy_logit_grad(&logits)?;
            let c = grad.cols();
            for (row, k) in grad.values_mut().chunks_mut(c).zip(&keep) {
                let scale = if *k { 1.0 / survivors as f64 } else { 0.0 };
                row.iter_mut().for_each(|g| *g *= scale);
            }
            let grads = model.backward_bn_affine(&cache, &grad)?;
            usage.record_backward(survivors);
            model.apply_bn_step(&grads, cfg.lr)?;
            if model.bn_layers().any(|bn| bn.gamma.iter().chain(&bn.beta).any(|v| !v.is_finite())) {
                return rollback(model, &entry, out);
            }
            out.steps += 1;
            out.survivors += survivors;
            out.losses.push(loss);
        }
    }
    Ok(out)
}

fn rollback(model: &mut Model, entry: &BnSnapshot, mut out: ParamPhaseOutcome) -> Result<ParamPhaseOutcome> {
    model.restore_bn(entry)?;
    out.failed = true;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledStep {
    pub survivors: usize,
    pub loss: Option<f64>,
}

/// Conventional per-batch update: one forward pass with batch statistics
/// and retained activations, one filtered-entropy step on gamma/beta, and a
/// running-statistics merge from the same batch. The whole batch is
/// backpropagated with filtered rows masked to zero, so every row counts as
/// a backward sample.
pub fn coupled_step(model: &mut Model, batch: &Tensor, cfg: &AdaptConfig, usage: &mut Usage) -> Result<CoupledStep> {
    let tau = cfg.tau(model.class_count());
    let (logits, cache) = model.forward(batch, BnMode::BatchStats, CachePolicy::ForBackward)?;
    usage.record_forward(&cache);
    let (_, entropies) = softmax_entropy(&logits)?;
    let keep: Vec<bool> = entropies.iter().map(|h| *h < tau).collect();
    let survivors = keep.iter().filter(|k| **k).count();
    let mut grad = entropy_logit_grad(&logits)?;
    let c = grad.cols();
    for (row, k) in grad.values_mut().chunks_mut(c).zip(&keep) {
        let scale = if *k { 1.0 / survivors as f64 } else { 0.0 };
        row.iter_mut().for_each(|g| *g *= scale);
    }
    let grads = model.backward_bn_affine(&cache, &grad)?;
    usage.record_backward(batch.rows());
    let mut loss = None;
    if survivors > 0 {
        model.apply_bn_step(&grads, cfg.lr)?;
        loss = Some(entropies.iter().zip(&keep).filter(|(_, k)| **k).map(|(h, _)| h).sum::<f64>() / survivors as f64);
    }
    let merged = model
        .bn_layers()
        .zip(cache.batch_stats())
        .map(|(bn, s)| merge_stats(&bn.stats(), s, cfg.stats_momentum))
        .collect::<Result<Vec<_>>>()?;
    for (bn, s) in model.bn_layers_mut().zip(merged) {
        bn.set_stats(s)?;
        usage.stat_merges += 1;
    }
    Ok(CoupledStep { survivors, loss })
}
