//! Candidate pool of BN snapshots and the domain features used to choose
//! among them.
//!
//! A domain feature is the mean output of one BN layer (the second by
//! default), computed batch by batch and averaged over batches. Every feature
//! in a pool is measured in one frame: the pool's reference BN state, which is
//! the source model's. Candidates store the feature of the data they were
//! fitted on; selection picks the candidate nearest in Euclidean distance to
//! the feature of freshly cached samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batchnorm::{merge_stats, BnSnapshot};
use crate::error::{Result, TtaError};
use crate::kmeans::{kmeans, KMeansConfig, KMeansResult};
use crate::meter::Usage;
use crate::nn::{cross_entropy, BnMode, CachePolicy, Model};
use crate::stream::LabeledSet;
use crate::tensor::Tensor;

pub const DEFAULT_FEATURE_LAYER: usize = 2;
pub const DEFAULT_CAPACITY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    CandidateStored,
    StreamEstimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainFeature {
    pub values: Vec<f64>,
    pub source: FeatureSource,
}

impl DomainFeature {
    pub fn distance(&self, other: &DomainFeature) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn stored(self) -> Self {
        Self { source: FeatureSource::CandidateStored, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    SourceModel,
    InitialCluster { cluster: usize },
    Progressive { adaptation: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    pub provenance: Provenance,
    pub feature: DomainFeature,
    pub snapshot: BnSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    fingerprint: String,
    /// BN state every feature is measured under.
    reference: BnSnapshot,
    feature_layer: usize,
    capacity: Option<usize>,
    next_id: u64,
    candidates: Vec<Candidate>,
}

impl CandidatePool {
    /// Empty pool measuring features under `reference`. `feature_layer` is
    /// the 1-based ordinal of the BN layer features are read from.
    pub fn new(reference: BnSnapshot, feature_layer: usize, capacity: Option<usize>) -> Self {
        Self { fingerprint: reference.fingerprint.clone(), reference, feature_layer, capacity, next_id: 0, candidates: Vec::new() }
    }

    pub fn reference(&self) -> &BnSnapshot {
        &self.reference
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn feature_layer(&self) -> usize {
        self.feature_layer
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    pub(crate) fn from_parts(
        reference: BnSnapshot,
        feature_layer: usize,
        capacity: Option<usize>,
        candidates: Vec<Candidate>,
    ) -> Result<Self> {
        let fingerprint = reference.fingerprint.clone();
        let mut ids: Vec<u64> = candidates.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(TtaError::InvalidArgument("duplicate candidate ids".into()));
        }
        if let Some(c) = candidates.iter().find(|c| c.snapshot.fingerprint != fingerprint) {
            return Err(TtaError::Fingerprint { expected: fingerprint, actual: c.snapshot.fingerprint.clone() });
        }
        let next_id = ids.last().map_or(0, |m| m + 1);
        if capacity.is_some_and(|c| candidates.len() > c) {
            return Err(TtaError::InvalidArgument("pool holds more candidates than its capacity".into()));
        }
        Ok(Self { fingerprint, reference, feature_layer, capacity, next_id, candidates })
    }

    /// Appends a candidate and returns its id.
    pub fn push(&mut self, snapshot: BnSnapshot, feature: DomainFeature, provenance: Provenance) -> Result<u64> {
        if snapshot.fingerprint != self.fingerprint {
            return Err(TtaError::Fingerprint { expected: self.fingerprint.clone(), actual: snapshot.fingerprint });
        }
        if let Some(first) = self.candidates.first() {
            if first.feature.values.len() != feature.values.len() {
                return Err(TtaError::Shape("feature dim differs from pool".into()));
            }
        }
        if let Some(cap) = self.capacity {
            if self.candidates.len() >= cap {
                let oldest = self
                    .candidates
                    .iter()
                    .position(|c| matches!(c.provenance, Provenance::Progressive { .. }))
                    .ok_or_else(|| TtaError::InvalidArgument("pool at capacity with nothing evictable".into()))?;
                self.candidates.remove(oldest);
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.candidates.push(Candidate { id, provenance, feature: feature.stored(), snapshot });
        Ok(id)
    }

    /// Stores the result of a runtime adaptation as a new candidate, evicting
    /// the oldest progressive candidate when the pool is full.
    pub fn add_progressive(&mut self, snapshot: BnSnapshot, feature: DomainFeature, adaptation: u64) -> Result<u64> {
        self.push(snapshot, feature, Provenance::Progressive { adaptation })
    }

    /// Nearest candidate by Euclidean feature distance; lowest id on ties.
    pub fn select(&self, feature: &DomainFeature) -> Result<&Candidate> {
        let mut best: Option<(&Candidate, f64)> = None;
        for c in &self.candidates {
            if c.feature.values.len() != feature.values.len() {
                return Err(TtaError::Shape("feature dim differs from pool".into()));
            }
            let d = c.feature.distance(feature);
            best = match best {
                Some((b, bd)) if bd < d || (bd == d && b.id < c.id) => Some((b, bd)),
                _ => Some((c, d)),
            };
        }
        best.map(|(c, _)| c).ok_or(TtaError::EmptyPool)
    }

    /// Feature of `samples` in this pool's frame: `model`'s dense weights
    /// with the reference BN state.
    pub fn estimate_feature(&self, model: &Model, samples: &Tensor, batch_size: usize, usage: &mut Usage) -> Result<DomainFeature> {
        if model.fingerprint() != self.fingerprint {
            return Err(TtaError::Fingerprint { expected: self.fingerprint.clone(), actual: model.fingerprint() });
        }
        let mut probe = model.clone();
        probe.restore_bn(&self.reference)?;
        extract_feature(&probe, samples, batch_size, self.feature_layer, usage)
    }

    /// Candidates sorted by distance to `feature`, nearest first.
    pub fn ranked(&self, feature: &DomainFeature) -> Vec<(&Candidate, f64)> {
        let mut out: Vec<_> = self.candidates.iter().map(|c| (c, c.feature.distance(feature))).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)));
        out
    }
}

/// Mean output of BN layer `feature_layer` over `⌊N / batch_size⌋` batches,
/// normalised with the model's running statistics. Leftover rows are
/// dropped. Forward-only.
pub fn extract_feature(
    model: &Model,
    samples: &Tensor,
    batch_size: usize,
    feature_layer: usize,
    usage: &mut Usage,
) -> Result<DomainFeature> {
    if batch_size < 2 {
        return Err(TtaError::InvalidArgument("feature batch size must be >= 2".into()));
    }
    let n = samples.rows();
    if n < batch_size {
        return Err(TtaError::InvalidArgument(format!("{n} samples, batch size {batch_size}")));
    }
    let k = n / batch_size;
    let mut acc: Option<Vec<f64>> = None;
    for b in 0..k {
        let batch = samples.slice_rows(b * batch_size, (b + 1) * batch_size)?;
        let (out, cache) = model.forward_through_bn(&batch, feature_layer, BnMode::RunningStats)?;
        usage.record_forward(&cache);
        let mu = out.column_means()?;
        match acc.as_mut() {
            None => acc = Some(mu),
            Some(a) => a.iter_mut().zip(&mu).for_each(|(x, y)| *x += y),
        }
    }
    let mut values = acc.expect("k >= 1");
    values.iter_mut().for_each(|v| *v /= k as f64);
    Ok(DomainFeature { values, source: FeatureSource::StreamEstimated })
}

/// Per-sample clustering features: each row's output of BN layer
/// `feature_layer` under the model's running statistics.
pub fn per_sample_features(
    model: &Model,
    samples: &Tensor,
    feature_layer: usize,
    usage: &mut Usage,
) -> Result<Vec<Vec<f64>>> {
    let (out, cache) = model.forward_through_bn(samples, feature_layer, BnMode::RunningStats)?;
    usage.record_forward(&cache);
    Ok(out.iter_rows().map(<[f64]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolBuildConfig {
    pub clusters: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub stats_momentum: f64,
    pub feature_layer: usize,
    pub capacity: Option<usize>,
    pub include_source: bool,
    /// Subtract each class's mean feature before clustering, so clusters
    /// follow domains rather than classes.
    pub center_by_class: bool,
    pub seed: u64,
}

impl Default for PoolBuildConfig {
    fn default() -> Self {
        Self {
            clusters: 3,
            epochs: 2,
            lr: 0.01,
            batch_size: 16,
            stats_momentum: 0.9,
            feature_layer: DEFAULT_FEATURE_LAYER,
            capacity: Some(DEFAULT_CAPACITY),
            include_source: true,
            center_by_class: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InitialPool {
    pub pool: CandidatePool,
    /// Cluster index of each trainset row, in the trainset's original order.
    pub assignments: Vec<usize>,
    pub clustering: KMeansResult,
    pub usage: Usage,
}

/// Clusters the training set by per-sample BN features, fits BN layers on
/// each cluster with labels, and stores one candidate per cluster (plus the
/// untouched source model when `include_source`).
pub fn build_initial_pool(source: &Model, trainset: &LabeledSet, cfg: &PoolBuildConfig) -> Result<InitialPool> {
    if cfg.clusters < 2 {
        return Err(TtaError::InvalidArgument("need at least 2 clusters".into()));
    }
    let mut usage = Usage::default();
    let mut order: Vec<usize> = (0..trainset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x706f_6f6c));
    let shuffled = trainset.subset(&order)?;

    let mut feats = per_sample_features(source, &shuffled.inputs, cfg.feature_layer, &mut usage)?;
    if cfg.center_by_class {
        center_by_class(&mut feats, &shuffled.labels);
    }
    let clustering = kmeans(&feats, &KMeansConfig::new(cfg.clusters, cfg.seed))?;
    let mut assignments = vec![0; trainset.len()];
    for (pos, &row) in order.iter().enumerate() {
        assignments[row] = clustering.assignments[pos];
    }

    let mut pool = CandidatePool::new(source.snapshot_bn(), cfg.feature_layer, cfg.capacity);
    if cfg.include_source {
        let f = pool.estimate_feature(source, &shuffled.inputs, cfg.batch_size, &mut usage)?;
        pool.push(source.snapshot_bn(), f, Provenance::SourceModel)?;
    }
    for cluster in 0..cfg.clusters {
        let idx: Vec<usize> = (0..shuffled.len()).filter(|&i| clustering.assignments[i] == cluster).collect();
        if idx.len() < 2 * cfg.batch_size {
            return Err(TtaError::Clustering(format!(
                "cluster {cluster} has {} samples, need {}",
                idx.len(),
                2 * cfg.batch_size
            )));
        }
        let subset = shuffled.subset(&idx)?;
        let mut model = source.clone();
        fit_bn_supervised(&mut model, &subset, cfg, cluster as u64, &mut usage)?;
        let f = pool.estimate_feature(&model, &subset.inputs, cfg.batch_size, &mut usage)?;
        pool.push(model.snapshot_bn(), f, Provenance::InitialCluster { cluster })?;
    }
    Ok(InitialPool { pool, assignments, clustering, usage })
}

fn center_by_class(feats: &mut [Vec<f64>], labels: &[usize]) {
    let dim = feats.first().map_or(0, Vec::len);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (f, &y) in feats.iter().zip(labels) {
        counts[y] += 1;
        sums[y].iter_mut().zip(f).for_each(|(s, v)| *s += v);
    }
    for (f, &y) in feats.iter_mut().zip(labels) {
        let n = counts[y] as f64;
        f.iter_mut().zip(&sums[y]).for_each(|(v, s)| *v -= s / n);
    }
}

/// Supervised BN-only fitting: cross-entropy gradient steps on gamma/beta,
/// running statistics merged per batch. Dense layers stay frozen.
fn fit_bn_supervised(
    model: &mut Model,
    data: &LabeledSet,
    cfg: &PoolBuildConfig,
    salt: u64,
    usage: &mut Usage,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(salt.wrapping_mul(0x9e37_79b9)));
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let batch = data.subset(chunk)?;
            let (logits, cache) = model.forward(&batch.inputs, BnMode::BatchStats, CachePolicy::ForBackward)?;
            usage.record_forward(&cache);
            let (loss, grad) = cross_entropy(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(TtaError::NonFinite("supervised BN loss"));
            }
            let grads = model.backward_bn_affine(&cache, &grad)?;
            usage.record_backward(chunk.len());
            model.apply_bn_step(&grads, cfg.lr)?;
            for (bn, stats) in model.bn_layers_mut().zip(cache.batch_stats()) {
                bn.set_stats(merge_stats(&bn.stats(), stats, cfg.stats_momentum)?)?;
                usage.stat_merges += 1;
            }
        }
    }
    Ok(())
}
