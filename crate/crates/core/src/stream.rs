//! Synthetic classification task, parametric corruptions that define
//! domains, domain-sequenced streams, and supervised fitting of the source
//! model.
//!
//! Labels and domain ids are carried in [`GroundTruth`], separate from the
//! [`Observation`]s the adaptation path consumes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batchnorm::merge_stats;
use crate::error::{Result, TtaError};
use crate::nn::{argmax_rows, cross_entropy, BnMode, CachePolicy, Model, ModelSpec};
use crate::tensor::Tensor;

/// Clean-accuracy bar every fitted source model must clear.
pub const SOURCE_ACCURACY_BAR: f64 = 0.95;

pub const DESK_LATENT: usize = 8;
pub const DESK_SEPARATION: f64 = 1.0;
pub const DESK_NOISE: f64 = 0.3;
pub const DESK_FLOOR: f64 = 0.1;
pub const DESK_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub class_count: usize,
    /// One latent prototype per class, each of length `latent_dim`.
    pub prototypes: Vec<Vec<f64>>,
    /// `input_dim x latent_dim` map from latent to input space, row-major.
    pub embedding: Vec<Vec<f64>>,
    /// Within-class spread in latent space.
    pub noise: f64,
    /// Isotropic noise added in input space.
    pub floor: f64,
    pub seed: u64,
}

impl TaskSpec {
    /// Prototypes drawn i.i.d. from `N(0, separation²)` per latent
    /// coordinate; embedding entries from `N(0, 1 / input_dim)`.
    pub fn generate(
        input_dim: usize,
        latent_dim: usize,
        class_count: usize,
        separation: f64,
        noise: f64,
        floor: f64,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 || class_count < 2 || !(separation > 0.0) || !(noise >= 0.0) || !(floor >= 0.0) {
            return Err(TtaError::InvalidArgument("degenerate task parameters".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proto = Normal::new(0.0, separation).expect("positive separation");
        let prototypes = (0..class_count)
            .map(|_| (0..latent_dim).map(|_| proto.sample(&mut rng)).collect())
            .collect();
        let mix = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).expect("positive scale");
        let embedding = (0..input_dim).map(|_| (0..latent_dim).map(|_| mix.sample(&mut rng)).collect()).collect();
        Ok(Self { input_dim, latent_dim, class_count, prototypes, embedding, noise, floor, seed })
    }

    /// Desk-scale default task: 32 inputs, 10 classes.
    pub fn desk(seed: u64) -> Self {
        Self::generate(32, DESK_LATENT, 10, DESK_SEPARATION, DESK_NOISE, DESK_FLOOR, seed).expect("valid defaults")
    }

    /// Default architecture for this task: two hidden Dense-BN-ReLU blocks.
    pub fn desk_model(&self) -> ModelSpec {
        ModelSpec::mlp(self.input_dim, &DESK_HIDDEN, self.class_count)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prototypes.len() != self.class_count
            || self.prototypes.iter().any(|p| p.len() != self.latent_dim)
            || self.embedding.len() != self.input_dim
            || self.embedding.iter().any(|r| r.len() != self.latent_dim)
        {
            return Err(TtaError::InvalidArgument("task tables do not match task dims".into()));
        }
        Ok(())
    }

    fn clean_sample(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
        let y = rng.random_range(0..self.class_count);
        let latent: Vec<f64> = self.prototypes[y]
            .iter()
            .map(|p| {
                let z: f64 = StandardNormal.sample(rng);
                p + self.noise * z
            })
            .collect();
        let x = self
            .embedding
            .iter()
            .map(|row| {
                let z: f64 = StandardNormal.sample(rng);
                row.iter().zip(&latent).map(|(a, l)| a * l).sum::<f64>() + self.floor * z
            })
            .collect();
        (x, y)
    }

    /// `n` labelled samples from `domain`, deterministic in `seed`.
    pub fn sample(&self, domain: &DomainSpec, n: usize, seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corruption = domain.corruption(self.input_dim);
        let mut values = Vec::with_capacity(n * self.input_dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (mut x, y) = self.clean_sample(&mut rng);
            corruption.apply(&mut x, &mut rng);
            values.extend_from_slice(&x);
            labels.push(y);
        }
        LabeledSet {
            inputs: Tensor::matrix(n, self.input_dim, values).expect("finite samples"),
            labels,
            domains: vec![domain.id; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Identity,
    AdditiveGaussian,
    Brightness,
    Contrast,
    Occlusion,
    Permute,
}

impl CorruptionKind {
    pub const SHIFTS: [CorruptionKind; 5] = [
        CorruptionKind::AdditiveGaussian,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Occlusion,
        CorruptionKind::Permute,
    ];

    /// Kind-specific parameter at severities 0..=5; index 0 is the identity.
    pub fn grid(self) -> [f64; 6] {
        match self {
            CorruptionKind::Identity => [0.0; 6],
            CorruptionKind::AdditiveGaussian => severity::GAUSSIAN_SIGMA,
            CorruptionKind::Brightness => severity::BRIGHTNESS_OFFSET,
            CorruptionKind::Contrast => severity::CONTRAST_FACTOR,
            CorruptionKind::Occlusion => severity::OCCLUSION_FRACTION,
            CorruptionKind::Permute => severity::PERMUTE_FRACTION,
        }
    }

    pub fn parameter(self, severity: u8) -> f64 {
        self.grid()[usize::from(severity.min(5))]
    }
}

/// Frozen severity grids.
pub mod severity {
    pub const GAUSSIAN_SIGMA: [f64; 6] = [0.0, 0.3, 0.4, 0.5, 0.6, 0.7];
    pub const BRIGHTNESS_OFFSET: [f64; 6] = [0.0, 0.3, 0.38, 0.45, 0.52, 0.6];
    pub const CONTRAST_FACTOR: [f64; 6] = [1.0, 0.55, 0.5, 0.46, 0.43, 0.4];
    pub const OCCLUSION_FRACTION: [f64; 6] = [0.0, 0.25, 0.35, 0.45, 0.5, 0.55];
    pub const PERMUTE_FRACTION: [f64; 6] = [0.0, 0.15, 0.2, 0.25, 0.3, 0.4];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: u32,
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl DomainSpec {
    pub fn identity(id: u32) -> Self {
        Self { id, kind: CorruptionKind::Identity, severity: 0 }
    }

    pub fn new(id: u32, kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(TtaError::InvalidArgument(format!("severity {severity} > 5")));
        }
        Ok(Self { id, kind, severity })
    }

    pub fn is_identity(&self) -> bool {
        self.kind == CorruptionKind::Identity || self.severity == 0
    }

    pub fn label(&self) -> String {
        format!("{:?}-{}", self.kind, self.severity).to_lowercase()
    }

    fn corruption(&self, dim: usize) -> Corruption {
        if self.is_identity() {
            return Corruption::None;
        }
        let p = self.kind.parameter(self.severity);
        match self.kind {
            CorruptionKind::Identity => Corruption::None,
            CorruptionKind::AdditiveGaussian => Corruption::Noise(p),
            CorruptionKind::Brightness => Corruption::Offset(p),
            CorruptionKind::Contrast => Corruption::Contrast(p),
            CorruptionKind::Occlusion => {
                let count = ((p * dim as f64).round() as usize).min(dim);
                let mut idx: Vec<usize> = (0..dim).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(0x4f43_434c ^ dim as u64));
                idx.truncate(count);
                Corruption::Occlude(idx)
            }
            CorruptionKind::Permute => {
                // One fixed dimension order shared by all severities, so the
                // displaced sets are nested and a domain is reproducible.
                let count = ((p * dim as f64).round() as usize).clamp(2, dim);
                let mut idx: Vec<usize> = (0..dim).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5045_524d ^ dim as u64));
                let chosen = &idx[..count];
                let mut perm: Vec<usize> = (0..dim).collect();
                for (i, &from) in chosen.iter().enumerate() {
                    perm[from] = chosen[(i + 1) % count];
                }
                Corruption::Permute(perm)
            }
        }
    }
}

enum Corruption {
    None,
    Noise(f64),
    Offset(f64),
    Contrast(f64),
    Occlude(Vec<usize>),
    Permute(Vec<usize>),
}

impl Corruption {
    fn apply(&self, x: &mut [f64], rng: &mut ChaCha8Rng) {
        match self {
            Corruption::None => {}
            Corruption::Noise(s) => x.iter_mut().for_each(|v| {
                let z: f64 = StandardNormal.sample(rng);
                *v += s * z;
            }),
            Corruption::Offset(b) => x.iter_mut().for_each(|v| *v += b),
            Corruption::Contrast(c) => {
                let m = x.iter().sum::<f64>() / x.len() as f64;
                x.iter_mut().for_each(|v| *v = m + c * (*v - m));
            }
            Corruption::Occlude(dims) => dims.iter().for_each(|&i| x[i] = 0.0),
            Corruption::Permute(perm) => {
                let src = x.to_vec();
                for (i, &p) in perm.iter().enumerate() {
                    x[i] = src[p];
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub domain: DomainSpec,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSchedule {
    pub segments: Vec<Segment>,
    pub seed: u64,
}

impl StreamSchedule {
    pub fn single(domain: DomainSpec, length: usize, seed: u64) -> Self {
        Self { segments: vec![Segment { domain, length }], seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() || self.segments.iter().any(|s| s.length == 0) {
            return Err(TtaError::InvalidArgument("schedule needs non-empty segments".into()));
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.length).sum()
    }

    /// Start index of every segment after the first.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut acc = 0;
        let mut out = Vec::new();
        for s in &self.segments {
            if acc > 0 {
                out.push(acc);
            }
            acc += s.length;
        }
        out
    }

    /// A clean lead-in of `lead_in` samples followed by `domains` shifted
    /// segments of `span` samples, never repeating a kind back to back.
    pub fn random_shifts(
        kinds: &[CorruptionKind],
        severities: &[u8],
        domains: usize,
        lead_in: usize,
        span: usize,
        seed: u64,
    ) -> Result<Self> {
        let pool: Vec<(CorruptionKind, u8)> =
            kinds.iter().flat_map(|&k| severities.iter().map(move |&s| (k, s))).collect();
        Self::random_from(&pool, domains, lead_in, span, seed)
    }

    /// Like [`StreamSchedule::random_shifts`], drawing each segment from an
    /// explicit list of (kind, severity) pairs.
    pub fn random_from(
        choices: &[(CorruptionKind, u8)],
        domains: usize,
        lead_in: usize,
        span: usize,
        seed: u64,
    ) -> Result<Self> {
        let first = choices.first().map(|c| c.0);
        if choices.iter().all(|c| Some(c.0) == first) {
            return Err(TtaError::InvalidArgument("need choices spanning >= 2 kinds".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_4946_5453);
        let mut segments = vec![Segment { domain: DomainSpec::identity(0), length: lead_in }];
        let mut last = CorruptionKind::Identity;
        for i in 0..domains {
            let (kind, sev) = loop {
                let c = choices[rng.random_range(0..choices.len())];
                if c.0 != last {
                    break c;
                }
            };
            last = kind;
            segments.push(Segment { domain: DomainSpec::new(i as u32 + 1, kind, sev)?, length: span });
        }
        Ok(Self { segments, seed })
    }
}

/// What the deployed model sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub index: usize,
    pub sample: Vec<f64>,
}

/// What only the evaluator sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruth {
    pub label: usize,
    pub domain_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamEvent {
    pub observation: Observation,
    pub truth: GroundTruth,
}

/// Generates the stream described by `schedule`, sample by sample.
pub fn generate<'a>(task: &'a TaskSpec, schedule: &'a StreamSchedule) -> impl Iterator<Item = StreamEvent> + 'a {
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut index = 0;
    schedule.segments.iter().flat_map(move |seg| {
        let corruption = seg.domain.corruption(task.input_dim);
        let events: Vec<StreamEvent> = (0..seg.length)
            .map(|_| {
                let (mut x, y) = task.clean_sample(&mut rng);
                corruption.apply(&mut x, &mut rng);
                let ev = StreamEvent {
                    observation: Observation { index, sample: x },
                    truth: GroundTruth { label: y, domain_id: seg.domain.id },
                };
                index += 1;
                ev
            })
            .collect();
        events
    })
}

/// Splits a materialised stream into the observation and truth channels.
pub fn split_stream(events: Vec<StreamEvent>) -> (Vec<Observation>, Vec<GroundTruth>) {
    events.into_iter().map(|e| (e.observation, e.truth)).unzip()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<u32>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn concat(parts: &[LabeledSet]) -> Result<Self> {
        let inputs = crate::tensor::vstack(&parts.iter().map(|p| &p.inputs).collect::<Vec<_>>())?;
        Ok(Self {
            inputs,
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            domains: parts.iter().flat_map(|p| p.domains.iter().copied()).collect(),
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
        })
    }

    pub fn shuffled(&self, seed: u64) -> Result<Self> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.subset(&idx)
    }
}

/// Fraction of rows the model classifies correctly with its running stats.
pub fn accuracy(model: &Model, data: &LabeledSet) -> Result<f64> {
    let preds = predict(model, &data.inputs)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

pub fn predict(model: &Model, inputs: &Tensor) -> Result<Vec<usize>> {
    let (logits, _) = model.forward(inputs, BnMode::RunningStats, CachePolicy::None)?;
    Ok(argmax_rows(&logits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub stats_momentum: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
            train_samples: 4000,
            eval_samples: 2000,
            stats_momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FittedSource {
    pub model: Model,
    pub clean_accuracy: f64,
    pub train_accuracy: f64,
}

/// Supervised full-parameter training on clean task data. This is the only
/// place dense weights are ever updated.
///
/// `require_bar` enforces [`SOURCE_ACCURACY_BAR`] on held-out clean data.
pub fn fit_source_model(task: &TaskSpec, spec: ModelSpec, cfg: &FitConfig, require_bar: bool) -> Result<FittedSource> {
    task.validate()?;
    if spec.input_dim() != task.input_dim || spec.class_count != task.class_count {
        return Err(TtaError::InvalidSpec("architecture does not match the task".into()));
    }
    if cfg.batch_size < 2 {
        return Err(TtaError::InvalidArgument("training batch size must be >= 2".into()));
    }
    let mut model = Model::init(spec, cfg.seed)?;
    let clean = DomainSpec::identity(0);
    let train = task.sample(&clean, cfg.train_samples, cfg.seed ^ 0x7472_6169_6e);
    let eval = task.sample(&clean, cfg.eval_samples, cfg.seed ^ 0x6576_616c);
    train_supervised(&mut model, &train, cfg.epochs, cfg.lr, cfg.batch_size, cfg.stats_momentum, cfg.seed)?;
    let clean_accuracy = accuracy(&model, &eval)?;
    let train_accuracy = accuracy(&model, &train)?;
    if require_bar && clean_accuracy < SOURCE_ACCURACY_BAR {
        return Err(TtaError::SourceFit { accuracy: clean_accuracy, required: SOURCE_ACCURACY_BAR });
    }
    Ok(FittedSource { model, clean_accuracy, train_accuracy })
}

fn train_supervised(
    model: &mut Model,
    data: &LabeledSet,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    momentum: f64,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6570_6f63_68);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size).filter(|c| c.len() >= 2) {
            let batch = data.subset(chunk)?;
            let (logits, cache) = model.forward(&batch.inputs, BnMode::BatchStats, CachePolicy::ForBackward)?;
            let (loss, grad) = cross_entropy(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(TtaError::NonFinite("training loss"));
            }
            let (bn_grads, dense_grads) = model.backprop(&cache, &grad, true)?;
            model.apply_dense_step(&dense_grads, lr);
            model.apply_bn_step(&bn_grads, lr)?;
            for (bn, stats) in model.bn_layers_mut().zip(cache.batch_stats()) {
                let merged = merge_stats(&bn.stats(), stats, momentum)?;
                bn.set_stats(merged)?;
            }
        }
    }
    Ok(())
}
