//! Experiment documents: one TOML file describing the task, the source fit,
//! the initial pool, the stream schedule and the policy settings.
//!
//! ```toml
//! seed = 7
//!
//! [schedule]
//! domains = 8
//! span = 2000
//!
//! [policy]
//! kind = "on_demand"
//!
//! [detector]
//! threshold = 0.06
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdaptConfig;
use crate::detector::DetectorConfig;
use crate::error::{Result, TtaError};
use crate::harness::{PolicyConfig, RunSettings};
use crate::nn::{Model, ModelSpec};
use crate::pool::{build_initial_pool, CandidatePool, PoolBuildConfig};
use crate::stream::{
    accuracy, fit_source_model, generate, split_stream, CorruptionKind, DomainSpec, FitConfig, GroundTruth, LabeledSet,
    Observation, Segment, StreamSchedule, TaskSpec, DESK_FLOOR, DESK_HIDDEN, DESK_LATENT, DESK_NOISE, DESK_SEPARATION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub class_count: usize,
    pub separation: f64,
    pub noise: f64,
    pub floor: f64,
    pub hidden: Vec<usize>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            latent_dim: DESK_LATENT,
            class_count: 10,
            separation: DESK_SEPARATION,
            noise: DESK_NOISE,
            floor: DESK_FLOOR,
            hidden: DESK_HIDDEN.to_vec(),
        }
    }
}

impl TaskConfig {
    pub fn task(&self, seed: u64) -> Result<TaskSpec> {
        TaskSpec::generate(
            self.input_dim,
            self.latent_dim,
            self.class_count,
            self.separation,
            self.noise,
            self.floor,
            seed,
        )
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::mlp(self.input_dim, &self.hidden, self.class_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub kind: CorruptionKind,
    pub severity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolSection {
    /// Domains mixed into the pool-building set. Empty means the clean
    /// domain plus every shift kind at severity 2.
    pub domains: Vec<DomainEntry>,
    pub samples_per_domain: usize,
    /// Cluster count; 0 means one per domain.
    pub clusters: usize,
    pub build: PoolBuildConfig,
}

impl Default for PoolSection {
    fn default() -> Self {
        Self { domains: Vec::new(), samples_per_domain: 700, clusters: 0, build: PoolBuildConfig::default() }
    }
}

impl PoolSection {
    pub fn domain_specs(&self) -> Result<Vec<DomainSpec>> {
        if self.domains.is_empty() {
            let mut out = vec![DomainSpec::identity(0)];
            for (i, k) in CorruptionKind::SHIFTS.iter().enumerate() {
                out.push(DomainSpec::new(i as u32 + 1, *k, 2)?);
            }
            return Ok(out);
        }
        self.domains.iter().enumerate().map(|(i, d)| DomainSpec::new(i as u32, d.kind, d.severity)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    /// Explicit segments. When empty, a random schedule is drawn from the
    /// (kind, severity) pairs whose source accuracy drop reaches `min_drop`.
    pub segments: Vec<SegmentEntry>,
    pub lead_in: usize,
    pub domains: usize,
    pub span: usize,
    pub min_drop: f64,
    /// Samples per domain used to measure source accuracy drops.
    pub probe_samples: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { segments: Vec::new(), lead_in: 1000, domains: 8, span: 2000, min_drop: 0.15, probe_samples: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub fit: FitConfig,
    pub pool: PoolSection,
    pub schedule: ScheduleSection,
    pub policy: PolicyConfig,
    pub detector: DetectorConfig,
    pub adapt: AdaptConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskConfig::default(),
            fit: FitConfig::default(),
            pool: PoolSection::default(),
            schedule: ScheduleSection::default(),
            policy: PolicyConfig::OnDemand,
            detector: DetectorConfig::default(),
            adapt: AdaptConfig::desk(),
        }
    }
}

/// Source accuracy on one domain and its drop from clean accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainDrop {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub accuracy: f64,
    pub drop: f64,
}

/// Everything a run needs, materialised from an [`ExperimentConfig`].
#[derive(Debug, Clone)]
pub struct Prepared {
    pub task: TaskSpec,
    pub source: Model,
    pub clean_accuracy: f64,
    pub pool: CandidatePool,
    pub schedule: StreamSchedule,
    pub drops: Vec<DomainDrop>,
}

impl Prepared {
    pub fn stream(&self) -> (Vec<Observation>, Vec<GroundTruth>) {
        split_stream(generate(&self.task, &self.schedule).collect())
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TtaError::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TtaError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.settings().validate()?;
        let s = &self.schedule;
        if s.segments.is_empty() && (s.domains == 0 || s.span == 0 || s.lead_in == 0) {
            return Err(TtaError::InvalidArgument("random schedule needs lead_in, domains and span > 0".into()));
        }
        if self.pool.samples_per_domain == 0 {
            return Err(TtaError::InvalidArgument("pool.samples_per_domain must be positive".into()));
        }
        Ok(())
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings { policy: self.policy, detector: self.detector.clone(), adapt: self.adapt.clone() }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig { seed: self.seed, ..self.fit.clone() }
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        self.task.task(self.seed)
    }

    pub fn fit_source(&self) -> Result<(TaskSpec, Model, f64)> {
        let task = self.task_spec()?;
        let fit = fit_source_model(&task, self.task.model_spec(), &self.fit_config(), true)?;
        Ok((task, fit.model, fit.clean_accuracy))
    }

    /// Labeled pool-building set: `samples_per_domain` rows from each pool
    /// domain, concatenated.
    pub fn pool_trainset(&self, task: &TaskSpec) -> Result<LabeledSet> {
        let parts: Vec<LabeledSet> = self
            .pool
            .domain_specs()?
            .iter()
            .map(|d| task.sample(d, self.pool.samples_per_domain, self.seed ^ (0x706f_6f6c << 8) ^ u64::from(d.id)))
            .collect();
        LabeledSet::concat(&parts)
    }

    pub fn build_pool(&self, task: &TaskSpec, source: &Model) -> Result<CandidatePool> {
        let train = self.pool_trainset(task)?;
        let clusters = match self.pool.clusters {
            0 => self.pool.domain_specs()?.len(),
            k => k,
        };
        let cfg = PoolBuildConfig { clusters, seed: self.seed, ..self.pool.build.clone() };
        Ok(build_initial_pool(source, &train, &cfg)?.pool)
    }

    /// Source accuracy drop of every shift kind at severities 1 to 5.
    pub fn measure_drops(&self, task: &TaskSpec, source: &Model) -> Result<(f64, Vec<DomainDrop>)> {
        let n = self.schedule.probe_samples;
        let clean = accuracy(source, &task.sample(&DomainSpec::identity(0), n, self.seed ^ 0x636c_6561_6e))?;
        let mut drops = Vec::new();
        for kind in CorruptionKind::SHIFTS {
            for severity in 1..=5 {
                let d = DomainSpec::new(0, kind, severity)?;
                let acc = accuracy(source, &task.sample(&d, n, self.seed ^ 0x7072_6f62_65))?;
                drops.push(DomainDrop { kind, severity, accuracy: acc, drop: clean - acc });
            }
        }
        Ok((clean, drops))
    }

    pub fn build_schedule(&self, drops: &[DomainDrop]) -> Result<StreamSchedule> {
        let s = &self.schedule;
        if !s.segments.is_empty() {
            let segments = s
                .segments
                .iter()
                .enumerate()
                .map(|(i, e)| Ok(Segment { domain: DomainSpec::new(i as u32, e.kind, e.severity)?, length: e.length }))
                .collect::<Result<Vec<_>>>()?;
            let schedule = StreamSchedule { segments, seed: self.seed };
            schedule.validate()?;
            return Ok(schedule);
        }
        let eligible: Vec<(CorruptionKind, u8)> =
            drops.iter().filter(|d| d.drop >= s.min_drop).map(|d| (d.kind, d.severity)).collect();
        StreamSchedule::random_from(&eligible, s.domains, s.lead_in, s.span, self.seed)
    }

    /// Fits the source model, builds the pool and draws the schedule.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let (task, source, clean_accuracy) = self.fit_source()?;
        let pool = self.build_pool(&task, &source)?;
        let drops = if self.schedule.segments.is_empty() { self.measure_drops(&task, &source)?.1 } else { Vec::new() };
        let schedule = self.build_schedule(&drops)?;
        Ok(Prepared { task, source, clean_accuracy, pool, schedule, drops })
    }
}
