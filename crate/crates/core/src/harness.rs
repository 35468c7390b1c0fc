//! Policy execution over an observation stream, resource counters, trace
//! files and evaluation against the hidden schedule.
//!
//! [`run`] only ever sees [`Observation`]s. Labels and domain ids enter in
//! [`evaluate`], which fills the `correct` column of the trace.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::adapter::{adapt, coupled_step, AdaptConfig, AdaptReport};
use crate::detector::{Decision, DetectorConfig, ShiftDetector};
use crate::error::{Result, TtaError};
use crate::meter::Usage;
use crate::nn::{argmax_rows, softmax_entropy, BnMode, CachePolicy, Model};
use crate::pool::CandidatePool;
use crate::stream::{GroundTruth, Observation, StreamSchedule};
use crate::tensor::Tensor;

/// Samples before a boundary used as the reference accuracy for that shift.
pub const PRE_SHIFT_WINDOW: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    SourceOnly,
    /// Adapt on every batch of `batch` samples, then predict it with that
    /// batch's own statistics.
    Continual { batch: usize },
    OnDemand,
}

impl PolicyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyConfig::SourceOnly => "source",
            PolicyConfig::Continual { .. } => "continual",
            PolicyConfig::OnDemand => "ondemand",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub policy: PolicyConfig,
    pub detector: DetectorConfig,
    pub adapt: AdaptConfig,
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.adapt.validate()?;
        if let PolicyConfig::Continual { batch } = self.policy {
            if batch < 2 {
                return Err(TtaError::InvalidArgument("continual batch must be >= 2".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceCounters {
    pub forward_samples: u64,
    pub backward_samples: u64,
    pub backward_passes: u64,
    pub peak_retained: usize,
    pub stat_merges: u64,
    pub adaptations: u64,
    pub samples_cached: u64,
}

impl ResourceCounters {
    fn absorb(&mut self, u: &Usage) {
        self.forward_samples += u.forward_samples;
        self.backward_samples += u.backward_samples;
        self.backward_passes += u.backward_passes;
        self.stat_merges += u.stat_merges;
        self.peak_retained = self.peak_retained.max(u.peak_retained);
    }

    /// Forward samples plus three per backward sample.
    pub fn compute_proxy(&self) -> u64 {
        self.forward_samples + 3 * self.backward_samples
    }
}

/// One row of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub prediction: usize,
    pub correct: Option<bool>,
    pub entropy: f64,
    pub ema: Option<f64>,
    pub baseline: Option<f64>,
    pub phase: String,
    pub trigger: bool,
    pub adapted: bool,
    /// Candidate restored by the most recent adaptation.
    pub candidate: Option<u64>,
    pub forward_samples: u64,
    pub backward_samples: u64,
    pub peak_retained: usize,
    pub adaptations: u64,
    pub samples_cached: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationLog {
    pub trigger_index: usize,
    pub completed_index: usize,
    pub stored_candidate: u64,
    pub report: AdaptReport,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<TraceRecord>,
    pub adaptations: Vec<AdaptationLog>,
    pub counters: ResourceCounters,
    pub pool: CandidatePool,
}

struct Step {
    prediction: usize,
    entropy: f64,
}

struct Recorder {
    records: Vec<TraceRecord>,
    counters: ResourceCounters,
    candidate: Option<u64>,
}

impl Recorder {
    fn push(&mut self, index: usize, step: &Step, phase: &str, detector: Option<&ShiftDetector>, trigger: bool, adapted: bool) {
        let baseline = detector.and_then(ShiftDetector::baseline);
        let c = &self.counters;
        self.records.push(TraceRecord {
            index,
            prediction: step.prediction,
            correct: None,
            entropy: step.entropy,
            ema: baseline.and(detector.map(ShiftDetector::ema)),
            baseline,
            phase: phase.to_string(),
            trigger,
            adapted,
            candidate: self.candidate,
            forward_samples: c.forward_samples,
            backward_samples: c.backward_samples,
            peak_retained: c.peak_retained,
            adaptations: c.adaptations,
            samples_cached: c.samples_cached,
        });
    }
}

fn predict(model: &Model, batch: &Tensor, mode: BnMode, counters: &mut ResourceCounters) -> Result<Vec<Step>> {
    let (logits, cache) = model.forward(batch, mode, CachePolicy::None)?;
    let mut usage = Usage::default();
    usage.record_forward(&cache);
    counters.absorb(&usage);
    let (_, entropies) = softmax_entropy(&logits)?;
    Ok(argmax_rows(&logits).into_iter().zip(entropies).map(|(prediction, entropy)| Step { prediction, entropy }).collect())
}

fn row(model: &Model, obs: &Observation) -> Result<Tensor> {
    if obs.sample.len() != model.spec().input_dim() {
        return Err(TtaError::Shape(format!("sample {} has {} values", obs.index, obs.sample.len())));
    }
    Tensor::matrix(1, obs.sample.len(), obs.sample.clone())
}

/// Runs one policy over `observations`, starting from `source` and `pool`.
pub fn run(source: &Model, pool: &CandidatePool, observations: &[Observation], settings: &RunSettings) -> Result<RunOutput> {
    settings.validate()?;
    if pool.fingerprint() != source.fingerprint() {
        return Err(TtaError::Fingerprint { expected: source.fingerprint(), actual: pool.fingerprint().to_string() });
    }
    let mut model = source.clone();
    let mut pool = pool.clone();
    let mut rec = Recorder { records: Vec::with_capacity(observations.len()), counters: ResourceCounters::default(), candidate: None };
    let mut adaptations = Vec::new();
    match settings.policy {
        PolicyConfig::SourceOnly => {
            for obs in observations {
                let step = predict(&model, &row(&model, obs)?, BnMode::RunningStats, &mut rec.counters)?.remove(0);
                rec.push(obs.index, &step, "inactive", None, false, false);
            }
        }
        PolicyConfig::Continual { batch } => {
            for chunk in observations.chunks(batch) {
                let rows = chunk.iter().map(|o| row(&model, o)).collect::<Result<Vec<_>>>()?;
                let x = crate::tensor::vstack(&rows.iter().collect::<Vec<_>>())?;
                let adapted = x.rows() >= 2;
                let mode = if adapted { BnMode::BatchStats } else { BnMode::RunningStats };
                if adapted {
                    let mut usage = Usage::default();
                    coupled_step(&mut model, &x, &settings.adapt, &mut usage)?;
                    rec.counters.absorb(&usage);
                    rec.counters.adaptations += 1;
                }
                for (obs, step) in chunk.iter().zip(predict(&model, &x, mode, &mut rec.counters)?) {
                    rec.push(obs.index, &step, "continual", None, false, adapted);
                }
            }
        }
        PolicyConfig::OnDemand => {
            let mut detector = ShiftDetector::new(settings.detector.clone(), model.class_count())?;
            let mut cache: Option<(usize, Vec<Tensor>)> = None;
            for obs in observations {
                let x = row(&model, obs)?;
                let step = predict(&model, &x, BnMode::RunningStats, &mut rec.counters)?.remove(0);
                let decision = detector.ingest(step.entropy)?;
                let mut trigger = false;
                let mut adapted = false;
                if let Some((trigger_index, rows)) = cache.as_mut() {
                    rows.push(x);
                    rec.counters.samples_cached += 1;
                    if rows.len() == settings.adapt.cache_size {
                        let cached = crate::tensor::vstack(&rows.iter().collect::<Vec<_>>())?;
                        let out = adapt(&mut model, &pool, &cached, &settings.adapt)?;
                        rec.counters.absorb(&out.report.usage);
                        rec.counters.adaptations += 1;
                        let stored = pool.add_progressive(out.snapshot, out.feature, adaptations.len() as u64)?;
                        rec.candidate = Some(out.report.selected_candidate);
                        adaptations.push(AdaptationLog {
                            trigger_index: *trigger_index,
                            completed_index: obs.index,
                            stored_candidate: stored,
                            report: out.report,
                        });
                        cache = None;
                        adapted = true;
                    }
                } else if decision == Decision::ShiftDetected {
                    trigger = true;
                    cache = Some((obs.index, Vec::with_capacity(settings.adapt.cache_size)));
                }
                let phase = if cache.is_some() && !trigger { "caching" } else { detector.phase().label() };
                rec.push(obs.index, &step, phase, Some(&detector), trigger, adapted);
                if adapted {
                    detector.reset_after_adaptation()?;
                }
            }
        }
    }
    Ok(RunOutput { records: rec.records, adaptations, counters: rec.counters, pool })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain_id: u32,
    pub label: String,
    pub start: usize,
    pub length: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftOutcome {
    pub boundary: usize,
    pub domain_id: u32,
    pub label: String,
    pub trigger_index: Option<usize>,
    /// Samples of the new domain seen up to and including the trigger.
    pub latency: Option<usize>,
    /// Accuracy over the last [`PRE_SHIFT_WINDOW`] samples before the boundary.
    pub pre_accuracy: f64,
    pub segment_accuracy: f64,
    /// `pre_accuracy - segment_accuracy`.
    pub accuracy_drop: f64,
}

impl ShiftOutcome {
    pub fn detected(&self) -> bool {
        self.trigger_index.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_domain_accuracy: f64,
    pub domains: Vec<DomainAccuracy>,
    pub shifts: Vec<ShiftOutcome>,
    pub detected: usize,
    pub missed: usize,
    pub false_triggers: usize,
    pub mean_latency: Option<f64>,
    pub counters: ResourceCounters,
    pub compute_proxy: u64,
}

fn mean_correct(records: &[TraceRecord]) -> f64 {
    let hits = records.iter().filter(|r| r.correct == Some(true)).count();
    hits as f64 / records.len().max(1) as f64
}

/// Scores a trace against the hidden labels and schedule, filling each
/// record's `correct` flag.
///
/// The first trigger inside a shifted segment detects the shift into it.
/// Further triggers in the same segment, and any trigger in the first
/// segment, are false triggers.
pub fn evaluate(records: &mut [TraceRecord], truths: &[GroundTruth], schedule: &StreamSchedule) -> Result<Summary> {
    schedule.validate()?;
    if records.len() != truths.len() || records.len() != schedule.total_len() {
        return Err(TtaError::InvalidArgument(format!(
            "trace has {} records, {} labels, schedule covers {}",
            records.len(),
            truths.len(),
            schedule.total_len()
        )));
    }
    for (i, (r, t)) in records.iter_mut().zip(truths).enumerate() {
        if r.index != i {
            return Err(TtaError::InvalidArgument(format!("trace record {i} carries index {}", r.index)));
        }
        r.correct = Some(r.prediction == t.label);
    }

    let mut domains = Vec::new();
    let mut shifts = Vec::new();
    let mut false_triggers = 0;
    let mut start = 0;
    for (k, seg) in schedule.segments.iter().enumerate() {
        let span = &records[start..start + seg.length];
        let accuracy = mean_correct(span);
        domains.push(DomainAccuracy {
            domain_id: seg.domain.id,
            label: seg.domain.label(),
            start,
            length: seg.length,
            accuracy,
        });
        let triggers: Vec<usize> = span.iter().filter(|r| r.trigger).map(|r| r.index).collect();
        if k == 0 {
            false_triggers += triggers.len();
        } else {
            false_triggers += triggers.len().saturating_sub(1);
            let pre = &records[start.saturating_sub(PRE_SHIFT_WINDOW)..start];
            let pre_accuracy = mean_correct(pre);
            let first = triggers.first().copied();
            shifts.push(ShiftOutcome {
                boundary: start,
                domain_id: seg.domain.id,
                label: seg.domain.label(),
                trigger_index: first,
                latency: first.map(|t| t + 1 - start),
                pre_accuracy,
                segment_accuracy: accuracy,
                accuracy_drop: pre_accuracy - accuracy,
            });
        }
        start += seg.length;
    }

    let detected = shifts.iter().filter(|s| s.detected()).count();
    let latencies: Vec<f64> = shifts.iter().filter_map(|s| s.latency).map(|l| l as f64).collect();
    let counters = records.last().map(counters_of).unwrap_or_default();
    Ok(Summary {
        samples: records.len(),
        accuracy: mean_correct(records),
        mean_domain_accuracy: domains.iter().map(|d| d.accuracy).sum::<f64>() / domains.len() as f64,
        missed: shifts.len() - detected,
        detected,
        false_triggers,
        mean_latency: (!latencies.is_empty()).then(|| latencies.iter().sum::<f64>() / latencies.len() as f64),
        domains,
        shifts,
        compute_proxy: counters.compute_proxy(),
        counters,
    })
}

fn counters_of(r: &TraceRecord) -> ResourceCounters {
    ResourceCounters {
        forward_samples: r.forward_samples,
        backward_samples: r.backward_samples,
        backward_passes: 0,
        peak_retained: r.peak_retained,
        stat_merges: 0,
        adaptations: r.adaptations,
        samples_cached: r.samples_cached,
    }
}

/// Writes a trace as CSV with a header row.
pub fn write_trace<W: Write>(writer: W, records: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(reader: R) -> Result<Vec<TraceRecord>> {
    csv::Reader::from_reader(reader).deserialize().map(|r| r.map_err(csv_error)).collect()
}

pub fn trace_to_string(records: &[TraceRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_trace(&mut buf, records)?;
    String::from_utf8(buf).map_err(|e| TtaError::Serde(e.to_string()))
}

fn csv_error(e: csv::Error) -> TtaError {
    TtaError::Serde(e.to_string())
}
