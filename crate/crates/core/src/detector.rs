//! Label-free shift detection over a stream of per-sample prediction
//! entropies.
//!
//! After every adaptation (and once at deployment) the detector averages the
//! next `baseline_window` entropies into a baseline. It then tracks an
//! exponential moving average of incoming entropies and reports a shift when
//! the average exceeds the baseline by more than the threshold. Detection is
//! suspended between a trigger and the matching [`ShiftDetector::reset_after_adaptation`].

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtaError};

/// Documented threshold presets, one per benchmark family.
pub mod presets {
    pub const CIFAR10_C: f64 = 0.06;
    pub const IMAGENET_C: f64 = 0.3;
    pub const CORE50: f64 = 0.1;
    pub const SHIFT_SEGMENTATION: f64 = 0.1;
}

pub const DEFAULT_MOMENTUM: f64 = 0.995;
pub const DEFAULT_BASELINE_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// History weight of the moving average.
    pub momentum: f64,
    /// Trigger when `ema - baseline` exceeds this.
    pub threshold: f64,
    pub baseline_window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { momentum: DEFAULT_MOMENTUM, threshold: presets::CIFAR10_C, baseline_window: DEFAULT_BASELINE_WINDOW }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(TtaError::InvalidArgument(format!("detector momentum {} outside (0, 1)", self.momentum)));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(TtaError::InvalidArgument(format!("threshold {} must be positive", self.threshold)));
        }
        if self.baseline_window == 0 {
            return Err(TtaError::InvalidArgument("baseline_window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    CollectingBaseline { count: usize, mean: f64 },
    Monitoring,
    Suppressed,
}

impl Phase {
    pub fn label(&self) -> &'static str {
        match self {
            Phase::CollectingBaseline { .. } => "baseline",
            Phase::Monitoring => "monitoring",
            Phase::Suppressed => "suppressed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    NoShift,
    ShiftDetected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftDetector {
    cfg: DetectorConfig,
    max_entropy: f64,
    ema_sample: f64,
    ema_base: Option<f64>,
    phase: Phase,
    samples_seen: u64,
}

impl ShiftDetector {
    /// A detector for a `class_count`-way classifier, collecting its first
    /// baseline from the first `baseline_window` samples.
    pub fn new(cfg: DetectorConfig, class_count: usize) -> Result<Self> {
        cfg.validate()?;
        if class_count < 2 {
            return Err(TtaError::InvalidArgument("need at least 2 classes".into()));
        }
        Ok(Self {
            cfg,
            max_entropy: (class_count as f64).ln(),
            ema_sample: 0.0,
            ema_base: None,
            phase: Phase::CollectingBaseline { count: 0, mean: 0.0 },
            samples_seen: 0,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn ema(&self) -> f64 {
        self.ema_sample
    }

    pub fn baseline(&self) -> Option<f64> {
        self.ema_base
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    pub fn ingest(&mut self, entropy: f64) -> Result<Decision> {
        if !(entropy >= 0.0 && entropy <= self.max_entropy + 1e-9) {
            return Err(TtaError::InvalidArgument(format!(
                "entropy {entropy} outside [0, {}]",
                self.max_entropy
            )));
        }
        self.samples_seen += 1;
        match self.phase {
            Phase::Suppressed => Ok(Decision::NoShift),
            Phase::CollectingBaseline { count, mean } => {
                // Incremental mean: a constant window reproduces its value exactly.
                let count = count + 1;
                let mean = mean + (entropy - mean) / count as f64;
                if count == self.cfg.baseline_window {
                    self.ema_base = Some(mean);
                    self.ema_sample = mean;
                    self.phase = Phase::Monitoring;
                } else {
                    self.phase = Phase::CollectingBaseline { count, mean };
                }
                Ok(Decision::NoShift)
            }
            Phase::Monitoring => {
                let m = self.cfg.momentum;
                self.ema_sample = m * self.ema_sample + (1.0 - m) * entropy;
                let base = self.ema_base.expect("monitoring always has a baseline");
                if self.ema_sample - base > self.cfg.threshold {
                    self.phase = Phase::Suppressed;
                    Ok(Decision::ShiftDetected)
                } else {
                    Ok(Decision::NoShift)
                }
            }
        }
    }

    /// Re-arms the detector after an adaptation finished: the baseline is
    /// recollected from the next `baseline_window` samples.
    pub fn reset_after_adaptation(&mut self) -> Result<()> {
        if self.phase != Phase::Suppressed {
            return Err(TtaError::DetectorState(format!(
                "reset requested while {}",
                self.phase.label()
            )));
        }
        self.ema_base = None;
        self.phase = Phase::CollectingBaseline { count: 0, mean: 0.0 };
        Ok(())
    }
}

/// Samples until a noiseless step of size `delta` in entropy trips a
/// detector with the given threshold and momentum, counting the first
/// post-step sample as 1. `None` if it never trips.
pub fn step_detection_latency(delta: f64, threshold: f64, momentum: f64) -> Option<u64> {
    if delta <= threshold {
        return None;
    }
    // Trips once delta * (1 - m^t) > threshold, i.e. t > ln(1 - thr/delta) / ln m.
    let bound = (1.0 - threshold / delta).ln() / momentum.ln();
    Some(bound.floor() as u64 + 1)
}
