//! Versioned JSON documents for models, BN snapshots, candidate pools and
//! sample files.
//!
//! Floats are written in shortest round-trip form, so saving and loading
//! reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::batchnorm::{BnLayerState, BnSnapshot};
use crate::error::{Result, TtaError};
use crate::nn::{Layer, Model, ModelSpec};
use crate::pool::{Candidate, CandidatePool};
use crate::stream::LabeledSet;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    body: T,
}

#[derive(Serialize, Deserialize)]
struct ModelBody {
    fingerprint: String,
    spec: ModelSpec,
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct PoolBody {
    fingerprint: String,
    feature_layer: usize,
    capacity: Option<usize>,
    reference: BnSnapshot,
    candidates: Vec<Candidate>,
}

#[derive(Serialize, Deserialize)]
struct SamplesBody {
    inputs: Tensor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domains: Option<Vec<u32>>,
}

fn encode<T: Serialize>(format: &str, body: T) -> Result<String> {
    let env = Envelope { format: format.to_string(), version: FORMAT_VERSION, body };
    Ok(serde_json::to_string_pretty(&env)?)
}

fn decode<T: DeserializeOwned>(format: &str, text: &str) -> Result<T> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        version: u32,
    }
    let header: Header = serde_json::from_str(text)?;
    if header.format != format {
        return Err(TtaError::Serde(format!("expected a {format} document, found {}", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(TtaError::Version(header.version));
    }
    let env: Envelope<T> = serde_json::from_str(text)?;
    Ok(env.body)
}

fn check_fingerprint(expected: &str, actual: String) -> Result<()> {
    if expected != actual {
        return Err(TtaError::Fingerprint { expected: expected.to_string(), actual });
    }
    Ok(())
}

fn validate_snapshot(snap: &BnSnapshot) -> Result<()> {
    snap.layers.iter().try_for_each(BnLayerState::validate)
}

pub fn model_to_string(model: &Model) -> Result<String> {
    encode(
        "model",
        ModelBody { fingerprint: model.fingerprint(), spec: model.spec().clone(), layers: model.layers().to_vec() },
    )
}

pub fn model_from_str(text: &str) -> Result<Model> {
    let body: ModelBody = decode("model", text)?;
    let model = Model::from_parts(body.spec, body.layers)?;
    check_fingerprint(&body.fingerprint, model.fingerprint())?;
    Ok(model)
}

pub fn snapshot_to_string(snap: &BnSnapshot) -> Result<String> {
    encode("bn-snapshot", snap)
}

pub fn snapshot_from_str(text: &str) -> Result<BnSnapshot> {
    let snap: BnSnapshot = decode("bn-snapshot", text)?;
    validate_snapshot(&snap)?;
    Ok(snap)
}

pub fn pool_to_string(pool: &CandidatePool) -> Result<String> {
    encode(
        "candidate-pool",
        PoolBody {
            fingerprint: pool.fingerprint().to_string(),
            feature_layer: pool.feature_layer(),
            capacity: pool.capacity(),
            reference: pool.reference().clone(),
            candidates: pool.candidates().to_vec(),
        },
    )
}

pub fn pool_from_str(text: &str) -> Result<CandidatePool> {
    let body: PoolBody = decode("candidate-pool", text)?;
    check_fingerprint(&body.fingerprint, body.reference.fingerprint.clone())?;
    validate_snapshot(&body.reference)?;
    for c in &body.candidates {
        validate_snapshot(&c.snapshot)?;
    }
    CandidatePool::from_parts(body.reference, body.feature_layer, body.capacity, body.candidates)
}

pub fn samples_to_string(samples: &LabeledSet) -> Result<String> {
    encode(
        "samples",
        SamplesBody {
            inputs: samples.inputs.clone(),
            labels: Some(samples.labels.clone()),
            domains: Some(samples.domains.clone()),
        },
    )
}

/// Reads a samples document. Label and domain columns are optional; only
/// the inputs are returned.
pub fn sample_inputs_from_str(text: &str) -> Result<Tensor> {
    let body: SamplesBody = decode("samples", text)?;
    if body.inputs.shape().len() != 2 {
        return Err(TtaError::Shape("samples must be a matrix".into()));
    }
    Ok(body.inputs)
}

/// Reads a samples document that carries labels.
pub fn labeled_from_str(text: &str) -> Result<LabeledSet> {
    let body: SamplesBody = decode("samples", text)?;
    let n = body.inputs.rows();
    let labels = body.labels.ok_or_else(|| TtaError::Serde("samples document has no labels".into()))?;
    let domains = body.domains.unwrap_or_else(|| vec![0; n]);
    if labels.len() != n || domains.len() != n {
        return Err(TtaError::Shape("label or domain column length differs from inputs".into()));
    }
    Ok(LabeledSet { inputs: body.inputs, labels, domains })
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    Ok(fs::write(path, text)?)
}

pub fn read(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    write(path, &model_to_string(model)?)
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_str(&read(path)?)
}

pub fn save_snapshot(path: &Path, snap: &BnSnapshot) -> Result<()> {
    write(path, &snapshot_to_string(snap)?)
}

pub fn load_snapshot(path: &Path) -> Result<BnSnapshot> {
    snapshot_from_str(&read(path)?)
}

pub fn save_pool(path: &Path, pool: &CandidatePool) -> Result<()> {
    write(path, &pool_to_string(pool)?)
}

pub fn load_pool(path: &Path) -> Result<CandidatePool> {
    pool_from_str(&read(path)?)
}

pub fn save_samples(path: &Path, samples: &LabeledSet) -> Result<()> {
    write(path, &samples_to_string(samples)?)
}
