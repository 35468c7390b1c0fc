#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use odtta_core::nn::{Model, ModelSpec};
use odtta_core::pool::{build_initial_pool, InitialPool, PoolBuildConfig};
use odtta_core::stream::{fit_source_model, DomainSpec, FitConfig, LabeledSet, TaskSpec};
use odtta_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone)]
pub struct Desk {
    pub task: TaskSpec,
    pub model: Model,
    pub clean_accuracy: f64,
}

/// Desk task with a source model fitted to the accuracy bar.
pub fn desk(seed: u64) -> Desk {
    let task = TaskSpec::desk(seed);
    let fit = fit_source_model(&task, task.desk_model(), &FitConfig { seed, ..Default::default() }, true).unwrap();
    Desk { task, model: fit.model, clean_accuracy: fit.clean_accuracy }
}

/// Like [`desk`], fitting each seed once per test binary.
pub fn desk_cached(seed: u64) -> Desk {
    static CACHE: OnceLock<Mutex<HashMap<u64, Desk>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(d) = cache.lock().unwrap().get(&seed) {
        return d.clone();
    }
    let d = desk(seed);
    cache.lock().unwrap().insert(seed, d.clone());
    d
}

/// Pool built from `domains`, `per_domain` samples each, one cluster per
/// domain.
pub fn pool_for(d: &Desk, domains: &[DomainSpec], per_domain: usize, seed: u64) -> (InitialPool, LabeledSet) {
    let parts: Vec<LabeledSet> =
        domains.iter().map(|dom| d.task.sample(dom, per_domain, seed.wrapping_mul(31) + u64::from(dom.id))).collect();
    let train = LabeledSet::concat(&parts).unwrap();
    let cfg = PoolBuildConfig { clusters: domains.len(), seed, ..Default::default() };
    (build_initial_pool(&d.model, &train, &cfg).unwrap(), train)
}

/// Randomly initialised MLP with perturbed BN state so gradients are generic.
pub fn random_model(rng: &mut ChaCha8Rng, input: usize, hidden: &[usize], classes: usize) -> Model {
    let mut m = Model::init(ModelSpec::mlp(input, hidden, classes), rng.random()).unwrap();
    for bn in m.bn_layers_mut() {
        for j in 0..bn.dim() {
            bn.gamma[j] = rng.random_range(0.5..1.5);
            bn.beta[j] = rng.random_range(-0.5..0.5);
            bn.running_mean[j] = rng.random_range(-0.3..0.3);
            bn.running_var[j] = rng.random_range(0.5..2.0);
        }
    }
    m
}

pub fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
