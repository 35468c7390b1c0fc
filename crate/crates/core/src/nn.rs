//! A small feed-forward network (dense, ReLU, batch-norm) with an explicit
//! activation cache and a hand-written reverse pass.
//!
//! The public reverse pass only produces gradients for the BN affine
//! parameters. Dense-weight gradients exist solely for source-model fitting
//! and are crate-private.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batchnorm::{BnLayerState, BnSnapshot, BnStats, BN_EPS};
use crate::error::{Result, TtaError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Relu,
    BatchNorm { dim: usize },
}

fn default_eps() -> f64 {
    BN_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
}

impl ModelSpec {
    /// `Dense → BN → ReLU` per hidden width, then a dense classifier head.
    pub fn mlp(input: usize, hidden: &[usize], class_count: usize) -> Self {
        let mut layers = Vec::new();
        let mut width = input;
        for &h in hidden {
            layers.push(LayerSpec::Dense { input: width, output: h });
            layers.push(LayerSpec::BatchNorm { dim: h });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Dense { input: width, output: class_count });
        Self { layers, class_count, bn_eps: BN_EPS }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TtaError::InvalidSpec(m));
        if self.class_count == 0 {
            return bad("class_count must be positive".into());
        }
        if !(self.bn_eps > 0.0 && self.bn_eps.is_finite()) {
            return bad(format!("bn_eps {} must be positive", self.bn_eps));
        }
        let Some(LayerSpec::Dense { input, .. }) = self.layers.first() else {
            return bad("first layer must be dense".into());
        };
        let mut width = *input;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { input, output } => {
                    if input != width || output == 0 {
                        return bad(format!("layer {i}: dense {input}->{output} after width {width}"));
                    }
                    width = output;
                }
                LayerSpec::BatchNorm { dim } => {
                    if dim != width {
                        return bad(format!("layer {i}: batch-norm dim {dim} after width {width}"));
                    }
                }
                LayerSpec::Relu => {}
            }
        }
        if self.bn_count() < 2 {
            return bad(format!("need at least 2 batch-norm layers, found {}", self.bn_count()));
        }
        if width != self.class_count {
            return bad(format!("output width {width} != class_count {}", self.class_count));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.layers.first() {
            Some(LayerSpec::Dense { input, .. }) => *input,
            _ => 0,
        }
    }

    pub fn bn_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::BatchNorm { .. })).count()
    }

    pub fn bn_dims(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::BatchNorm { dim } => Some(*dim),
                _ => None,
            })
            .collect()
    }

    /// Layer position of the `ordinal`-th BN layer (1-based).
    pub fn bn_position(&self, ordinal: usize) -> Option<usize> {
        if ordinal == 0 {
            return None;
        }
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::BatchNorm { .. }))
            .nth(ordinal - 1)
            .map(|(i, _)| i)
    }

    /// Stable 16-hex-digit digest of the layer list, class count and eps.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("spec serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Dense layer computing `x · weights + bias`; `weights` is `input × output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense(DenseLayer),
    Relu,
    BatchNorm(BnLayerState),
}

/// Which statistics a BN layer normalises with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    RunningStats,
    BatchStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    None,
    ForBackward,
}

/// Intermediates retained by a forward pass.
///
/// With `CachePolicy::None` only the per-BN statistic buffers are kept; with
/// `ForBackward` every layer input and every BN's normalised activations are
/// kept as well.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    mode: BnMode,
    policy: CachePolicy,
    batch_size: usize,
    fingerprint: String,
    stat_buffer_len: usize,
    batch_stats: Vec<BnStats>,
    inputs: Vec<Tensor>,
    normalized: Vec<Tensor>,
    inv_std: Vec<Vec<f64>>,
}

impl ActivationCache {
    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Per-BN-layer batch statistics; empty unless the pass ran in `BatchStats`.
    pub fn batch_stats(&self) -> &[BnStats] {
        &self.batch_stats
    }

    /// Retained-activation proxy: number of scalars held by this cache.
    pub fn retained(&self) -> usize {
        self.stat_buffer_len
            + self.inputs.iter().map(Tensor::len).sum::<usize>()
            + self.normalized.iter().map(Tensor::len).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrad {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct DenseGrad {
    pub(crate) weights: Tensor,
    pub(crate) bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

impl Model {
    /// He-initialised dense layers, identity BN layers.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Dense { input, output } => {
                    let normal = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("valid std");
                    let w = (0..input * output).map(|_| normal.sample(&mut rng)).collect();
                    Layer::Dense(DenseLayer {
                        weights: Tensor::matrix(input, output, w).expect("finite init"),
                        bias: vec![0.0; output],
                    })
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::BatchNorm { dim } => Layer::BatchNorm(BnLayerState::identity(dim, spec.bn_eps)),
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn from_parts(spec: ModelSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers.len() {
            return Err(TtaError::InvalidSpec("layer count differs from spec".into()));
        }
        for (i, (l, s)) in layers.iter().zip(&spec.layers).enumerate() {
            let ok = match (l, s) {
                (Layer::Dense(d), LayerSpec::Dense { input, output }) => {
                    d.weights.shape() == [*input, *output] && d.bias.len() == *output && d.bias.iter().all(|v| v.is_finite())
                }
                (Layer::Relu, LayerSpec::Relu) => true,
                (Layer::BatchNorm(bn), LayerSpec::BatchNorm { dim }) => {
                    bn.validate()?;
                    bn.dim() == *dim
                }
                _ => false,
            };
            if !ok {
                return Err(TtaError::InvalidSpec(format!("layer {i} does not match its spec")));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BnLayerState> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut BnLayerState> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub(crate) fn dense_layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        })
    }

    pub fn snapshot_bn(&self) -> BnSnapshot {
        BnSnapshot { fingerprint: self.fingerprint(), layers: self.bn_layers().cloned().collect() }
    }

    /// Replaces every BN layer with the snapshot's. Dense layers are untouched.
    /// On error the model is left unmodified.
    pub fn restore_bn(&mut self, snap: &BnSnapshot) -> Result<()> {
        let fp = self.fingerprint();
        if snap.fingerprint != fp {
            return Err(TtaError::Fingerprint { expected: fp, actual: snap.fingerprint.clone() });
        }
        let dims = self.spec.bn_dims();
        if snap.layers.len() != dims.len() || snap.layers.iter().zip(&dims).any(|(l, d)| l.dim() != *d) {
            return Err(TtaError::Shape("snapshot layers do not match the model".into()));
        }
        for l in &snap.layers {
            l.validate()?;
        }
        for (dst, src) in self.bn_layers_mut().zip(&snap.layers) {
            *dst = src.clone();
        }
        Ok(())
    }

    /// Runs the network on a `B × input_dim` batch.
    pub fn forward(&self, batch: &Tensor, mode: BnMode, policy: CachePolicy) -> Result<(Tensor, ActivationCache)> {
        self.run(batch, mode, policy, self.layers.len())
    }

    /// Runs the network up to and including the `ordinal`-th BN layer
    /// (1-based) and returns that layer's output, plus the cache of the
    /// partial pass.
    pub fn forward_through_bn(&self, batch: &Tensor, ordinal: usize, mode: BnMode) -> Result<(Tensor, ActivationCache)> {
        let pos = self
            .spec
            .bn_position(ordinal)
            .ok_or_else(|| TtaError::InvalidSpec(format!("model has no batch-norm layer #{ordinal}")))?;
        self.run(batch, mode, CachePolicy::None, pos + 1)
    }

    fn run(&self, batch: &Tensor, mode: BnMode, policy: CachePolicy, stop: usize) -> Result<(Tensor, ActivationCache)> {
        if batch.shape().len() != 2 || batch.cols() != self.spec.input_dim() {
            return Err(TtaError::Shape(format!(
                "batch shape {:?}, model input dim {}",
                batch.shape(),
                self.spec.input_dim()
            )));
        }
        let b = batch.rows();
        if b == 0 {
            return Err(TtaError::Shape("empty batch".into()));
        }
        if mode == BnMode::BatchStats && b < 2 {
            return Err(TtaError::SingletonBatch(b));
        }
        let keep = policy == CachePolicy::ForBackward;
        let mut cache = ActivationCache {
            mode,
            policy,
            batch_size: b,
            fingerprint: self.fingerprint(),
            stat_buffer_len: 0,
            batch_stats: Vec::new(),
            inputs: Vec::new(),
            normalized: Vec::new(),
            inv_std: Vec::new(),
        };
        let mut x = batch.clone();
        for layer in &self.layers[..stop] {
            let out = match layer {
                Layer::Dense(d) => {
                    let mut y = x.matmul(&d.weights)?;
                    let m = y.cols();
                    for row in y.values_mut().chunks_mut(m) {
                        for (v, bias) in row.iter_mut().zip(&d.bias) {
                            *v += bias;
                        }
                    }
                    y
                }
                Layer::Relu => {
                    let mut y = x.clone();
                    y.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    y
                }
                Layer::BatchNorm(bn) => {
                    let dim = bn.dim();
                    let (mean, var) = match mode {
                        BnMode::RunningStats => (bn.running_mean.clone(), bn.running_var.clone()),
                        BnMode::BatchStats => {
                            let s = BnStats::from_rows(x.values(), dim)?;
                            cache.batch_stats.push(s.clone());
                            (s.mean, s.var)
                        }
                    };
                    cache.stat_buffer_len += 2 * dim;
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
                    let mut xhat = x.clone();
                    for row in xhat.values_mut().chunks_mut(dim) {
                        for c in 0..dim {
                            row[c] = (row[c] - mean[c]) * inv_std[c];
                        }
                    }
                    let mut y = xhat.clone();
                    for row in y.values_mut().chunks_mut(dim) {
                        for c in 0..dim {
                            row[c] = bn.gamma[c] * row[c] + bn.beta[c];
                        }
                    }
                    if keep {
                        cache.normalized.push(xhat);
                        cache.inv_std.push(inv_std);
                    }
                    y
                }
            };
            if !out.all_finite() {
                return Err(TtaError::NonFinite("forward activation"));
            }
            if keep {
                cache.inputs.push(std::mem::replace(&mut x, out));
            } else {
                x = out;
            }
        }
        Ok((x, cache))
    }

    /// Gradients of the loss with respect to every BN layer's `gamma` and
    /// `beta`, given `dL/dlogits` for the batch the cache was produced from.
    pub fn backward_bn_affine(&self, cache: &ActivationCache, grad_logits: &Tensor) -> Result<Vec<BnGrad>> {
        Ok(self.backprop(cache, grad_logits, false)?.0)
    }

    pub(crate) fn backprop(
        &self,
        cache: &ActivationCache,
        grad_logits: &Tensor,
        with_dense: bool,
    ) -> Result<(Vec<BnGrad>, Vec<DenseGrad>)> {
        if cache.policy != CachePolicy::ForBackward {
            return Err(TtaError::Cache("forward pass did not retain activations".into()));
        }
        if cache.fingerprint != self.fingerprint() {
            return Err(TtaError::Cache("cache belongs to a different model".into()));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(TtaError::Cache("cache is from a partial forward pass".into()));
        }
        if grad_logits.shape() != [cache.batch_size, self.spec.class_count] {
            return Err(TtaError::Cache(format!(
                "gradient shape {:?} vs cached batch {}x{}",
                grad_logits.shape(),
                cache.batch_size,
                self.spec.class_count
            )));
        }
        let b = cache.batch_size as f64;
        let mut g = grad_logits.clone();
        let mut bn_grads = Vec::new();
        let mut dense_grads = Vec::new();
        let mut bn_idx = cache.normalized.len();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            g = match layer {
                Layer::Dense(d) => {
                    if with_dense {
                        let weights = input.transposed_matmul(&g)?;
                        let bias = g.column_means()?.iter().map(|v| v * b).collect();
                        dense_grads.push(DenseGrad { weights, bias });
                    }
                    g.matmul_transposed(&d.weights)?
                }
                Layer::Relu => {
                    let mut out = g;
                    for (gv, xv) in out.values_mut().iter_mut().zip(input.values()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    out
                }
                Layer::BatchNorm(bn) => {
                    bn_idx -= 1;
                    let xhat = &cache.normalized[bn_idx];
                    let inv_std = &cache.inv_std[bn_idx];
                    let dim = bn.dim();
                    let mut d_gamma = vec![0.0; dim];
                    let mut d_beta = vec![0.0; dim];
                    for (grow, xrow) in g.values().chunks(dim).zip(xhat.values().chunks(dim)) {
                        for c in 0..dim {
                            d_gamma[c] += grow[c] * xrow[c];
                            d_beta[c] += grow[c];
                        }
                    }
                    let mut dx = g.clone();
                    match cache.mode {
                        BnMode::RunningStats => {
                            for row in dx.values_mut().chunks_mut(dim) {
                                for c in 0..dim {
                                    row[c] *= bn.gamma[c] * inv_std[c];
                                }
                            }
                        }
                        BnMode::BatchStats => {
                            // dx = gamma*inv_std * (g - mean(g) - xhat * mean(g * xhat))
                            for (row, xrow) in dx.values_mut().chunks_mut(dim).zip(xhat.values().chunks(dim)) {
                                for c in 0..dim {
                                    let centred = row[c] - d_beta[c] / b - xrow[c] * d_gamma[c] / b;
                                    row[c] = bn.gamma[c] * inv_std[c] * centred;
                                }
                            }
                        }
                    }
                    bn_grads.push(BnGrad { gamma: d_gamma, beta: d_beta });
                    dx
                }
            };
        }
        bn_grads.reverse();
        dense_grads.reverse();
        Ok((bn_grads, dense_grads))
    }

    /// Plain gradient-descent step on all BN affine parameters.
    pub fn apply_bn_step(&mut self, grads: &[BnGrad], lr: f64) -> Result<()> {
        if grads.len() != self.spec.bn_count() {
            return Err(TtaError::Shape("one gradient per BN layer required".into()));
        }
        for (bn, g) in self.bn_layers().zip(grads) {
            if g.gamma.len() != bn.dim() || g.beta.len() != bn.dim() {
                return Err(TtaError::Shape("BN gradient dim mismatch".into()));
            }
        }
        for (bn, g) in self.bn_layers_mut().zip(grads) {
            for (p, d) in bn.gamma.iter_mut().zip(&g.gamma) {
                *p -= lr * d;
            }
            for (p, d) in bn.beta.iter_mut().zip(&g.beta) {
                *p -= lr * d;
            }
        }
        Ok(())
    }

    pub(crate) fn apply_dense_step(&mut self, grads: &[DenseGrad], lr: f64) {
        for (d, g) in self.dense_layers_mut().zip(grads) {
            for (p, v) in d.weights.values_mut().iter_mut().zip(g.weights.values()) {
                *p -= lr * v;
            }
            for (p, v) in d.bias.iter_mut().zip(&g.bias) {
                *p -= lr * v;
            }
        }
    }
}

/// Retained-activation count a forward pass would report, without running it.
pub fn retained_activations(spec: &ModelSpec, batch_size: usize, policy: CachePolicy) -> usize {
    let stats: usize = spec.bn_dims().iter().map(|d| 2 * d).sum();
    if policy == CachePolicy::None {
        return stats;
    }
    let mut width = spec.input_dim();
    let mut per_sample = 0;
    for layer in &spec.layers {
        per_sample += width;
        match *layer {
            LayerSpec::Dense { output, .. } => width = output,
            LayerSpec::BatchNorm { dim } => per_sample += dim,
            LayerSpec::Relu => {}
        }
    }
    stats + batch_size * per_sample
}

/// Row-wise softmax probabilities and Shannon entropies (natural log).
pub fn softmax_entropy(logits: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if logits.shape().len() != 2 || !logits.all_finite() {
        return Err(TtaError::InvalidArgument("logits must be a finite matrix".into()));
    }
    let c = logits.cols();
    let max_h = (c as f64).ln();
    let mut probs = Vec::with_capacity(logits.len());
    let mut ent = Vec::with_capacity(logits.rows());
    for row in logits.iter_rows() {
        let log_p = log_softmax(row);
        let mut h = 0.0;
        for lp in &log_p {
            let p = lp.exp();
            probs.push(p);
            if p > 0.0 {
                h -= p * lp;
            }
        }
        ent.push(h.clamp(0.0, max_h));
    }
    Ok((Tensor::matrix(logits.rows(), c, probs)?, ent))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|z| z - lse).collect()
}

/// `dH/dlogits` for each row: `-p_j (log p_j + H)`.
pub fn entropy_logit_grad(logits: &Tensor) -> Result<Tensor> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.iter_rows() {
        let log_p = log_softmax(row);
        let h: f64 = -log_p.iter().map(|lp| lp.exp() * lp).sum::<f64>();
        out.extend(log_p.iter().map(|lp| -lp.exp() * (lp + h)));
    }
    Tensor::matrix(logits.rows(), logits.cols(), out)
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(TtaError::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut grad = Vec::with_capacity(n * c);
    let mut loss = 0.0;
    for (row, &y) in logits.iter_rows().zip(labels) {
        if y >= c {
            return Err(TtaError::InvalidArgument(format!("label {y} >= class count {c}")));
        }
        let log_p = log_softmax(row);
        loss -= log_p[y];
        grad.extend(log_p.iter().enumerate().map(|(j, lp)| (lp.exp() - f64::from(u8::from(j == y))) / n as f64));
    }
    Ok((loss / n as f64, Tensor::matrix(n, c, grad)?))
}

/// Index of the largest value per row (first on ties).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    t.iter_rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bn_spec() -> ModelSpec {
        ModelSpec::mlp(3, &[4, 4], 2)
    }

    #[test]
    fn spec_validation() {
        assert!(two_bn_spec().validate().is_ok());
        assert!(ModelSpec::mlp(3, &[4], 2).validate().is_err(), "one BN layer");
        let mut s = two_bn_spec();
        s.class_count = 3;
        assert!(s.validate().is_err());
        let mut s = two_bn_spec();
        s.layers[1] = LayerSpec::BatchNorm { dim: 5 };
        assert!(s.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_eps() {
        let a = two_bn_spec();
        let mut b = a.clone();
        b.bn_eps = 1e-3;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), two_bn_spec().fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }

    #[test]
    fn softmax_entropy_examples() {
        let uniform = Tensor::matrix(1, 10, vec![0.3; 10]).unwrap();
        let (p, h) = softmax_entropy(&uniform).unwrap();
        assert!((h[0] - 10f64.ln()).abs() < 1e-12);
        assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut peaked = vec![0.0; 10];
        peaked[3] = 1000.0;
        let (_, h) = softmax_entropy(&Tensor::matrix(1, 10, peaked).unwrap()).unwrap();
        assert!(h[0].abs() < 1e-9);

        // p = softmax([1,2,3]); -sum p ln p evaluated independently.
        let z = [1.0f64, 2.0, 3.0];
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        let expect: f64 = z.iter().map(|v| v.exp() / s).map(|p| -p * p.ln()).sum();
        let (_, h) = softmax_entropy(&Tensor::matrix(1, 3, z.to_vec()).unwrap()).unwrap();
        assert!((h[0] - expect).abs() < 1e-12);
        assert!((h[0] - 0.832_395_581_839_938_9).abs() < 1e-12);
    }

    #[test]
    fn batch_stats_rejects_singleton() {
        let m = Model::init(two_bn_spec(), 1).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        assert!(matches!(m.forward(&x, BnMode::BatchStats, CachePolicy::None), Err(TtaError::SingletonBatch(1))));
        assert!(m.forward(&x, BnMode::RunningStats, CachePolicy::None).is_ok());
        let wrong = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(m.forward(&wrong, BnMode::RunningStats, CachePolicy::None), Err(TtaError::Shape(_))));
    }

    #[test]
    fn backward_needs_full_cache() {
        let m = Model::init(two_bn_spec(), 1).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.0]).unwrap();
        let (_, cache) = m.forward(&x, BnMode::BatchStats, CachePolicy::None).unwrap();
        let g = Tensor::zeros(vec![2, 2]);
        assert!(matches!(m.backward_bn_affine(&cache, &g), Err(TtaError::Cache(_))));
        let (_, cache) = m.forward(&x, BnMode::BatchStats, CachePolicy::ForBackward).unwrap();
        assert!(matches!(m.backward_bn_affine(&cache, &Tensor::zeros(vec![3, 2])), Err(TtaError::Cache(_))));
        let zero = m.backward_bn_affine(&cache, &g).unwrap();
        assert!(zero.iter().all(|g| g.gamma.iter().chain(&g.beta).all(|v| *v == 0.0)));
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero() {
        let logits = Tensor::matrix(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.5, 2.0]).unwrap();
        let (loss, g) = cross_entropy(&logits, &[0, 2]).unwrap();
        assert!(loss > 0.0);
        for row in g.iter_rows() {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
        assert!(cross_entropy(&logits, &[0, 3]).is_err());
    }
}
