//! Independent reference computations used to check the fast paths.

use crate::error::{Result, TtaError};
use crate::kmeans::inertia_of;
use crate::nn::{BnGrad, BnMode, CachePolicy, Model};
use crate::tensor::Tensor;

pub const FINITE_DIFF_STEP: f64 = 1e-5;
pub const EXHAUSTIVE_MAX_POINTS: usize = 10;

/// Central-difference estimate of `d loss(logits) / d (gamma, beta)` for
/// every BN layer, holding running statistics fixed.
pub fn finite_diff_bn_affine<F>(model: &Model, batch: &Tensor, mode: BnMode, step: f64, loss: F) -> Result<Vec<BnGrad>>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    finite_diff_bn_params(model, step, |m| loss(&m.forward(batch, mode, CachePolicy::None)?.0))
}

/// Central-difference gradient of an arbitrary function of the model with
/// respect to every BN `gamma` and `beta` entry.
pub fn finite_diff_bn_params<F>(model: &Model, step: f64, f: F) -> Result<Vec<BnGrad>>
where
    F: Fn(&Model) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(TtaError::InvalidArgument("step must be positive".into()));
    }
    let mut probe = model.clone();
    let mut out = Vec::new();
    for layer in 0..model.spec().bn_count() {
        let dim = model.bn_layers().nth(layer).map_or(0, |bn| bn.dim());
        let mut grad = BnGrad { gamma: vec![0.0; dim], beta: vec![0.0; dim] };
        for j in 0..dim {
            for beta in [false, true] {
                let mut ends = [0.0; 2];
                for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
                    let orig = nudge(&mut probe, layer, j, beta, |v| v + sign * step);
                    ends[slot] = f(&probe)?;
                    nudge(&mut probe, layer, j, beta, |_| orig);
                }
                let g = (ends[0] - ends[1]) / (2.0 * step);
                if beta {
                    grad.beta[j] = g;
                } else {
                    grad.gamma[j] = g;
                }
            }
        }
        out.push(grad);
    }
    Ok(out)
}

/// Sets one affine entry to `to(old)` and returns the old value.
fn nudge(model: &mut Model, layer: usize, j: usize, beta: bool, to: impl Fn(f64) -> f64) -> f64 {
    let bn = model.bn_layers_mut().nth(layer).expect("layer index checked by caller");
    let p = if beta { &mut bn.beta[j] } else { &mut bn.gamma[j] };
    let old = *p;
    *p = to(old);
    old
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)` across two gradient
/// sets.
pub fn max_relative_error(a: &[BnGrad], b: &[BnGrad], floor: f64) -> f64 {
    let pairs = a.iter().zip(b).flat_map(|(x, y)| x.gamma.iter().zip(&y.gamma).chain(x.beta.iter().zip(&y.beta)));
    pairs.map(|(u, v)| (u - v).abs() / u.abs().max(v.abs()).max(floor)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

/// Globally optimal k-partition by inertia, found by enumerating every set
/// partition into exactly `k` non-empty blocks (restricted growth strings).
/// Ties keep the first partition in enumeration order.
pub fn kmeans_exhaustive(points: &[Vec<f64>], k: usize) -> Result<Partition> {
    let n = points.len();
    if n > EXHAUSTIVE_MAX_POINTS {
        return Err(TtaError::Clustering(format!("{n} points exceeds the enumeration limit {EXHAUSTIVE_MAX_POINTS}")));
    }
    if k == 0 || k > n {
        return Err(TtaError::Clustering(format!("k = {k} for {n} points")));
    }
    let mut best: Option<Partition> = None;
    let mut rgs = vec![0usize; n];
    enumerate(&mut rgs, 1, 0, k, &mut |a| {
        let inertia = inertia_of(points, a, k);
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(Partition { assignments: a.to_vec(), inertia });
        }
    });
    best.ok_or_else(|| TtaError::Clustering("no partition found".into()))
}

fn enumerate(rgs: &mut [usize], pos: usize, max: usize, k: usize, visit: &mut dyn FnMut(&[usize])) {
    let n = rgs.len();
    if pos == n {
        if max + 1 == k {
            visit(rgs);
        }
        return;
    }
    // Blocks still to open must fit in the remaining positions.
    if k - (max + 1) > n - pos {
        return;
    }
    for v in 0..=(max + 1).min(k - 1) {
        rgs[pos] = v;
        enumerate(rgs, pos + 1, max.max(v), k, visit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{entropy_logit_grad, softmax_entropy, ModelSpec};

    fn stirling2(n: usize, k: usize) -> usize {
        match (n, k) {
            (0, 0) => 1,
            (_, 0) | (0, _) => 0,
            _ => k * stirling2(n - 1, k) + stirling2(n - 1, k - 1),
        }
    }

    #[test]
    fn enumerates_every_partition_once() {
        for n in 1..=7 {
            for k in 1..=n {
                let mut seen = Vec::new();
                enumerate(&mut vec![0; n], 1, 0, k, &mut |a| seen.push(a.to_vec()));
                assert_eq!(seen.len(), stirling2(n, k), "n={n} k={k}");
                seen.sort();
                seen.dedup();
                assert_eq!(seen.len(), stirling2(n, k));
            }
        }
    }

    #[test]
    fn two_points_two_clusters() {
        let p = kmeans_exhaustive(&[vec![0.0], vec![3.0]], 2).unwrap();
        assert_eq!(p.assignments, vec![0, 1]);
        assert_eq!(p.inertia, 0.0);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        assert_eq!(kmeans_exhaustive(&pts, 6).unwrap().inertia, 0.0);
    }

    #[test]
    fn too_many_points_rejected() {
        let pts = vec![vec![0.0]; 11];
        assert!(kmeans_exhaustive(&pts, 2).is_err());
    }

    #[test]
    fn quadratic_loss_on_beta() {
        let model = Model::init(ModelSpec::mlp(2, &[3, 4], 2), 4).unwrap();
        let loss = |m: &Model| -> Result<f64> {
            Ok(m.bn_layers().flat_map(|bn| bn.beta.iter()).map(|b| (b - 0.75) * (b - 0.75)).sum())
        };
        let fd = finite_diff_bn_params(&model, FINITE_DIFF_STEP, loss).unwrap();
        for (g, bn) in fd.iter().zip(model.bn_layers()) {
            assert!(g.gamma.iter().all(|v| *v == 0.0));
            for (v, b) in g.beta.iter().zip(&bn.beta) {
                assert!((v - 2.0 * (b - 0.75)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn matches_backward_on_entropy() {
        let model = Model::init(ModelSpec::mlp(4, &[5, 3], 3), 11).unwrap();
        let batch = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (logits, cache) = model.forward(&batch, BnMode::BatchStats, CachePolicy::ForBackward).unwrap();
        let analytic = model.backward_bn_affine(&cache, &entropy_logit_grad(&logits).unwrap()).unwrap();
        let numeric = finite_diff_bn_affine(&model, &batch, BnMode::BatchStats, FINITE_DIFF_STEP, |l| {
            Ok(softmax_entropy(l)?.1.iter().sum::<f64>())
        })
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
    }
}
