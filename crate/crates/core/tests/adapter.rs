mod common;

use odtta_core::adapter::{adapt, coupled_step, param_phase, stats_phase, AdaptConfig};
use odtta_core::batchnorm::BnStats;
use odtta_core::meter::Usage;
use odtta_core::nn::{softmax_entropy, BnMode, CachePolicy, Layer, Model, ModelSpec};
use odtta_core::oracle::{finite_diff_bn_affine, max_relative_error, FINITE_DIFF_STEP};
use odtta_core::pool::{CandidatePool, Provenance};
use odtta_core::stream::{accuracy, CorruptionKind, DomainSpec};
use odtta_core::tensor::Tensor;
use proptest::prelude::*;

fn small_cfg(n: usize) -> AdaptConfig {
    AdaptConfig { cache_size: n, stats_batch: n.min(16), lr: 0.01, ..AdaptConfig::default() }
}

/// Pool holding `model`'s own state and one perturbed copy.
fn pool_of(model: &Model, cached: &Tensor) -> CandidatePool {
    let mut pool = CandidatePool::new(model.snapshot_bn(), 2, None);
    let f = pool.estimate_feature(model, cached, 2, &mut Usage::default()).unwrap();
    pool.push(model.snapshot_bn(), f.clone(), Provenance::SourceModel).unwrap();
    let mut other = model.clone();
    for bn in other.bn_layers_mut() {
        bn.beta.iter_mut().for_each(|b| *b += 1.0);
    }
    let far = odtta_core::pool::DomainFeature { values: f.values.iter().map(|v| v + 100.0).collect(), ..f };
    pool.push(other.snapshot_bn(), far, Provenance::InitialCluster { cluster: 0 }).unwrap();
    pool
}

fn with_zero_head(mut m: Model) -> Model {
    let spec = m.spec().clone();
    let mut layers = m.layers().to_vec();
    if let Some(Layer::Dense(d)) = layers.last_mut() {
        d.weights.values_mut().iter_mut().for_each(|w| *w = 0.0);
        d.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    m = Model::from_parts(spec, layers).unwrap();
    m
}

fn with_scaled_head(m: &Model, k: f64) -> Model {
    let mut layers = m.layers().to_vec();
    if let Some(Layer::Dense(d)) = layers.last_mut() {
        d.weights.values_mut().iter_mut().for_each(|w| *w *= k);
    }
    Model::from_parts(m.spec().clone(), layers).unwrap()
}

fn affine_bits(m: &Model) -> Vec<u64> {
    m.bn_layers().flat_map(|bn| bn.gamma.iter().chain(&bn.beta)).map(|v| v.to_bits()).collect()
}

fn stats_bits(m: &Model) -> Vec<u64> {
    m.bn_layers().flat_map(|bn| bn.running_mean.iter().chain(&bn.running_var)).map(|v| v.to_bits()).collect()
}

#[test]
fn zero_passes_touch_only_statistics() {
    let mut r = common::rng(1);
    let m = common::random_model(&mut r, 6, &[8, 8], 4);
    let cached = common::random_batch(&mut r, 32, 6);
    let pool = pool_of(&m, &cached);
    let mut model = m.clone();
    let cfg = AdaptConfig { param_passes: 0, ..small_cfg(32) };
    let out = adapt(&mut model, &pool, &cached, &cfg).unwrap();
    let chosen = pool.get(out.report.selected_candidate).unwrap();
    let mut reference = m.clone();
    reference.restore_bn(&chosen.snapshot).unwrap();
    assert_eq!(affine_bits(&model), affine_bits(&reference));
    assert_ne!(stats_bits(&model), stats_bits(&reference));
    assert_eq!(out.report.param_steps, 0);
}

#[test]
fn one_stats_batch_is_one_merge_from_the_candidate() {
    let mut r = common::rng(2);
    let m = common::random_model(&mut r, 6, &[8, 8], 4);
    let cached = common::random_batch(&mut r, 16, 6);
    let pool = pool_of(&m, &cached);
    let cfg = AdaptConfig { cache_size: 16, stats_batch: 16, param_passes: 0, stats_momentum: 0.7, ..small_cfg(16) };
    let mut model = m.clone();
    let out = adapt(&mut model, &pool, &cached, &cfg).unwrap();
    assert_eq!(out.report.stats_batches, 1);
    let s0 = pool.get(out.report.selected_candidate).unwrap().snapshot.clone();
    let mut probe = m.clone();
    probe.restore_bn(&s0).unwrap();
    let (_, cache) = probe.forward(&cached, BnMode::BatchStats, CachePolicy::None).unwrap();
    for ((bn, b1), s) in model.bn_layers().zip(cache.batch_stats()).zip(&s0.layers) {
        let expect = |prev: &[f64], batch: &[f64]| -> Vec<f64> {
            prev.iter().zip(batch).map(|(p, x)| 0.7 * p + 0.3 * x).collect()
        };
        let e = BnStats { mean: expect(&s.running_mean, &b1.mean), var: expect(&s.running_var, &b1.var) };
        for (a, b) in bn.running_mean.iter().chain(&bn.running_var).zip(e.mean.iter().chain(&e.var)) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()));
        }
    }
    assert_eq!(out.report.stats_usage.stat_merges, 2);
}

#[test]
fn fully_filtered_phase_changes_nothing() {
    let mut r = common::rng(3);
    let m = with_zero_head(common::random_model(&mut r, 6, &[8, 8], 4));
    let cached = common::random_batch(&mut r, 32, 6);
    let mut model = m.clone();
    let cfg = AdaptConfig { param_passes: 3, param_batch: 4, ..small_cfg(32) };
    let out = param_phase(&mut model, &cached, &cfg, &mut Usage::default()).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(out.filtered_out, 3 * 32);
    assert_eq!(model, m);
}

#[test]
fn single_survivor_step_matches_finite_differences() {
    let mut r = common::rng(4);
    let base = common::random_model(&mut r, 5, &[6, 6], 3);
    let m = with_scaled_head(&base, 8.0);
    let x = common::random_batch(&mut r, 1, 5);
    let (logits, _) = m.forward(&x, BnMode::RunningStats, CachePolicy::None).unwrap();
    let h = softmax_entropy(&logits).unwrap().1[0];
    let cfg = AdaptConfig { lr: 1e-3, param_batch: 1, param_passes: 1, tau_coeff: 1.0, ..small_cfg(16) };
    assert!(h < cfg.tau(3), "sample must survive the filter: H = {h}");
    let mut model = m.clone();
    let out = param_phase(&mut model, &x, &cfg, &mut Usage::default()).unwrap();
    assert_eq!(out.steps, 1);
    let fd = finite_diff_bn_affine(&m, &x, BnMode::RunningStats, FINITE_DIFF_STEP, |l| Ok(softmax_entropy(l)?.1[0]))
        .unwrap();
    let observed: Vec<odtta_core::nn::BnGrad> = model
        .bn_layers()
        .zip(m.bn_layers())
        .map(|(after, before)| odtta_core::nn::BnGrad {
            gamma: after.gamma.iter().zip(&before.gamma).map(|(a, b)| (b - a) / cfg.lr).collect(),
            beta: after.beta.iter().zip(&before.beta).map(|(a, b)| (b - a) / cfg.lr).collect(),
        })
        .collect();
    // (before - after) / lr recovers the gradient up to one rounding of the
    // update, which is far below the 1e-4 bar for gradients above 1e-6.
    assert!(max_relative_error(&observed, &fd, 1e-6) < 1e-4);
}

#[test]
fn param_phase_never_moves_statistics_and_stats_phase_never_backprops() {
    let mut r = common::rng(5);
    let m = with_scaled_head(&common::random_model(&mut r, 6, &[8, 8], 4), 6.0);
    let cached = common::random_batch(&mut r, 64, 6);
    let cfg = AdaptConfig { tau_coeff: 1.0, ..small_cfg(64) };
    let mut model = m.clone();
    let mut u = Usage::default();
    stats_phase(&mut model, &cached, &cfg, &mut u).unwrap();
    assert_eq!((u.backward_passes, u.backward_caches, u.backward_samples), (0, 0, 0));
    assert_ne!(stats_bits(&model), stats_bits(&m));
    let after_stats = stats_bits(&model);
    let mut u = Usage::default();
    let out = param_phase(&mut model, &cached, &cfg, &mut u).unwrap();
    assert!(out.steps > 0);
    assert_eq!(stats_bits(&model), after_stats);
    assert_eq!(u.stat_merges, 0);
    assert_eq!(u.backward_samples, out.survivors as u64);
}

#[test]
fn stats_phase_is_deterministic_and_order_sensitive_within_bound() {
    let mut r = common::rng(6);
    let m = common::random_model(&mut r, 6, &[8, 8], 4);
    let cached = common::random_batch(&mut r, 128, 6);
    let cfg = AdaptConfig { stats_momentum: 0.8, ..small_cfg(128) };
    let run = |x: &Tensor| {
        let mut model = m.clone();
        stats_phase(&mut model, x, &cfg, &mut Usage::default()).unwrap();
        model
    };
    let a = run(&cached);
    assert_eq!(stats_bits(&a), stats_bits(&run(&cached)));

    // Reverse the batch order and bound the difference of the final means.
    let k = 128 / 16;
    let batches: Vec<Tensor> = (0..k).map(|b| cached.slice_rows(b * 16, (b + 1) * 16).unwrap()).collect();
    let reversed: Vec<&Tensor> = batches.iter().rev().collect();
    let permuted = odtta_core::tensor::vstack(&reversed).unwrap();
    let b = run(&permuted);
    assert_ne!(stats_bits(&a), stats_bits(&b));

    // Only the first BN layer sees batch statistics that do not depend on
    // earlier merges, so the bound is checked there. Weights w_k of the
    // k-th merged batch: (1 - m) m^(K-k); the reordering changes the final
    // mean by sum_k w_k (B_sigma(k) - B_k) <= sum_k |w_k - mean(w)| * spread.
    let m_s = cfg.stats_momentum;
    let w: Vec<f64> = (1..=k).map(|i| (1.0 - m_s) * m_s.powi((k - i) as i32)).collect();
    let wbar = w.iter().sum::<f64>() / k as f64;
    let slack: f64 = w.iter().map(|x| (x - wbar).abs()).sum();
    let (_, c0) = m.forward(&batches[0], BnMode::BatchStats, CachePolicy::None).unwrap();
    let dim = c0.batch_stats()[0].dim();
    let means: Vec<Vec<f64>> = batches
        .iter()
        .map(|x| m.forward(x, BnMode::BatchStats, CachePolicy::None).unwrap().1.batch_stats()[0].mean.clone())
        .collect();
    let first = |model: &Model| model.bn_layers().next().unwrap().running_mean.clone();
    let (ma, mb) = (first(&a), first(&b));
    for j in 0..dim {
        let col: Vec<f64> = means.iter().map(|v| v[j]).collect();
        let spread = col.iter().copied().fold(f64::MIN, f64::max) - col.iter().copied().fold(f64::MAX, f64::min);
        assert!((ma[j] - mb[j]).abs() <= slack * spread + 1e-12);
    }
}

#[test]
fn stats_on_the_source_distribution_stay_put() {
    let d = common::desk_cached(41);
    let cached = d.task.sample(&DomainSpec::identity(0), 128, 77).inputs;
    let mut model = d.model.clone();
    stats_phase(&mut model, &cached, &AdaptConfig::default(), &mut Usage::default()).unwrap();
    for (after, before) in model.bn_layers().zip(d.model.bn_layers()) {
        // RMS over channels, in units of each channel's running std.
        let n = before.running_var.len() as f64;
        let mean_shift = after
            .running_mean
            .iter()
            .zip(&before.running_mean)
            .zip(&before.running_var)
            .map(|((a, b), v)| (a - b).powi(2) / v)
            .sum::<f64>()
            / n;
        let var_shift = after
            .running_var
            .iter()
            .zip(&before.running_var)
            .map(|(a, b)| ((a - b) / b).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean_shift.sqrt() < 0.1, "mean shift {}", mean_shift.sqrt());
        assert!(var_shift.sqrt() < 0.1, "variance shift {}", var_shift.sqrt());
    }
}

#[test]
fn non_finite_update_rolls_back() {
    let mut r = common::rng(7);
    let m = with_scaled_head(&common::random_model(&mut r, 6, &[8, 8], 4), 6.0);
    let cached = common::random_batch(&mut r, 16, 6);
    let cfg = AdaptConfig { lr: 1e308, param_passes: 2, tau_coeff: 1.0, ..small_cfg(16) };
    let mut model = m.clone();
    let out = param_phase(&mut model, &cached, &cfg, &mut Usage::default()).unwrap();
    assert!(out.failed);
    assert_eq!(model, m);
}

#[test]
fn decoupled_adapt_retains_less_than_a_coupled_update() {
    let d = common::desk_cached(42);
    let cached = d.task.sample(&DomainSpec::new(1, CorruptionKind::Brightness, 4).unwrap(), 128, 5).inputs;
    let pool = pool_of(&d.model, &cached);
    let mut model = d.model.clone();
    let out = adapt(&mut model, &pool, &cached, &AdaptConfig::desk()).unwrap();
    let mut coupled = d.model.clone();
    let mut u = Usage::default();
    coupled_step(&mut coupled, &cached.slice_rows(0, 16).unwrap(), &AdaptConfig::desk(), &mut u).unwrap();
    assert!(out.report.usage.peak_retained < u.peak_retained);
    assert!(out.report.stats_usage.peak_retained < out.report.param_usage.peak_retained);
    assert_eq!(u.backward_samples, 16);
}

#[test]
fn adaptation_lowers_entropy_and_does_not_hurt_accuracy() {
    let domains = [
        DomainSpec::identity(0),
        DomainSpec::new(1, CorruptionKind::Brightness, 5).unwrap(),
        DomainSpec::new(2, CorruptionKind::Contrast, 5).unwrap(),
    ];
    let (mut h_before, mut h_after, mut acc_src, mut acc_adapt) = (0.0, 0.0, 0.0, 0.0);
    let seeds = 50..70u64;
    let n = seeds.clone().count() as f64;
    for seed in seeds {
        let d = common::desk_cached(seed);
        let (built, _) = common::pool_for(&d, &domains, 200, seed);
        let target = &domains[1 + (seed % 2) as usize];
        let cached = d.task.sample(target, 128, seed ^ 0xca);
        let held = d.task.sample(target, 1000, seed ^ 0x4e1d);
        let cfg = AdaptConfig::desk();
        let mut model = d.model.clone();
        adapt(&mut model, &built.pool, &cached.inputs, &cfg).unwrap();
        acc_src += accuracy(&d.model, &held).unwrap() / n;
        acc_adapt += accuracy(&model, &held).unwrap() / n;

        // Entropy before and after the parameter phase alone.
        let mut probe = d.model.clone();
        stats_phase(&mut probe, &cached.inputs, &cfg, &mut Usage::default()).unwrap();
        let mean_h = |m: &Model| {
            let (l, _) = m.forward(&held.inputs, BnMode::RunningStats, CachePolicy::None).unwrap();
            let h = softmax_entropy(&l).unwrap().1;
            h.iter().sum::<f64>() / h.len() as f64
        };
        h_before += mean_h(&probe) / n;
        param_phase(&mut probe, &cached.inputs, &cfg, &mut Usage::default()).unwrap();
        h_after += mean_h(&probe) / n;
    }
    assert!(h_after <= h_before, "entropy {h_before} -> {h_after}");
    assert!(acc_adapt >= acc_src, "accuracy {acc_src} -> {acc_adapt}");
}

#[test]
fn cache_size_must_match() {
    let m = Model::init(ModelSpec::mlp(4, &[4, 4], 3), 1).unwrap();
    let x = Tensor::matrix(20, 4, vec![0.5; 80]).unwrap();
    let pool = pool_of(&m, &x);
    let mut model = m.clone();
    assert!(adapt(&mut model, &pool, &x, &small_cfg(32)).is_err());
    assert!(AdaptConfig { stats_batch: 1, ..AdaptConfig::default() }.validate().is_err());
    assert!(AdaptConfig { cache_size: 8, stats_batch: 16, ..AdaptConfig::default() }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn raising_tau_never_shrinks_survivors(seed in any::<u64>(), t1 in 0.05f64..1.0, t2 in 0.05f64..1.0, scale in 0.5f64..6.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let mut r = common::rng(seed);
        let m = with_scaled_head(&common::random_model(&mut r, 5, &[6, 6], 4), scale);
        let x = common::random_batch(&mut r, 16, 5);
        let survivors = |tau: f64| {
            let cfg = AdaptConfig { tau_coeff: tau, param_batch: 16, param_passes: 1, ..small_cfg(16) };
            let mut model = m.clone();
            let out = param_phase(&mut model, &x, &cfg, &mut Usage::default()).unwrap();
            16 - out.filtered_out
        };
        prop_assert!(survivors(hi) >= survivors(lo));
    }

    #[test]
    fn step_count_is_bounded(seed in any::<u64>(), passes in 0usize..3, pb in 1usize..6) {
        let mut r = common::rng(seed);
        let m = with_scaled_head(&common::random_model(&mut r, 5, &[6, 6], 4), 4.0);
        let x = common::random_batch(&mut r, 16, 5);
        let cfg = AdaptConfig { param_batch: pb, param_passes: passes, ..small_cfg(16) };
        let mut model = m.clone();
        let out = param_phase(&mut model, &x, &cfg, &mut Usage::default()).unwrap();
        prop_assert!(out.steps <= passes * 16usize.div_ceil(pb));
    }
}
