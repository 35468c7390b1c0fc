mod common;

use odtta_core::nn::{softmax_entropy, BnMode, CachePolicy, ModelSpec};
use odtta_core::stream::{
    accuracy, fit_source_model, generate, split_stream, CorruptionKind, DomainSpec, FitConfig, LabeledSet,
    StreamSchedule, TaskSpec,
};
use proptest::prelude::*;

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Nearest class mean in input space, fitted on `train`.
fn nearest_mean_accuracy(train: &LabeledSet, test: &LabeledSet, classes: usize) -> f64 {
    let d = train.inputs.cols();
    let mut means = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in train.inputs.values().chunks(d).zip(&train.labels) {
        means[y].iter_mut().zip(row).for_each(|(m, v)| *m += v);
        counts[y] += 1;
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= *c as f64);
    }
    let hits = test
        .inputs
        .values()
        .chunks(d)
        .zip(&test.labels)
        .filter(|(row, y)| {
            let dist = |m: &Vec<f64>| m.iter().zip(row.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..classes).min_by(|a, b| dist(&means[*a]).total_cmp(&dist(&means[*b]))).unwrap() == **y
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn separable_two_class_task_is_learned() {
    let task = TaskSpec::generate(16, 4, 2, 3.0, 0.3, 0.05, 5).unwrap();
    let cfg = FitConfig { epochs: 10, train_samples: 1000, seed: 5, ..Default::default() };
    let fit = fit_source_model(&task, ModelSpec::mlp(16, &[16, 16], 2), &cfg, false).unwrap();
    let train = task.sample(&DomainSpec::identity(0), 1000, 1);
    let test = task.sample(&DomainSpec::identity(0), 2000, 2);
    let oracle = nearest_mean_accuracy(&train, &test, 2);
    let got = accuracy(&fit.model, &test).unwrap();
    assert!(oracle >= 0.99, "task is not separable: oracle {oracle}");
    assert!(got >= 0.99 && got >= oracle - 0.01, "model {got}, oracle {oracle}");
}

#[test]
fn source_model_clears_the_bar_and_beats_nearest_mean() {
    let d = common::desk_cached(3);
    let train = d.task.sample(&DomainSpec::identity(0), 4000, 1);
    let test = d.task.sample(&DomainSpec::identity(0), 2000, 2);
    let oracle = nearest_mean_accuracy(&train, &test, 10);
    let got = accuracy(&d.model, &test).unwrap();
    assert!(got >= 0.95);
    assert!(got >= oracle - 0.02, "model {got}, nearest mean {oracle}");
}

#[test]
fn heaviest_noise_costs_at_least_twenty_points() {
    let d = common::desk_cached(3);
    let clean = accuracy(&d.model, &d.task.sample(&DomainSpec::identity(0), 2000, 9)).unwrap();
    let noisy = DomainSpec::new(1, CorruptionKind::AdditiveGaussian, 5).unwrap();
    let shifted = accuracy(&d.model, &d.task.sample(&noisy, 2000, 9)).unwrap();
    assert!(clean - shifted >= 0.20, "clean {clean}, shifted {shifted}");
}

#[test]
fn drops_grow_with_severity_and_span_a_useful_range() {
    let seeds = 1..=5u64;
    let n = seeds.clone().count() as f64;
    let mut drops = vec![[0.0f64; 6]; CorruptionKind::SHIFTS.len()];
    for seed in seeds {
        let d = common::desk_cached(seed);
        let clean = accuracy(&d.model, &d.task.sample(&DomainSpec::identity(0), 2000, 17)).unwrap();
        for (k, kind) in CorruptionKind::SHIFTS.iter().enumerate() {
            for sev in 1..=5u8 {
                let dom = DomainSpec::new(1, *kind, sev).unwrap();
                drops[k][sev as usize] += (clean - accuracy(&d.model, &d.task.sample(&dom, 2000, 17)).unwrap()) / n;
            }
        }
    }
    for (kind, row) in CorruptionKind::SHIFTS.iter().zip(&drops) {
        for s in 1..5 {
            assert!(row[s + 1] >= row[s] - 0.01, "{kind:?}: {row:?}");
        }
    }
    let all: Vec<f64> = drops.iter().flat_map(|r| r[1..].iter().copied()).collect();
    let lo = all.iter().copied().fold(f64::MAX, f64::min);
    let hi = all.iter().copied().fold(f64::MIN, f64::max);
    assert!(lo <= 0.10 && hi >= 0.35, "drops span {lo}..{hi}");
}

#[test]
fn subset_entropy_tracks_subset_error() {
    let d = common::desk_cached(4);
    let mut h = Vec::new();
    let mut acc = Vec::new();
    let mut seed = 100;
    for kind in CorruptionKind::SHIFTS {
        for sev in 0..=5u8 {
            for _ in 0..2 {
                seed += 1;
                let set = d.task.sample(&DomainSpec::new(1, kind, sev).unwrap(), 200, seed);
                let (logits, _) = d.model.forward(&set.inputs, BnMode::RunningStats, CachePolicy::None).unwrap();
                let e = softmax_entropy(&logits).unwrap().1;
                h.push(e.iter().sum::<f64>() / e.len() as f64);
                acc.push(accuracy(&d.model, &set).unwrap());
            }
        }
    }
    assert!(h.len() >= 50);
    let r = pearson(&h, &acc);
    assert!(r <= -0.5, "r = {r}");
}

#[test]
fn streams_carry_schedule_domains_and_are_reproducible() {
    let task = TaskSpec::desk(8);
    let sched = StreamSchedule::random_shifts(&CorruptionKind::SHIFTS, &[2, 4], 4, 50, 30, 3).unwrap();
    assert_eq!(sched.total_len(), 50 + 4 * 30);
    assert_eq!(sched.boundaries(), vec![50, 80, 110, 140]);
    assert!(sched.segments[0].domain.is_identity());
    for w in sched.segments.windows(2) {
        assert_ne!(w[0].domain.kind, w[1].domain.kind);
    }
    let (obs, truth) = split_stream(generate(&task, &sched).collect());
    let (obs2, truth2) = split_stream(generate(&task, &sched).collect());
    assert_eq!(obs, obs2);
    assert_eq!(truth, truth2);
    let mut start = 0;
    for seg in &sched.segments {
        assert!(truth[start..start + seg.length].iter().all(|t| t.domain_id == seg.domain.id));
        start += seg.length;
    }
    assert!(obs.iter().enumerate().all(|(i, o)| o.index == i && o.sample.len() == 32));
}

#[test]
fn identity_severity_zero_is_clean_for_every_kind() {
    let task = TaskSpec::desk(2);
    let clean = task.sample(&DomainSpec::identity(0), 50, 6);
    for kind in CorruptionKind::SHIFTS {
        assert_eq!(task.sample(&DomainSpec::new(0, kind, 0).unwrap(), 50, 6), clean);
    }
    assert!(DomainSpec::new(0, CorruptionKind::Brightness, 6).is_err());
}

#[test]
fn single_kind_schedule_rejected() {
    assert!(StreamSchedule::random_shifts(&[CorruptionKind::Contrast], &[1, 2, 3], 4, 10, 10, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampling_is_a_pure_function_of_its_seeds(task_seed in 0u64..1000, seed in any::<u64>(), sev in 0u8..=5, k in 0usize..5) {
        let task = TaskSpec::desk(task_seed);
        let dom = DomainSpec::new(1, CorruptionKind::SHIFTS[k], sev).unwrap();
        let a = task.sample(&dom, 20, seed);
        prop_assert_eq!(&a, &task.sample(&dom, 20, seed));
        prop_assert!(a.inputs.values().iter().all(|v| v.is_finite()));
        prop_assert!(a.labels.iter().all(|&y| y < 10));
    }
}
