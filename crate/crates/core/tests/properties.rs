use ame_core::attribution::{normalize_scores, Estimator, ImportanceReport};
use ame_core::benchmark::{recall_at_k, BenchmarkResult};
use ame_core::diff::{softmax, Graph, Tensor};
use ame_core::gradcheck::check_total_loss;
use ame_core::granger::{blend, build_objective, kl_divergence, omega_targets};
use ame_core::model::{build_ame, AmeConfig, AmeModel, Task};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

fn config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    }
}

fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    lo..hi
}

fn distribution(p: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, p).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn model(p: usize, classes: usize, seed: u64, alpha: f64, detach: bool, aux_to_experts: bool) -> AmeModel {
    build_ame(AmeConfig {
        n_features: p,
        expert_hidden: vec![3],
        gate_hidden: 3,
        aux_hidden: vec![4],
        task: if classes == 0 { Task::Regression } else { Task::Classification { classes } },
        alpha,
        detach_targets: detach,
        aux_grads_to_experts: aux_to_experts,
        seed,
        ..AmeConfig::default()
    })
    .unwrap()
}

fn inputs(rows: usize, cols: usize, values: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], values.iter().cycle().take(rows * cols).copied().collect()).unwrap()
}

fn targets(task: Task, rows: usize, seed: u64) -> Tensor {
    let k = task.output_dim();
    let mut data = Vec::with_capacity(rows * k);
    for r in 0..rows {
        match task {
            Task::Regression => data.push(((r as u64 + seed) as f64 * 0.77).sin()),
            Task::Classification { classes } => {
                let c = (r + seed as usize) % classes;
                data.extend((0..classes).map(|j| f64::from(u8::from(j == c))));
            }
        }
    }
    Tensor::new(vec![rows, k], data).unwrap()
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn softmax_is_on_the_simplex(v in prop::collection::vec(finite(-50.0, 50.0), 1..12)) {
        let n = v.len();
        let s = softmax(&Tensor::new(vec![1, n], v).unwrap(), 1).unwrap();
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(finite(-20.0, 20.0), 1..10), c in finite(-100.0, 100.0)) {
        let n = v.len();
        let a = softmax(&Tensor::new(vec![1, n], v.clone()).unwrap(), 1).unwrap();
        let b = softmax(&Tensor::new(vec![1, n], v.iter().map(|x| x + c).collect()).unwrap(), 1).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equality((p, q) in (2usize..8).prop_flat_map(|n| (distribution(n), distribution(n)))) {
        let kl = kl_divergence(&p, &q).unwrap();
        prop_assert!(kl >= -1e-15);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn omega_is_a_distribution(delta in prop::collection::vec(finite(-5.0, 5.0), 1..10)) {
        let w = omega_targets(&delta);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        for (wi, di) in w.iter().zip(&delta) {
            if *di <= 0.0 && delta.iter().any(|d| *d > 0.0) {
                prop_assert_eq!(*wi, 0.0);
            }
        }
    }

    #[test]
    fn normalize_is_scale_invariant(raw in prop::collection::vec(finite(-10.0, 10.0), 1..10), k in finite(0.01, 100.0), neg in any::<bool>()) {
        let k = if neg { -k } else { k };
        let (a, fa) = normalize_scores(&raw);
        let (b, fb) = normalize_scores(&raw.iter().map(|v| v * k).collect::<Vec<_>>());
        prop_assert_eq!(fa, fb);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn recall_ignores_positive_rescaling(scores in prop::collection::vec(finite(0.0, 1.0), 4..9), k in finite(0.1, 10.0)) {
        let p = scores.len();
        let report = |s: Vec<f64>| ImportanceReport {
            estimator: Estimator::Ame,
            model_id: String::new(),
            scores: Tensor::new(vec![1, p], s).unwrap(),
            degenerate: vec![false],
            seconds: 0.0,
            forwards: 0,
            backwards: 0,
        };
        let truth = [0, 2];
        let a = recall_at_k(&report(scores.clone()), &truth, 2).unwrap();
        let b = recall_at_k(&report(scores.iter().map(|v| v * k).collect()), &truth, 2).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn benchmark_csv_round_trips(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20), seed in any::<u64>()) {
        let mut r = BenchmarkResult::default();
        for (i, v) in values.iter().enumerate() {
            r.push("masking", "ame", &format!("m{i}"), *v, seed, "0123456789abcdef");
        }
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        prop_assert_eq!(BenchmarkResult::read_csv(buf.as_slice()).unwrap(), r);
    }
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn attention_is_a_distribution_and_mixes_contributions(
        p in 1usize..5,
        classes in prop::sample::select(vec![0usize, 2, 3]),
        seed in any::<u64>(),
        xs in prop::collection::vec(finite(-3.0, 3.0), 1..40),
    ) {
        let m = model(p, classes, seed, 0.1, true, true);
        let x = inputs(3, p, &xs);
        let out = m.forward(&x).unwrap();
        let k = m.task().output_dim();
        for r in 0..3 {
            let a = out.attention.row(r);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|&v| v >= 0.0));
            for j in 0..k {
                let mixed: f64 = (0..p).map(|i| a[i] * out.contribution(r, i)[j]).sum();
                prop_assert!((mixed - out.mixed.row(r)[j]).abs() < 1e-12);
            }
            if classes > 0 {
                let y = out.y.row(r);
                prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(out.y.row(r), out.mixed.row(r));
            }
        }
    }

    #[test]
    fn batch_equals_per_sample_bitwise(p in 1usize..5, seed in any::<u64>(), xs in prop::collection::vec(finite(-3.0, 3.0), 1..40)) {
        let m = model(p, 2, seed, 0.1, true, true);
        let x = inputs(5, p, &xs);
        let whole = m.forward(&x).unwrap();
        for r in 0..5 {
            let one = m.forward(&x.select_rows(&[r]).unwrap()).unwrap();
            prop_assert_eq!(one, whole.sample(r));
        }
    }

    #[test]
    fn experts_only_see_their_group(p in 2usize..5, seed in any::<u64>(), xs in prop::collection::vec(finite(-3.0, 3.0), 1..20), other in finite(-3.0, 3.0)) {
        let m = model(p, 0, seed, 0.1, true, true);
        let x = inputs(1, p, &xs);
        let mut y = x.clone();
        y.data_mut()[p - 1] = other;
        let (a, b) = (m.forward(&x).unwrap(), m.forward(&y).unwrap());
        for i in 0..p - 1 {
            prop_assert_eq!(a.contribution(0, i), b.contribution(0, i));
        }
    }

    #[test]
    fn total_loss_is_affine_in_alpha(alpha in finite(0.0, 1.0), beta in finite(0.0, 2.0), seed in any::<u64>()) {
        let mut m = model(3, 2, seed, alpha, true, true);
        let mut cfg = m.config().clone();
        cfg.aux_weight = beta;
        m = build_ame(cfg).unwrap();
        let x = inputs(4, 3, &[0.2, -1.0, 0.5, 1.5, -0.3]);
        let y = targets(m.task(), 4, seed);
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x), g.constant(y));
        let fwd = m.forward_graph(&mut g, xv, true).unwrap();
        let obj = build_objective(&m, &mut g, &fwd, yv, None).unwrap();
        let expected = blend(obj.main_value, obj.mge_value, obj.aux_mean_value, alpha, beta).unwrap();
        prop_assert!((g.value(obj.total).item().unwrap() - expected).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    // One group leaves the excluding predictor with no inputs, so its
    // relu sits exactly on the kink at initialisation.
    fn gradients_match_finite_differences(
        p in 2usize..5,
        classes in prop::sample::select(vec![0usize, 2, 3]),
        seed in any::<u64>(),
        alpha in finite(0.0, 1.0),
        detach in any::<bool>(),
    ) {
        let m = model(p, classes, seed, alpha, detach, true);
        let x = inputs(3, p, &[0.4, -1.3, 0.9, 2.1, -0.6, 0.05, 1.7]);
        let y = targets(m.task(), 3, seed);
        let r = check_total_loss(&m, &x, &y, 1e-5).unwrap();
        prop_assert!(r.max_rel_err() < 1e-4, "{:?}", r.worst);
    }
}
