use std::collections::BTreeMap;

use proptest::prelude::*;

use clwf::ewc::{ewc_penalty, estimate_fisher, important_fraction};
use clwf::tasks::Sample;
use clwf::trainer::optim::global_norm;
use clwf::trainer::{average_checkpoints, clip_gradients, lr_schedule};
use clwf::{
    degradation, param_overhead, seed, Dataset, FactorizedLinear, FisherDiagonal, FisherEstimator, ParamMap,
    Parameterized, Split, Tensor,
};

fn vec_tensor(v: Vec<f64>) -> Tensor {
    Tensor::vector(v).unwrap()
}

fn grads_strategy() -> impl Strategy<Value = ParamMap> {
    (prop::collection::vec(-100.0f64..100.0, 1..20), prop::collection::vec(-100.0f64..100.0, 1..20))
        .prop_map(|(a, b)| ParamMap::from([("a".to_string(), vec_tensor(a)), ("b".to_string(), vec_tensor(b))]))
}

fn fisher_of(values: Vec<f64>) -> FisherDiagonal {
    FisherDiagonal {
        values: ParamMap::from([("w".to_string(), vec_tensor(values))]),
        n_samples: 1,
        estimator: FisherEstimator::MeanSquare,
    }
}

proptest! {
    #[test]
    fn clipping_bounds_norm_and_keeps_direction(mut g in grads_strategy(), max_norm in 0.01f64..50.0) {
        let orig = g.clone();
        let pre = clip_gradients(&mut g, max_norm).unwrap();
        prop_assert!((pre - global_norm(&orig)).abs() <= 1e-12 * pre.max(1.0));
        prop_assert!(global_norm(&g) <= max_norm + 1e-12);
        if pre <= max_norm {
            prop_assert_eq!(&g, &orig);
        } else {
            let scale = max_norm / pre;
            for (n, t) in &g {
                for (x, y) in t.data().iter().zip(orig[n].data()) {
                    prop_assert!((x - y * scale).abs() <= 1e-12 * y.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn lr_peaks_at_warmup(step in 1u64..100_000, warmup in 1u64..5_000, peak in 1e-5f64..1e-1) {
        let lr = lr_schedule(step, peak, warmup);
        prop_assert!(lr > 0.0 && lr <= peak * (1.0 + 1e-12));
        prop_assert!((lr_schedule(warmup, peak, warmup) - peak).abs() <= 1e-15);
        if step < warmup {
            prop_assert!(lr <= lr_schedule(step + 1, peak, warmup));
        } else {
            prop_assert!(lr >= lr_schedule(step + 1, peak, warmup));
        }
    }

    #[test]
    fn importance_fraction_is_monotone_and_scale_invariant(
        values in prop::collection::vec(0.0f64..10.0, 1..50),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
        scale in 0.1f64..100.0,
    ) {
        prop_assume!(values.iter().any(|&v| v > 0.0));
        let f = fisher_of(values.clone());
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        for normalize in [true, false] {
            let a = important_fraction(&f, lo, normalize).unwrap();
            let b = important_fraction(&f, hi, normalize).unwrap();
            prop_assert!((0.0..=1.0).contains(&a) && b <= a);
        }
        let scaled = fisher_of(values.iter().map(|v| v * scale).collect());
        prop_assert_eq!(
            important_fraction(&f, hi, true).unwrap(),
            important_fraction(&scaled, hi, true).unwrap()
        );
    }

    #[test]
    fn ewc_penalty_is_nonnegative_quadratic(
        d in prop::collection::vec((-5.0f64..5.0, 0.0f64..3.0), 1..30),
        lambda in 0.0f64..100.0,
    ) {
        let params = ParamMap::from([("w".to_string(), vec_tensor(d.iter().map(|x| x.0).collect()))]);
        let anchor = ParamMap::from([("w".to_string(), vec_tensor(vec![0.0; d.len()]))]);
        let f = fisher_of(d.iter().map(|x| x.1).collect());
        let p = ewc_penalty(&params, &f, &anchor, lambda).unwrap();
        let expected: f64 = 0.5 * lambda * d.iter().map(|(x, fi)| fi * x * x).sum::<f64>();
        prop_assert!(p.loss >= 0.0);
        prop_assert!((p.loss - expected).abs() <= 1e-9 * expected.max(1.0));
        for (g, (x, fi)) in p.grads["w"].data().iter().zip(&d) {
            prop_assert!((g - lambda * fi * x).abs() <= 1e-9 * (lambda * fi * x.abs()).max(1.0));
        }
    }

    #[test]
    fn fisher_is_order_free(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 2..30), seed_value in any::<u64>()) {
        let names = vec!["g".to_string()];
        let grads = |r: &Vec<f64>| Ok(BTreeMap::from([("g".to_string(), vec_tensor(r.clone()))]));
        let mut shuffled = rows.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut seed::rng(seed_value, &[]));
        for est in [FisherEstimator::Variance, FisherEstimator::MeanSquare] {
            let a = estimate_fisher(&rows, &names, est, grads).unwrap();
            let b = estimate_fisher(&shuffled, &names, est, grads).unwrap();
            for (x, y) in a.values["g"].data().iter().zip(b.values["g"].data()) {
                prop_assert!(*x >= 0.0);
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn averaging_copies_is_identity(vals in prop::collection::vec(-10.0f64..10.0, 1..20), n in 1usize..6) {
        let m = ParamMap::from([("p".to_string(), vec_tensor(vals))]);
        let copies = vec![m.clone(); n];
        let scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let avg = average_checkpoints(&copies, n, &scores).unwrap();
        for (x, y) in avg["p"].data().iter().zip(m["p"].data()) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn zero_factors_reduce_to_shared_weight(d_in in 1usize..8, d_out in 1usize..8, k in 1usize..4, s in any::<u64>()) {
        let mut rng = seed::rng(s, &[]);
        let mut layer = FactorizedLinear::new("l", d_in, d_out, k, false, &mut rng).unwrap();
        let before = layer.param_count();
        layer.add_task("t", 0.0, &mut rng).unwrap();
        prop_assert_eq!(layer.param_count() - before, param_overhead(k, d_in, d_out).unwrap().added_per_task);
        prop_assert_eq!(layer.effective_weight("t").unwrap(), layer.shared().clone());
    }

    #[test]
    fn degradation_sign_follows_error_change(old in 0.001f64..1.0, new in 0.0f64..1.0) {
        let d = degradation(old, new).unwrap();
        prop_assert_eq!(d > 0.0, new > old);
        prop_assert!((old * (1.0 + d) - new).abs() <= 1e-12);
    }

    #[test]
    fn dataset_container_roundtrips(
        samples in prop::collection::vec((prop::collection::vec(-1e3f32..1e3, 6), 0u16..5), 0..20),
        seed_value in any::<u64>(),
    ) {
        let d = Dataset {
            task_id: "task07".into(),
            split: Split::Dev,
            seed: seed_value,
            seq_len: 2,
            d_in: 3,
            n_classes: 5,
            samples: samples.into_iter().map(|(x, y)| Sample { x, y }).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.clwf"), dir.path().join("b.clwf"));
        d.save(&p1).unwrap();
        let back = Dataset::load(&p1).unwrap();
        back.save(&p2).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
