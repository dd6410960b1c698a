//! Property tests for rebalancing, the network and evaluation.

use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uavtype_core::eval::{baseline_scores, class_metrics, stratified_kfold, ConfusionMatrix};
use uavtype_core::lstm::{backward, batch_loss, forward_batch, Network};
use uavtype_core::rebalance::{
    kmeans, oversample_target, rebalance, smote_points, undersample_target, BalanceConfig, BalanceMethod,
};
use uavtype_core::train::{train, TrainConfig};
use uavtype_core::{Dataset, SampledInstance, SamplingConfig, VehicleType};

const METHODS: [BalanceMethod; 5] = [
    BalanceMethod::Augmentation,
    BalanceMethod::RandomOversample,
    BalanceMethod::RandomUndersample,
    BalanceMethod::Smote,
    BalanceMethod::ClusterCentroid,
];

fn dataset(sizes: [usize; 3], seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(vec!["a".into(), "b".into()], SamplingConfig::average(5));
    for (class, &n) in VehicleType::CLASSES.iter().zip(&sizes) {
        for i in 0..n {
            ds.instances.push(SampledInstance {
                values: Array2::from_shape_fn((5, 2), |_| rng.random_range(-3.0..3.0)),
                observed: Array2::from_elem((5, 2), true),
                label: *class,
                source_id: format!("{}-{i}", class.name()),
                synthetic: false,
            });
        }
    }
    ds
}

fn config(method: BalanceMethod, level: f64, seed: u64) -> BalanceConfig {
    let mut cfg = if method.is_oversampling() {
        BalanceConfig::oversample(method, 1.0 + level)
    } else {
        BalanceConfig::undersample(method, level.min(0.95))
    };
    cfg.seed = seed;
    cfg
}

fn points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()).collect()
}

fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
    prop::array::uniform3(prop::array::uniform3(0u64..500)).prop_map(ConfusionMatrix)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn balanced_counts_follow_closed_form(sizes in prop::array::uniform3(2usize..40), m in 0usize..5, level in 0.05f64..2.0, seed: u64) {
        let ds = dataset(sizes, seed);
        let cfg = config(METHODS[m], level, seed);
        let expected = if cfg.method.is_oversampling() {
            [sizes[0], oversample_target(sizes[1], cfg.minority_factor), oversample_target(sizes[2], cfg.minority_factor)]
        } else {
            [undersample_target(sizes[0], cfg.majority_reduction), sizes[1], sizes[2]]
        };
        match rebalance(&ds, &cfg) {
            Ok(out) => prop_assert_eq!(out.class_counts().0, expected),
            // only an undersampling target of zero may be refused
            Err(e) => prop_assert!(expected[0] == 0, "{}", e),
        }
    }

    #[test]
    fn rebalancing_is_deterministic(sizes in prop::array::uniform3(2usize..25), m in 0usize..5, seed: u64) {
        let ds = dataset(sizes, seed);
        let cfg = config(METHODS[m], 0.5, seed);
        prop_assert_eq!(rebalance(&ds, &cfg).unwrap(), rebalance(&ds, &cfg).unwrap());
    }

    #[test]
    fn rebalancing_never_touches_held_out_instances(sizes in prop::array::uniform3(12usize..30), m in 0usize..5, seed: u64) {
        let ds = dataset(sizes, seed);
        let folds = stratified_kfold(&ds.labels(), 4, seed).unwrap();
        let held_out: Vec<&SampledInstance> = folds.test_indices(0).iter().map(|&i| &ds.instances[i]).collect();
        let train_part = ds.with_instances(folds.train_indices(0).iter().map(|&i| ds.instances[i].clone()).collect());
        let out = rebalance(&train_part, &config(METHODS[m], 0.5, seed)).unwrap();
        for inst in &out.instances {
            prop_assert!(held_out.iter().all(|h| h.source_id != inst.source_id && h.values != inst.values));
        }
    }

    #[test]
    fn smote_synthetics_lie_between_parents(n in 2usize..20, dim in 1usize..6, k in 1usize..8, count in 1usize..30, seed: u64) {
        let pts = points(n, dim, seed);
        let views: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in smote_points(&views, k, count, &mut rng) {
            prop_assert!(s.base != s.neighbor);
            let (x, z) = (&pts[s.base], &pts[s.neighbor]);
            for d in 0..dim {
                prop_assert!(x[d].min(z[d]) <= s.values[d] && s.values[d] <= x[d].max(z[d]));
            }
        }
    }

    #[test]
    fn kmeans_objective_never_increases(n in 1usize..60, dim in 1usize..5, k in 1usize..12, seed: u64) {
        let pts = points(n, dim, seed);
        let views: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let km = kmeans(&views, k.min(n), &mut rng);
        prop_assert!(km.objective.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12), "{:?}", km.objective);
        prop_assert_eq!(km.centroids.len(), k.min(n));
    }

    #[test]
    fn batch_order_does_not_change_gradient(b in 2usize..8, t in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::init(3, 4, &mut rng);
        let xs: Vec<Array2<f64>> = (0..b).map(|_| Array2::from_shape_fn((t, 3), |_| rng.random_range(-2.0..2.0))).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let grad = |order: &[usize]| {
            let views: Vec<ArrayView2<f64>> = order.iter().map(|&i| xs[i].view()).collect();
            let ls: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let (z, cache) = forward_batch(&net, &views).unwrap();
            let (_, d) = batch_loss(&z, &ls).unwrap();
            backward(&net, &cache, &d).unwrap()
        };
        let forward_order: Vec<usize> = (0..b).collect();
        let reversed: Vec<usize> = (0..b).rev().collect();
        let (g1, g2) = (grad(&forward_order), grad(&reversed));
        let scale = g1.l2_norm().max(1e-300);
        for (a, c) in g1.slices().iter().zip(g2.slices()) {
            for (x, y) in a.iter().zip(c.iter()) {
                prop_assert!((x - y).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn accuracy_recall_and_permutation(cm in matrix(), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        if cm.total() > 0 {
            prop_assert_eq!(cm.accuracy(), cm.trace() as f64 / cm.total() as f64);
        }
        let m = class_metrics(&cm);
        prop_assert!(m.iter().all(|c| (0.0..=1.0).contains(&c.recall) && (0.0..=1.0).contains(&c.precision)));
        let mut permuted = ConfusionMatrix([[0; 3]; 3]);
        for r in 0..3 {
            for c in 0..3 {
                permuted.0[perm[r]][perm[c]] = cm.0[r][c];
            }
        }
        let pm = class_metrics(&permuted);
        for i in 0..3 {
            prop_assert_eq!(&pm[perm[i]], &m[i]);
        }
    }

    #[test]
    fn test_folds_partition_the_instances(sizes in prop::array::uniform3(0usize..60), k in 2usize..11, seed: u64) {
        let labels: Vec<VehicleType> = VehicleType::CLASSES.iter().zip(&sizes).flat_map(|(c, &n)| std::iter::repeat_n(*c, n)).collect();
        prop_assume!(sizes.iter().all(|&n| n == 0 || n >= k));
        let folds = stratified_kfold(&labels, k, seed).unwrap();
        let mut seen = vec![0usize; labels.len()];
        for f in 0..k {
            for i in folds.test_indices(f) {
                seen[i] += 1;
            }
            let train = folds.train_indices(f);
            prop_assert_eq!(train.len() + folds.test_indices(f).len(), labels.len());
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn majority_baseline_shape(counts in prop::array::uniform3(1usize..10_000)) {
        let b = baseline_scores(counts);
        let major = (0..3).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
        for i in 0..3 {
            if i == major {
                prop_assert_eq!(b.majority[i].recall, 1.0);
                prop_assert!(b.majority[i].f > 0.0);
            } else {
                prop_assert_eq!(b.majority[i].f, 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn training_is_reproducible(seed in 0u64..1000) {
        let ds = dataset([8, 6, 6], seed);
        let inputs: Vec<ArrayView2<f64>> = ds.instances.iter().map(|i| i.values.view()).collect();
        let labels: Vec<usize> = ds.instances.iter().map(|i| i.label.class_index().unwrap()).collect();
        let cfg = TrainConfig { epochs: 3, hidden: 6, batch_size: 4, seed, ..TrainConfig::default() };
        let a = train(&inputs, &labels, &cfg).unwrap();
        let b = train(&inputs, &labels, &cfg).unwrap();
        prop_assert_eq!(a.network, b.network);
        prop_assert_eq!(a.loss_history, b.loss_history);
    }
}
