use boundary_unlearning::checkpoint::{decode, encode, Provenance};
use boundary_unlearning::data::{forget_split, make_blobs};
use boundary_unlearning::eval::{decision_region_area, entropy_of_logits, mia_from_scores, Bounds2D};
use boundary_unlearning::nn::{cross_entropy, softmax, Classifier};
use boundary_unlearning::rng::seeded;
use proptest::prelude::*;

fn model_strategy() -> impl Strategy<Value = (Classifier, Vec<f64>)> {
    (
        any::<u64>(),
        1usize..5,
        prop::collection::vec(1usize..12, 0..3),
        2usize..7,
    )
        .prop_map(|(seed, input, hidden, k)| {
            let mut widths = vec![input];
            widths.extend(hidden);
            widths.push(k);
            let mut rng = seeded(seed);
            let model = Classifier::random(&widths, &mut rng).unwrap();
            let x = (0..input).map(|i| (i as f64 + 1.0) * 0.37 - 1.0).collect();
            (model, x)
        })
}

fn bits(model: &Classifier) -> Vec<u64> {
    model
        .layers()
        .iter()
        .flat_map(|l| l.weights().iter().chain(l.bias()).map(|v| v.to_bits()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-1e4f64..1e4, 1..20)) {
        let p = softmax(&logits);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cross_entropy_is_nonnegative(
        logits in prop::collection::vec(-1e4f64..1e4, 2..20),
        pick in any::<prop::sample::Index>(),
    ) {
        let label = pick.index(logits.len());
        let ce = cross_entropy(&logits, label).unwrap();
        prop_assert!(ce >= 0.0 && ce.is_finite());
    }

    #[test]
    fn entropy_stays_within_log_k(logits in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        let h = entropy_of_logits(&logits);
        prop_assert!(h >= 0.0 && h <= (logits.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn expand_then_prune_is_identity((model, x) in model_strategy()) {
        let expanded = model.expand_output().unwrap();
        let k = model.num_classes();
        let wide = expanded.forward(&x.clone().into()).unwrap();
        let narrow = model.forward(&x.clone().into()).unwrap();
        prop_assert_eq!(&wide.as_slice()[..k], narrow.as_slice());
        prop_assert_eq!(wide.as_slice()[k], 0.0);
        let back = expanded.prune_output(k).unwrap();
        prop_assert_eq!(bits(&back), bits(&model));
        prop_assert!(!back.is_expanded());
    }

    #[test]
    fn checkpoint_round_trip((model, _) in model_strategy(), seed in any::<u64>()) {
        let prov = Provenance {
            method: "original".into(),
            seed,
            config_digest: "ab".repeat(32),
            num_classes: model.num_classes(),
        };
        let bytes = encode(&model, &prov).unwrap();
        let (back, prov_back) = decode(&bytes).unwrap();
        prop_assert_eq!(bits(&back), bits(&model));
        prop_assert_eq!(&prov_back, &prov);
        prop_assert_eq!(encode(&back, &prov).unwrap(), bytes);
    }

    #[test]
    fn forget_split_partitions_the_data(k in 2usize..6, per_class in 2usize..12, seed in any::<u64>(), t in 0usize..6) {
        let t = t % k;
        let ds = make_blobs(k, per_class, 2, 0.1, seed).unwrap();
        let s = forget_split(&ds, t).unwrap();
        prop_assert_eq!(s.forget_train.len() + s.remain_train.len(), ds.train.len());
        prop_assert_eq!(s.forget_test.len() + s.remain_test.len(), ds.test.len());
        prop_assert!(s.forget_train.iter().chain(&s.forget_test).all(|e| e.label == t));
        prop_assert!(s.remain_train.iter().chain(&s.remain_test).all(|e| e.label != t));
    }

    #[test]
    fn mia_ignores_sample_order(
        mut members in prop::collection::vec(0.0f64..3.0, 1..30),
        mut non_members in prop::collection::vec(0.0f64..3.0, 1..30),
        mut probe in prop::collection::vec(0.0f64..3.0, 1..30),
    ) {
        let a = mia_from_scores(&members, &non_members, &probe);
        members.reverse();
        non_members.rotate_left(1);
        probe.sort_by(|x, y| y.total_cmp(x));
        let b = mia_from_scores(&members, &non_members, &probe);
        prop_assert_eq!(a.asr.to_bits(), b.asr.to_bits());
        prop_assert_eq!(a.threshold.to_bits(), b.threshold.to_bits());
        prop_assert!((0.0..=1.0).contains(&a.asr));
        prop_assert!(a.attack_balanced_accuracy >= 0.5);
    }

    #[test]
    fn region_areas_sum_to_one(seed in any::<u64>(), k in 2usize..6, res in 1usize..24) {
        let mut rng = seeded(seed);
        let model = Classifier::random(&[2, 8, k], &mut rng).unwrap();
        let bounds = Bounds2D { x_min: -2.0, x_max: 2.0, y_min: -1.0, y_max: 3.0 };
        let raster = decision_region_area(&model, &bounds, res).unwrap();
        let total: f64 = raster.area.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert_eq!(raster.cells.len(), res * res);
        prop_assert!(raster.cells.iter().all(|&c| (c as usize) < k));
    }
}
