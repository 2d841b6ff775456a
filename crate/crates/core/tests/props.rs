//! Property suites over the numeric substrate and the data protocol.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use set2seq_core::data::{
    load_manifest, save_manifest, stratified_split, synthesize, time_series_split, LoadOptions,
    SynthConfig, TargetRule, TIME_SERIES_TEST_START, TIME_SERIES_VAL_START,
};
use set2seq_core::graph::{Graph, PoolMode};
use set2seq_core::optim::ParamStore;
use set2seq_core::ranking::{borda_aggregate, kendall_tau, minmax_scale, Ranking, TiePolicy};
use set2seq_core::set_encoders::{
    build_set_encoder, encode_set, InstanceSet, SetEncoderSpec, SetEncoderVariant,
};

fn finite_vec(len: usize, magnitude: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-magnitude..magnitude, len)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn softmax_slices_sum_to_one(
        rows in 1usize..4,
        cols in 1usize..6,
        scale in prop::sample::select(vec![1.0, 1e3, 1e6]),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let mut g = Graph::new();
        let x = g.constant(vec![rows, cols], data).unwrap();
        let y = g.softmax_lastdim(x);
        for s in 0..rows {
            let sum: f64 = g.data(y)[s * cols..(s + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_equals_sum_pool_over_size(data in finite_vec(12, 100.0), axis in 0usize..2) {
        let mut g = Graph::new();
        let x = g.constant(vec![3, 4], data).unwrap();
        let mean = g.reduce_pool(x, axis, PoolMode::Mean).unwrap();
        let sum = g.reduce_pool(x, axis, PoolMode::Sum).unwrap();
        let n = [3.0, 4.0][axis];
        for (m, s) in g.data(mean).iter().zip(g.data(sum)) {
            prop_assert!((m - s / n).abs() <= 1e-12 * s.abs().max(1.0));
        }
    }

    #[test]
    fn minmax_scale_lands_in_unit_interval(values in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let scaled = minmax_scale(&values);
        prop_assert_eq!(scaled.len(), values.len());
        prop_assert!(scaled.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tau_is_invariant_under_strictly_monotone_transforms(
        values in prop::collection::vec(-50f64..50.0, 2..12),
        offset in -10f64..10.0,
        gain in 0.1f64..5.0,
    ) {
        let n = values.len();
        let target: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let base = kendall_tau(&target, &values, TiePolicy::SkipTies).unwrap();
        // affine with positive gain
        let affine: Vec<f64> = values.iter().map(|v| gain * v + offset).collect();
        let t1 = kendall_tau(&target, &affine, TiePolicy::SkipTies).unwrap();
        prop_assert!((base - t1).abs() < 1e-12);
        // cubic plus identity is strictly increasing
        let cubic: Vec<f64> = values.iter().map(|v| v.powi(3) + v).collect();
        let t2 = kendall_tau(&target, &cubic, TiePolicy::SkipTies).unwrap();
        prop_assert!((base - t2).abs() < 1e-12);
        // transforming the target argument instead
        let target_t: Vec<f64> = target.iter().map(|v| gain * v.exp().min(1e30)).collect();
        let t3 = kendall_tau(&target_t, &values, TiePolicy::SkipTies).unwrap();
        prop_assert!((base - t3).abs() < 1e-12);
    }

    #[test]
    fn tau_self_and_reverse_are_plus_minus_one(n in 2usize..10, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        x.shuffle(&mut rng);
        prop_assert_eq!(kendall_tau(&x, &x, TiePolicy::SkipTies).unwrap(), 1.0);
        let rev: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert_eq!(kendall_tau(&x, &rev, TiePolicy::SkipTies).unwrap(), -1.0);
    }

    #[test]
    fn borda_ignores_input_ordering(seed in any::<u64>(), n_rankings in 1usize..5) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..6).map(|i| format!("e{i}")).collect();
        let universe = ids.iter().cloned().collect();
        let mut rankings = Vec::new();
        for _ in 0..n_rankings {
            let mut order = ids.clone();
            order.shuffle(&mut rng);
            let keep = rng.random_range(1..=order.len());
            let entries: BTreeMap<String, u32> = order[..keep]
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), i as u32 + 1))
                .collect();
            rankings.push(Ranking::new(entries).unwrap());
        }
        let forward = borda_aggregate(&rankings, &universe).unwrap();
        let mut shuffled = rankings.clone();
        shuffled.shuffle(&mut rng);
        let back = borda_aggregate(&shuffled, &universe).unwrap();
        prop_assert_eq!(forward, back);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn set_encoders_are_invariant_for_sets_up_to_32_instances(
        n in 1usize..=32,
        d_in in 1usize..=16,
        variant_idx in 0usize..4,
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let variant = [
            SetEncoderVariant::Deepsets,
            SetEncoderVariant::StSabPma,
            SetEncoderVariant::StIsabPma,
            SetEncoderVariant::StIsabPmaSab,
        ][variant_idx];
        let spec = SetEncoderSpec {
            d_hidden: 8,
            d_out: 8,
            n_heads: 2,
            n_inducing: 4,
            n_blocks: 1,
            ..SetEncoderSpec::new(variant, d_in)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d_in).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let set = InstanceSet::from_rows(&rows).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled = set.permuted(&perm);

        let mut store = ParamStore::new();
        let layout = build_set_encoder(&spec, &mut store, &mut rng, "enc").unwrap();
        let mut g = Graph::from_params(&store);
        let a = encode_set(&mut g, &layout, &set).unwrap();
        let b = encode_set(&mut g, &layout, &shuffled).unwrap();
        let diff = g
            .data(a)
            .iter()
            .zip(g.data(b))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        prop_assert!(diff < 1e-9, "variant {:?}: deviation {}", variant, diff);
    }

    #[test]
    fn splits_are_disjoint_and_cover_every_entity(
        n_entities in 1usize..60,
        split_seed in any::<u64>(),
        corpus_seed in any::<u64>(),
        time_series in any::<bool>(),
    ) {
        let manifest = synthesize(&SynthConfig {
            n_entities,
            year_range: (1900, 1970),
            career_len_range: (1, 4),
            instances_range: (1, 3),
            d_in: 2,
            target_rule: TargetRule::StaticMean,
            seed: corpus_seed,
        })
        .unwrap();
        let split = if time_series {
            time_series_split(&manifest, TIME_SERIES_VAL_START, TIME_SERIES_TEST_START)
        } else {
            stratified_split(&manifest, &manifest.rankings["target"], split_seed, 10).unwrap()
        };
        let mut seen = std::collections::BTreeSet::new();
        for set in [&split.train, &split.val, &split.test] {
            for id in set {
                prop_assert!(seen.insert(id.clone()), "entity {} appears twice", id);
            }
        }
        prop_assert_eq!(seen, manifest.universe());
    }

    #[test]
    fn manifest_round_trip_is_identity(seed in any::<u64>(), n in 1usize..12) {
        let manifest = synthesize(&SynthConfig {
            n_entities: n,
            year_range: (1900, 1950),
            career_len_range: (1, 4),
            instances_range: (1, 3),
            d_in: 3,
            target_rule: TargetRule::EarlyBurst,
            seed,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        save_manifest(&path, &manifest).unwrap();
        let loaded = load_manifest(&path, LoadOptions::default()).unwrap();
        prop_assert_eq!(loaded, manifest);
    }
}
