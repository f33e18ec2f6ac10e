use membasin::config::{parse_seed_list, RunConfig};
use membasin::guide::{detect_local_min, DisagreementSeries, TransitionLatch};
use membasin::scenario::{build_dataset, RingScenario};
use proptest::prelude::*;

fn series(ds: &[f64]) -> DisagreementSeries {
    let n = ds.len();
    DisagreementSeries(ds.iter().enumerate().map(|(i, d)| ((n - i) * 20, *d)).collect())
}

proptest! {
    #[test]
    fn local_min_ignores_shift_and_scale(
        ds in prop::collection::vec(0.0f64..10.0, 3..60),
        a in 0.01f64..100.0,
        b in 0.0f64..50.0,
    ) {
        let moved: Vec<f64> = ds.iter().map(|d| a * d + b).collect();
        prop_assert_eq!(detect_local_min(&series(&ds)).unwrap(), detect_local_min(&series(&moved)).unwrap());
    }

    #[test]
    fn local_min_fires_after_a_strict_dip(ds in prop::collection::vec(0.0f64..10.0, 3..60)) {
        let s = series(&ds);
        match detect_local_min(&s).unwrap() {
            Some(t) => {
                let i = s.0.iter().position(|&(u, _)| u == t).unwrap();
                prop_assert!(i >= 2 && ds[i - 2] > ds[i - 1] && ds[i - 1] < ds[i]);
                prop_assert!((2..i).all(|j| !(ds[j - 2] > ds[j - 1] && ds[j - 1] < ds[j])));
            }
            None => prop_assert!((2..ds.len()).all(|j| !(ds[j - 2] > ds[j - 1] && ds[j - 1] < ds[j]))),
        }
    }

    #[test]
    fn latch_fires_at_most_once(ds in prop::collection::vec(0.0f64..10.0, 0..80), rho in prop::option::of(0.1f64..1.0)) {
        let mut latch = TransitionLatch::new(rho);
        let fires = ds.iter().filter(|&&d| latch.observe(d)).count();
        prop_assert!(fires <= 1);
        prop_assert_eq!(latch.fired(), fires == 1);
    }

    #[test]
    fn seed_ranges_expand_inclusively(a in 0u64..1000, len in 0u64..50, extra in 0u64..1000) {
        let seeds = parse_seed_list(&format!("{a}-{}, {extra}", a + len)).unwrap();
        prop_assert_eq!(seeds.len() as u64, len + 2);
        prop_assert_eq!(seeds[0], a);
        prop_assert_eq!(*seeds.last().unwrap(), extra);
    }

    #[test]
    fn config_survives_toml_round_trip(seed in any::<u32>(), lambda in 0.1f64..50.0, steps in prop::sample::select(vec![1usize, 10, 20, 50, 100, 250])) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed as u64;
        cfg.policy.lambda = lambda;
        cfg.n_steps = steps;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_counts_match_spec(
        n in 2usize..10,
        base in 1usize..20,
        factor in 1usize..40,
        dup in prop::collection::btree_set(0usize..10, 0..3),
        seed in any::<u64>(),
    ) {
        let dup: Vec<usize> = dup.into_iter().filter(|&c| c < n).collect();
        let scenario = RingScenario {
            n_conditions: n,
            base_samples_per_condition: base,
            duplicated_conditions: dup.clone(),
            duplication_factor: factor,
            seed,
            ..RingScenario::duplication()
        };
        let spec = scenario.spec().unwrap();
        let ds = build_dataset(&spec).unwrap();
        prop_assert_eq!(ds.records.len(), spec.expected_len());
        for c in 0..n {
            let count = ds.records.iter().filter(|r| r.condition == c).count();
            let copies = if dup.contains(&c) { factor - 1 } else { 0 };
            prop_assert_eq!(count, base + copies);
        }
    }
}
