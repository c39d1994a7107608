//! Property tests over the public API.

use half::f16;
use lpnas::data::{split_indices, Container, Payload};
use lpnas::genotype::{crossover, mutate, parse, sample_random, serialize, validate, SearchSpaceConfig};
use lpnas::metrics::{miou, IGNORE_LABEL};
use lpnas::precision::{project_scalar, OverflowPolicy, FP16_MAX};
use lpnas::seed::rng_for;
use proptest::prelude::*;

fn space(c_max: Option<usize>) -> SearchSpaceConfig {
    SearchSpaceConfig {
        c_max,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sampled_genotypes_round_trip(seed in any::<u64>()) {
        let cfg = space(None);
        let g = sample_random(&cfg, &mut rng_for(&[seed]));
        let text = serialize(&g);
        let back = parse(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(serialize(&back), text);
        prop_assert!(validate(&g, &cfg).is_empty());
    }

    #[test]
    fn mutation_and_crossover_stay_valid(seed in any::<u64>(), p in 0.0f64..=1.0, capped in any::<bool>()) {
        let cfg = space(capped.then_some(3000));
        let mut rng = rng_for(&[seed]);
        let a = sample_random(&cfg, &mut rng);
        let b = sample_random(&cfg, &mut rng);
        let m = mutate(&a, p, &cfg, &mut rng);
        let v = validate(&m, &SearchSpaceConfig { c_max: None, ..cfg.clone() });
        prop_assert!(v.is_empty(), "{} -> {}: {:?}", a, m, v);
        let (c, d) = crossover(&a, &b, &cfg, &mut rng);
        for child in [c, d] {
            let v = validate(&child, &SearchSpaceConfig { c_max: None, ..cfg.clone() });
            prop_assert!(v.is_empty(), "{}: {:?}", child, v);
            prop_assert_eq!(parse(&serialize(&child)).unwrap(), child);
        }
    }

    #[test]
    fn fp16_projection_matches_half(bits in any::<u32>()) {
        let x = f32::from_bits(bits);
        let ours = project_scalar(x as f64, OverflowPolicy::Infinity);
        let theirs = f16::from_f32(x).to_f64();
        if x.is_nan() {
            prop_assert!(ours.is_nan());
        } else {
            prop_assert_eq!(ours.to_bits(), theirs.to_bits(), "x = {:e}", x);
        }
    }

    #[test]
    fn fp16_projection_is_monotone_idempotent_and_odd(a in -70000.0f64..70000.0, b in -70000.0f64..70000.0) {
        let p = |v: f64| project_scalar(v, OverflowPolicy::Saturate);
        let (pa, pb) = (p(a), p(b));
        if a <= b {
            prop_assert!(pa <= pb);
        }
        prop_assert_eq!(p(pa), pa);
        prop_assert_eq!(p(-a), -pa);
        prop_assert!(pa.abs() <= FP16_MAX);
        // Relative error within half an ulp for normal results.
        if a.abs() >= 6.103515625e-5 && a.abs() <= FP16_MAX {
            prop_assert!((pa - a).abs() <= a.abs() * 2f64.powi(-11));
        }
    }

    #[test]
    fn miou_is_bounded_and_perfect_on_identity(
        labels in prop::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(IGNORE_LABEL)], 64),
        pred in prop::collection::vec(0u8..2, 64),
    ) {
        let m = miou(&pred, &labels, 64, 2, IGNORE_LABEL);
        if labels.iter().all(|&l| l == IGNORE_LABEL) {
            prop_assert!(m.map_or(true, |v| v.is_finite()));
        } else {
            let v = m.unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let exact: Vec<u8> = labels.iter().map(|&l| if l == IGNORE_LABEL { 0 } else { l }).collect();
            prop_assert_eq!(miou(&exact, &labels, 64, 2, IGNORE_LABEL).unwrap(), 1.0);
        }
    }

    #[test]
    fn container_round_trip(
        dims in prop::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let n: usize = dims.iter().product();
        let mut rng = rng_for(&[seed]);
        for payload in [
            Payload::F32((0..n).map(|_| f32::from_bits(rng.gen())).collect()),
            Payload::F64((0..n).map(|_| f64::from_bits(rng.gen())).collect()),
            Payload::U8((0..n).map(|_| rng.gen()).collect()),
        ] {
            let c = Container::new(dims.clone(), payload).unwrap();
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back.dims(), &dims[..]);
        }
    }

    #[test]
    fn splits_partition_the_indices(len in 40usize..400, a in 0.05f64..0.95, seed in any::<u64>()) {
        let b = 1.0 - a;
        let parts = split_indices(len, &[a, b], seed).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        let want = len as f64 * a;
        prop_assert!((parts[0].len() as f64 - want).abs() <= 1.0);
        prop_assert_eq!(split_indices(len, &[a, b], seed).unwrap(), parts);
    }
}
