use super::*;
use crate::data::{generate_synthetic, SyntheticConfig};
use crate::genotype::parse;

fn tiny_data(n: usize) -> (Dataset, Dataset) {
    generate_synthetic(&SyntheticConfig {
        image_size: 16,
        n_train: n,
        n_eval: n,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_space() -> SearchSpaceConfig {
    SearchSpaceConfig {
        max_blocks: 3,
        ..Default::default()
    }
}

fn setup<'a>(ga: GaConfig, branch: Branch, data: &'a (Dataset, Dataset)) -> SearchSetup<'a> {
    SearchSetup {
        ga,
        fitness: FitnessConfig::default(),
        train: TrainConfig {
            e_fp32: 1,
            e_lp: 1,
            warmup_epochs: 1,
            batch_size: 4,
            learning_rate: 1e-2,
            ..Default::default()
        },
        precision: PrecisionConfig::aligned(),
        space: tiny_space(),
        profile: DeviceProfile::default(),
        branch,
        train_data: &data.0,
        eval_data: &data.1,
        threads: Some(2),
    }
}

fn cand(g: &str, fitness: f64, params: usize) -> Candidate {
    let mut c = Candidate::new(
        0,
        parse(g).unwrap(),
        0,
        params,
        Lineage {
            generation: 0,
            operator: Operator::Initial,
            parent_a: None,
            parent_b: None,
        },
    );
    c.fitness = fitness;
    c
}

#[test]
fn fitness_examples() {
    let lin = FitnessConfig {
        alpha: 1.0,
        beta: 1.0,
        gamma: 0.0,
    };
    assert_eq!(fitness(10.0, 0.5, &lin), 10.5);
    let d = FitnessConfig::default();
    assert_eq!(fitness(37.0, 0.0, &d), 0.01 * 37.0);
    let e = FitnessConfig {
        alpha: 0.0,
        beta: 1.0,
        gamma: 1.0,
    };
    assert_eq!(fitness(5.0, 1.0, &e), std::f64::consts::E);
    assert_eq!(fitness(100.0, 0.5, &d), 1.0 + 0.5 * 1f64.exp());
}

#[test]
fn fitness_monotone_on_grids() {
    let d = FitnessConfig::default();
    for i in 0..100 {
        let fps = i as f64 * 3.0;
        let mut prev = f64::NEG_INFINITY;
        for j in 0..=100 {
            let f = fitness(fps, j as f64 / 100.0, &d);
            assert!(f > prev);
            prev = f;
        }
    }
}

#[test]
fn fitness_config_checks() {
    assert!(FitnessConfig::default().check().is_ok());
    let zero = FitnessConfig {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };
    assert!(zero.check().is_err());
    assert!(FitnessConfig { alpha: -1.0, ..Default::default() }.check().is_err());
}

#[test]
fn ga_config_checks() {
    let d = GaConfig::default();
    assert!(d.check().is_ok());
    assert_eq!(d.offspring_count(), 9);
    assert_eq!(d.mating_pool_size(), 8);
    assert!(GaConfig { k_best: 11, ..d }.check().is_err());
    assert!(GaConfig { p_mut: 1.5, ..d }.check().is_err());
    assert!(GaConfig { population_size: 3, k_best: 1, n_random: 0, ..d }.check().is_err());
    assert!(GaConfig { population_size: 2, k_best: 1, n_random: 1, ..d }.check().is_ok());
}

#[test]
fn rank_order_and_ties() {
    let r = rank(vec![
        cand("B:CA,k3,c8,aR;H", 1.0, 300),
        cand("B:CA,k3,c4,aR;H", 2.0, 300),
        cand("B:CA,k1,c8,aR;H", f64::NEG_INFINITY, 10),
        cand("B:CA,k5,c8,aR;H", 1.0, 100),
        cand("B:CA,k3,c12,aR;H", 1.0, 100),
    ]);
    let names: Vec<String> = r.iter().map(|c| c.genotype.to_string()).collect();
    assert_eq!(
        names,
        [
            "B:CA,k3,c4,aR;H",
            "B:CA,k3,c12,aR;H",
            "B:CA,k5,c8,aR;H",
            "B:CA,k3,c8,aR;H",
            "B:CA,k1,c8,aR;H"
        ]
    );
    let again = rank(r.clone());
    assert!(again.iter().zip(&r).all(|(a, b)| a.genotype == b.genotype));
}

fn evaluated_population(ga: &GaConfig) -> Vec<Candidate> {
    let mut pop = initial_population(ga, &tiny_space());
    for (i, c) in pop.iter_mut().enumerate() {
        c.fitness = (i * 7 % 16) as f64;
    }
    rank(pop)
}

#[test]
fn evolve_composition_and_lineage() {
    let ga = GaConfig::default();
    let prev = evaluated_population(&ga);
    let mut rng = rng_for(&[1]);
    let next = evolve_generation(&prev, &ga, &tiny_space(), 1, &mut rng).unwrap();
    assert_eq!(next.len(), 16);
    assert_eq!(next[0].genotype, prev[0].genotype);
    assert_eq!(next[0].fitness, prev[0].fitness);
    assert_eq!(next[0].lineage.operator, Operator::Elite);
    assert_eq!(next[0].lineage.parent_a, Some(prev[0].slot));
    let count = |op| next.iter().filter(|c| c.lineage.operator == op).count();
    assert_eq!(count(Operator::Random), 6);
    assert_eq!(count(Operator::Offspring) + count(Operator::Fallback), 9);
    let pool: Vec<usize> = prev[..8].iter().map(|c| c.slot).collect();
    for (slot, c) in next.iter().enumerate() {
        assert_eq!(c.slot, slot);
        assert!(validate(&c.genotype, &tiny_space()).is_empty());
        if c.lineage.operator == Operator::Offspring {
            let (a, b) = (c.lineage.parent_a.unwrap(), c.lineage.parent_b.unwrap());
            assert_ne!(a, b);
            assert!(pool.contains(&a) && pool.contains(&b));
        }
        if c.lineage.operator != Operator::Elite {
            assert!(!c.is_evaluated());
        }
    }
}

#[test]
fn evolve_rejects_bad_sizes() {
    let ga = GaConfig::default();
    let prev = evaluated_population(&ga);
    let mut rng = rng_for(&[1]);
    assert!(evolve_generation(&prev[..15], &ga, &tiny_space(), 1, &mut rng).is_err());
    let bad = GaConfig { k_best: 10, n_random: 10, ..ga };
    assert!(evolve_generation(&prev, &bad, &tiny_space(), 1, &mut rng).is_err());
}

#[test]
fn evolve_respects_parameter_cap() {
    let space = SearchSpaceConfig {
        c_max: Some(2_000),
        ..tiny_space()
    };
    let ga = GaConfig::default();
    let mut pop = initial_population(&ga, &space);
    for (i, c) in pop.iter_mut().enumerate() {
        c.fitness = i as f64;
    }
    let mut rng = rng_for(&[2]);
    let next = evolve_generation(&rank(pop), &ga, &space, 1, &mut rng).unwrap();
    assert!(next.iter().all(|c| c.params <= 2_000));
}

#[test]
fn smoke_search() {
    let data = tiny_data(2);
    let ga = GaConfig {
        population_size: 2,
        generations: 1,
        k_best: 1,
        n_random: 1,
        ..Default::default()
    };
    let r = run_search(&setup(ga, Branch::Ptq, &data)).unwrap();
    assert_eq!(r.history.len(), 1);
    assert_eq!(r.history[0].rows.len(), 2);
    assert_eq!(r.best.fitness, r.history[0].max_fitness);
    let m = r.best.measurement.unwrap();
    assert_eq!(r.best.fitness, fitness(m.fps, m.miou_device, &FitnessConfig::default()));
}

#[test]
fn search_is_deterministic_and_elitist() {
    let data = tiny_data(4);
    let ga = GaConfig {
        population_size: 6,
        generations: 3,
        k_best: 1,
        n_random: 2,
        seed: 3,
        ..Default::default()
    };
    let a = run_search(&setup(ga, Branch::Aligned, &data)).unwrap();
    let b = run_search(&SearchSetup {
        threads: Some(1),
        ..setup(ga, Branch::Aligned, &data)
    })
    .unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    for w in a.history.windows(2) {
        assert!(w[1].max_fitness >= w[0].max_fitness);
    }
    for g in &a.history {
        assert_eq!(g.rows.len(), 6);
    }
    // Every offspring names two parents from the previous generation.
    for w in a.history.windows(2) {
        let slots: Vec<usize> = w[0].rows.iter().map(|r| r.slot).collect();
        for r in w[1].rows.iter().filter(|r| r.operator == "crossover+mutate") {
            assert!(slots.contains(&r.parent_a.unwrap()) && slots.contains(&r.parent_b.unwrap()));
        }
    }
}

#[test]
fn history_csv_round_trip_and_resume() {
    let data = tiny_data(4);
    let ga = GaConfig {
        population_size: 4,
        generations: 3,
        k_best: 1,
        n_random: 1,
        seed: 8,
        ..Default::default()
    };
    let s = setup(ga, Branch::Ptq, &data);
    let mut saved = Vec::new();
    let full = run_search_from(&s, None, |st| {
        if st.completed() == 2 {
            let nets: Vec<(usize, Network<f32>)> = st
                .population
                .iter()
                .filter_map(|c| c.network.as_ref().map(|n| (c.slot, (**n).clone())))
                .collect();
            saved.push((history_csv(&st.history), nets));
        }
        Ok(())
    })
    .unwrap();
    let text = history_csv(&full.history);
    assert_eq!(history_csv(&parse_history(&text).unwrap()), text);

    let (csv2, nets) = saved.pop().unwrap();
    let hist = parse_history(&csv2).unwrap();
    let state = state_from_history(hist, &ga, |slot| nets.iter().find(|(s, _)| *s == slot).map(|(_, n)| n.clone())).unwrap();
    let resumed = run_search_from(&s, Some(state), |_| Ok(())).unwrap();
    assert_eq!(history_csv(&resumed.history), text);
}

#[test]
fn history_parse_errors() {
    assert!(parse_history("nope\n").is_err());
    let row = "0,0,ptq,\"B:CA,k3,c4,aR;H\",10,5,1,1,0.5,0.5,1,,,initial,7";
    let h = parse_history(&format!("{CSV_HEADER}\n{row}\n")).unwrap();
    assert_eq!(h[0].rows[0].genotype, "B:CA,k3,c4,aR;H");
    assert_eq!(h[0].rows[0].parent_a, None);
    // Unquoted, the genotype's commas shift every later column.
    let row = "0,0,ptq,B:CA,k3,c4,aR;H,10,5,1,1,0.5,0.5,1,,,initial,7";
    assert!(parse_history(&format!("{CSV_HEADER}\n{row}\n")).is_err());
    let skip = "1,0,ptq,\"B:CA,k3,c4,aR;H\",10,5,1,1,0.5,0.5,1,,,initial,7";
    assert!(parse_history(&format!("{CSV_HEADER}\n{skip}\n")).is_err());
}

#[test]
fn gap_report_examples() {
    assert!((recovered_fraction(0.07, 0.024).unwrap() - 0.657).abs() < 1e-3);
    assert_eq!(recovered_fraction(0.05, 0.05), Some(0.0));
    assert_eq!(recovered_fraction(0.05, 0.0), Some(1.0));
    assert_eq!(recovered_fraction(0.0, 0.01), None);
    assert!(recovered_fraction(0.05, 0.2).unwrap() < 0.0);
}

#[test]
fn paired_report_on_identical_and_mismatched() {
    let data = tiny_data(2);
    let ga = GaConfig {
        population_size: 2,
        generations: 1,
        k_best: 1,
        n_random: 1,
        ..Default::default()
    };
    let p = run_search(&setup(ga, Branch::Ptq, &data)).unwrap().history;
    let a = run_search(&setup(ga, Branch::Aligned, &data)).unwrap().history;
    let r = paired_gap_report(&p, &a).unwrap();
    assert_eq!(r.ptq.count, 2);
    let seeds = |h: &[GenerationLog]| h[0].rows.iter().map(|r| r.seed).collect::<Vec<_>>();
    assert_eq!(seeds(&p), seeds(&a));
    assert_eq!(p[0].rows[0].gpu_miou, a[0].rows[0].gpu_miou);
    // Same history on both sides, relabelled, recovers nothing.
    let mut relabel = p.clone();
    relabel.iter_mut().flat_map(|g| g.rows.iter_mut()).for_each(|r| r.branch = Branch::Aligned);
    let same = paired_gap_report(&p, &relabel).unwrap();
    if same.ptq.mean_gap != 0.0 {
        assert_eq!(same.recovered_fraction, Some(0.0));
    }
    let other = run_search(&setup(GaConfig { seed: 99, ..ga }, Branch::Aligned, &data)).unwrap().history;
    assert!(matches!(paired_gap_report(&p, &other), Err(SearchError::Mismatch(_))));
    assert!(matches!(paired_gap_report(&p, &p), Err(SearchError::Mismatch(_))));
}
