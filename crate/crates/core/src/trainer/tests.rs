use super::*;
use crate::data::{generate_synthetic, SyntheticConfig};
use crate::genotype::parse;
use crate::precision::project_scalar;

fn data(n: usize, size: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        image_size: size,
        n_train: n,
        n_eval: 1,
        seed,
        ..Default::default()
    })
    .unwrap()
    .0
}

fn net(code: &str, seed: u64) -> Network<f32> {
    parse(code).unwrap().build_network(3, 2, seed).unwrap()
}

fn quick(e_fp32: usize, e_lp: usize, warmup: usize) -> TrainConfig {
    TrainConfig {
        e_fp32,
        e_lp,
        warmup_epochs: warmup,
        batch_size: 4,
        learning_rate: 1e-2,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_leave_weights() {
    let d = data(8, 16, 0);
    let mut n = net("B:CBA,k3,c8,aR;H", 1);
    let before = n.clone();
    let r = train_fp32(&mut n, &d, &quick(0, 0, 0)).unwrap();
    assert!(r.epoch_losses.is_empty());
    assert_eq!(n, before);
    finetune_fp16_aware(&mut n, &d, &quick(0, 0, 0), &PrecisionConfig::aligned()).unwrap();
    assert_eq!(n.params(), before.params());
    assert_eq!(n.bn_stats(), before.bn_stats());
    assert!(n.precision().is_some());
}

#[test]
fn training_is_deterministic() {
    let d = data(12, 16, 1);
    let run = || {
        let mut n = net("B:CBA,k3,c8,aR;D:0.2;B:CA,k3,c4,aG;H", 2);
        let r1 = train_fp32(&mut n, &d, &quick(2, 0, 0)).unwrap();
        let r2 = finetune_fp16_aware(&mut n, &d, &quick(0, 1, 1), &PrecisionConfig::aligned()).unwrap();
        (n, r1, r2)
    };
    assert_eq!(run(), run());
}

#[test]
fn seeds_change_the_trajectory() {
    let d = data(12, 16, 1);
    let mut a = net("B:CBA,k3,c8,aR;H", 2);
    let mut b = a.clone();
    train_fp32(&mut a, &d, &quick(1, 0, 0)).unwrap();
    train_fp32(&mut b, &d, &TrainConfig { seed: 9, ..quick(1, 0, 0) }).unwrap();
    assert_ne!(a.params(), b.params());
}

#[test]
fn warmup_schedule_ramps_linearly() {
    let d = data(10, 16, 2);
    let cfg = TrainConfig {
        batch_size: 4,
        ..quick(0, 2, 1)
    };
    let mut n = net("B:CA,k3,c4,aR;H", 3);
    let r = finetune_fp16_aware(&mut n, &d, &cfg, &PrecisionConfig::aligned()).unwrap();
    let steps = 3; // ceil(10 / 4)
    assert_eq!(r.lr_schedule.len(), steps * 3);
    for t in 1..=steps {
        assert_eq!(r.lr_schedule[t - 1], cfg.learning_rate * t as f64 / steps as f64);
    }
    assert!(r.lr_schedule[steps..].iter().all(|&lr| lr == cfg.learning_rate));
    assert_eq!(r.epoch_losses.len(), 3);
}

#[test]
fn two_warmup_epochs_share_one_ramp() {
    let d = data(8, 16, 2);
    let cfg = quick(0, 0, 2);
    let mut n = net("B:CA,k3,c4,aR;H", 3);
    let r = finetune_fp16_aware(&mut n, &d, &cfg, &PrecisionConfig::aligned()).unwrap();
    let expect: Vec<f64> = (1..=4).map(|t| cfg.learning_rate * t as f64 / 4.0).collect();
    assert_eq!(r.lr_schedule, expect);
}

#[test]
fn master_weights_stay_full_precision() {
    let d = data(8, 16, 3);
    let mut n = net("B:CBA,k3,c8,aR;H", 4);
    train_fp32(&mut n, &d, &quick(1, 0, 0)).unwrap();
    finetune_fp16_aware(&mut n, &d, &quick(0, 2, 1), &PrecisionConfig::aligned()).unwrap();
    let off_grid = n
        .params()
        .iter()
        .flat_map(|(_, p)| p.tensor.data().iter())
        .filter(|&&w| project_scalar(w as f64, OverflowPolicy::Saturate) != w as f64)
        .count();
    assert!(off_grid > 0);
    assert_eq!(n.forward_eval(&d.batch(&[0]).0).unwrap(), n.forward_eval(&d.batch(&[0]).0).unwrap());
}

#[test]
fn finetune_rejects_wrapped_network() {
    let d = data(4, 16, 3);
    let mut n = net("B:CA,k3,c4,aR;H", 4);
    n.wrap(PrecisionConfig::off()).unwrap();
    assert!(matches!(
        finetune_fp16_aware(&mut n, &d, &quick(0, 1, 0), &PrecisionConfig::aligned()),
        Err(TrainError::Precision(PrecisionError::AlreadyWrapped))
    ));
}

#[test]
fn divergence_is_reported() {
    let d = data(4, 16, 3);
    let mut n = net("B:CA,k3,c4,aR;H", 4);
    let id = n.params().find("b0.conv.w").unwrap();
    n.params_mut().get_mut(id).tensor.data_mut()[0] = f32::INFINITY;
    match train_fp32(&mut n, &d, &quick(1, 0, 0)) {
        Err(TrainError::Diverged {
            phase: Phase::Fp32,
            epoch: 0,
            batch: 0,
            ..
        }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_and_data_errors() {
    let d = data(4, 16, 3);
    let mut n = net("B:CA,k3,c4,aR;H", 4);
    let bad = TrainConfig { batch_size: 0, ..quick(1, 0, 0) };
    assert!(matches!(train_fp32(&mut n, &d, &bad), Err(TrainError::Config(_))));
    let bad = TrainConfig { learning_rate: 0.0, ..quick(1, 0, 0) };
    assert!(matches!(train_fp32(&mut n, &d, &bad), Err(TrainError::Config(_))));
    assert!(matches!(train_fp32(&mut n, &Dataset::default(), &quick(1, 0, 0)), Err(TrainError::EmptyData)));
    assert!(matches!(evaluate(&n, &Dataset::default(), EvalMode::Fp32), Err(TrainError::EmptyData)));
}

#[test]
fn sgd_step_matches_closed_form() {
    let d = data(4, 16, 5);
    let mut n = net("B:CA,k1,c4,aR;H", 6);
    let before = n.clone();
    let (x, labels) = d.batch(&[0, 1, 2, 3]);
    let mut tape = Tape::new();
    let mut rng = rng_for(&[0]);
    let y = n.forward(&mut tape, &x, Mode::Train, &mut rng).unwrap();
    let l = segmentation_loss(&mut tape, y, &labels, IGNORE_LABEL).unwrap();
    let g = tape.backward(l).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, &n);
    opt.step(&mut n, &g, 0.5);
    for (id, p) in before.params().iter() {
        let grad = g.param(id).unwrap();
        for (i, w) in p.tensor.data().iter().enumerate() {
            let want = (*w as f64 - 0.5 * grad[i] as f64) as f32;
            assert_eq!(n.params().get(id).tensor.data()[i], want);
        }
    }
}

#[test]
fn adam_first_step_is_signed_lr() {
    // With bias correction, the first Adam step is lr * g / (|g| + eps).
    let d = data(4, 16, 5);
    let mut n = net("B:CA,k1,c4,aR;H", 6).cast::<f64>();
    let before = n.clone();
    let (x, labels) = d.batch(&[0, 1]);
    let mut tape = Tape::new();
    let y = n.forward(&mut tape, &x.cast(), Mode::Train, &mut rng_for(&[0])).unwrap();
    let l = segmentation_loss(&mut tape, y, &labels, IGNORE_LABEL).unwrap();
    let g = tape.backward(l).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Adam, &n);
    opt.step(&mut n, &g, 1e-3);
    for (id, p) in before.params().iter() {
        let grad = g.param(id).unwrap();
        for (i, w) in p.tensor.data().iter().enumerate() {
            let want = w - 1e-3 * grad[i] / (grad[i].abs() + 1e-8);
            assert!((n.params().get(id).tensor.data()[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn evaluate_modes() {
    let d = data(6, 16, 6);
    let n = net("B:CBA,k3,c8,aR;P:max;H", 7);
    let a = evaluate(&n, &d, EvalMode::Deploy(OverflowPolicy::Saturate)).unwrap();
    let b = evaluate(&n, &d, EvalMode::Deploy(OverflowPolicy::Saturate)).unwrap();
    assert_eq!(a, b);
    let f = evaluate(&n, &d, EvalMode::Fp32).unwrap();
    assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&f));
}

#[test]
fn checkpoint_round_trip() {
    let d = data(6, 16, 7);
    let mut n = net("B:MB,e2,c8,aR;P:avg;B:CSPC,c8,aG;H", 8);
    train_fp32(&mut n, &d, &quick(1, 0, 0)).unwrap();
    let hash = config_hash("a=1\n");
    assert_eq!(hash.len(), 64);
    let bytes = checkpoint_bytes(&n, &hash);
    let (back, info) = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(info.genotype, Genotype::new(n.tokens().to_vec()).to_string());
    assert_eq!(info.config_hash, hash);
    assert_eq!(back.params(), n.params());
    assert_eq!(back.bn_stats(), n.bn_stats());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("best.ckpt");
    save_checkpoint(&p, &n, &hash).unwrap();
    assert_eq!(load_checkpoint(&p).unwrap().0, back);
}

#[test]
fn checkpoint_errors() {
    let n = net("B:CA,k3,c4,aR;H", 8);
    let bytes = checkpoint_bytes(&n, "00");
    assert!(matches!(checkpoint_from_bytes(b"hello\n"), Err(CheckpointError::BadHeader(_))));
    assert!(matches!(
        checkpoint_from_bytes(&bytes[..bytes.len() - 3]),
        Err(CheckpointError::Container(ContainerError::TruncatedPayload { .. }))
    ));
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    assert!(matches!(checkpoint_from_bytes(&bytes[..=nl]), Err(CheckpointError::Missing(_))));
    let text = String::from_utf8_lossy(&bytes[..nl]).replace("k3", "k9");
    let mut bad = text.into_bytes();
    bad.extend_from_slice(&bytes[nl..]);
    assert!(matches!(checkpoint_from_bytes(&bad), Err(CheckpointError::Genotype(_))));
}

#[test]
fn config_hash_known_value() {
    assert_eq!(
        config_hash(""),
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    );
}
