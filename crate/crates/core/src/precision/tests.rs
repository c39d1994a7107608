use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::genotype::{parse, sample_random, SearchSpaceConfig};
use crate::network::Mode;
use crate::tensor::{Shape, Tape};

fn rand_tensor(shape: Shape, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let data = (0..shape.numel())
        .map(|_| rng.gen_range(-scale..scale) as f32)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn is_fp16(t: &Tensor<f32>) -> bool {
    t.data()
        .iter()
        .all(|&v| project_scalar(v as f64, OverflowPolicy::Saturate) == v as f64)
}

/// Sets every parameter to a small dyadic value, so all products and sums
/// of the tiny networks below stay exactly representable in binary16.
fn dyadic_weights(net: &mut Network<f32>) {
    let ids: Vec<_> = net.params().iter().map(|(id, _)| id).collect();
    for (j, id) in ids.into_iter().enumerate() {
        for (i, v) in net.params_mut().get_mut(id).tensor.data_mut().iter_mut().enumerate() {
            *v = ((i + j) % 5) as f32 * 0.25 - 0.5;
        }
    }
}

#[test]
fn clip_examples() {
    let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![12.5f32, -15.0, 3.7, -12.0]).unwrap();
    assert_eq!(clip_activation(&x, 12.0).data(), &[12.0, -12.0, 3.7, -12.0]);
}

#[test]
fn projection_examples() {
    let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1.5f64, 0.1, 2049.0, 1e6]).unwrap();
    assert_eq!(
        project_fp16(&x, OverflowPolicy::Saturate).data(),
        &[1.5, 0.0999755859375, 2048.0, 65504.0]
    );
}

#[test]
fn config_checks() {
    assert!(PrecisionConfig::aligned().check().is_ok());
    for b in [0.0, -1.0, 65504.0, f64::NAN] {
        let c = PrecisionConfig {
            clip_bound: b,
            ..PrecisionConfig::aligned()
        };
        assert!(matches!(c.check(), Err(PrecisionError::BadClipBound(_))));
    }
    let sites = PrecisionConfig::off().sites();
    assert!(sites.iter().all(|s| !s.enabled));
    assert_eq!(PrecisionConfig::aligned().sites().len(), 3);
}

#[test]
fn double_wrap_rejected() {
    let g = parse("B:CA,k3,c8,aR;H").unwrap();
    let net = g.build_network::<f32>(3, 2, 1).unwrap();
    let w = wrap_network(&net, PrecisionConfig::aligned()).unwrap();
    assert_eq!(
        wrap_network(&w, PrecisionConfig::off()),
        Err(PrecisionError::AlreadyWrapped)
    );
    let mut u = w.clone();
    assert_eq!(u.unwrap_precision(), Some(PrecisionConfig::aligned()));
    assert!(u.wrap(PrecisionConfig::off()).is_ok());
}

#[test]
fn all_off_is_bit_identical() {
    let cfg = SearchSpaceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let g = sample_random(&cfg, &mut rng);
        let mut plain = g.build_network::<f32>(3, 2, rng.gen()).unwrap();
        let mut wrapped = wrap_network(&plain, PrecisionConfig::off()).unwrap();
        let x = rand_tensor(Shape::new(2, 3, 8, 8), 1.0, &mut rng);
        assert_eq!(plain.forward_plain(&x).unwrap(), wrapped.forward_eval(&x).unwrap());
        // Training-mode forward and gradients as well.
        let seed = rng.gen();
        let run = |n: &mut Network<f32>| {
            let mut tape = Tape::new();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y = n.forward(&mut tape, &x, Mode::Train, &mut r).unwrap();
            let l = tape.sum(y);
            let grads = tape.backward(l).unwrap();
            let ids: Vec<_> = n.params().iter().map(|(id, _)| id).collect();
            let g: Vec<Vec<f32>> = ids
                .into_iter()
                .map(|id| grads.param(id).map(<[f32]>::to_vec).unwrap_or_default())
                .collect();
            (tape.tensor(y), g)
        };
        assert_eq!(run(&mut plain), run(&mut wrapped));
    }
}

#[test]
fn fixed_point_network_is_unchanged_by_wrapping() {
    let g = parse("B:CA,k1,c4,aR;H").unwrap();
    let mut net = g.build_network::<f32>(3, 2, 0).unwrap();
    dyadic_weights(&mut net);
    let x = Tensor::from_vec(
        Shape::new(1, 3, 4, 4),
        (0..48).map(|i| (i % 7) as f32 * 0.125).collect(),
    )
    .unwrap();
    let wrapped = wrap_network(&net, PrecisionConfig::aligned()).unwrap();
    assert_eq!(net.forward_plain(&x).unwrap(), wrapped.forward_eval(&x).unwrap());
}

#[test]
fn logits_of_wrapped_networks_are_fp16() {
    let cfg = SearchSpaceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let g = sample_random(&cfg, &mut rng);
        let net = g.build_network::<f32>(3, 2, rng.gen()).unwrap();
        let w = wrap_network(&net, PrecisionConfig::aligned()).unwrap();
        let x = rand_tensor(Shape::new(1, 3, 8, 8), 1.0, &mut rng);
        let y = w.forward_eval(&x).unwrap();
        assert!(is_fp16(&y), "{g}");
        assert!(y.data().iter().all(|v| v.abs() <= 12.0));
    }
}

#[test]
fn every_conv_site_is_projected() {
    // The tape's projection nodes sit right after each conv (and after the
    // weights it reads), so counting them checks site placement.
    let g = parse("B:CBA,k3,c4,aR;P:max;B:RN,k3,c8,aG;H").unwrap();
    let net = g.build_network::<f32>(3, 2, 0).unwrap();
    let w = wrap_network(&net, PrecisionConfig::aligned()).unwrap();
    let x = rand_tensor(Shape::new(1, 3, 6, 6), 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let mut w = w;
    let y = w
        .forward(&mut tape, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert!(is_fp16(&tape.tensor(y)));
    let convs = 1 + 3 + 1; // CBA conv, ResNet conv1/conv2/shortcut, head
    let biased = 2; // ResNet shortcut and the head carry biases
    assert_eq!(tape.projection_count(), convs * 2 + biased);
}

#[test]
fn deploy_is_idempotent_on_projected_input() {
    let cfg = SearchSpaceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let g = sample_random(&cfg, &mut rng);
        let net = g.build_network::<f32>(3, 2, rng.gen()).unwrap();
        let x = rand_tensor(Shape::new(1, 3, 8, 8), 1.0, &mut rng);
        let px = project_fp16(&x, OverflowPolicy::Saturate);
        let a = deploy_mode_forward(&net, &x, OverflowPolicy::Saturate).unwrap();
        let b = deploy_mode_forward(&net, &px, OverflowPolicy::Saturate).unwrap();
        assert_eq!(a, b);
        assert!(is_fp16(&a));
    }
}

#[test]
fn deploy_matches_fp32_on_exact_network() {
    let g = parse("B:CBA,k1,c4,aR;P:max;H").unwrap();
    let mut net = g.build_network::<f32>(3, 2, 0).unwrap();
    dyadic_weights(&mut net);
    for st in net.bn_stats_mut() {
        st.mean.iter_mut().for_each(|m| *m = 0.0);
        st.var.iter_mut().for_each(|v| *v = 1.0 - 1e-5);
    }
    let x = Tensor::from_vec(
        Shape::new(1, 3, 4, 4),
        (0..48).map(|i| (i % 5) as f32 * 0.25).collect(),
    )
    .unwrap();
    let plain = net.forward_plain(&x).unwrap();
    let dep = deploy_mode_forward(&net, &x, OverflowPolicy::Saturate).unwrap();
    assert!(is_fp16(&plain));
    for (a, b) in plain.data().iter().zip(dep.data()) {
        assert!((a - b).abs() <= 1e-3 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn deploy_fold_tracks_eval() {
    let cfg = SearchSpaceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let g = sample_random(&cfg, &mut rng);
        let mut net = g.build_network::<f64>(3, 2, rng.gen()).unwrap();
        for st in net.bn_stats_mut() {
            st.mean.iter_mut().for_each(|m| *m = rng.gen_range(-0.2..0.2));
            st.var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        }
        let x = Tensor::from_vec(
            Shape::new(1, 3, 8, 8),
            (0..192).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let plain = net.forward_plain(&x).unwrap();
        let dep = deploy_mode_forward(&net, &x, OverflowPolicy::Saturate).unwrap();
        let scale = plain.data().iter().fold(1e-3f64, |m, v| m.max(v.abs()));
        let err = plain
            .data()
            .iter()
            .zip(dep.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err / scale < 0.05, "{g}: err {err} scale {scale}");
    }
}
