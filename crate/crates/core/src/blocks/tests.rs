use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::genotype::{parse, sample_block, SearchSpaceConfig};
use crate::network::{Layer, Network};
use crate::tensor::{Shape, Tensor};

fn block(kind: BlockKind, k: Option<u8>, w: u16, e: Option<u8>) -> Token {
    Token::Block(BlockSpec::new(kind, k, w, e, Activation::Relu).unwrap())
}

fn net(tokens: &[Token], cin: usize, classes: usize) -> Network<f64> {
    Network::build(tokens, cin, classes, 7).unwrap()
}

fn set(n: &mut Network<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let id = n.params().find(name).unwrap_or_else(|| panic!("no param {name}"));
    for (i, v) in n.params_mut().get_mut(id).tensor.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

/// Makes the 1x1 head an identity over `c` channels so logits equal the
/// last feature map.
fn identity_head(n: &mut Network<f64>, c: usize) {
    set(n, "head.conv.w", |i| if i / c == i % c { 1.0 } else { 0.0 });
    set(n, "head.conv.b", |_| 0.0);
}

fn random_input(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn block_params(n: &Network<f64>) -> usize {
    n.params()
        .iter()
        .filter(|(_, p)| !p.name.starts_with("head."))
        .map(|(_, p)| p.tensor.data().len())
        .sum()
}

#[test]
fn conv_act_param_count() {
    let n = net(&[block(BlockKind::ConvAct, Some(3), 8, None)], 3, 2);
    assert_eq!(block_params(&n), 3 * 3 * 3 * 8 + 8);
    assert_eq!(n.param_count(), 224 + 8 * 2 + 2);
}

#[test]
fn head_only_param_count() {
    let n = net(&[], 4, 2);
    assert_eq!(n.param_count(), 4 * 2 + 2);
}

#[test]
fn width_doubles_conv_weights() {
    let a = net(&[block(BlockKind::ConvAct, Some(3), 8, None)], 3, 2);
    let b = net(&[block(BlockKind::ConvAct, Some(3), 16, None)], 3, 2);
    let w = |n: &Network<f64>| n.params().get(n.params().find("b0.conv.w").unwrap()).tensor.data().len();
    assert_eq!(w(&b), 2 * w(&a));
}

#[test]
fn param_count_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = SearchSpaceConfig::default();
    for _ in 0..200 {
        let g = crate::genotype::sample_random(&cfg, &mut rng);
        let n = g.build_network::<f32>(3, 2, 0).unwrap();
        let brute: usize = n.params().iter().map(|(_, p)| p.tensor.shape().numel()).sum();
        assert_eq!(n.param_count(), brute);
    }
}

#[test]
fn dense_concatenates() {
    let n = net(&[block(BlockKind::DenseNet, None, 4, None)], 6, 2);
    let shapes = n.layer_shapes(&Tensor::zeros(Shape::new(1, 6, 4, 4))).unwrap();
    assert_eq!(shapes[0].c, 10);
    assert_eq!(BlockSpec::new(BlockKind::DenseNet, None, 4, None, Activation::Relu).unwrap().out_channels(6), 10);
}

#[test]
fn mbconv_residual_rule() {
    let n = net(&[block(BlockKind::MbConv, None, 8, Some(4))], 8, 2);
    assert!(matches!(n.layers()[0], Layer::Block(Block::MbConv { residual: true, .. })));
    let n = net(&[block(BlockKind::MbConv, None, 8, Some(4))], 4, 2);
    assert!(matches!(n.layers()[0], Layer::Block(Block::MbConv { residual: false, .. })));
    let n = net(&[block(BlockKind::MbConvNoRes, None, 8, Some(4))], 8, 2);
    assert!(matches!(n.layers()[0], Layer::Block(Block::MbConv { residual: false, .. })));
}

#[test]
fn mac_counts() {
    let n = net(&[], 1, 1);
    assert_eq!(n.mac_count(Shape::new(1, 1, 4, 4)), 16);
    let n = net(&[block(BlockKind::ConvAct, Some(3), 8, None)], 3, 2);
    let costs = n.op_costs(Shape::new(1, 3, 32, 32));
    assert_eq!(costs[0].macs, 3 * 8 * 9 * 1024);
    assert_eq!(costs[0].macs, 221_184);
    let full = n.mac_count(Shape::new(1, 3, 32, 32));
    assert_eq!(n.mac_count(Shape::new(1, 3, 16, 16)) * 4, full);
}

#[test]
fn zeroed_mbconv_is_identity() {
    let mut n = net(&[block(BlockKind::MbConv, None, 8, Some(2))], 8, 8);
    identity_head(&mut n, 8);
    for name in ["b0.expand.w", "b0.dw.w", "b0.project.w"] {
        set(&mut n, name, |_| 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_input(Shape::new(2, 8, 5, 5), &mut rng);
    let y = n.forward_plain(&x).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn zeroed_resnet_is_activation_of_input() {
    let mut n = net(&[block(BlockKind::ResNet, Some(3), 8, None)], 8, 8);
    identity_head(&mut n, 8);
    for name in ["b0.conv1.w", "b0.conv2.w"] {
        set(&mut n, name, |_| 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_input(Shape::new(1, 8, 4, 4), &mut rng);
    let y = n.forward_plain(&x).unwrap();
    let relu: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(y.data(), &relu[..]);
}

#[test]
fn csp_keeps_untouched_half() {
    for (kind, e) in [(BlockKind::CspConv, None), (BlockKind::CspMbConv, Some(2))] {
        let mut n = net(&[block(kind, None, 8, e)], 8, 8);
        identity_head(&mut n, 8);
        set(&mut n, "b0.transition.w", |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        set(&mut n, "b0.transition.b", |_| 0.0);
        let zero: Vec<String> = n
            .params()
            .iter()
            .map(|(_, p)| p.name.clone())
            .filter(|s| s.starts_with("b0.inner.") && s.ends_with(".w"))
            .collect();
        for name in zero {
            set(&mut n, &name, |_| 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_input(Shape::new(1, 8, 3, 3), &mut rng);
        let y = n.forward_plain(&x).unwrap();
        let half = 4 * 9;
        assert!(y.data()[..half].iter().all(|&v| v == 0.0), "{kind:?}");
        assert_eq!(&y.data()[half..], &x.data()[half..], "{kind:?}");
    }
}

#[test]
fn csp_odd_split() {
    let n = net(&[block(BlockKind::CspConv, None, 4, None)], 5, 2);
    let shapes = n.layer_shapes(&Tensor::zeros(Shape::new(1, 5, 4, 4))).unwrap();
    assert_eq!(shapes[0].c, 4);
    assert!(matches!(&n.layers()[0], Layer::Block(Block::Csp { split: 3, .. })));
}

#[test]
fn se_gate_reduction() {
    let n = net(&[block(BlockKind::ConvSe, Some(3), 24, None)], 3, 2);
    let r = n.params().get(n.params().find("b0.se_reduce.w").unwrap()).tensor.shape();
    assert_eq!((r.n, r.c), (6, 24));
    let n = net(&[block(BlockKind::ConvSe, Some(3), 8, None)], 3, 2);
    let r = n.params().get(n.params().find("b0.se_reduce.w").unwrap()).tensor.shape();
    assert_eq!((r.n, r.c), (SE_MIN_CHANNELS, 8));
}

#[test]
fn head_restores_resolution() {
    for pools in 0..=3 {
        let mut s = String::from("B:CA,k3,c4,aR;");
        for _ in 0..pools {
            s.push_str("P:max;B:CA,k1,c4,aG;");
        }
        s.push('H');
        let g = parse(&s).unwrap();
        let n = g.build_network::<f32>(3, 2, 0).unwrap();
        for size in [13, 16, 32] {
            let out = n.forward_plain(&Tensor::zeros(Shape::new(1, 3, size, size))).unwrap();
            assert_eq!(out.shape(), Shape::new(1, 2, size, size));
        }
    }
}

#[test]
fn random_specs_report_true_channels_and_stay_finite() {
    let cfg = SearchSpaceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let spec = sample_block(&cfg, &mut rng);
        let cin = rng.gen_range(1..=12);
        let n = Network::<f32>::build(&[Token::Block(spec)], cin, 2, rng.gen()).unwrap();
        let x = random_input(Shape::new(1, cin, 6, 6), &mut rng).cast::<f32>();
        let shapes = n.layer_shapes(&x).unwrap();
        assert_eq!(shapes[0].c, spec.out_channels(cin), "{spec:?} cin={cin}");
        assert!(n.forward_plain(&x).unwrap().data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn spec_checks() {
    assert!(BlockSpec::new(BlockKind::ConvAct, None, 8, None, Activation::Relu).is_err());
    assert!(BlockSpec::new(BlockKind::MbConv, None, 20, Some(2), Activation::Relu).is_err());
    assert!(BlockSpec::new(BlockKind::DenseNet, Some(3), 4, None, Activation::Relu).is_err());
    assert!(BlockSpec::new(BlockKind::CspMbConv, None, 24, Some(4), Activation::Gelu).is_ok());
    for k in BlockKind::ALL {
        assert_eq!(BlockKind::from_code(k.code()), Some(k));
    }
}
