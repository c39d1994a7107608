//! Central-difference verification of tape gradients in binary64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Activation, BlockKind, BlockSpec, StructuralToken, Token};
use crate::network::{Mode, Network};
use crate::tensor::{PoolKind, Shape, Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub batch: usize,
    /// Input height and width.
    pub size: usize,
    pub seed: u64,
    /// Minimum distance of every ReLU input, clip input and max-pool
    /// runner-up from its kink; points closer than this are redrawn.
    pub kink_margin: f64,
    pub max_draws: usize,
    /// Denominator floor of the relative error, as a fraction of the
    /// largest analytic gradient magnitude. Near-zero gradients are then
    /// judged against the network's gradient scale instead of against
    /// finite-difference roundoff.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            batch: 2,
            size: 5,
            seed: 0,
            kink_margin: 1e-3,
            max_draws: 10_000,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Max of `|a - fd| / max(|a|, |fd|, floor)`.
    pub max_rel_error: f64,
    /// Max of `|a - fd| / (|a| + 1e-12)`, dominated by roundoff on
    /// near-zero gradients.
    pub max_rel_error_unfloored: f64,
    pub checked: usize,
    /// Points drawn until one cleared the kink margin.
    pub draws: usize,
    /// Parameter name and index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn loss(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    probe: &[f64],
    mode: Mode,
    seed: u64,
    backward: bool,
) -> Result<(f64, Option<crate::tensor::Gradients<f64>>, f64), TensorError> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = net.forward(&mut tape, input, mode, &mut rng)?;
    let r = tape.constant(tape.shape(y), probe.to_vec())?;
    let p = tape.mul(y, r)?;
    let l = tape.sum(p);
    let v = tape.value(l)[0];
    let margin = tape.kink_margin();
    let g = if backward {
        Some(tape.backward(l)?)
    } else {
        None
    };
    Ok((v, g, margin))
}

/// Compares every parameter gradient of `net` for the scalar loss
/// `sum(r * logits)` (fixed random `r`) against central differences.
pub fn finite_diff_check(
    net: &Network<f64>,
    mode: Mode,
    cfg: &GradCheckConfig,
) -> Result<GradReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = net.clone();
    net.unwrap_precision();
    let in_shape = Shape::new(cfg.batch, net.in_channels(), cfg.size, cfg.size);
    let out = Shape::new(cfg.batch, net.num_classes(), cfg.size, cfg.size);
    let mut draws = 0;
    let (input, probe, fseed, grads) = loop {
        draws += 1;
        for st in net.bn_stats_mut() {
            st.mean
                .iter_mut()
                .for_each(|m| *m = rng.gen_range(-0.5..0.5));
            st.var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        }
        let input = Tensor::from_vec(
            in_shape,
            (0..in_shape.numel())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )?;
        let probe: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fseed: u64 = rng.gen();
        let (_, grads, margin) = loss(&mut net, &input, &probe, mode, fseed, true)?;
        if margin >= cfg.kink_margin {
            break (input, probe, fseed, grads);
        }
        if draws >= cfg.max_draws {
            return Err(TensorError::InvalidArgument {
                op: "gradcheck",
                detail: format!("no kink-free point in {draws} draws"),
            });
        }
    };
    // Train-mode forwards above advanced the running statistics; the loss
    // in train mode does not depend on them and eval mode never updates them.
    let grads = grads.expect("backward requested");
    let ids: Vec<_> = net.params().iter().map(|(id, _)| id).collect();
    let mut report = GradReport {
        max_rel_error: 0.0,
        max_rel_error_unfloored: 0.0,
        checked: 0,
        draws,
        worst: None,
    };
    let h = cfg.step;
    let gmax = ids
        .iter()
        .filter_map(|&id| grads.param(id))
        .flatten()
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (cfg.floor * gmax).max(f64::MIN_POSITIVE);
    for id in ids {
        let n = net.params().get(id).tensor.data().len();
        let analytic = grads
            .param(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = net.params().get(id).tensor.data()[i];
            let at = |v: f64, net: &mut Network<f64>| {
                net.params_mut().get_mut(id).tensor.data_mut()[i] = v;
                loss(net, &input, &probe, mode, fseed, false).map(|r| r.0)
            };
            let lp = at(orig + h, &mut net)?;
            let lm = at(orig - h, &mut net)?;
            at(orig, &mut net)?;
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            report.checked += 1;
            report.max_rel_error_unfloored = report
                .max_rel_error_unfloored
                .max((a - fd).abs() / (a.abs() + 1e-12));
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((net.params().get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Smallest instance of `kind`: minimum width, kernel 3, expansion 2.
pub fn min_block(kind: BlockKind, activation: Activation) -> BlockSpec {
    BlockSpec {
        kind,
        kernel: kind.has_kernel().then_some(3),
        expansion: kind.has_expansion().then_some(2),
        width: kind.widths()[0],
        activation,
    }
}

/// Test network around one block: a leading ConvBnAct (so the block's input
/// gradient is exercised), the block, a padded max pool, dropout, and the
/// upsampling head.
pub fn probe_tokens(block: BlockSpec) -> Vec<Token> {
    let lead = BlockSpec {
        kind: BlockKind::ConvBnAct,
        kernel: Some(3),
        width: 4,
        expansion: None,
        activation: Activation::Gelu,
    };
    vec![
        Token::Block(lead),
        Token::Block(block),
        Token::Structural(StructuralToken::Pool(PoolKind::Max)),
        Token::Structural(StructuralToken::Dropout(crate::blocks::DropRate::P20)),
    ]
}

/// Gradient check of one block kind in both train and eval mode; returns
/// the worse of the two reports.
pub fn check_block(
    kind: BlockKind,
    activation: Activation,
    cfg: &GradCheckConfig,
) -> Result<GradReport, TensorError> {
    let net = Network::<f64>::build(&probe_tokens(min_block(kind, activation)), 3, 2, cfg.seed)
        .map_err(|e| TensorError::InvalidArgument {
            op: "gradcheck",
            detail: e.to_string(),
        })?;
    let train = finite_diff_check(&net, Mode::Train, cfg)?;
    let eval = finite_diff_check(&net, Mode::Eval, cfg)?;
    let mut worst = if train.max_rel_error >= eval.max_rel_error {
        train.clone()
    } else {
        eval.clone()
    };
    worst.checked = train.checked + eval.checked;
    worst.draws = train.draws + eval.draws;
    worst.max_rel_error_unfloored = train
        .max_rel_error_unfloored
        .max(eval.max_rel_error_unfloored);
    Ok(worst)
}
