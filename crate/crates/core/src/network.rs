//! Single-path segmentation networks assembled from genotype tokens.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::build::Builder;
use crate::blocks::{
    build_block, Block, BlockError, BnUnit, ConvUnit, HeadSpec, StructuralToken, Token,
};
use crate::precision::{OverflowPolicy, PrecisionConfig, PrecisionError};
use crate::tensor::{
    check_dim, ActKind, NodeId, ParamId, ParamStore, PoolKind, Scalar, Shape, Tape, Tensor,
    TensorError,
};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running statistics of one batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(c: usize) -> Self {
        Self {
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        }
    }
}

/// One operator of the inference graph, as seen by the device cost model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpCost {
    pub name: &'static str,
    pub macs: u64,
    pub in_elems: u64,
    pub out_elems: u64,
    pub weight_elems: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Block(Block),
    Pool(PoolKind),
    Dropout(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub conv: ConvUnit,
    pub spec: HeadSpec,
}

/// Conv weights with batchnorm folded in and everything rounded to FP16.
#[derive(Debug, Clone)]
pub struct DeployTable<T> {
    convs: HashMap<ParamId, (Vec<T>, Option<Vec<T>>)>,
    policy: OverflowPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    tokens: Vec<Token>,
    in_channels: usize,
    layers: Vec<Layer>,
    head: Head,
    params: ParamStore<T>,
    stats: Vec<BnStats<T>>,
    precision: Option<PrecisionConfig>,
}

type StatUpdate<T> = (usize, Vec<T>, Vec<T>);

/// Forward-pass context handed to blocks.
pub(crate) struct Exec<'a, T> {
    tape: &'a mut Tape<T>,
    params: &'a ParamStore<T>,
    stats: &'a [BnStats<T>],
    updates: Vec<StatUpdate<T>>,
    train: bool,
    precision: Option<&'a PrecisionConfig>,
    deploy: Option<&'a DeployTable<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Exec<'_, T> {
    pub fn shape(&self, x: NodeId) -> Shape {
        self.tape.shape(x)
    }

    fn post(&mut self, y: NodeId) -> NodeId {
        if let Some(d) = self.deploy {
            self.tape.project_in_place(y, d.policy);
        }
        y
    }

    fn raw_conv(
        &mut self,
        x: NodeId,
        unit: &ConvUnit,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        if unit.depthwise {
            self.tape.depthwise_conv2d(x, w, b, unit.k)
        } else {
            self.tape.conv2d(x, w, b, unit.k)
        }
    }

    /// Convolution; an accumulation site for training-time FP16 emulation.
    pub fn conv(&mut self, x: NodeId, unit: &ConvUnit) -> Result<NodeId, TensorError> {
        if let Some(d) = self.deploy {
            let (w, b) = &d.convs[&unit.weight];
            let wshape = self.params.get(unit.weight).tensor.shape();
            let wn = self.tape.constant(wshape, w.clone())?;
            let bn = match b {
                Some(b) => Some(
                    self.tape
                        .constant(Shape::new(1, unit.cout, 1, 1), b.clone())?,
                ),
                None => None,
            };
            let y = self.raw_conv(x, unit, wn, bn)?;
            return Ok(self.post(y));
        }
        let mut w = self.tape.param(self.params, unit.weight);
        let mut b = unit.bias.map(|b| self.tape.param(self.params, b));
        if let Some(p) = self.precision.filter(|p| p.round_weights) {
            w = self.tape.project_fp16(w, p.overflow_policy);
            b = b.map(|b| self.tape.project_fp16(b, p.overflow_policy));
        }
        let mut y = self.raw_conv(x, unit, w, b)?;
        if let Some(p) = self.precision {
            if p.clip_activations {
                y = self.tape.clip(y, p.clip_bound);
            }
            if p.project_activations {
                y = self.tape.project_fp16(y, p.overflow_policy);
            }
        }
        Ok(y)
    }

    /// Convolution followed by batchnorm; folded into one conv when deployed.
    pub fn conv_bn(
        &mut self,
        x: NodeId,
        unit: &ConvUnit,
        bn: &BnUnit,
    ) -> Result<NodeId, TensorError> {
        let y = self.conv(x, unit)?;
        if self.deploy.is_some() {
            return Ok(y);
        }
        self.bn(y, bn)
    }

    pub fn bn(&mut self, x: NodeId, bn: &BnUnit) -> Result<NodeId, TensorError> {
        let g = self.tape.param(self.params, bn.gamma);
        let b = self.tape.param(self.params, bn.beta);
        let y = if self.train {
            let (y, mean, var) = self.tape.batchnorm_train(x, g, b, BN_EPS)?;
            self.updates.push((bn.stats, mean, var));
            y
        } else {
            let s = &self.stats[bn.stats];
            self.tape.batchnorm_eval(x, g, b, &s.mean, &s.var, BN_EPS)?
        };
        Ok(self.post(y))
    }

    pub fn act(&mut self, x: NodeId, kind: ActKind) -> NodeId {
        let y = self.tape.activation(x, kind);
        self.post(y)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let y = self.tape.global_avg_pool(x)?;
        Ok(self.post(y))
    }

    pub fn mul_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let y = self.tape.mul_broadcast(a, b)?;
        Ok(self.post(y))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let y = self.tape.add(a, b)?;
        Ok(self.post(y))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let y = self.tape.concat_channels(a, b)?;
        Ok(self.post(y))
    }

    pub fn slice_channels(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let y = self.tape.slice_channels(x, start, len)?;
        Ok(self.post(y))
    }

    fn pool(&mut self, x: NodeId, kind: PoolKind) -> Result<NodeId, TensorError> {
        let y = self.tape.pool2d(x, kind)?;
        Ok(self.post(y))
    }

    fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId, TensorError> {
        let train = self.train && self.deploy.is_none();
        self.tape.dropout(x, rate, train, self.rng)
    }

    fn upsample_crop(
        &mut self,
        x: NodeId,
        f: usize,
        h: usize,
        w: usize,
    ) -> Result<NodeId, TensorError> {
        if f == 1 {
            return Ok(x);
        }
        let y = self.tape.upsample_nearest(x, f)?;
        let y = self.tape.crop(y, h, w)?;
        Ok(self.post(y))
    }
}

impl<T: Scalar> Network<T> {
    /// Instantiates a network for `tokens`. Zero blocks is allowed here and
    /// yields a head-only network; genotypes always carry at least one block.
    pub fn build(
        tokens: &[Token],
        in_channels: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self, BlockError> {
        if in_channels == 0 {
            return Err(BlockError::NoInputChannels);
        }
        let mut params = ParamStore::new();
        let mut stats = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: &mut params,
            stats: &mut stats,
            rng: &mut rng,
        };
        let mut layers = Vec::new();
        let mut c = in_channels;
        let mut pools = 0;
        let mut nblock = 0;
        for t in tokens {
            match t {
                Token::Block(spec) => {
                    let (block, out) = build_block(spec, c, &mut b, &format!("b{nblock}"))?;
                    layers.push(Layer::Block(block));
                    c = out;
                    nblock += 1;
                }
                Token::Structural(StructuralToken::Pool(k)) => {
                    layers.push(Layer::Pool(*k));
                    pools += 1;
                }
                Token::Structural(StructuralToken::Dropout(r)) => {
                    layers.push(Layer::Dropout(r.value()))
                }
            }
        }
        let conv = b.conv("head.conv", c, num_classes, 1, true, false);
        Ok(Self {
            tokens: tokens.to_vec(),
            in_channels,
            layers,
            head: Head {
                conv,
                spec: HeadSpec::new(num_classes, pools),
            },
            params,
            stats,
            precision: None,
        })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.head.spec.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BnStats<T>] {
        &self.stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BnStats<T>] {
        &mut self.stats
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn precision(&self) -> Option<&PrecisionConfig> {
        self.precision.as_ref()
    }

    /// Attaches training-time FP16 emulation. Wrapping twice is rejected.
    pub fn wrap(&mut self, config: PrecisionConfig) -> Result<(), PrecisionError> {
        config.check()?;
        if self.precision.is_some() {
            return Err(PrecisionError::AlreadyWrapped);
        }
        self.precision = Some(config);
        Ok(())
    }

    pub fn unwrap_precision(&mut self) -> Option<PrecisionConfig> {
        self.precision.take()
    }

    /// Same network with the scalar type converted.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut params = ParamStore::new();
        for (_, p) in self.params.iter() {
            params.add(p.name.clone(), p.tensor.cast());
        }
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        Network {
            tokens: self.tokens.clone(),
            in_channels: self.in_channels,
            layers: self.layers.clone(),
            head: self.head.clone(),
            params,
            stats: self
                .stats
                .iter()
                .map(|s| BnStats {
                    mean: conv(&s.mean),
                    var: conv(&s.var),
                })
                .collect(),
            precision: self.precision,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        train: bool,
        precision: Option<&PrecisionConfig>,
        deploy: Option<&DeployTable<T>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, Vec<StatUpdate<T>>), TensorError> {
        let s = input.shape();
        check_dim("network", "input channels", self.in_channels, s.c)?;
        let mut ex = Exec {
            tape,
            params: &self.params,
            stats: &self.stats,
            updates: Vec::new(),
            train,
            precision,
            deploy,
            rng,
        };
        let x = ex.tape.leaf(input, false);
        let mut h = ex.post(x);
        for layer in &self.layers {
            h = match layer {
                Layer::Block(b) => b.forward(&mut ex, h)?,
                Layer::Pool(k) => ex.pool(h, *k)?,
                Layer::Dropout(r) => ex.dropout(h, *r)?,
            };
        }
        h = ex.upsample_crop(h, self.head.spec.upsample, s.h, s.w)?;
        let logits = ex.conv(h, &self.head.conv)?;
        Ok((logits, ex.updates))
    }

    /// Forward pass returning the logits node. Training mode updates
    /// batchnorm running statistics. Attached precision emulation applies.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TensorError> {
        let precision = self.precision;
        let (out, updates) = self.run(
            tape,
            input,
            mode == Mode::Train,
            precision.as_ref(),
            None,
            rng,
        )?;
        let m = T::from_f64(BN_MOMENTUM);
        for (i, mean, var) in updates {
            let st = &mut self.stats[i];
            for (r, b) in st.mean.iter_mut().zip(&mean) {
                *r = (T::one() - m) * *r + m * *b;
            }
            for (r, b) in st.var.iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * *b;
            }
        }
        Ok(out)
    }

    /// Output shape of every layer in an eval-mode forward of `input`,
    /// followed by the logits shape.
    pub fn layer_shapes(&self, input: &Tensor<T>) -> Result<Vec<Shape>, TensorError> {
        let s = input.shape();
        check_dim("network", "input channels", self.in_channels, s.c)?;
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ex = Exec {
            tape: &mut tape,
            params: &self.params,
            stats: &self.stats,
            updates: Vec::new(),
            train: false,
            precision: None,
            deploy: None,
            rng: &mut rng,
        };
        let mut h = ex.tape.leaf(input, false);
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        for layer in &self.layers {
            h = match layer {
                Layer::Block(b) => b.forward(&mut ex, h)?,
                Layer::Pool(k) => ex.pool(h, *k)?,
                Layer::Dropout(r) => ex.dropout(h, *r)?,
            };
            shapes.push(ex.shape(h));
        }
        h = ex.upsample_crop(h, self.head.spec.upsample, s.h, s.w)?;
        let logits = ex.conv(h, &self.head.conv)?;
        shapes.push(ex.shape(logits));
        Ok(shapes)
    }

    /// Eval-mode forward ignoring any attached precision emulation.
    pub fn forward_plain(&self, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = self.run(&mut tape, input, false, None, None, &mut rng)?;
        Ok(tape.tensor(out))
    }

    /// Eval-mode forward with attached precision emulation (if any).
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = self.run(
            &mut tape,
            input,
            false,
            self.precision.as_ref(),
            None,
            &mut rng,
        )?;
        Ok(tape.tensor(out))
    }

    /// Folds each batchnorm into its preceding conv and rounds every deployed
    /// weight to FP16.
    pub fn deploy_table(&self, policy: OverflowPolicy) -> DeployTable<T> {
        let mut convs = HashMap::new();
        let mut units: Vec<(&ConvUnit, Option<&BnUnit>)> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Block(b) => Some(b.conv_units()),
                _ => None,
            })
            .flatten()
            .collect();
        units.push((&self.head.conv, None));
        let eps = T::from_f64(BN_EPS);
        for (unit, bn) in units {
            let mut w = self.params.get(unit.weight).tensor.data().to_vec();
            let mut b: Option<Vec<T>> =
                unit.bias.map(|b| self.params.get(b).tensor.data().to_vec());
            if let Some(bn) = bn {
                let gamma = self.params.get(bn.gamma).tensor.data();
                let beta = self.params.get(bn.beta).tensor.data();
                let st = &self.stats[bn.stats];
                let per_out = w.len() / unit.cout;
                let mut folded = vec![T::zero(); unit.cout];
                for c in 0..unit.cout {
                    let scale = gamma[c] / (st.var[c] + eps).sqrt();
                    w[c * per_out..(c + 1) * per_out]
                        .iter_mut()
                        .for_each(|v| *v *= scale);
                    let bias = b.as_ref().map_or(T::zero(), |b| b[c]);
                    folded[c] = (bias - st.mean[c]) * scale + beta[c];
                }
                b = Some(folded);
            }
            let proj = |v: &mut Vec<T>| v.iter_mut().for_each(|x| *x = x.project_fp16(policy));
            proj(&mut w);
            if let Some(b) = b.as_mut() {
                proj(b);
            }
            convs.insert(unit.weight, (w, b));
        }
        DeployTable { convs, policy }
    }

    /// Simulated device inference using a prepared [`DeployTable`]: input and
    /// every operator output rounded to FP16, no clipping.
    pub fn forward_deployed(
        &self,
        table: &DeployTable<T>,
        input: &Tensor<T>,
    ) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = self.run(&mut tape, input, false, None, Some(table), &mut rng)?;
        Ok(tape.tensor(out))
    }

    /// Operators of the inference graph for one forward pass of `input`.
    pub fn op_costs(&self, input: Shape) -> Vec<OpCost> {
        let mut out = Vec::new();
        let mut s = input;
        for layer in &self.layers {
            match layer {
                Layer::Block(b) => s = b.costs(s, &mut out),
                Layer::Pool(_) => {
                    let o = Shape::new(s.n, s.c, s.h.div_ceil(2), s.w.div_ceil(2));
                    out.push(OpCost {
                        name: "pool",
                        macs: 0,
                        in_elems: s.numel() as u64,
                        out_elems: o.numel() as u64,
                        weight_elems: 0,
                    });
                    s = o;
                }
                Layer::Dropout(_) => {}
            }
        }
        if self.head.spec.upsample > 1 {
            let o = Shape::new(s.n, s.c, input.h, input.w);
            out.push(OpCost {
                name: "upsample",
                macs: 0,
                in_elems: s.numel() as u64,
                out_elems: o.numel() as u64,
                weight_elems: 0,
            });
            s = o;
        }
        let head = &self.head.conv;
        out.push(OpCost {
            name: "conv",
            macs: head.macs(s.h, s.w) * s.n as u64,
            in_elems: s.numel() as u64,
            out_elems: (s.n * head.cout * s.plane()) as u64,
            weight_elems: head.weight_elems(),
        });
        out
    }

    /// Multiply-accumulates of one forward pass.
    pub fn mac_count(&self, input: Shape) -> u64 {
        self.op_costs(input).iter().map(|c| c.macs).sum()
    }
}

/// Per-pixel argmax over classes (lowest index wins ties).
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let d = logits.data();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if d[(n * s.c + c) * plane + p] > d[(n * s.c + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
