use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BlockError, BlockKind, BlockSpec, SE_MIN_CHANNELS, SE_RATIO};
use crate::network::{BnStats, Exec, OpCost};
use crate::tensor::{ActKind, ParamId, ParamStore, Scalar, Shape, Tensor, TensorError};

/// A convolution's parameters. Depthwise units have `cin == cout` and one
/// input channel per group.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub depthwise: bool,
}

impl ConvUnit {
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let per_pixel = if self.depthwise {
            self.cout * self.k * self.k
        } else {
            self.cout * self.cin * self.k * self.k
        };
        (per_pixel * h * w) as u64
    }

    pub fn weight_elems(&self) -> u64 {
        let w = if self.depthwise {
            self.cout * self.k * self.k
        } else {
            self.cout * self.cin * self.k * self.k
        };
        (w + if self.bias.is_some() { self.cout } else { 0 }) as u64
    }

    fn cost(&self, name: &'static str, s: Shape, bn: bool) -> OpCost {
        OpCost {
            name,
            macs: self.macs(s.h, s.w) * s.n as u64,
            in_elems: s.numel() as u64,
            out_elems: (s.n * self.cout * s.plane()) as u64,
            // a folded batchnorm contributes a bias vector
            weight_elems: self.weight_elems()
                + if bn && self.bias.is_none() {
                    self.cout as u64
                } else {
                    0
                },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnUnit {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: usize,
}

/// Instantiated block. Parameter ids refer to the owning network's store.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    ConvAct {
        conv: ConvUnit,
        act: ActKind,
    },
    ConvBnAct {
        conv: ConvUnit,
        bn: BnUnit,
        act: ActKind,
    },
    ConvSe {
        conv: ConvUnit,
        act: ActKind,
        reduce: ConvUnit,
        expand: ConvUnit,
    },
    MbConv {
        expand: ConvUnit,
        bn1: BnUnit,
        dw: ConvUnit,
        bn2: BnUnit,
        project: ConvUnit,
        bn3: BnUnit,
        act: ActKind,
        residual: bool,
    },
    Csp {
        split: usize,
        inner: Box<Block>,
        transition: ConvUnit,
    },
    Dense {
        conv: ConvUnit,
        bn: BnUnit,
        act: ActKind,
    },
    Res {
        conv1: ConvUnit,
        bn1: BnUnit,
        conv2: ConvUnit,
        bn2: BnUnit,
        shortcut: Option<ConvUnit>,
        act: ActKind,
    },
}

/// Parameter allocation context shared by all blocks of one network.
pub struct Builder<'a, T> {
    pub params: &'a mut ParamStore<T>,
    pub stats: &'a mut Vec<BnStats<T>>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weight and bias.
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        depthwise: bool,
    ) -> ConvUnit {
        let (wshape, fan_in) = if depthwise {
            (Shape::new(cout, 1, k, k), k * k)
        } else {
            (Shape::new(cout, cin, k, k), cin * k * k)
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut uniform = |shape: Shape| {
            let data = (0..shape.numel())
                .map(|_| T::from_f64(self.rng.gen_range(-bound..bound)))
                .collect();
            Tensor::from_vec(shape, data).expect("sized")
        };
        let w = uniform(wshape);
        let b = bias.then(|| uniform(Shape::new(1, cout, 1, 1)));
        let weight = self.params.add(format!("{name}.w"), w);
        let bias = b.map(|b| self.params.add(format!("{name}.b"), b));
        ConvUnit {
            weight,
            bias,
            cin,
            cout,
            k,
            depthwise,
        }
    }

    pub fn bn(&mut self, name: &str, c: usize) -> BnUnit {
        let shape = Shape::new(1, c, 1, 1);
        let gamma = self
            .params
            .add(format!("{name}.gamma"), Tensor::full(shape, T::one()));
        let beta = self
            .params
            .add(format!("{name}.beta"), Tensor::zeros(shape));
        self.stats.push(BnStats::new(c));
        BnUnit {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }
}

/// Instantiates `spec` on `in_channels` inputs, registering parameters under
/// `prefix`. Returns the block and its output channel count.
pub fn build_block<T: Scalar>(
    spec: &BlockSpec,
    in_channels: usize,
    b: &mut Builder<'_, T>,
    prefix: &str,
) -> Result<(Block, usize), BlockError> {
    spec.check()?;
    if in_channels == 0 {
        return Err(BlockError::NoInputChannels);
    }
    let width = spec.width as usize;
    let act = spec.activation.kind();
    let kernel = spec.kernel.unwrap_or(3) as usize;
    let expansion = spec.expansion.unwrap_or(1) as usize;
    let p = |role: &str| format!("{prefix}.{role}");
    let block = match spec.kind {
        BlockKind::ConvAct => Block::ConvAct {
            conv: b.conv(&p("conv"), in_channels, width, kernel, true, false),
            act,
        },
        BlockKind::ConvBnAct => Block::ConvBnAct {
            conv: b.conv(&p("conv"), in_channels, width, kernel, false, false),
            bn: b.bn(&p("bn"), width),
            act,
        },
        BlockKind::ConvSe => {
            let reduced = (width / SE_RATIO).max(SE_MIN_CHANNELS);
            Block::ConvSe {
                conv: b.conv(&p("conv"), in_channels, width, kernel, true, false),
                act,
                reduce: b.conv(&p("se_reduce"), width, reduced, 1, true, false),
                expand: b.conv(&p("se_expand"), reduced, width, 1, true, false),
            }
        }
        BlockKind::MbConv | BlockKind::MbConvNoRes => mbconv(
            b,
            prefix,
            in_channels,
            width,
            expansion,
            act,
            spec.kind == BlockKind::MbConv,
        ),
        BlockKind::CspConv | BlockKind::CspMbConv => {
            let split = in_channels.div_ceil(2);
            let inner = if spec.kind == BlockKind::CspConv {
                Block::ConvBnAct {
                    conv: b.conv(&p("inner.conv"), split, split, 3, false, false),
                    bn: b.bn(&p("inner.bn"), split),
                    act,
                }
            } else {
                mbconv(b, &p("inner"), split, split, expansion, act, false)
            };
            Block::Csp {
                split,
                inner: Box::new(inner),
                transition: b.conv(&p("transition"), in_channels, width, 1, true, false),
            }
        }
        BlockKind::DenseNet => Block::Dense {
            conv: b.conv(&p("conv"), in_channels, width, 3, false, false),
            bn: b.bn(&p("bn"), width),
            act,
        },
        BlockKind::ResNet => Block::Res {
            conv1: b.conv(&p("conv1"), in_channels, width, kernel, false, false),
            bn1: b.bn(&p("bn1"), width),
            conv2: b.conv(&p("conv2"), width, width, kernel, false, false),
            bn2: b.bn(&p("bn2"), width),
            shortcut: (in_channels != width)
                .then(|| b.conv(&p("shortcut"), in_channels, width, 1, true, false)),
            act,
        },
    };
    Ok((block, spec.out_channels(in_channels)))
}

fn mbconv<T: Scalar>(
    b: &mut Builder<'_, T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    expansion: usize,
    act: ActKind,
    allow_residual: bool,
) -> Block {
    let hidden = cin * expansion;
    let p = |role: &str| format!("{prefix}.{role}");
    Block::MbConv {
        expand: b.conv(&p("expand"), cin, hidden, 1, false, false),
        bn1: b.bn(&p("bn1"), hidden),
        dw: b.conv(&p("dw"), hidden, hidden, 3, false, true),
        bn2: b.bn(&p("bn2"), hidden),
        project: b.conv(&p("project"), hidden, cout, 1, false, false),
        bn3: b.bn(&p("bn3"), cout),
        act,
        residual: allow_residual && cin == cout,
    }
}

impl Block {
    pub(crate) fn forward<T: Scalar>(
        &self,
        ex: &mut Exec<'_, T>,
        x: crate::tensor::NodeId,
    ) -> Result<crate::tensor::NodeId, TensorError> {
        match self {
            Block::ConvAct { conv, act } => {
                let y = ex.conv(x, conv)?;
                Ok(ex.act(y, *act))
            }
            Block::ConvBnAct { conv, bn, act } => {
                let y = ex.conv_bn(x, conv, bn)?;
                Ok(ex.act(y, *act))
            }
            Block::ConvSe {
                conv,
                act,
                reduce,
                expand,
            } => {
                let y = ex.conv(x, conv)?;
                let y = ex.act(y, *act);
                let s = ex.global_avg_pool(y)?;
                let s = ex.conv(s, reduce)?;
                let s = ex.act(s, *act);
                let s = ex.conv(s, expand)?;
                let s = ex.act(s, ActKind::Sigmoid);
                ex.mul_broadcast(y, s)
            }
            Block::MbConv {
                expand,
                bn1,
                dw,
                bn2,
                project,
                bn3,
                act,
                residual,
            } => {
                let y = ex.conv_bn(x, expand, bn1)?;
                let y = ex.act(y, *act);
                let y = ex.conv_bn(y, dw, bn2)?;
                let y = ex.act(y, *act);
                let y = ex.conv_bn(y, project, bn3)?;
                if *residual {
                    ex.add(y, x)
                } else {
                    Ok(y)
                }
            }
            Block::Csp {
                split,
                inner,
                transition,
            } => {
                let c = ex.shape(x).c;
                let first = ex.slice_channels(x, 0, *split)?;
                let y = inner.forward(ex, first)?;
                let y = if c > *split {
                    let rest = ex.slice_channels(x, *split, c - split)?;
                    ex.concat(y, rest)?
                } else {
                    y
                };
                ex.conv(y, transition)
            }
            Block::Dense { conv, bn, act } => {
                let y = ex.conv_bn(x, conv, bn)?;
                let y = ex.act(y, *act);
                ex.concat(x, y)
            }
            Block::Res {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
                act,
            } => {
                let y = ex.conv_bn(x, conv1, bn1)?;
                let y = ex.act(y, *act);
                let y = ex.conv_bn(y, conv2, bn2)?;
                let sc = match shortcut {
                    Some(s) => ex.conv(x, s)?,
                    None => x,
                };
                let y = ex.add(y, sc)?;
                Ok(ex.act(y, *act))
            }
        }
    }

    /// Every convolution with the batchnorm that directly follows it.
    pub fn conv_units(&self) -> Vec<(&ConvUnit, Option<&BnUnit>)> {
        match self {
            Block::ConvAct { conv, .. } => vec![(conv, None)],
            Block::ConvBnAct { conv, bn, .. } | Block::Dense { conv, bn, .. } => {
                vec![(conv, Some(bn))]
            }
            Block::ConvSe {
                conv,
                reduce,
                expand,
                ..
            } => vec![(conv, None), (reduce, None), (expand, None)],
            Block::MbConv {
                expand,
                bn1,
                dw,
                bn2,
                project,
                bn3,
                ..
            } => vec![(expand, Some(bn1)), (dw, Some(bn2)), (project, Some(bn3))],
            Block::Csp {
                inner, transition, ..
            } => {
                let mut v = inner.conv_units();
                v.push((transition, None));
                v
            }
            Block::Res {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
                ..
            } => {
                let mut v = vec![(conv1, Some(bn1)), (conv2, Some(bn2))];
                if let Some(s) = shortcut {
                    v.push((s, None));
                }
                v
            }
        }
    }

    /// Inference-graph operators (batchnorm folded) for an input of shape `s`.
    pub fn costs(&self, s: Shape, out: &mut Vec<OpCost>) -> Shape {
        let elementwise = |name, s: Shape| OpCost {
            name,
            macs: 0,
            in_elems: s.numel() as u64,
            out_elems: s.numel() as u64,
            weight_elems: 0,
        };
        let with_c = |s: Shape, c: usize| Shape::new(s.n, c, s.h, s.w);
        match self {
            Block::ConvAct { conv, .. } | Block::ConvBnAct { conv, .. } => {
                out.push(conv.cost("conv", s, matches!(self, Block::ConvBnAct { .. })));
                let y = with_c(s, conv.cout);
                out.push(elementwise("act", y));
                y
            }
            Block::ConvSe {
                conv,
                reduce,
                expand,
                ..
            } => {
                out.push(conv.cost("conv", s, false));
                let y = with_c(s, conv.cout);
                out.push(elementwise("act", y));
                out.push(OpCost {
                    name: "global_avg_pool",
                    macs: 0,
                    in_elems: y.numel() as u64,
                    out_elems: (y.n * y.c) as u64,
                    weight_elems: 0,
                });
                let g = Shape::new(s.n, conv.cout, 1, 1);
                out.push(reduce.cost("conv", g, false));
                out.push(elementwise("act", with_c(g, reduce.cout)));
                out.push(expand.cost("conv", with_c(g, reduce.cout), false));
                out.push(elementwise("sigmoid", g));
                out.push(OpCost {
                    name: "mul_broadcast",
                    macs: 0,
                    in_elems: (y.numel() + g.numel()) as u64,
                    out_elems: y.numel() as u64,
                    weight_elems: 0,
                });
                y
            }
            Block::MbConv {
                expand,
                dw,
                project,
                residual,
                ..
            } => {
                out.push(expand.cost("conv", s, true));
                let h = with_c(s, expand.cout);
                out.push(elementwise("act", h));
                out.push(dw.cost("depthwise_conv", h, true));
                out.push(elementwise("act", h));
                out.push(project.cost("conv", h, true));
                let y = with_c(s, project.cout);
                if *residual {
                    out.push(OpCost {
                        name: "add",
                        macs: 0,
                        in_elems: 2 * y.numel() as u64,
                        out_elems: y.numel() as u64,
                        weight_elems: 0,
                    });
                }
                y
            }
            Block::Csp {
                split,
                inner,
                transition,
            } => {
                out.push(elementwise("split", s));
                let y = inner.costs(with_c(s, *split), out);
                let cat = with_c(s, y.c + s.c - split);
                if s.c > *split {
                    out.push(elementwise("concat", cat));
                }
                out.push(transition.cost("conv", cat, false));
                with_c(s, transition.cout)
            }
            Block::Dense { conv, .. } => {
                out.push(conv.cost("conv", s, true));
                out.push(elementwise("act", with_c(s, conv.cout)));
                let y = with_c(s, s.c + conv.cout);
                out.push(elementwise("concat", y));
                y
            }
            Block::Res {
                conv1,
                conv2,
                shortcut,
                ..
            } => {
                out.push(conv1.cost("conv", s, true));
                let y = with_c(s, conv1.cout);
                out.push(elementwise("act", y));
                out.push(conv2.cost("conv", y, true));
                if let Some(sc) = shortcut {
                    out.push(sc.cost("conv", s, false));
                }
                out.push(OpCost {
                    name: "add",
                    macs: 0,
                    in_elems: 2 * y.numel() as u64,
                    out_elems: y.numel() as u64,
                    weight_elems: 0,
                });
                out.push(elementwise("act", y));
                y
            }
        }
    }
}
