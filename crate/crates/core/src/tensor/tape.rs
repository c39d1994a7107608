use std::collections::HashMap;

use rand::Rng;

use super::kernels;
use super::{check_dim, ParamId, ParamStore, Scalar, Shape, Tensor, TensorError};
use crate::precision::OverflowPolicy;

/// Index of a node on a [`Tape`]. Inputs always precede their consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActKind {
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        k: usize,
    },
    Depthwise {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        k: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Act {
        x: NodeId,
        kind: ActKind,
    },
    MaxPool {
        x: NodeId,
        arg: Vec<usize>,
    },
    AvgPool {
        x: NodeId,
    },
    GlobalAvg {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    MulBroadcast {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        s: T,
    },
    Sum {
        x: NodeId,
    },
    Upsample {
        x: NodeId,
        f: usize,
    },
    Crop {
        x: NodeId,
    },
    Slice {
        x: NodeId,
        start: usize,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    Clip {
        x: NodeId,
        bound: T,
    },
    Project {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Vec<T>,
        target: Vec<u8>,
        ignore: u8,
        count: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Shape,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&[T]> {
        self.nodes.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|n| self.node(*n))
    }
}

/// Records operations during a forward pass and replays them in exact
/// reverse order to compute gradients. One tape serves one forward/backward
/// sequence; call [`Tape::reset`] to reuse it.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
    consumed: bool,
}

fn take_grad<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    id: NodeId,
    len: usize,
    needed: bool,
) -> Option<Vec<T>> {
    if !needed {
        return None;
    }
    Some(grads[id.0].take().unwrap_or_else(|| vec![T::zero(); len]))
}

fn put_grad<T>(grads: &mut [Option<Vec<T>>], id: NodeId, g: Option<Vec<T>>) {
    if g.is_some() {
        grads[id.0] = g;
    }
}

fn gelu_cdf<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of FP16 projection nodes recorded so far.
    pub fn projection_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Project { .. }))
            .count()
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.numel(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        let n = &self.nodes[id.0];
        Tensor::from_vec(n.shape, n.value.clone()).expect("node shape consistent")
    }

    /// Largest finite-or-not magnitude over all recorded values.
    pub fn max_abs_value(&self) -> f64 {
        self.nodes
            .iter()
            .flat_map(|n| n.value.iter())
            .map(|v| v.to_f64().abs())
            .fold(0.0, |a, v| if v.is_nan() || v > a { v } else { a })
    }

    /// Records a leaf holding `tensor`'s data.
    pub fn leaf(&mut self, tensor: &Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(
            tensor.shape(),
            tensor.data().to_vec(),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn constant(&mut self, shape: Shape, value: Vec<T>) -> Result<NodeId, TensorError> {
        check_dim("constant", "length", shape.numel(), value.len())?;
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    /// Node for a parameter; repeated requests return the same node so the
    /// gradient of a shared parameter accumulates in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(n) = self.params.get(&id) {
            return *n;
        }
        let t = &store.get(id).tensor;
        let n = self.push(t.shape(), t.data().to_vec(), Op::Param, true);
        self.params.insert(id, n);
        n
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        k: usize,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "conv2d";
        if !matches!(k, 1 | 3 | 5) {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: format!("kernel {k} not in {{1,3,5}}"),
            });
        }
        let xs = self.shape(x);
        let ws = self.shape(w);
        check_dim(OP, "weight C_in", xs.c, ws.c)?;
        check_dim(OP, "weight kernel height", k, ws.h)?;
        check_dim(OP, "weight kernel width", k, ws.w)?;
        if let Some(b) = b {
            check_dim(OP, "bias length", ws.n, self.shape(b).numel())?;
        }
        let out = kernels::conv2d_forward(
            self.value(x),
            xs,
            self.value(w),
            ws.n,
            k,
            b.map(|b| self.value(b)),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Shape::new(xs.n, ws.n, xs.h, xs.w),
            out,
            Op::Conv2d { x, w, b, k },
            rg,
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        k: usize,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "depthwise_conv2d";
        if !matches!(k, 1 | 3 | 5) {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: format!("kernel {k} not in {{1,3,5}}"),
            });
        }
        let xs = self.shape(x);
        let ws = self.shape(w);
        check_dim(OP, "weight channels", xs.c, ws.n)?;
        check_dim(OP, "weight group width", 1, ws.c)?;
        check_dim(OP, "weight kernel height", k, ws.h)?;
        check_dim(OP, "weight kernel width", k, ws.w)?;
        if let Some(b) = b {
            check_dim(OP, "bias length", xs.c, self.shape(b).numel())?;
        }
        let out = kernels::depthwise_forward(
            self.value(x),
            xs,
            self.value(w),
            k,
            b.map(|b| self.value(b)),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(xs, out, Op::Depthwise { x, w, b, k }, rg))
    }

    fn bn_check(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<Shape, TensorError> {
        let xs = self.shape(x);
        check_dim(
            "batchnorm2d",
            "gamma length",
            xs.c,
            self.shape(gamma).numel(),
        )?;
        check_dim("batchnorm2d", "beta length", xs.c, self.shape(beta).numel())?;
        Ok(xs)
    }

    /// Train-mode batch normalization. Returns the output together with the
    /// batch mean and unbiased batch variance for running-stat updates.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<T>, Vec<T>), TensorError> {
        let s = self.bn_check(x, gamma, beta)?;
        let m = s.n * s.plane();
        if m < 2 {
            return Err(TensorError::InvalidArgument {
                op: "batchnorm2d",
                detail: format!("train mode needs N*H*W >= 2, got {m}"),
            });
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mf = T::from_f64(m as f64);
        let mut mean = vec![T::zero(); s.c];
        let mut var_unbiased = vec![T::zero(); s.c];
        let mut inv_std = vec![T::zero(); s.c];
        let mut xhat = vec![T::zero(); s.numel()];
        let mut out = vec![T::zero(); s.numel()];
        for c in 0..s.c {
            let mut acc = T::zero();
            for n in 0..s.n {
                xv[(n * s.c + c) * s.plane()..][..s.plane()]
                    .iter()
                    .for_each(|v| acc += *v);
            }
            let mu = acc / mf;
            let mut sq = T::zero();
            for n in 0..s.n {
                xv[(n * s.c + c) * s.plane()..][..s.plane()]
                    .iter()
                    .for_each(|v| sq += (*v - mu) * (*v - mu));
            }
            let var = sq / mf;
            let is = T::one() / (var + T::from_f64(eps)).sqrt();
            mean[c] = mu;
            var_unbiased[c] = sq / T::from_f64((m - 1) as f64);
            inv_std[c] = is;
            for n in 0..s.n {
                let off = (n * s.c + c) * s.plane();
                for i in off..off + s.plane() {
                    xhat[i] = (xv[i] - mu) * is;
                    out[i] = g[c] * xhat[i] + b[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let id = self.push(
            s,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        );
        Ok((id, mean, var_unbiased))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let s = self.bn_check(x, gamma, beta)?;
        check_dim("batchnorm2d", "running mean length", s.c, mean.len())?;
        check_dim("batchnorm2d", "running var length", s.c, var.len())?;
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::one() / (*v + T::from_f64(eps)).sqrt())
            .collect();
        let mut xhat = vec![T::zero(); s.numel()];
        let mut out = vec![T::zero(); s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * s.plane();
                for i in off..off + s.plane() {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + b[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            s,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: NodeId, kind: ActKind) -> NodeId {
        let out = self
            .value(x)
            .iter()
            .map(|&v| match kind {
                ActKind::Relu => {
                    if v > T::zero() {
                        v
                    } else {
                        T::zero()
                    }
                }
                ActKind::Gelu => v * gelu_cdf(v),
                ActKind::Sigmoid => sigmoid(v),
            })
            .collect();
        let (s, rg) = (self.shape(x), self.rg(x));
        self.push(s, out, Op::Act { x, kind }, rg)
    }

    /// 2x2 / stride-2 pooling. Odd extents are padded on the right/bottom.
    pub fn pool2d(&mut self, x: NodeId, kind: PoolKind) -> Result<NodeId, TensorError> {
        let s = self.shape(x);
        if s.h == 0 || s.w == 0 {
            return Err(TensorError::InvalidArgument {
                op: "pool2d",
                detail: format!("zero-sized spatial dims {s}"),
            });
        }
        let os = Shape::new(s.n, s.c, kernels::pooled(s.h), kernels::pooled(s.w));
        let rg = self.rg(x);
        Ok(match kind {
            PoolKind::Max => {
                let (out, arg) = kernels::maxpool_forward(self.value(x), s);
                self.push(os, out, Op::MaxPool { x, arg }, rg)
            }
            PoolKind::Avg => {
                let out = kernels::avgpool_forward(self.value(x), s);
                self.push(os, out, Op::AvgPool { x }, rg)
            }
        })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.shape(x);
        if s.plane() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "global_avg_pool",
                detail: format!("zero-sized spatial dims {s}"),
            });
        }
        let denom = T::from_f64(s.plane() as f64);
        let out = self
            .value(x)
            .chunks(s.plane())
            .map(|p| {
                let mut acc = T::zero();
                p.iter().for_each(|v| acc += *v);
                acc / denom
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Shape::new(s.n, s.c, 1, 1), out, Op::GlobalAvg { x }, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Shape, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_dim(op, "N", sa.n, sb.n)?;
        check_dim(op, "C", sa.c, sb.c)?;
        check_dim(op, "H", sa.h, sb.h)?;
        check_dim(op, "W", sa.w, sb.w)?;
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let s = self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, out, Op::Add { a, b }, rg))
    }

    /// Element-wise product of two same-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let s = self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, out, Op::Mul { a, b }, rg))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "concat_channels";
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_dim(OP, "N", sa.n, sb.n)?;
        check_dim(OP, "H", sa.h, sb.h)?;
        check_dim(OP, "W", sa.w, sb.w)?;
        let plane = sa.plane();
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(sa.numel() + sb.numel());
        for n in 0..sa.n {
            out.extend_from_slice(&va[n * sa.c * plane..(n + 1) * sa.c * plane]);
            out.extend_from_slice(&vb[n * sb.c * plane..(n + 1) * sb.c * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w),
            out,
            Op::Concat { a, b },
            rg,
        ))
    }

    /// Scales each (n, c) plane of `a` by `b[n, c]`; `b` is (N, C, 1, 1).
    pub fn mul_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "mul_broadcast";
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_dim(OP, "N", sa.n, sb.n)?;
        check_dim(OP, "C", sa.c, sb.c)?;
        check_dim(OP, "H", 1, sb.h)?;
        check_dim(OP, "W", 1, sb.w)?;
        let vb = self.value(b);
        let out = self
            .value(a)
            .chunks(sa.plane().max(1))
            .zip(vb)
            .flat_map(|(p, s)| p.iter().map(move |v| *v * *s))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa, out, Op::MulBroadcast { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let out = self.value(x).iter().map(|v| *v * s).collect();
        let (sh, rg) = (self.shape(x), self.rg(x));
        self.push(sh, out, Op::Scale { x, s }, rg)
    }

    /// Sum of all elements as a (1,1,1,1) scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        self.value(x).iter().for_each(|v| acc += *v);
        let rg = self.rg(x);
        self.push(Shape::new(1, 1, 1, 1), vec![acc], Op::Sum { x }, rg)
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId, TensorError> {
        if factor < 1 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_nearest",
                detail: format!("factor {factor} < 1"),
            });
        }
        let s = self.shape(x);
        let out = kernels::upsample_forward(self.value(x), s, factor);
        let rg = self.rg(x);
        Ok(self.push(
            Shape::new(s.n, s.c, s.h * factor, s.w * factor),
            out,
            Op::Upsample { x, f: factor },
            rg,
        ))
    }

    /// Keeps the top-left (h, w) window of every plane.
    pub fn crop(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId, TensorError> {
        let s = self.shape(x);
        if h > s.h || w > s.w {
            return Err(TensorError::InvalidArgument {
                op: "crop",
                detail: format!("target {h}x{w} exceeds {s}"),
            });
        }
        if h == s.h && w == s.w {
            return Ok(x);
        }
        let out = kernels::crop(self.value(x), s, h, w);
        let rg = self.rg(x);
        Ok(self.push(Shape::new(s.n, s.c, h, w), out, Op::Crop { x }, rg))
    }

    pub fn slice_channels(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let s = self.shape(x);
        if start + len > s.c {
            return Err(TensorError::InvalidArgument {
                op: "slice_channels",
                detail: format!("range {start}..{} exceeds C={}", start + len, s.c),
            });
        }
        let out = kernels::slice_channels(self.value(x), s, start, len);
        let rg = self.rg(x);
        Ok(self.push(
            Shape::new(s.n, len, s.h, s.w),
            out,
            Op::Slice { x, start },
            rg,
        ))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0; otherwise the
    /// mask is drawn from `rng`.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.shape(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| *v * *m)
            .collect();
        let (s, rg) = (self.shape(x), self.rg(x));
        Ok(self.push(s, out, Op::Dropout { x, mask }, rg))
    }

    /// Symmetric clip to `[-bound, bound]`.
    pub fn clip(&mut self, x: NodeId, bound: f64) -> NodeId {
        let b = T::from_f64(bound);
        let out = self
            .value(x)
            .iter()
            .map(|&v| {
                if v > b {
                    b
                } else if v < -b {
                    -b
                } else {
                    v
                }
            })
            .collect();
        let (s, rg) = (self.shape(x), self.rg(x));
        self.push(s, out, Op::Clip { x, bound: b }, rg)
    }

    /// FP16 projection with a straight-through backward.
    pub fn project_fp16(&mut self, x: NodeId, policy: OverflowPolicy) -> NodeId {
        let out = self
            .value(x)
            .iter()
            .map(|v| v.project_fp16(policy))
            .collect();
        let (s, rg) = (self.shape(x), self.rg(x));
        self.push(s, out, Op::Project { x }, rg)
    }

    /// Rounds a node's stored value to FP16 in place. Only meaningful for
    /// inference graphs that will never be differentiated.
    pub fn project_in_place(&mut self, id: NodeId, policy: OverflowPolicy) {
        self.nodes[id.0]
            .value
            .iter_mut()
            .for_each(|v| *v = v.project_fp16(policy));
    }

    /// Mean pixelwise cross-entropy of `logits` (N,C,H,W) against `target`
    /// (N*H*W labels), skipping pixels labelled `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        target: &[u8],
        ignore: u8,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "segmentation_loss";
        let s = self.shape(logits);
        check_dim(OP, "target length", s.n * s.plane(), target.len())?;
        let lv = self.value(logits);
        let plane = s.plane();
        let mut probs = vec![T::zero(); s.numel()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for n in 0..s.n {
            for p in 0..plane {
                let t = target[n * plane + p];
                if t == ignore {
                    continue;
                }
                if t as usize >= s.c {
                    return Err(TensorError::InvalidArgument {
                        op: OP,
                        detail: format!("label {t} >= {} classes", s.c),
                    });
                }
                let at = |c: usize| (n * s.c + c) * plane + p;
                let mut m = lv[at(0)];
                for c in 1..s.c {
                    if lv[at(c)] > m {
                        m = lv[at(c)];
                    }
                }
                let mut z = T::zero();
                for c in 0..s.c {
                    let e = (lv[at(c)] - m).exp();
                    probs[at(c)] = e;
                    z += e;
                }
                for c in 0..s.c {
                    probs[at(c)] = probs[at(c)] / z;
                }
                total += (m + z.ln() - lv[at(t as usize)]).to_f64();
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: "every pixel is ignored".into(),
            });
        }
        let loss = T::from_f64(total / count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Shape::new(1, 1, 1, 1),
            vec![loss],
            Op::CrossEntropy {
                logits,
                probs,
                target: target.to_vec(),
                ignore,
                count,
            },
            rg,
        ))
    }
    /// Smallest distance of any recorded value to a point where the graph
    /// is not differentiable: ReLU inputs at 0, clip inputs at the bound and
    /// near-ties between the two largest entries of a max-pool window
    /// (windows whose maximum is exactly zero are exempt).
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Act {
                    x,
                    kind: ActKind::Relu,
                } => {
                    for v in self.value(*x) {
                        m = m.min(v.to_f64().abs());
                    }
                }
                Op::Clip { x, bound } => {
                    for v in self.value(*x) {
                        m = m.min((v.to_f64().abs() - bound.to_f64()).abs());
                    }
                }
                Op::MaxPool { x, .. } => {
                    let (xs, v) = (self.shape(*x), self.value(*x));
                    for plane in 0..xs.n * xs.c {
                        for oh in 0..kernels::pooled(xs.h) {
                            for ow in 0..kernels::pooled(xs.w) {
                                let mut top = [f64::NEG_INFINITY; 2];
                                for (dh, dw) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let (h, w) = (2 * oh + dh, 2 * ow + dw);
                                    if h < xs.h && w < xs.w {
                                        let e = v[plane * xs.plane() + h * xs.w + w].to_f64();
                                        if e > top[0] {
                                            top = [e, top[0]];
                                        } else if e > top[1] {
                                            top[1] = e;
                                        }
                                    }
                                }
                                // Exact zero ties come from rectified
                                // values and stay tied under perturbation.
                                if top[1].is_finite() && top[0] != 0.0 {
                                    m = m.min(top[0] - top[1]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        m
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let len = |id: NodeId| self.nodes[id.0].value.len();
        macro_rules! with_grad {
            ($id:expr, |$d:ident| $body:expr) => {{
                let id = $id;
                if self.rg(id) {
                    let mut buf = take_grad(grads, id, len(id), true).expect("needed");
                    {
                        let $d: &mut [T] = &mut buf;
                        $body;
                    }
                    grads[id.0] = Some(buf);
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, k } => {
                let xs = self.shape(*x);
                let cout = self.shape(*w).n;
                let mut dx = take_grad(grads, *x, len(*x), self.rg(*x));
                let mut dw = take_grad(grads, *w, len(*w), self.rg(*w));
                let mut db = b.and_then(|b| take_grad(grads, b, len(b), self.rg(b)));
                kernels::conv2d_backward(
                    self.value(*x),
                    xs,
                    self.value(*w),
                    cout,
                    *k,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put_grad(grads, *x, dx);
                put_grad(grads, *w, dw);
                if let Some(b) = b {
                    put_grad(grads, *b, db);
                }
            }
            Op::Depthwise { x, w, b, k } => {
                let xs = self.shape(*x);
                let mut dx = take_grad(grads, *x, len(*x), self.rg(*x));
                let mut dw = take_grad(grads, *w, len(*w), self.rg(*w));
                let mut db = b.and_then(|b| take_grad(grads, b, len(b), self.rg(b)));
                kernels::depthwise_backward(
                    self.value(*x),
                    xs,
                    self.value(*w),
                    *k,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put_grad(grads, *x, dx);
                put_grad(grads, *w, dw);
                if let Some(b) = b {
                    put_grad(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let plane = s.plane();
                let gv = self.value(*gamma);
                let mut sum_g = vec![T::zero(); s.c];
                let mut sum_gx = vec![T::zero(); s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let off = (n * s.c + c) * plane;
                        for j in off..off + plane {
                            sum_g[c] += g[j];
                            sum_gx[c] += g[j] * xhat[j];
                        }
                    }
                }
                with_grad!(*gamma, |d| d
                    .iter_mut()
                    .zip(&sum_gx)
                    .for_each(|(d, v)| *d += *v));
                with_grad!(*beta, |d| d
                    .iter_mut()
                    .zip(&sum_g)
                    .for_each(|(d, v)| *d += *v));
                with_grad!(*x, |d| {
                    let m = T::from_f64((s.n * plane) as f64);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let off = (n * s.c + c) * plane;
                            let scale = gv[c] * inv_std[c];
                            for j in off..off + plane {
                                d[j] += if *train {
                                    scale / m * (m * g[j] - sum_g[c] - xhat[j] * sum_gx[c])
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x);
                let yv = &node.value;
                with_grad!(*x, |d| for j in 0..d.len() {
                    d[j] += g[j]
                        * match kind {
                            ActKind::Relu => {
                                if xv[j] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            ActKind::Gelu => {
                                let v = xv[j];
                                let pdf = (T::from_f64(-0.5) * v * v).exp()
                                    * T::from_f64(0.398_942_280_401_432_7);
                                gelu_cdf(v) + v * pdf
                            }
                            ActKind::Sigmoid => yv[j] * (T::one() - yv[j]),
                        };
                });
            }
            Op::MaxPool { x, arg } => with_grad!(*x, |d| for (j, a) in arg.iter().enumerate() {
                d[*a] += g[j];
            }),
            Op::AvgPool { x } => {
                let s = self.shape(*x);
                with_grad!(*x, |d| kernels::avgpool_backward(s, g, d));
            }
            Op::GlobalAvg { x } => {
                let s = self.shape(*x);
                let denom = T::from_f64(s.plane() as f64);
                with_grad!(*x, |d| for (j, p) in d.chunks_mut(s.plane()).enumerate() {
                    let v = g[j] / denom;
                    p.iter_mut().for_each(|e| *e += v);
                });
            }
            Op::Add { a, b } => {
                with_grad!(*a, |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += *v));
                with_grad!(*b, |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += *v));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                with_grad!(*a, |d| for j in 0..d.len() {
                    d[j] += g[j] * vb[j];
                });
                with_grad!(*b, |d| for j in 0..d.len() {
                    d[j] += g[j] * va[j];
                });
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let plane = sa.plane();
                let stride = (sa.c + sb.c) * plane;
                with_grad!(*a, |d| for n in 0..sa.n {
                    let src = &g[n * stride..n * stride + sa.c * plane];
                    d[n * sa.c * plane..(n + 1) * sa.c * plane]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, v)| *d += *v);
                });
                with_grad!(*b, |d| for n in 0..sb.n {
                    let src = &g[n * stride + sa.c * plane..(n + 1) * stride];
                    d[n * sb.c * plane..(n + 1) * sb.c * plane]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, v)| *d += *v);
                });
            }
            Op::MulBroadcast { a, b } => {
                let sa = self.shape(*a);
                let plane = sa.plane().max(1);
                let (va, vb) = (self.value(*a), self.value(*b));
                with_grad!(*a, |d| for j in 0..d.len() {
                    d[j] += g[j] * vb[j / plane];
                });
                with_grad!(*b, |d| for (k, dk) in d.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for j in k * sa.plane()..(k + 1) * sa.plane() {
                        acc += g[j] * va[j];
                    }
                    *dk += acc;
                });
            }
            Op::Scale { x, s } => {
                with_grad!(*x, |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += *v * *s))
            }
            Op::Sum { x } => with_grad!(*x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Upsample { x, f } => {
                let s = self.shape(*x);
                with_grad!(*x, |d| kernels::upsample_backward(s, *f, g, d));
            }
            Op::Crop { x } => {
                let s = self.shape(*x);
                let os = node.shape;
                with_grad!(*x, |d| for nc in 0..s.n * s.c {
                    for y in 0..os.h {
                        let src = &g[(nc * os.h + y) * os.w..][..os.w];
                        let dst = &mut d[nc * s.plane() + y * s.w..][..os.w];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += *v);
                    }
                });
            }
            Op::Slice { x, start } => {
                let s = self.shape(*x);
                let os = node.shape;
                let plane = s.plane();
                with_grad!(*x, |d| for n in 0..s.n {
                    let dst = &mut d[(n * s.c + start) * plane..(n * s.c + start + os.c) * plane];
                    let src = &g[n * os.c * plane..(n + 1) * os.c * plane];
                    dst.iter_mut().zip(src).for_each(|(d, v)| *d += *v);
                });
            }
            Op::Dropout { x, mask } => with_grad!(*x, |d| for j in 0..d.len() {
                d[j] += g[j] * mask[j];
            }),
            Op::Clip { x, bound } => {
                let xv = self.value(*x);
                with_grad!(*x, |d| for j in 0..d.len() {
                    if xv[j].abs() <= *bound {
                        d[j] += g[j];
                    }
                });
            }
            Op::Project { x } => {
                with_grad!(*x, |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += *v))
            }
            Op::CrossEntropy {
                logits,
                probs,
                target,
                ignore,
                count,
            } => {
                let s = self.shape(*logits);
                let plane = s.plane();
                let scale = g[0] / T::from_f64(*count as f64);
                with_grad!(*logits, |d| for n in 0..s.n {
                    for p in 0..plane {
                        let t = target[n * plane + p];
                        if t == *ignore {
                            continue;
                        }
                        for c in 0..s.c {
                            let j = (n * s.c + c) * plane + p;
                            let onehot = if c == t as usize { T::one() } else { T::zero() };
                            d[j] += scale * (probs[j] - onehot);
                        }
                    }
                });
            }
        }
    }
}
