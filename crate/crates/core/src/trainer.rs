//! FP32 training, FP16-aware fine-tuning with a warmup ramp, evaluation and
//! checkpoints.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::data::{Container, ContainerError, Dataset, Payload};
use crate::device::{dataset_miou, DeviceError};
use crate::genotype::{Genotype, GenotypeError};
use crate::metrics::{segmentation_loss, IGNORE_LABEL};
use crate::network::{Mode, Network};
use crate::precision::{OverflowPolicy, PrecisionConfig, PrecisionError};
use crate::seed::rng_for;
use crate::tensor::{Scalar, Tape, Tensor, TensorError};

const FP32_STREAM: u64 = 1;
const WARMUP_STREAM: u64 = 2;
const FINETUNE_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(Self::Adam),
            "sgd" => Some(Self::Sgd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub e_fp32: usize,
    pub e_lp: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            e_fp32: 10,
            e_lp: 10,
            warmup_epochs: 1,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Fp32,
    Warmup,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fp32 => "fp32",
            Self::Warmup => "warmup",
            Self::Finetune => "finetune",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Config(String),
    #[error("training data is empty")]
    EmptyData,
    #[error("non-finite loss in {phase} epoch {epoch} batch {batch} (max |activation| {max_abs_activation:e})")]
    Diverged {
        phase: Phase,
        epoch: usize,
        batch: usize,
        max_abs_activation: f64,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Precision(#[from] PrecisionError),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

/// Adam (β1 0.9, β2 0.999, ε 1e-8, bias-corrected) or plain SGD.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new<T: Scalar>(kind: OptimizerKind, net: &Network<T>) -> Self {
        let zeros: Vec<Vec<f64>> = net
            .params()
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.data().len()])
            .collect();
        Self {
            kind,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step<T: Scalar>(&mut self, net: &mut Network<T>, grads: &crate::tensor::Gradients<T>, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let ids: Vec<_> = net.params().iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let w = net.params_mut().get_mut(id).tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(g) {
                        *w = T::from_f64(w.to_f64() - lr * g.to_f64());
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..w.len() {
                        let g = g[i].to_f64();
                        m[i] = B1 * m[i] + (1.0 - B1) * g;
                        v[i] = B2 * v[i] + (1.0 - B2) * g * g;
                        let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                        w[i] = T::from_f64(w[i].to_f64() - step);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean loss per epoch, in order.
    pub epoch_losses: Vec<f64>,
    /// Learning rate used at every optimizer step.
    pub lr_schedule: Vec<f64>,
}

fn run_epochs<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    phase: Phase,
    epochs: usize,
    lr_at: impl Fn(usize) -> f64,
    report: &mut TrainReport,
) -> Result<(), TrainError> {
    if epochs == 0 {
        return Ok(());
    }
    let stream = match phase {
        Phase::Fp32 => FP32_STREAM,
        Phase::Warmup => WARMUP_STREAM,
        Phase::Finetune => FINETUNE_STREAM,
    };
    let mut opt = Optimizer::new(cfg.optimizer, net);
    let mut step = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(&[cfg.seed, stream, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.batch(idx);
            let x: Tensor<T> = x.cast();
            let mut tape = Tape::new();
            let mut rng = rng_for(&[cfg.seed, stream, epoch as u64, batch as u64]);
            let logits = net.forward(&mut tape, &x, Mode::Train, &mut rng)?;
            let loss = segmentation_loss(&mut tape, logits, &labels, IGNORE_LABEL)?;
            let l = tape.value(loss)[0].to_f64();
            if !l.is_finite() {
                return Err(TrainError::Diverged {
                    phase,
                    epoch,
                    batch,
                    max_abs_activation: tape.max_abs_value(),
                });
            }
            let grads = tape.backward(loss)?;
            step += 1;
            let lr = lr_at(step);
            report.lr_schedule.push(lr);
            opt.step(net, &grads, lr);
            total += l;
            batches += 1;
        }
        report.epoch_losses.push(total / batches as f64);
    }
    Ok(())
}

fn steps_per_epoch(data: &Dataset, cfg: &TrainConfig) -> usize {
    data.len().div_ceil(cfg.batch_size)
}

/// `e_fp32` epochs of minibatch training without any emulation.
pub fn train_fp32<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.check()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut report = TrainReport::default();
    run_epochs(net, data, cfg, Phase::Fp32, cfg.e_fp32, |_| cfg.learning_rate, &mut report)?;
    Ok(report)
}

/// Wraps `net` with `precision` and fine-tunes it: `warmup_epochs` with the
/// learning rate ramped linearly from `lr/steps` up to `lr` (projections
/// active), then `e_lp` epochs at `lr`. Each stage starts a fresh optimizer.
/// The network stays wrapped afterwards; master weights are never rounded.
pub fn finetune_fp16_aware<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    precision: &PrecisionConfig,
) -> Result<TrainReport, TrainError> {
    cfg.check()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    net.wrap(*precision)?;
    let mut report = TrainReport::default();
    let ramp = (cfg.warmup_epochs * steps_per_epoch(data, cfg)) as f64;
    let lr = cfg.learning_rate;
    run_epochs(net, data, cfg, Phase::Warmup, cfg.warmup_epochs, |t| lr * t as f64 / ramp, &mut report)?;
    run_epochs(net, data, cfg, Phase::Finetune, cfg.e_lp, |_| lr, &mut report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Plain eval-mode forward, ignoring attached emulation.
    Fp32,
    /// Simulated device inference.
    Deploy(OverflowPolicy),
}

/// Mean per-image mIoU of `net` on `data`.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset, mode: EvalMode) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let miou = match mode {
        EvalMode::Fp32 => dataset_miou(data, net.num_classes(), |x| net.forward_plain(x))?,
        EvalMode::Deploy(policy) => {
            let table = net.deploy_table(policy);
            dataset_miou(data, net.num_classes(), |x| net.forward_deployed(&table, x))?
        }
    };
    Ok(miou)
}

/// Hex SHA-256 of a resolved configuration text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

const CKPT_MAGIC: &str = "LPNAS-CHECKPOINT 1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: {0}")]
    BadHeader(String),
    #[error("genotype in checkpoint: {0}")]
    Genotype(#[from] GenotypeError),
    #[error("tensor record: {0}")]
    Container(#[from] ContainerError),
    #[error("record {name:?}: {detail}")]
    BadRecord { name: String, detail: String },
    #[error("missing records: {0:?}")]
    Missing(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Checkpoint header fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub genotype: String,
    pub config_hash: String,
    pub in_channels: usize,
    pub num_classes: usize,
}

fn record(out: &mut Vec<u8>, name: &str, c: &Container) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&c.to_bytes());
}

/// Serializes weights and batchnorm statistics. Layout: one UTF-8 manifest
/// line (`LPNAS-CHECKPOINT 1` followed by tab-separated `key=value` fields),
/// then records of `u16 name length, name, tensor container`.
pub fn checkpoint_bytes(net: &Network<f32>, config_hash: &str) -> Vec<u8> {
    let g = Genotype::new(net.tokens().to_vec());
    let mut out = format!(
        "{CKPT_MAGIC}\tgenotype={g}\tconfig_hash={config_hash}\tin_channels={}\tnum_classes={}\n",
        net.in_channels(),
        net.num_classes()
    )
    .into_bytes();
    for (_, p) in net.params().iter() {
        let c = Container::new(p.tensor.shape().dims().to_vec(), Payload::F32(p.tensor.data().to_vec()))
            .expect("shape matches data");
        record(&mut out, &p.name, &c);
    }
    for (i, s) in net.bn_stats().iter().enumerate() {
        for (kind, v) in [("mean", &s.mean), ("var", &s.var)] {
            let c = Container::new(vec![v.len()], Payload::F32(v.clone())).expect("rank 1");
            record(&mut out, &format!("bn_stats.{i}.{kind}"), &c);
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, net: &Network<f32>, config_hash: &str) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_bytes(net, config_hash))?;
    Ok(())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Network<f32>, CheckpointInfo), CheckpointError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::BadHeader("no manifest line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let mut fields = header.split('\t');
    if fields.next() != Some(CKPT_MAGIC) {
        return Err(CheckpointError::BadHeader(format!("{header:.40?}")));
    }
    let mut get = std::collections::HashMap::new();
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| CheckpointError::BadHeader(format!("field {f:?}")))?;
        get.insert(k, v);
    }
    let field = |k: &str| {
        get.get(k)
            .copied()
            .ok_or_else(|| CheckpointError::BadHeader(format!("missing {k}")))
    };
    let count = |k: &str| {
        field(k)?
            .parse::<usize>()
            .map_err(|_| CheckpointError::BadHeader(format!("{k} is not a count")))
    };
    let info = CheckpointInfo {
        genotype: field("genotype")?.to_string(),
        config_hash: field("config_hash")?.to_string(),
        in_channels: count("in_channels")?,
        num_classes: count("num_classes")?,
    };
    let g: Genotype = info.genotype.parse()?;
    let mut net = Network::<f32>::build(g.tokens(), info.in_channels, info.num_classes, 0)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let mut pending: std::collections::BTreeSet<String> = net.params().iter().map(|(_, p)| p.name.clone()).collect();
    for i in 0..net.bn_stats().len() {
        pending.insert(format!("bn_stats.{i}.mean"));
        pending.insert(format!("bn_stats.{i}.var"));
    }
    let mut rest = &bytes[nl + 1..];
    while !rest.is_empty() {
        if rest.len() < 2 {
            return Err(CheckpointError::BadHeader("truncated record".into()));
        }
        let n = u16::from_le_bytes([rest[0], rest[1]]) as usize;
        let name = rest
            .get(2..2 + n)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| CheckpointError::BadHeader("bad record name".into()))?
            .to_string();
        let (c, used) = Container::decode_prefix(&rest[2 + n..])?;
        rest = &rest[2 + n + used..];
        let bad = |detail: String| CheckpointError::BadRecord {
            name: name.clone(),
            detail,
        };
        if !pending.remove(&name) {
            return Err(bad("unknown or duplicate".into()));
        }
        let (dims, data) = c.into_f32()?;
        if let Some(stat) = name.strip_prefix("bn_stats.") {
            let (i, kind) = stat.split_once('.').expect("name came from pending set");
            let s = &mut net.bn_stats_mut()[i.parse::<usize>().expect("index")];
            let dst = if kind == "mean" { &mut s.mean } else { &mut s.var };
            if dims != [dst.len()] {
                return Err(bad(format!("dims {dims:?}, expected [{}]", dst.len())));
            }
            *dst = data;
        } else {
            let id = net.params().find(&name).expect("name came from pending set");
            let t = &mut net.params_mut().get_mut(id).tensor;
            if dims != t.shape().dims() {
                return Err(bad(format!("dims {dims:?}, expected {}", t.shape())));
            }
            t.data_mut().copy_from_slice(&data);
        }
    }
    if !pending.is_empty() {
        return Err(CheckpointError::Missing(pending.into_iter().collect()));
    }
    Ok((net, info))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, CheckpointInfo), CheckpointError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests;
