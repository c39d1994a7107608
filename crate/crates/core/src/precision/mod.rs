//! FP16 emulation: projection, straight-through rounding, activation clipping
//! and a simulated-device inference path.
//!
//! Training-time wrapping touches only convolution outputs (and, optionally,
//! the weights each convolution reads). Deploy mode is stricter: batchnorm is
//! folded, all parameters are rounded once, and every operator output is
//! rounded. Clipping never happens at deploy time.

mod fp16;

pub use fp16::{
    from_bits, project_scalar, to_bits, OverflowPolicy, FP16_MAX, FP16_MIN_NORMAL,
    FP16_MIN_SUBNORMAL,
};

use crate::network::Network;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Default symmetric activation bound used during FP16-aware fine-tuning.
pub const DEFAULT_CLIP_BOUND: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PrecisionError {
    #[error("network is already wrapped with a precision config")]
    AlreadyWrapped,
    #[error("clip bound {0} must be in (0, 65504)")]
    BadClipBound(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionConfig {
    pub project_activations: bool,
    pub round_weights: bool,
    pub clip_activations: bool,
    pub clip_bound: f64,
    pub overflow_policy: OverflowPolicy,
    pub warmup_epochs: usize,
}

impl Default for PrecisionConfig {
    fn default() -> Self {
        Self::aligned()
    }
}

impl PrecisionConfig {
    /// Full deployment-aligned emulation.
    pub fn aligned() -> Self {
        Self {
            project_activations: true,
            round_weights: true,
            clip_activations: true,
            clip_bound: DEFAULT_CLIP_BOUND,
            overflow_policy: OverflowPolicy::Saturate,
            warmup_epochs: 1,
        }
    }

    /// Everything disabled; a wrapped network behaves like an unwrapped one.
    pub fn off() -> Self {
        Self {
            project_activations: false,
            round_weights: false,
            clip_activations: false,
            ..Self::aligned()
        }
    }

    pub fn check(&self) -> Result<(), PrecisionError> {
        if !(self.clip_bound > 0.0 && self.clip_bound < FP16_MAX) {
            return Err(PrecisionError::BadClipBound(self.clip_bound));
        }
        Ok(())
    }

    /// Sites where this config inserts emulation.
    pub fn sites(&self) -> Vec<ProjectionSite> {
        vec![
            ProjectionSite {
                location: SiteLocation::ConvOutput,
                enabled: self.project_activations,
            },
            ProjectionSite {
                location: SiteLocation::LinearOutput,
                enabled: self.project_activations,
            },
            ProjectionSite {
                location: SiteLocation::WeightForward,
                enabled: self.round_weights,
            },
        ]
    }
}

/// Where an emulation node may sit. The networks here have no dense layers,
/// so `LinearOutput` only ever matters for 1x1 convolutions acting as such.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteLocation {
    ConvOutput,
    LinearOutput,
    WeightForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionSite {
    pub location: SiteLocation,
    pub enabled: bool,
}

/// Element-wise FP16 projection of a tensor.
pub fn project_fp16<T: Scalar>(x: &Tensor<T>, policy: OverflowPolicy) -> Tensor<T> {
    let data = x.data().iter().map(|v| v.project_fp16(policy)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Element-wise `min(max(x, -bound), bound)`.
pub fn clip_activation<T: Scalar>(x: &Tensor<T>, bound: f64) -> Tensor<T> {
    let b = T::from_f64(bound);
    let data = x
        .data()
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
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Returns a copy of `network` with training-time emulation attached.
pub fn wrap_network<T: Scalar>(
    network: &Network<T>,
    config: PrecisionConfig,
) -> Result<Network<T>, PrecisionError> {
    let mut n = network.clone();
    n.wrap(config)?;
    Ok(n)
}

/// Simulated device inference of one batch (see module docs).
pub fn deploy_mode_forward<T: Scalar>(
    network: &Network<T>,
    input: &Tensor<T>,
    policy: OverflowPolicy,
) -> Result<Tensor<T>, TensorError> {
    let table = network.deploy_table(policy);
    network.forward_deployed(&table, input)
}

#[cfg(test)]
mod tests;
