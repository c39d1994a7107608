//! Search-space primitives: block specifications, structural tokens and the
//! fixed segmentation head.

pub(crate) mod build;

use std::fmt;

pub use build::{build_block, Block, BnUnit, ConvUnit};

use crate::tensor::{ActKind, PoolKind};

/// Kernel sizes allowed for the standard convolution families.
pub const KERNELS: [u8; 3] = [1, 3, 5];
/// MBConv expansion ratios.
pub const EXPANSIONS: [u8; 3] = [2, 3, 4];
/// Minimum number of reduced channels in a squeeze-and-excitation gate.
pub const SE_MIN_CHANNELS: usize = 4;
/// Squeeze ratio of the SE gate (reduced = width / SE_RATIO).
pub const SE_RATIO: usize = 4;
/// Dropout rates a dropout token may carry.
pub const DROPOUT_RATES: [f64; 2] = [0.1, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockKind {
    ConvAct,
    ConvBnAct,
    ConvSe,
    MbConv,
    MbConvNoRes,
    CspConv,
    CspMbConv,
    DenseNet,
    ResNet,
}

impl BlockKind {
    pub const ALL: [BlockKind; 9] = [
        BlockKind::ConvAct,
        BlockKind::ConvBnAct,
        BlockKind::ConvSe,
        BlockKind::MbConv,
        BlockKind::MbConvNoRes,
        BlockKind::CspConv,
        BlockKind::CspMbConv,
        BlockKind::DenseNet,
        BlockKind::ResNet,
    ];

    /// Short code used in genotype strings.
    pub fn code(self) -> &'static str {
        match self {
            Self::ConvAct => "CA",
            Self::ConvBnAct => "CBA",
            Self::ConvSe => "CSE",
            Self::MbConv => "MB",
            Self::MbConvNoRes => "MBN",
            Self::CspConv => "CSPC",
            Self::CspMbConv => "CSPM",
            Self::DenseNet => "DN",
            Self::ResNet => "RN",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn has_kernel(self) -> bool {
        matches!(
            self,
            Self::ConvAct | Self::ConvBnAct | Self::ConvSe | Self::ResNet
        )
    }

    pub fn has_expansion(self) -> bool {
        matches!(self, Self::MbConv | Self::MbConvNoRes | Self::CspMbConv)
    }

    /// Allowed values of the width field. For DenseNet it is the growth rate;
    /// for the CSP kinds it is the width of the 1x1 transition.
    pub fn widths(self) -> &'static [u16] {
        match self {
            Self::MbConv | Self::MbConvNoRes => &[4, 8, 12, 16],
            Self::DenseNet => &[4, 8, 12],
            _ => &[4, 8, 12, 16, 20, 24],
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::ConvAct => "ConvAct",
            Self::ConvBnAct => "ConvBnAct",
            Self::ConvSe => "ConvSE",
            Self::MbConv => "MBConv",
            Self::MbConvNoRes => "MBConvNoRes",
            Self::CspConv => "CSPConvBlock",
            Self::CspMbConv => "CSPMBConvBlock",
            Self::DenseNet => "DenseNetBlock",
            Self::ResNet => "ResNetBlock",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub const ALL: [Activation; 2] = [Activation::Relu, Activation::Gelu];

    pub fn code(self) -> char {
        match self {
            Self::Relu => 'R',
            Self::Gelu => 'G',
        }
    }

    pub fn kind(self) -> ActKind {
        match self {
            Self::Relu => ActKind::Relu,
            Self::Gelu => ActKind::Gelu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BlockError {
    #[error("{kind}: field `{field}` is not applicable")]
    UnexpectedField {
        kind: BlockKind,
        field: &'static str,
    },
    #[error("{kind}: field `{field}` is required")]
    MissingField {
        kind: BlockKind,
        field: &'static str,
    },
    #[error("{kind}: {field}={value} outside allowed set")]
    OutOfRange {
        kind: BlockKind,
        field: &'static str,
        value: u32,
    },
    #[error("in_channels must be >= 1")]
    NoInputChannels,
}

/// One learnable block of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub kernel: Option<u8>,
    pub width: u16,
    pub expansion: Option<u8>,
    pub activation: Activation,
}

impl BlockSpec {
    /// Checks field applicability and ranges for the block kind.
    pub fn new(
        kind: BlockKind,
        kernel: Option<u8>,
        width: u16,
        expansion: Option<u8>,
        activation: Activation,
    ) -> Result<Self, BlockError> {
        let spec = Self {
            kind,
            kernel,
            width,
            expansion,
            activation,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<(), BlockError> {
        let kind = self.kind;
        match (kind.has_kernel(), self.kernel) {
            (true, None) => {
                return Err(BlockError::MissingField {
                    kind,
                    field: "kernel",
                })
            }
            (false, Some(_)) => {
                return Err(BlockError::UnexpectedField {
                    kind,
                    field: "kernel",
                })
            }
            (true, Some(k)) if !KERNELS.contains(&k) => {
                return Err(BlockError::OutOfRange {
                    kind,
                    field: "kernel",
                    value: k as u32,
                })
            }
            _ => {}
        }
        match (kind.has_expansion(), self.expansion) {
            (true, None) => {
                return Err(BlockError::MissingField {
                    kind,
                    field: "expansion",
                })
            }
            (false, Some(_)) => {
                return Err(BlockError::UnexpectedField {
                    kind,
                    field: "expansion",
                })
            }
            (true, Some(e)) if !EXPANSIONS.contains(&e) => {
                return Err(BlockError::OutOfRange {
                    kind,
                    field: "expansion",
                    value: e as u32,
                })
            }
            _ => {}
        }
        if !kind.widths().contains(&self.width) {
            return Err(BlockError::OutOfRange {
                kind,
                field: "width",
                value: self.width as u32,
            });
        }
        Ok(())
    }

    /// Output channels when fed `in_channels`.
    pub fn out_channels(&self, in_channels: usize) -> usize {
        match self.kind {
            BlockKind::DenseNet => in_channels + self.width as usize,
            _ => self.width as usize,
        }
    }
}

/// Dropout rate carried by a dropout token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropRate {
    P10,
    P20,
}

impl DropRate {
    pub fn value(self) -> f64 {
        match self {
            Self::P10 => 0.1,
            Self::P20 => 0.2,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Self::P10 => "0.1",
            Self::P20 => "0.2",
        }
    }
}

/// Non-learnable token placed between blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StructuralToken {
    Pool(PoolKind),
    Dropout(DropRate),
}

/// Element of a genotype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Block(BlockSpec),
    Structural(StructuralToken),
}

impl Token {
    pub fn is_block(&self) -> bool {
        matches!(self, Token::Block(_))
    }

    pub fn is_pool(&self) -> bool {
        matches!(self, Token::Structural(StructuralToken::Pool(_)))
    }
}

/// Fixed segmentation head: nearest upsample by 2^pools back to input
/// resolution, then one 1x1 convolution to class logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    pub num_classes: usize,
    pub upsample: usize,
}

impl HeadSpec {
    pub fn new(num_classes: usize, pools: usize) -> Self {
        Self {
            num_classes,
            upsample: 1 << pools,
        }
    }
}

#[cfg(test)]
mod tests;
