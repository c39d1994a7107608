//! Compact genotype strings: grammar, validation, sampling and the genetic
//! operators.
//!
//! ```text
//! code  := block (";" token)* ";H"
//! token := block | pool | drop
//! block := "B:" kind ["," "k" {1|3|5}] ["," "e" {2|3|4}] "," "c" width "," "a" {R|G}
//! pool  := "P:" {avg|max}
//! drop  := "D:" {0.1|0.2}
//! ```

mod grammar;
mod ops;

use std::fmt;

pub use grammar::{parse, serialize};
pub use ops::{
    crossover, crossover_at, mutate, mutate_with_report, repair, sample_block, sample_random,
    MutationReport,
};

use crate::blocks::{BlockError, BlockKind, BlockSpec, Token};
use crate::network::Network;

/// Default cap on learnable blocks.
pub const MAX_BLOCKS: usize = 6;
/// Default cap on pool tokens.
pub const MAX_POOLS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpaceConfig {
    pub max_blocks: usize,
    pub max_pools: usize,
    pub kinds: Vec<BlockKind>,
    /// Parameter-count cap, checked by building the network.
    pub c_max: Option<usize>,
    /// Channels and classes used when counting parameters for `c_max`.
    pub in_channels: usize,
    pub num_classes: usize,
    /// Probability of a pool token after each sampled block.
    pub pool_prob: f64,
    /// Probability of a dropout token after each sampled block.
    pub dropout_prob: f64,
}

impl Default for SearchSpaceConfig {
    fn default() -> Self {
        Self {
            max_blocks: MAX_BLOCKS,
            max_pools: MAX_POOLS,
            kinds: BlockKind::ALL.to_vec(),
            c_max: None,
            in_channels: 3,
            num_classes: 2,
            pool_prob: 0.3,
            dropout_prob: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("max_blocks must be >= 1")]
    NoBlocks,
    #[error("no block kinds allowed")]
    NoKinds,
    #[error("{name}={value} must be a probability")]
    BadProbability { name: &'static str, value: f64 },
    #[error("in_channels and num_classes must be >= 1")]
    BadChannels,
}

impl SearchSpaceConfig {
    pub fn check(&self) -> Result<(), ConfigError> {
        if self.max_blocks == 0 {
            return Err(ConfigError::NoBlocks);
        }
        if self.kinds.is_empty() {
            return Err(ConfigError::NoKinds);
        }
        for (name, value) in [
            ("pool_prob", self.pool_prob),
            ("dropout_prob", self.dropout_prob),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ConfigError::BadProbability { name, value });
            }
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(ConfigError::BadChannels);
        }
        Ok(())
    }
}

/// Ordered token list; the segmentation head is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    tokens: Vec<Token>,
}

impl Genotype {
    /// Wraps tokens without checking them; see [`validate`].
    pub fn new(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.tokens
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.tokens.iter().filter_map(|t| match t {
            Token::Block(b) => Some(b),
            Token::Structural(_) => None,
        })
    }

    pub fn block_count(&self) -> usize {
        self.blocks().count()
    }

    pub fn pool_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_pool()).count()
    }

    pub fn build_network<T: crate::tensor::Scalar>(
        &self,
        in_channels: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Network<T>, BlockError> {
        Network::build(&self.tokens, in_channels, num_classes, seed)
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize(self))
    }
}

impl std::str::FromStr for Genotype {
    type Err = GenotypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    BlockCount {
        count: usize,
        max: usize,
    },
    PoolCount {
        count: usize,
        max: usize,
    },
    /// More than one pool between two consecutive blocks.
    StackedPools {
        index: usize,
    },
    LeadingStructural,
    KindNotAllowed {
        index: usize,
        kind: BlockKind,
    },
    Range {
        index: usize,
        error: BlockError,
    },
    ParamCap {
        params: usize,
        cap: usize,
    },
}

impl Violation {
    /// Stable short name.
    pub fn key(&self) -> &'static str {
        match self {
            Self::BlockCount { .. } => "block_count",
            Self::PoolCount { .. } => "pool_count",
            Self::StackedPools { .. } => "stacked_pools",
            Self::LeadingStructural => "leading_structural",
            Self::KindNotAllowed { .. } => "kind",
            Self::Range { .. } => "range",
            Self::ParamCap { .. } => "param_cap",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BlockCount { count, max } => write!(f, "{count} blocks (allowed 1..={max})"),
            Self::PoolCount { count, max } => write!(f, "{count} pools (allowed <= {max})"),
            Self::StackedPools { index } => {
                write!(f, "token {index}: second pool between the same blocks")
            }
            Self::LeadingStructural => f.write_str("first token must be a block"),
            Self::KindNotAllowed { index, kind } => {
                write!(f, "token {index}: kind {kind} not allowed")
            }
            Self::Range { index, error } => write!(f, "token {index}: {error}"),
            Self::ParamCap { params, cap } => write!(f, "{params} parameters exceed cap {cap}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenotypeError {
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("invalid genotype: {}", join(.0))]
    Invalid(Vec<Violation>),
}

fn join(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Returns every violated constraint, empty when `g` is valid.
pub fn validate(g: &Genotype, cfg: &SearchSpaceConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let blocks = g.block_count();
    if blocks == 0 || blocks > cfg.max_blocks {
        out.push(Violation::BlockCount {
            count: blocks,
            max: cfg.max_blocks,
        });
    }
    let pools = g.pool_count();
    if pools > cfg.max_pools {
        out.push(Violation::PoolCount {
            count: pools,
            max: cfg.max_pools,
        });
    }
    if matches!(g.tokens.first(), Some(Token::Structural(_))) {
        out.push(Violation::LeadingStructural);
    }
    let mut pooled = false;
    for (index, t) in g.tokens.iter().enumerate() {
        if t.is_pool() {
            if pooled {
                out.push(Violation::StackedPools { index });
            }
            pooled = true;
        }
        if let Token::Block(b) = t {
            pooled = false;
            if !cfg.kinds.contains(&b.kind) {
                out.push(Violation::KindNotAllowed {
                    index,
                    kind: b.kind,
                });
            }
            if let Err(error) = b.check() {
                out.push(Violation::Range { index, error });
            }
        }
    }
    if let (Some(cap), true) = (cfg.c_max, out.is_empty()) {
        let params = param_count(g, cfg);
        if params > cap {
            out.push(Violation::ParamCap { params, cap });
        }
    }
    out
}

/// Scalar parameter count of the network `g` describes, head included.
pub fn param_count(g: &Genotype, cfg: &SearchSpaceConfig) -> usize {
    g.build_network::<f32>(cfg.in_channels, cfg.num_classes, 0)
        .map(|n| n.param_count())
        .unwrap_or(usize::MAX)
}
