//! Hardware-aware evolutionary architecture search with FP16-aware training,
//! scored against a simulated edge accelerator.

pub mod blocks;
pub mod data;
pub mod device;
pub mod genotype;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod precision;
pub mod search;
pub mod seed;
pub mod tensor;
pub mod trainer;
