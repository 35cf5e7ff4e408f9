//! Latin hypercube designs over the hyperparameter box and the DRAM sampler.

mod dram;
mod lhs;

pub use dram::{dram_sample, DramConfig, McmcChain};
pub use lhs::lhs_sample;
