pub mod bdconst;
#[cfg(feature = "cli")]
pub mod cli;
pub mod engine;
pub mod genealogy;
pub mod kernels;
pub mod lattice;
pub mod rng;
pub mod stats;
