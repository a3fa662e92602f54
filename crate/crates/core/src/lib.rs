//! Numerical laboratory for diversify-aggregate-repeat training (DART):
//! two-patch synthetic data, a patch network trained by gradient flow,
//! branch/aggregate orchestration, and the measurements used to study
//! feature learning, noise memorization and loss barriers under weight
//! averaging.

pub mod analysis;
pub mod error;
pub mod exec;
pub mod expcli;
pub mod mlpbench;
pub mod orchestrator;
pub mod patchnet;
pub mod patchworld;
pub mod seed;
pub mod table;

pub use error::{Error, Result};
