pub mod bsde;
pub mod constants;
pub mod duality;
pub mod error;
pub mod expr;
pub mod gprocess;
pub mod model;
pub mod picard;
pub mod regression;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};

/// Seed used when none is given.
pub const DEFAULT_SEED: u64 = 24_301;
