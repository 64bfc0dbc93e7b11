//! A desk-scale recurrent-transformer engine with selective per-token latent
//! iteration: duo-causal attention over (position, depth) coordinates,
//! depth-gated low-rank adapters, oracle-guided two-stage training, a learned
//! iteration decider, and generation/diagnostic tooling.

pub mod analyze;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod decider;
pub mod error;
pub mod execute;
pub mod generate;
pub mod gradcheck;
pub mod model;
pub mod policy;
pub mod tensor;
pub mod train;

pub use error::{Result, TahError};
