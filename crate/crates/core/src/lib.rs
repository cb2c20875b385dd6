//! Looped-transformer lab: a baseline looped model with per-loop KV caches,
//! a gated constant-memory variant that shares one cache across loops, the
//! two-phase training recipe that moves one into the other, closed-form KV
//! memory accounting, and executable gradient-stability checks.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod loop_lm;
pub mod melt;
pub mod memory;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{backward, Tape, Tensor};
