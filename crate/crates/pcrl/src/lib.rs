//! File formats, run orchestration and the `pcrl` command line on top of
//! [`pcrl_core`].
//!
//! Tensors live in [`archive`] directories: a JSON manifest plus one raw
//! little-endian `f32` file per tensor. Checkpoints, resumable run states,
//! corpora and saved predictions are all archives.

pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod log;
pub mod run;
pub mod verify;

pub use error::{Error, Result};
