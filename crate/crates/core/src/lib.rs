//! Preservational contrastive representation learning.
//!
//! A triple-encoder / shared-decoder self-supervised pretraining system. The
//! ordinary encoder is trained by gradient descent, the momentum encoder
//! follows it by exponential moving average, and a parameter-free hybrid
//! encoder is formed by mixing the feature maps of the two. Every encoder
//! carries a transformation-conditioned attention block at its bottleneck so
//! that one shared U-Net decoder can reconstruct flipped and rotated targets,
//! while a queue-based noise-contrastive loss shapes the projected embeddings.
//!
//! The crate is `no_std` with `alloc`. Everything that touches the file
//! system, configuration files or the command line lives in the `pcrl`
//! companion crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;

pub mod downstream;
pub mod error;
pub mod graph;
pub mod network;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod transforms;

mod kernels;

pub use kernels::ConvGeom;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
