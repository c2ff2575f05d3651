//! Trainable spiking transformer with addition-only spiking self-attention.
//!
//! The crate builds up from a minimal reverse-mode autodiff tensor engine
//! to a full image-classification spiking transformer:
//!
//! - [`tensor`]: dense tensors, a gradient tape, surrogate spike derivatives
//! - [`neurons`]: binary and ternary leaky integrate-and-fire layers
//! - [`attention`]: vanilla, spiking, and addition-only attention variants,
//!   plus the gather-add matrix kernels that make the spiking variants
//!   multiplication-free by construction
//! - [`architecture`]: patch-splitting front end, encoder blocks with
//!   membrane-potential residuals, classification head, checkpoint format
//! - [`analysis`]: representational-capacity calculator and per-layer
//!   operation accounting
//! - [`harness`]: datasets, training loop, variant comparison, metrics

pub mod analysis;
pub mod architecture;
pub mod attention;
pub mod error;
pub mod harness;
pub mod layers;
pub mod neurons;
pub mod tensor;

pub use error::{Error, Result};
