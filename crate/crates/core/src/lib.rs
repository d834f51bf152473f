//! Vision-language pre-training with masked visual reconstruction performed
//! in language semantic space, jointly with image-text contrastive alignment.
//!
//! Everything runs on a small in-crate autodiff engine ([`tensor`]) so the
//! whole pipeline can be checked against finite differences and scalar-loop
//! oracles at 64-bit precision.

pub mod ablation;
pub mod error;
pub mod eval;
pub mod config;
pub mod data;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
