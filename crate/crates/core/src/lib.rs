//! Anomaly detection by latent-space reconstruction under a learned sparse code.
//!
//! The crate trains an image-to-image GAN on normal images only, scores new
//! images by the distance between the latent feature of the input and the
//! latent feature of its reconstruction, and renders anomaly activation maps.

pub mod aam;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod nets;
pub mod pnm;
pub mod scoring;
pub mod sparsity;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Tensor, Var};
