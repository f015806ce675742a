//! Single-image identity unlearning for latent-variable image generators.
//!
//! A pretrained generator `R(G(Map(z)))` is fine-tuned so that the latent
//! inverted from one image of an identity, and its neighbourhood, render a
//! different face-like target, while prior samples elsewhere stay put.

pub mod error;
pub mod experiment;
pub mod grid;
pub mod latentops;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod par;
pub mod pretrain;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod unlearn;

pub use error::{Error, Result};
