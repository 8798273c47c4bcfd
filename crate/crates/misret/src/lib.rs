//! Offline reinforcement-learning recommender built on return-conditioned
//! sequence modeling.
//!
//! The crate combines:
//! - a causal-transformer policy with MLP token embeddings and four output
//!   heads (action, per-step reward, return distribution, in-support
//!   maximal return), with optional LoRA adapters ([`model`]);
//! - an expectile-regression estimate of the maximal in-support return,
//!   used at inference to search over history lengths and stitch better
//!   trajectories out of sub-optimal logged data ([`train`], [`infer`]);
//! - a character-level language-model prior for backbone initialization and
//!   an auxiliary next-token objective ([`lm`]);
//! - a latent-factor recommendation simulator for data generation and
//!   policy evaluation ([`sim`]).

pub mod data;
pub mod error;
pub mod sim;
pub mod train;
pub mod cli;
pub mod config;
pub mod infer;
pub mod lm;
pub mod model;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
