//! Multi-sensor recurrent state space models.
//!
//! The crate bundles a small reverse-mode differentiation engine
//! ([`diffgraph`]), Gaussian utilities ([`dists`]), the recurrent state space
//! model ([`rssm`]), reconstruction and contrastive training objectives
//! ([`objectives`]), SAC and latent-imagination agents ([`agents`]), toy
//! environments with an exact Kalman oracle ([`worlds`]), training loops
//! ([`trainer`]) and evaluation tooling ([`evalkit`]).

pub mod agents;
pub mod diffgraph;
pub mod dists;
pub mod error;
pub mod evalkit;
pub mod objectives;
pub mod rssm;
pub mod trainer;
pub mod worlds;

pub use error::{Error, Result};
