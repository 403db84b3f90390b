//! Recurrent state space model over K observation modalities.
//!
//! The latent state is a deterministic GRU memory `h` and a diagonal
//! Gaussian stochastic part `s`. Each step consumes the previous stochastic
//! sample and action, and the posterior additionally sees the concatenated
//! embeddings of every modality. Batches are time-major.

mod config;
mod model;
mod obs;

pub use config::{DecoderSpec, EncoderSpec, LossKind, ModalityConfig, ModalityKind, RssmConfig};
pub use model::{Imagined, LatentState, NoiseSource, Rollout, Rssm, SequenceBatch, StateVars};
pub use obs::{stack_rows, ImageObs, Observation, ObservationBundle};

#[cfg(test)]
mod tests;
