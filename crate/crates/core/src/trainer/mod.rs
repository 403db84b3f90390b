//! Replay, window sampling, crop augmentation, the model-free and
//! model-based training protocols, and checkpoints.

mod checkpoint;
mod config;
mod policy;
mod replay;
mod run;

pub use checkpoint::{checkpoint_entries, load_checkpoint, save_checkpoint};
pub use config::{Mode, MomentPreset, TrainConfig};
pub use policy::{ActMode, Agent, LatentPolicy, Policy, RandomPolicy};
pub use replay::{
    assemble_batch, crop_augment, model_view, sample_subsequences, CropMode, EpisodeRecord,
    ReplayBuffer, Window,
};
pub use run::{
    objective_terms, rng_stream, run_episode, train_model_based, train_model_free, transitions,
    EvalPoint, MetricsLog, ModelStep, SeparationLog, Trainer,
};
