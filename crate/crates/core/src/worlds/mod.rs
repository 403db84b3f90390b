//! Evaluation worlds: a two-link reacher rendered to small images (clean,
//! with a moving background, or with a moving occluder) and a linear
//! Gaussian system with an exact Kalman filter.

mod dump;
mod linear;
mod reacher;
mod render;

use crate::rssm::{ModalityKind, ObservationBundle};
use crate::Result;

pub use dump::{dump_episode, FrameManifest};
pub use linear::{Belief, LinearGaussianSpec};
pub use reacher::{
    observe, physics_step, render_image, reset, reward, step, wrap_angle, Reacher,
    ReacherWorldState, Variant, WorldConfig, IMAGE_ID, LINK_LENGTHS, PROPRIO_ID,
};
pub use render::{
    apply_distractor, apply_occlusion, pixel_scale, pixel_to_world, render_scene, Blob,
    DistractorField, Occluder,
};

/// Outcome of one agent step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub bundle: ObservationBundle,
    pub reward: f64,
    /// True once the episode's environment-step budget is spent.
    pub done: bool,
}

/// Episodic environment with continuous actions in `[-1, 1]^d`.
pub trait Environment {
    /// Starts a new episode whose randomness is drawn from `seed`.
    fn reset(&mut self, seed: u64) -> ObservationBundle;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
    fn action_dim(&self) -> usize;
    /// Agent steps per episode.
    fn episode_steps(&self) -> usize;
    /// Every modality the environment emits, in a fixed order.
    fn modalities(&self) -> Vec<(String, ModalityKind)>;
    /// Upper bound on the reward of a single agent step.
    fn max_step_reward(&self) -> f64;
    /// Environment steps per agent step.
    fn action_repeat(&self) -> usize {
        1
    }
}
