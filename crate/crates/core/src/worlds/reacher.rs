use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{apply_distractor, apply_occlusion, render_scene, DistractorField, Occluder};
use super::{Environment, StepResult};
use crate::diffgraph::ImageShape;
use crate::rssm::{ImageObs, ModalityKind, Observation, ObservationBundle};
use crate::{Error, Result};

pub const PROPRIO_ID: &str = "proprio";
pub const IMAGE_ID: &str = "image";
pub const LINK_LENGTHS: [f64; 2] = [0.5, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Clean,
    Distractor,
    Occlusion,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clean" => Some(Variant::Clean),
            "distractor" => Some(Variant::Distractor),
            "occlusion" => Some(Variant::Occlusion),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Clean => "clean",
            Variant::Distractor => "distractor",
            Variant::Occlusion => "occlusion",
        }
    }
}

/// Two-link planar reacher. Lengths are in arm-reach units (full reach 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub variant: Variant,
    /// Model-side (cropped) image size.
    pub image_size: usize,
    /// Rendered size before cropping.
    pub precrop_size: usize,
    pub channels: usize,
    /// Episode length in environment steps.
    pub episode_length: usize,
    pub action_repeat: usize,
    /// Physics step size.
    pub dt: f64,
    pub torque_gain: f64,
    pub damping: f64,
    pub max_velocity: f64,
    /// Width of the exponential reward kernel.
    pub reward_sigma: f64,
    pub target_radius: f64,
    pub arm_half_width: f64,
    /// Occluder radius and speed as fractions of the image width.
    pub occluder_radius: f64,
    pub occluder_speed: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            variant: Variant::Clean,
            image_size: 32,
            precrop_size: 40,
            channels: 3,
            episode_length: 100,
            action_repeat: 1,
            dt: 0.1,
            torque_gain: 10.0,
            damping: 2.0,
            max_velocity: 4.0,
            reward_sigma: 0.25,
            target_radius: 0.15,
            arm_half_width: 0.07,
            occluder_radius: 0.2,
            occluder_speed: 0.02,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.precrop_size <= self.image_size {
            return bad("precrop size must exceed the crop size");
        }
        if self.image_size == 0 || self.channels == 0 {
            return bad("image size and channels must be positive");
        }
        if self.action_repeat == 0 || self.episode_length < self.action_repeat {
            return bad("episode length must cover at least one action repeat");
        }
        if !(self.dt > 0.0
            && self.max_velocity > 0.0
            && self.reward_sigma > 0.0
            && self.damping >= 0.0)
        {
            return bad(
                "dt, max velocity and reward sigma must be positive and damping nonnegative",
            );
        }
        if !(self.occluder_radius > 0.0) || self.occluder_speed < 0.0 {
            return bad("occluder radius must be positive and speed nonnegative");
        }
        Ok(())
    }

    /// Agent decisions per episode.
    pub fn agent_steps(&self) -> usize {
        self.episode_length / self.action_repeat
    }

    pub fn precrop_shape(&self) -> ImageShape {
        ImageShape {
            size: self.precrop_size,
            channels: self.channels,
        }
    }

    pub fn model_image_shape(&self) -> ImageShape {
        ImageShape {
            size: self.image_size,
            channels: self.channels,
        }
    }
}

/// Complete simulator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReacherWorldState {
    /// Joint angles in `(-π, π]`.
    pub theta: [f64; 2],
    pub velocity: [f64; 2],
    pub target: [f64; 2],
    pub occluder: Occluder,
    pub distractor: DistractorField,
    /// Environment steps since reset.
    pub t: usize,
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

impl ReacherWorldState {
    pub fn joints(&self) -> [[f64; 2]; 3] {
        let [l1, l2] = LINK_LENGTHS;
        let elbow = [l1 * self.theta[0].cos(), l1 * self.theta[0].sin()];
        let a = self.theta[0] + self.theta[1];
        let tip = [elbow[0] + l2 * a.cos(), elbow[1] + l2 * a.sin()];
        [[0.0, 0.0], elbow, tip]
    }

    pub fn fingertip(&self) -> [f64; 2] {
        self.joints()[2]
    }

    /// `[cos θ1, cos θ2, sin θ1, sin θ2, θ̇1, θ̇2]`.
    pub fn proprio(&self) -> Vec<f64> {
        vec![
            self.theta[0].cos(),
            self.theta[1].cos(),
            self.theta[0].sin(),
            self.theta[1].sin(),
            self.velocity[0],
            self.velocity[1],
        ]
    }
}

pub fn reward(config: &WorldConfig, state: &ReacherWorldState) -> f64 {
    let tip = state.fingertip();
    let d2 = (tip[0] - state.target[0]).powi(2) + (tip[1] - state.target[1]).powi(2);
    (-d2 / (config.reward_sigma * config.reward_sigma)).exp()
}

/// Fresh episode state drawn from `seed`.
pub fn reset(config: &WorldConfig, seed: u64) -> (ReacherWorldState, ObservationBundle) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = [rng.random_range(-PI..PI), rng.random_range(-PI..PI)];
    let radius = rng.random_range(0.2..0.9);
    let angle = rng.random_range(-PI..PI);
    let target = [radius * angle.cos(), radius * angle.sin()];
    let heading = rng.random_range(-PI..PI);
    let occluder = Occluder {
        center: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
        velocity: [
            config.occluder_speed * heading.cos(),
            config.occluder_speed * heading.sin(),
        ],
        radius: config.occluder_radius,
    };
    let distractor = DistractorField::random(&mut rng, config.channels);
    let state = ReacherWorldState {
        theta: [wrap_angle(theta[0]), wrap_angle(theta[1])],
        velocity: [0.0, 0.0],
        target,
        occluder,
        distractor,
        t: 0,
    };
    let bundle = observe(config, &state);
    (state, bundle)
}

/// One physics step with the action clamped to `[-1, 1]²`.
pub fn physics_step(config: &WorldConfig, state: &mut ReacherWorldState, action: &[f64]) {
    for j in 0..2 {
        let a = action.get(j).copied().unwrap_or(0.0);
        let a = if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) };
        let v = state.velocity[j]
            + config.dt * (config.torque_gain * a - config.damping * state.velocity[j]);
        state.velocity[j] = v.clamp(-config.max_velocity, config.max_velocity);
        state.theta[j] = wrap_angle(state.theta[j] + config.dt * state.velocity[j]);
    }
    state.occluder.advance();
    state.t += 1;
}

/// Applies `action` for `action_repeat` physics steps; the reward is the
/// sum of per-step rewards.
pub fn step(
    config: &WorldConfig,
    state: &ReacherWorldState,
    action: &[f64],
) -> (ReacherWorldState, ObservationBundle, f64) {
    let mut next = state.clone();
    let mut total = 0.0;
    for _ in 0..config.action_repeat {
        physics_step(config, &mut next, action);
        total += reward(config, &next);
    }
    let bundle = observe(config, &next);
    (next, bundle, total)
}

/// Clean render plus the variant's image modification.
pub fn render_image(config: &WorldConfig, state: &ReacherWorldState) -> ImageObs {
    let (mut img, mask) = render_scene(config, state);
    match config.variant {
        Variant::Clean => {}
        Variant::Distractor => apply_distractor(&mut img, &mask, &state.distractor, state.t),
        Variant::Occlusion => apply_occlusion(&mut img, &state.occluder),
    }
    img
}

pub fn observe(config: &WorldConfig, state: &ReacherWorldState) -> ObservationBundle {
    ObservationBundle::new()
        .with(PROPRIO_ID, Observation::Vector(state.proprio()))
        .with(IMAGE_ID, Observation::Image(render_image(config, state)))
}

/// Stateful wrapper over the pure step functions.
#[derive(Clone, Debug)]
pub struct Reacher {
    pub config: WorldConfig,
    pub state: Option<ReacherWorldState>,
}

impl Reacher {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        Ok(Reacher {
            config,
            state: None,
        })
    }

    /// Occlusion-free render of the current state.
    pub fn ground_truth_image(&self) -> Option<ImageObs> {
        self.state.as_ref().map(|s| render_scene(&self.config, s).0)
    }
}

impl Environment for Reacher {
    fn reset(&mut self, seed: u64) -> ObservationBundle {
        let (s, b) = reset(&self.config, seed);
        self.state = Some(s);
        b
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::Usage("step called before reset".into()))?;
        let (next, bundle, reward) = step(&self.config, state, action);
        let done = next.t + self.config.action_repeat > self.config.episode_length;
        self.state = Some(next);
        Ok(StepResult {
            bundle,
            reward,
            done,
        })
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn episode_steps(&self) -> usize {
        self.config.agent_steps()
    }

    fn modalities(&self) -> Vec<(String, ModalityKind)> {
        vec![
            (PROPRIO_ID.to_string(), ModalityKind::Vector(6)),
            (
                IMAGE_ID.to_string(),
                ModalityKind::Image(self.config.precrop_shape()),
            ),
        ]
    }

    fn max_step_reward(&self) -> f64 {
        self.config.action_repeat as f64
    }

    fn action_repeat(&self) -> usize {
        self.config.action_repeat
    }
}
