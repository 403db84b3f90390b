use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use super::replay::model_view;
use crate::agents::{ImaginationNets, SacNets};
use crate::diffgraph::Tensor;
use crate::dists::normal_tensor;
use crate::rssm::{LatentState, NoiseSource, ObservationBundle, Rssm};
use crate::Result;

/// Acting interface shared by collection and evaluation.
pub trait Policy {
    /// Called before the first observation of every episode.
    fn reset(&mut self);
    fn act(&mut self, bundle: &ObservationBundle) -> Result<Vec<f64>>;
}

/// Uniform actions in `[-1, 1]^d`; ignores observations.
pub struct RandomPolicy {
    pub action_dim: usize,
    pub rng: ChaCha8Rng,
}

impl Policy for RandomPolicy {
    fn reset(&mut self) {}

    fn act(&mut self, _: &ObservationBundle) -> Result<Vec<f64>> {
        Ok((0..self.action_dim)
            .map(|_| self.rng.random_range(-1.0..=1.0))
            .collect())
    }
}

/// The learned behaviour on top of the model's belief.
#[derive(Clone, Debug)]
pub enum Agent {
    Sac(SacNets),
    Imagination(ImaginationNets),
}

impl Agent {
    pub fn act(&self, features: &Tensor, rng: Option<&mut dyn RngCore>) -> Result<Tensor> {
        match self {
            Agent::Sac(n) => n.act(features, rng),
            Agent::Imagination(n) => n.act(features, rng),
        }
    }
}

/// How a [`LatentPolicy`] turns the actor into actions.
pub enum ActMode {
    /// Squashed mean.
    Deterministic,
    /// Sample from the actor.
    Stochastic(ChaCha8Rng),
    /// Squashed mean plus Gaussian noise of the given std, clipped to `[-1, 1]`.
    Noisy(ChaCha8Rng, f64),
}

/// Filters observations with the model's posterior at its mean (no
/// sampling) and feeds `[h; mean]` to the agent's actor.
pub struct LatentPolicy<'a> {
    pub model: &'a Rssm,
    pub agent: &'a Agent,
    pub mode: ActMode,
    state: LatentState,
    prev_action: Vec<f64>,
}

impl<'a> LatentPolicy<'a> {
    pub fn new(model: &'a Rssm, agent: &'a Agent, mode: ActMode) -> Self {
        LatentPolicy {
            state: model.initial_latent(),
            prev_action: vec![0.0; model.config.action_dim],
            model,
            agent,
            mode,
        }
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }
}

impl Policy for LatentPolicy<'_> {
    fn reset(&mut self) {
        self.state = self.model.initial_latent();
        self.prev_action = vec![0.0; self.model.config.action_dim];
    }

    fn act(&mut self, bundle: &ObservationBundle) -> Result<Vec<f64>> {
        let view = model_view(&self.model.config, bundle)?;
        let prev = std::mem::replace(&mut self.state, self.model.initial_latent());
        self.state = self
            .model
            .observe(
                &[prev],
                std::slice::from_ref(&self.prev_action),
                &[view],
                &mut NoiseSource::Zero,
            )?
            .remove(0);
        let feats = Tensor::row(&self.state.features());
        let action = match &mut self.mode {
            ActMode::Deterministic => self.agent.act(&feats, None)?.into_data(),
            ActMode::Stochastic(rng) => self.agent.act(&feats, Some(rng))?.into_data(),
            ActMode::Noisy(rng, sigma) => {
                let mean = self.agent.act(&feats, None)?;
                let noise = normal_tensor(rng, mean.shape());
                mean.zip_map(&noise, |a, e| (a + *sigma * e).clamp(-1.0, 1.0))
                    .into_data()
            }
        };
        self.prev_action = action.clone();
        Ok(action)
    }
}
