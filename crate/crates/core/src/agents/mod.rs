//! Actor-critic learners on top of frozen latent features: soft
//! actor-critic on posterior features, and an actor with a value function
//! trained on imagined rollouts of the learned dynamics.
//!
//! Neither learner ever steps the world model's parameters.

mod actor;
mod imagination;
mod sac;

use crate::diffgraph::{Graph, Var};
use crate::{Error, Result};

pub use actor::{tanh_log_det, TanhGaussianActor};
pub use imagination::{imagination_update, ImaginationConfig, ImaginationNets, ImaginationStats};
pub use sac::{alpha_update, sac_target, sac_update, SacBatch, SacConfig, SacNets, SacStats};

/// λ-returns of a finite rollout. `rewards[t]` is received on entering
/// step `t + 1`; `values[t]` estimates step `t` and has one more entry than
/// `rewards`. The last return bootstraps from `values[H]`:
/// `R_t = r_t + γ((1 − λ) v_{t+1} + λ R_{t+1})`, `R_H = v_H`.
pub fn lambda_returns(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Usage(format!(
            "{} rewards need {} values, got {}",
            rewards.len(),
            rewards.len() + 1,
            values.len()
        )));
    }
    let h = rewards.len();
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + gamma * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// Graph form of [`lambda_returns`] over `[N, 1]` nodes.
pub fn lambda_returns_graph(
    g: &mut Graph,
    rewards: &[Var],
    values: &[Var],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Var>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Usage(format!(
            "{} rewards need {} values, got {}",
            rewards.len(),
            rewards.len() + 1,
            values.len()
        )));
    }
    let h = rewards.len();
    let mut out = Vec::with_capacity(h);
    let mut next = values[h];
    for t in (0..h).rev() {
        let boot = g.scale(values[t + 1], 1.0 - lambda);
        let carry = g.scale(next, lambda);
        let mix = g.add(boot, carry)?;
        let disc = g.scale(mix, gamma);
        next = g.add(rewards[t], disc)?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}
