//! Representation objectives: the reconstruction bound, its mixture with
//! contrastive mutual-information terms, the contrastive predictive
//! objective, and their building blocks.
//!
//! Every objective is reported as a value to maximize; the returned graph
//! node `loss` is its negation.

mod losses;
mod score;

use std::collections::BTreeMap;

use crate::diffgraph::{Graph, Var};
use crate::dists::GaussianVar;
use crate::{Error, Result};

pub use losses::{
    cpc_loss, inverse_dynamics_loss, mixed_variational_loss, model_objective, reconstruction_elbo,
    ObjectiveConfig, ObjectiveOutput,
};
pub use score::ScoreHead;

/// Scalar terms of one objective evaluation, keyed by stable names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    /// The objective value (higher is better).
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE estimate from a positive score matrix with positives
/// on the diagonal: `log I + (1/2I) Σ_i [log(S_ii / Σ_j S_ji) + log(S_ii / Σ_j S_ij)]`.
/// Bounded above by `log I`.
pub fn infonce(scores: &[Vec<f64>]) -> Result<f64> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::Usage(format!(
            "InfoNCE needs at least 2 pairs, got {n}"
        )));
    }
    if scores.iter().any(|r| r.len() != n) {
        return Err(Error::Shape {
            op: "infonce",
            detail: "score matrix is not square".into(),
        });
    }
    if let Some(bad) = scores
        .iter()
        .flatten()
        .find(|&&s| !(s > 0.0) || !s.is_finite())
    {
        return Err(Error::Domain(format!(
            "score {bad} is not a finite positive number"
        )));
    }
    let logits: Vec<Vec<f64>> = scores
        .iter()
        .map(|r| r.iter().map(|s| s.ln()).collect())
        .collect();
    Ok(infonce_from_logits(&logits))
}

/// [`infonce`] on log-scores.
pub fn infonce_from_logits(logits: &[Vec<f64>]) -> f64 {
    let n = logits.len();
    let mut acc = 0.0;
    for i in 0..n {
        let row = log_sum_exp(logits[i].iter().copied());
        let col = log_sum_exp((0..n).map(|j| logits[j][i]));
        acc += 2.0 * logits[i][i] - row - col;
    }
    (n as f64).ln() + acc / (2.0 * n as f64)
}

/// Graph form of [`infonce_from_logits`] for an `[I, I]` log-score matrix.
pub fn infonce_graph(g: &mut Graph, logits: Var) -> Result<Var> {
    let n = g.value(logits).rows();
    if n < 2 {
        return Err(Error::Usage(format!(
            "InfoNCE needs at least 2 pairs, got {n}"
        )));
    }
    let diag = g.diag(logits)?;
    let rows = g.logsumexp_rows(logits);
    let lt = g.transpose(logits);
    let cols = g.logsumexp_rows(lt);
    let two_diag = g.scale(diag, 2.0);
    let a = g.sub(two_diag, rows)?;
    let b = g.sub(a, cols)?;
    let s = g.sum(b);
    let m = g.scale(s, 1.0 / (2.0 * n as f64));
    Ok(g.offset(m, (n as f64).ln()))
}

/// `f_v(o, z)` per row for matching rows of embeddings and joint latents
/// `[h; s]`, `[N, 1]`.
pub fn score_variational(
    g: &mut Graph,
    head: &ScoreHead,
    store: &crate::diffgraph::ParamStore,
    embed: Var,
    z: Var,
) -> Result<Var> {
    let l = head.log_score_pairs(g, store, embed, z)?;
    Ok(g.exp(l))
}

/// `f_p(o_{t+1}, ẑ_{t+1})` where `ẑ` is the latent forwarded one step with
/// the dynamics; the functional form equals [`score_variational`].
pub fn score_predictive(
    g: &mut Graph,
    head: &ScoreHead,
    store: &crate::diffgraph::ParamStore,
    next_embed: Var,
    forwarded_z: Var,
) -> Result<Var> {
    score_variational(g, head, store, next_embed, forwarded_z)
}

/// Balanced KL with free nats:
/// `α·max(KL(sg(q)‖p) − free, 0) + (1−α)·max(KL(q‖sg(p)) − free, 0)`,
/// where each KL is the mean over rows. Returns the loss node and the
/// mean KL value.
pub fn balanced_kl_free_nats(
    g: &mut Graph,
    post: &GaussianVar,
    prior: &GaussianVar,
    alpha: f64,
    free_nats: f64,
) -> Result<(Var, f64)> {
    if !(0.0..=1.0).contains(&alpha) || free_nats.is_nan() || free_nats < 0.0 {
        return Err(Error::Domain(format!(
            "kl balance {alpha} must lie in [0, 1] and free nats {free_nats} must be nonnegative"
        )));
    }
    let sg_post = post.detach(g);
    let sg_prior = prior.detach(g);
    let kl_prior_side = sg_post.kl(g, prior)?;
    let kl_post_side = post.kl(g, &sg_prior)?;
    let mean_prior_side = g.mean(kl_prior_side);
    let mean_post_side = g.mean(kl_post_side);
    let kl_value = g.scalar(mean_post_side);
    let clip = |g: &mut Graph, v: Var| {
        let shifted = g.offset(v, -free_nats);
        g.relu(shifted)
    };
    let a = clip(g, mean_prior_side);
    let b = clip(g, mean_post_side);
    let a = g.scale(a, alpha);
    let b = g.scale(b, 1.0 - alpha);
    Ok((g.add(a, b)?, kl_value))
}

/// Plain-value counterpart of [`balanced_kl_free_nats`]: `max(KL − free, 0)`.
pub fn free_nats_value(kl: f64, free_nats: f64) -> f64 {
    (kl - free_nats).max(0.0)
}

#[cfg(test)]
mod tests;
