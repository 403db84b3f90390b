use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{balanced_kl_free_nats, infonce_graph, LossReport};
use crate::diffgraph::{Graph, Var};
use crate::dists::unit_log_prob;
use crate::rssm::{LossKind, NoiseSource, Rollout, Rssm, SequenceBatch};
use crate::{Error, Result};

/// Weights shared by all objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kl_balance: f64,
    pub free_nats: f64,
    /// KL scale inside the contrastive predictive objective.
    pub beta: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kl_balance: 0.8,
            free_nats: 1.0,
            beta: 0.001,
        }
    }
}

/// Loss node to minimize plus the reported terms.
#[derive(Clone, Debug)]
pub struct ObjectiveOutput {
    pub loss: Var,
    pub report: LossReport,
}

/// Accumulates signed objective terms on the graph.
struct Builder {
    total: Option<Var>,
    terms: BTreeMap<String, f64>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            total: None,
            terms: BTreeMap::new(),
        }
    }

    fn add(&mut self, g: &mut Graph, name: String, term: Var, sign: f64) -> Result<()> {
        self.terms.insert(name, g.scalar(term));
        let signed = if sign == 1.0 {
            term
        } else {
            g.scale(term, sign)
        };
        self.total = Some(match self.total {
            None => signed,
            Some(t) => g.add(t, signed)?,
        });
        Ok(())
    }

    fn finish(self, g: &mut Graph) -> Result<ObjectiveOutput> {
        let total = self
            .total
            .ok_or_else(|| Error::Config("objective has no terms".into()))?;
        let report = LossReport {
            total: g.scalar(total),
            terms: self.terms,
        };
        Ok(ObjectiveOutput {
            loss: g.neg(total),
            report,
        })
    }
}

fn mean_unit_log_prob(g: &mut Graph, mean: Var, target: Var) -> Result<Var> {
    let lp = unit_log_prob(g, mean, target)?;
    Ok(g.mean(lp))
}

fn variational(
    g: &mut Graph,
    model: &Rssm,
    rollout: &Rollout,
    batch: &SequenceBatch,
    cfg: &ObjectiveConfig,
    allow_contrastive: bool,
) -> Result<ObjectiveOutput> {
    let mut b = Builder::new();
    let (h, s) = rollout.stacked(g)?;
    let z = if allow_contrastive {
        Some(g.concat_cols(&[h, s])?)
    } else {
        None
    };
    for (k, m) in model.config.modalities.iter().enumerate() {
        match m.loss {
            LossKind::Reconstruction => {
                let mean = model.decode(g, k, h, s)?;
                let target = g.constant(batch.obs[k].clone());
                let term = mean_unit_log_prob(g, mean, target)?;
                b.add(g, format!("recon_{}", m.id), term, 1.0)?;
            }
            LossKind::ContrastiveVariational if allow_contrastive => {
                let head = model.score_head(k).expect("contrastive modality owns a score head");
                let logits = head.log_scores(g, &model.params, rollout.embeds[k], z.expect("joint latent"))?;
                let term = infonce_graph(g, logits)?;
                b.add(g, format!("mi_{}", m.id), term, 1.0)?;
            }
            LossKind::ContrastiveVariational => {
                return Err(Error::Config(format!(
                    "modality '{}' is contrastive; the reconstruction bound needs decoders for every modality",
                    m.id
                )))
            }
            LossKind::ContrastivePredictive => {
                return Err(Error::Config(format!(
                    "modality '{}' uses the contrastive predictive loss; use cpc_loss",
                    m.id
                )))
            }
        }
    }
    let r_mean = model.predict_reward(g, h, s)?;
    let r_target = g.constant(batch.rewards.clone());
    let r_term = mean_unit_log_prob(g, r_mean, r_target)?;
    b.add(g, "reward_loglik".into(), r_term, 1.0)?;
    let (post, prior) = rollout.stacked_dists(g)?;
    let (kl_loss, kl) = balanced_kl_free_nats(g, &post, &prior, cfg.kl_balance, cfg.free_nats)?;
    b.add(g, "kl_loss".into(), kl_loss, -1.0)?;
    b.terms.insert("kl".into(), kl);
    b.finish(g)
}

/// Reconstruction bound: per-step mean of `Σ_k log p(o_k|z) + log p(r|z)`
/// minus the balanced, free-nat KL.
pub fn reconstruction_elbo(
    g: &mut Graph,
    model: &Rssm,
    rollout: &Rollout,
    batch: &SequenceBatch,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    variational(g, model, rollout, batch, cfg, false)
}

/// Reconstruction bound with contrastive modalities replaced by InfoNCE
/// over all `batch * length` (embedding, posterior latent) pairs.
pub fn mixed_variational_loss(
    g: &mut Graph,
    model: &Rssm,
    rollout: &Rollout,
    batch: &SequenceBatch,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    variational(g, model, rollout, batch, cfg, true)
}

/// Mean squared error `‖a − â‖²` of the inverse dynamics predictor over
/// rows of consecutive features.
pub fn inverse_dynamics_loss(
    g: &mut Graph,
    model: &Rssm,
    f_t: Var,
    f_next: Var,
    actions: Var,
) -> Result<Var> {
    let pred = model.predict_action(g, f_t, f_next)?;
    let d = g.sub(actions, pred)?;
    let sq = g.square(d);
    let per_row = g.sum_cols(sq);
    Ok(g.mean(per_row))
}

/// Contrastive predictive objective. Prediction pairs are `(z_t, o_{t+1})`
/// for `t < length - 1`, using a prior sample forwarded one step with the
/// taken action; reward and KL terms cover every step.
pub fn cpc_loss(
    g: &mut Graph,
    model: &Rssm,
    rollout: &Rollout,
    batch: &SequenceBatch,
    cfg: &ObjectiveConfig,
    noise: &mut NoiseSource,
) -> Result<ObjectiveOutput> {
    let (l, bsz) = (rollout.length, rollout.batch);
    if l < 2 {
        return Err(Error::Usage(format!(
            "the contrastive predictive objective needs sequences of length >= 2, got {l}"
        )));
    }
    if model
        .config
        .modalities
        .iter()
        .any(|m| m.loss == LossKind::ContrastiveVariational)
    {
        return Err(Error::Config(
            "contrastive_variational modalities belong to mixed_variational_loss".into(),
        ));
    }
    let pairs = (l - 1) * bsz;
    let mut b = Builder::new();
    // Forwarded states: h_{t+1} = det_step(z_t, a_t) and its prior, both
    // already part of the rollout.
    let hs: Vec<Var> = rollout.posts[1..].iter().map(|s| s.h).collect();
    let h_next = g.concat_rows(&hs)?;
    let means: Vec<Var> = rollout.priors[1..].iter().map(|p| p.mean).collect();
    let stds: Vec<Var> = rollout.priors[1..].iter().map(|p| p.std).collect();
    let prior_next = crate::dists::GaussianVar {
        mean: g.concat_rows(&means)?,
        std: g.concat_rows(&stds)?,
    };
    let eps = g.constant(noise.normal(pairs, model.config.stoch));
    let s_fwd = prior_next.rsample(g, eps)?;
    let mut z_fwd = None;
    for (k, m) in model.config.modalities.iter().enumerate() {
        match m.loss {
            LossKind::Reconstruction => {
                let mean = model.decode(g, k, h_next, s_fwd)?;
                let target_rows = batch.obs[k].data()[bsz * batch.obs[k].cols()..].to_vec();
                let target = g.constant(crate::diffgraph::Tensor::new(
                    vec![pairs, batch.obs[k].cols()],
                    target_rows,
                ));
                let term = mean_unit_log_prob(g, mean, target)?;
                b.add(g, format!("recon_{}", m.id), term, 1.0)?;
            }
            LossKind::ContrastivePredictive => {
                let z = match z_fwd {
                    Some(z) => z,
                    None => {
                        let z = g.concat_cols(&[h_next, s_fwd])?;
                        z_fwd = Some(z);
                        z
                    }
                };
                let head = model
                    .score_head(k)
                    .expect("contrastive modality owns a score head");
                let embed_next = g.slice_rows(rollout.embeds[k], bsz, l * bsz)?;
                let logits = head.log_scores(g, &model.params, embed_next, z)?;
                let term = infonce_graph(g, logits)?;
                b.add(g, format!("mi_{}", m.id), term, 1.0)?;
            }
            LossKind::ContrastiveVariational => unreachable!("rejected above"),
        }
    }
    let (h, s) = rollout.stacked(g)?;
    let r_mean = model.predict_reward(g, h, s)?;
    let r_target = g.constant(batch.rewards.clone());
    let r_term = mean_unit_log_prob(g, r_mean, r_target)?;
    b.add(g, "reward_loglik".into(), r_term, 1.0)?;
    let (post, prior) = rollout.stacked_dists(g)?;
    let (kl_loss, kl) = balanced_kl_free_nats(g, &post, &prior, cfg.kl_balance, cfg.free_nats)?;
    let kl_scaled = g.scale(kl_loss, cfg.beta);
    b.add(g, "kl_loss".into(), kl_scaled, -1.0)?;
    b.terms.insert("kl".into(), kl);
    if model.has_inverse_dynamics() {
        let f: Vec<Var> = rollout
            .posts
            .iter()
            .map(|st| st.features(g))
            .collect::<Result<_>>()?;
        let f_t = g.concat_rows(&f[..l - 1])?;
        let f_next = g.concat_rows(&f[1..])?;
        let a = g.constant(crate::diffgraph::Tensor::new(
            vec![pairs, model.config.action_dim],
            batch.actions.data()[..pairs * model.config.action_dim].to_vec(),
        ));
        let la = inverse_dynamics_loss(g, model, f_t, f_next, a)?;
        b.add(g, "inverse_dynamics".into(), la, -1.0)?;
    }
    b.finish(g)
}

/// Dispatches to [`cpc_loss`] when any modality is contrastive-predictive,
/// and to [`mixed_variational_loss`] otherwise.
pub fn model_objective(
    g: &mut Graph,
    model: &Rssm,
    rollout: &Rollout,
    batch: &SequenceBatch,
    cfg: &ObjectiveConfig,
    noise: &mut NoiseSource,
) -> Result<ObjectiveOutput> {
    if model.config.has_predictive() {
        cpc_loss(g, model, rollout, batch, cfg, noise)
    } else {
        mixed_variational_loss(g, model, rollout, batch, cfg)
    }
}
