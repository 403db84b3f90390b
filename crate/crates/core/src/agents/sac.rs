use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::actor::TanhGaussianActor;
use crate::diffgraph::{Adam, AdamConfig, Graph, Mlp, MlpSpec, ParamStore, Tensor, Var};
use crate::dists::normal_tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    /// EMA decay of the target critics.
    pub target_decay: f64,
    pub init_alpha: f64,
    pub critic_clip: f64,
    pub actor_clip: f64,
    /// Defaults to `-action_dim` when absent.
    pub target_entropy: Option<f64>,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            hidden: vec![256, 256, 256],
            lr: 1e-3,
            alpha_lr: 1e-3,
            gamma: 0.99,
            target_decay: 0.995,
            init_alpha: 0.1,
            critic_clip: 100.0,
            actor_clip: 10.0,
            target_entropy: None,
        }
    }
}

/// Transitions on frozen features. `discounts` is `γ` times the
/// continuation flag, `[N, 1]`.
#[derive(Clone, Debug)]
pub struct SacBatch {
    pub features: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_features: Tensor,
    pub discounts: Tensor,
}

impl SacBatch {
    fn validate(&self, feat: usize, act: usize) -> Result<()> {
        let n = self.features.rows();
        let ok = n > 0
            && self.features.cols() == feat
            && self.next_features.shape() == self.features.shape()
            && self.actions.shape() == [n, act]
            && self.rewards.shape() == [n, 1]
            && self.discounts.shape() == [n, 1];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                op: "sac_update",
                detail: format!(
                    "features {:?}, actions {:?}, rewards {:?}, next {:?}, discounts {:?} for width {feat}, action {act}",
                    self.features.shape(),
                    self.actions.shape(),
                    self.rewards.shape(),
                    self.next_features.shape(),
                    self.discounts.shape()
                ),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SacStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub q_mean: f64,
}

/// Actor, twin critics, their EMA targets and the entropy temperature.
#[derive(Clone, Debug)]
pub struct SacNets {
    pub config: SacConfig,
    pub feature_dim: usize,
    pub action_dim: usize,
    pub actor: TanhGaussianActor,
    pub actor_params: ParamStore,
    pub q1: Mlp,
    pub q2: Mlp,
    pub critic_params: ParamStore,
    pub target_params: ParamStore,
    pub log_alpha: f64,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl SacNets {
    pub fn new(
        config: SacConfig,
        feature_dim: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(config.init_alpha > 0.0) || !(0.0..1.0).contains(&config.target_decay) {
            return Err(Error::Config(
                "sac: alpha must be positive and the target decay in [0, 1)".into(),
            ));
        }
        let mut actor_params = ParamStore::new();
        let actor = TanhGaussianActor::new(
            &mut actor_params,
            "actor",
            feature_dim,
            &config.hidden,
            action_dim,
            rng,
        )?;
        let mut critic_params = ParamStore::new();
        let spec = MlpSpec::elu(config.hidden.clone()).with_head("q", 1);
        let q1 = Mlp::new(
            &mut critic_params,
            "q1",
            feature_dim + action_dim,
            &spec,
            rng,
        )?;
        let q2 = Mlp::new(
            &mut critic_params,
            "q2",
            feature_dim + action_dim,
            &spec,
            rng,
        )?;
        let target_params = critic_params.clone();
        let actor_opt = Adam::new(
            AdamConfig::conventional(config.lr, Some(config.actor_clip)),
            &actor_params,
        );
        let critic_opt = Adam::new(
            AdamConfig::conventional(config.lr, Some(config.critic_clip)),
            &critic_params,
        );
        Ok(SacNets {
            log_alpha: config.init_alpha.ln(),
            config,
            feature_dim,
            action_dim,
            actor,
            actor_params,
            q1,
            q2,
            critic_params,
            target_params,
            actor_opt,
            critic_opt,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.config
            .target_entropy
            .unwrap_or(-(self.action_dim as f64))
    }

    /// `min(Q1, Q2)` under `store`, `[N, 1]`.
    pub fn min_q(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        actions: Var,
    ) -> Result<Var> {
        let (a, b) = self.twin_q(g, store, features, actions)?;
        g.min(a, b)
    }

    pub fn twin_q(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        actions: Var,
    ) -> Result<(Var, Var)> {
        let x = g.concat_cols(&[features, actions])?;
        Ok((
            self.q1.apply_one(g, store, x)?,
            self.q2.apply_one(g, store, x)?,
        ))
    }

    /// Policy actions for plain features; deterministic when `rng` is `None`.
    pub fn act(&self, features: &Tensor, rng: Option<&mut dyn RngCore>) -> Result<Tensor> {
        self.actor.act(&self.actor_params, features, rng)
    }
}

/// Soft Bellman target `r + d·(min Q'(f', a') − α log π(a'|f'))` with
/// `a' = tanh(μ + σ·noise)` drawn from the current actor.
pub fn sac_target(nets: &SacNets, batch: &SacBatch, noise: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let fnext = g.constant(batch.next_features.clone());
    let eps = g.constant(noise.clone());
    let (a_next, logp) = nets.actor.sample(&mut g, &nets.actor_params, fnext, eps)?;
    let q = nets.min_q(&mut g, &nets.target_params, fnext, a_next)?;
    let ent = g.scale(logp, nets.alpha());
    let soft = g.sub(q, ent)?;
    let d = g.constant(batch.discounts.clone());
    let disc = g.mul(soft, d)?;
    let r = g.constant(batch.rewards.clone());
    let y = g.add(r, disc)?;
    Ok(g.value(y).clone())
}

/// Temperature step on `J(α) = α(H − H_target)`, taken in log space:
/// `log α ← log α − lr·α·(H − H_target)`. Returns the new `α`.
pub fn alpha_update(log_alpha: &mut f64, entropy: f64, target_entropy: f64, lr: f64) -> f64 {
    let alpha = log_alpha.exp();
    *log_alpha -= lr * alpha * (entropy - target_entropy);
    log_alpha.exp()
}

fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// One critic step, one actor step, one temperature step and one target
/// EMA update.
pub fn sac_update(nets: &mut SacNets, batch: &SacBatch, rng: &mut impl Rng) -> Result<SacStats> {
    batch.validate(nets.feature_dim, nets.action_dim)?;
    let n = batch.features.rows();
    let y = sac_target(nets, batch, &normal_tensor(rng, &[n, nets.action_dim]))?;

    let mut g = Graph::new();
    let f = g.constant(batch.features.clone());
    let a = g.constant(batch.actions.clone());
    let yv = g.constant(y);
    let (q1, q2) = nets.twin_q(&mut g, &nets.critic_params, f, a)?;
    let l1 = mse(&mut g, q1, yv)?;
    let l2 = mse(&mut g, q2, yv)?;
    let critic_loss = g.add(l1, l2)?;
    let q_mean = g.value(q1).mean();
    let grads = g.backward(critic_loss)?.for_store(&g, &nets.critic_params);
    let critic_loss = g.scalar(critic_loss);
    nets.critic_opt.step(&mut nets.critic_params, grads);

    let mut g = Graph::new();
    let f = g.constant(batch.features.clone());
    let eps = g.constant(normal_tensor(rng, &[n, nets.action_dim]));
    let (a_pi, logp) = nets.actor.sample(&mut g, &nets.actor_params, f, eps)?;
    let q = nets.min_q(&mut g, &nets.critic_params, f, a_pi)?;
    let ent = g.scale(logp, nets.alpha());
    let per_row = g.sub(ent, q)?;
    let actor_loss = g.mean(per_row);
    let entropy = -g.value(logp).mean();
    let grads = g.backward(actor_loss)?.for_store(&g, &nets.actor_params);
    let actor_loss = g.scalar(actor_loss);
    nets.actor_opt.step(&mut nets.actor_params, grads);

    let target_entropy = nets.target_entropy();
    let alpha = alpha_update(
        &mut nets.log_alpha,
        entropy,
        target_entropy,
        nets.config.alpha_lr,
    );
    nets.target_params
        .ema_from(&nets.critic_params, nets.config.target_decay);
    Ok(SacStats {
        critic_loss,
        actor_loss,
        alpha,
        entropy,
        q_mean,
    })
}
