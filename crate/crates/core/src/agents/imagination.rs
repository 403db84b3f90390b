use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::actor::TanhGaussianActor;
use super::lambda_returns_graph;
use crate::diffgraph::{Adam, AdamConfig, Graph, Mlp, MlpSpec, ParamStore, Tensor, Var};
use crate::dists::normal_tensor;
use crate::rssm::{LatentState, NoiseSource, Rssm};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImaginationConfig {
    pub hidden: Vec<usize>,
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    pub clip: f64,
    /// EMA decay of the slow value copy.
    pub slow_decay: f64,
    /// Weight of the pull towards the slow value.
    pub slow_weight: f64,
}

impl Default for ImaginationConfig {
    fn default() -> Self {
        ImaginationConfig {
            hidden: vec![128, 128, 128],
            horizon: 15,
            gamma: 0.99,
            lambda: 0.95,
            lr: 8e-5,
            clip: 100.0,
            slow_decay: 0.98,
            slow_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImaginationStats {
    pub actor_loss: f64,
    pub value_loss: f64,
    pub mean_return: f64,
    pub mean_reward: f64,
}

#[derive(Clone, Debug)]
pub struct ImaginationNets {
    pub config: ImaginationConfig,
    pub feature_dim: usize,
    pub action_dim: usize,
    pub actor: TanhGaussianActor,
    pub actor_params: ParamStore,
    pub value: Mlp,
    pub value_params: ParamStore,
    pub slow_params: ParamStore,
    pub actor_opt: Adam,
    pub value_opt: Adam,
}

impl ImaginationNets {
    pub fn new(
        config: ImaginationConfig,
        feature_dim: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.horizon == 0 {
            return Err(Error::Config(
                "imagination horizon must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&config.lambda) || !(0.0..=1.0).contains(&config.gamma) {
            return Err(Error::Config("gamma and lambda must lie in [0, 1]".into()));
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
        let mut value_params = ParamStore::new();
        let value = Mlp::new(
            &mut value_params,
            "value",
            feature_dim,
            &MlpSpec::elu(config.hidden.clone()).with_head("v", 1),
            rng,
        )?;
        let slow_params = value_params.clone();
        let opt = AdamConfig::conventional(config.lr, Some(config.clip));
        Ok(ImaginationNets {
            actor_opt: Adam::new(opt, &actor_params),
            value_opt: Adam::new(opt, &value_params),
            config,
            feature_dim,
            action_dim,
            actor,
            actor_params,
            value,
            value_params,
            slow_params,
        })
    }

    pub fn value_of(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        self.value.apply_one(g, store, features)
    }

    pub fn act(&self, features: &Tensor, rng: Option<&mut dyn rand::RngCore>) -> Result<Tensor> {
        self.actor.act(&self.actor_params, features, rng)
    }
}

fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Imagined features `[H + 1]`, λ-returns `[H]` and stacked rewards
/// from `starts`, with every node on `g`.
pub(crate) fn imagined_returns(
    g: &mut Graph,
    nets: &ImaginationNets,
    model: &Rssm,
    starts: &[LatentState],
    policy_noise: &mut dyn FnMut(usize, usize) -> Tensor,
    dyn_noise: &mut NoiseSource,
) -> Result<(Vec<Var>, Vec<Var>, Var)> {
    let cfg = &nets.config;
    let n = starts.len();
    let start = model.state_vars(g, starts);
    let adim = nets.action_dim;
    let mut policy = |g: &mut Graph, feats: Var| -> Result<Var> {
        let eps = g.constant(policy_noise(n, adim));
        Ok(nets.actor.sample(g, &nets.actor_params, feats, eps)?.0)
    };
    let traj = model.imagine(g, &start, cfg.horizon, &mut policy, dyn_noise)?;
    let feats: Vec<Var> = traj
        .states
        .iter()
        .map(|s| s.features(g))
        .collect::<Result<_>>()?;
    let values: Vec<Var> = feats
        .iter()
        .map(|&f| nets.value_of(g, &nets.value_params, f))
        .collect::<Result<_>>()?;
    let returns = lambda_returns_graph(g, &traj.rewards, &values, cfg.gamma, cfg.lambda)?;
    let rewards = g.concat_rows(&traj.rewards)?;
    Ok((feats, returns, rewards))
}

/// One actor step on the mean λ-return of imagined rollouts (gradients
/// flow through the learned dynamics) and one value step towards the
/// stop-gradient returns. Start states are constants; only the actor,
/// value and slow-value stores change.
pub fn imagination_update(
    nets: &mut ImaginationNets,
    model: &Rssm,
    starts: &[LatentState],
    rng: &mut ChaCha8Rng,
) -> Result<ImaginationStats> {
    if starts.is_empty() {
        return Err(Error::Usage(
            "imagination needs at least one start state".into(),
        ));
    }
    if nets.config.horizon == 0 {
        return Err(Error::Usage(
            "imagination horizon must be at least 1".into(),
        ));
    }
    let cfg = nets.config.clone();
    let mut dyn_noise = NoiseSource::Sampled(rand::SeedableRng::seed_from_u64(rng.random()));

    let mut g = Graph::new();
    let mut policy_noise = |rows: usize, cols: usize| normal_tensor(rng, &[rows, cols]);
    let (feats, returns, rewards) = imagined_returns(
        &mut g,
        nets,
        model,
        starts,
        &mut policy_noise,
        &mut dyn_noise,
    )?;
    let stacked = g.concat_rows(&returns)?;
    let mean_return = g.mean(stacked);
    let actor_loss = g.neg(mean_return);
    let mean_reward = g.value(rewards).mean();
    let grads = g.backward(actor_loss)?.for_store(&g, &nets.actor_params);
    let actor_loss_value = g.scalar(actor_loss);
    let mean_return_value = g.scalar(mean_return);
    let targets: Vec<Tensor> = returns.iter().map(|&r| g.value(r).clone()).collect();
    let inputs: Vec<Tensor> = feats[..cfg.horizon]
        .iter()
        .map(|&f| g.value(f).clone())
        .collect();
    nets.actor_opt.step(&mut nets.actor_params, grads);

    let mut g = Graph::new();
    let x = g.constant(Tensor::concat_rows(&inputs));
    let y = g.constant(Tensor::concat_rows(&targets));
    let v = nets.value_of(&mut g, &nets.value_params, x)?;
    let slow = nets.value_of(&mut g, &nets.slow_params, x)?;
    let slow = g.detach(slow);
    let fit = mse(&mut g, v, y)?;
    let pull = mse(&mut g, v, slow)?;
    let pull = g.scale(pull, cfg.slow_weight);
    let value_loss = g.add(fit, pull)?;
    let grads = g.backward(value_loss)?.for_store(&g, &nets.value_params);
    let value_loss_value = g.scalar(value_loss);
    nets.value_opt.step(&mut nets.value_params, grads);
    nets.slow_params
        .ema_from(&nets.value_params, cfg.slow_decay);

    Ok(ImaginationStats {
        actor_loss: actor_loss_value,
        value_loss: value_loss_value,
        mean_return: mean_return_value,
        mean_reward,
    })
}
