use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DecoderSpec, EncoderSpec, LossKind, ModalityKind, RssmConfig};
use super::obs::{Observation, ObservationBundle};
use crate::diffgraph::{
    gru_cell, ConvDecoder, ConvEncoder, Graph, GruParams, Mlp, MlpSpec, ParamStore, Tensor, Var,
};
use crate::dists::{normal_tensor, DiagGaussian, GaussianVar};
use crate::objectives::ScoreHead;
use crate::{Error, Result};

#[derive(Clone, Debug)]
enum Encoder {
    Conv(ConvEncoder),
    Mlp(Mlp),
}

#[derive(Clone, Debug)]
enum Decoder {
    Conv(ConvDecoder),
    Mlp(Mlp),
}

/// Standard-normal noise for reparameterized samples. `Zero` yields the
/// distribution means, which is the evaluation mode.
#[derive(Clone, Debug)]
pub enum NoiseSource {
    Sampled(ChaCha8Rng),
    Zero,
}

impl NoiseSource {
    pub fn seeded(seed: u64) -> Self {
        NoiseSource::Sampled(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn normal(&mut self, rows: usize, cols: usize) -> Tensor {
        match self {
            NoiseSource::Sampled(rng) => normal_tensor(rng, &[rows, cols]),
            NoiseSource::Zero => Tensor::zeros(&[rows, cols]),
        }
    }
}

/// Plain-value latent state `z = (h, s)` for one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub h: Vec<f64>,
    pub s: Vec<f64>,
    pub dist: DiagGaussian,
}

impl LatentState {
    /// `[h; mean(s_dist)]`, the input to actors and critics.
    pub fn features(&self) -> Vec<f64> {
        let mut f = self.h.clone();
        f.extend_from_slice(self.dist.mean());
        f
    }
}

/// A batch of latent states on a graph; every field has one row per element.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub s: Var,
    pub dist: GaussianVar,
}

impl StateVars {
    pub fn detach(&self, g: &mut Graph) -> StateVars {
        StateVars {
            h: g.detach(self.h),
            s: g.detach(self.s),
            dist: self.dist.detach(g),
        }
    }

    /// `[h; s]`, the joint latent consumed by heads and decoders.
    pub fn joint(&self, g: &mut Graph) -> Result<Var> {
        g.concat_cols(&[self.h, self.s])
    }

    /// `[h; mean]`.
    pub fn features(&self, g: &mut Graph) -> Result<Var> {
        g.concat_cols(&[self.h, self.dist.mean])
    }

    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.h).rows()
    }

    /// Plain value of row `r`.
    pub fn row(&self, g: &Graph, r: usize) -> LatentState {
        LatentState {
            h: g.value(self.h).row_slice(r).to_vec(),
            s: g.value(self.s).row_slice(r).to_vec(),
            dist: self.dist.row(g, r),
        }
    }
}

/// Time-major training windows: row `t * batch + i` is step `t` of window `i`.
///
/// `actions` row `t` is the action taken after observing step `t`; the
/// belief at step `t` consumes the action of step `t - 1` (zero at `t = 0`).
/// `rewards` row `t` is the reward received on arriving at step `t`.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub batch: usize,
    pub length: usize,
    /// One `[length * batch, width]` tensor per modality, in declared order.
    pub obs: Vec<Tensor>,
    pub actions: Tensor,
    pub rewards: Tensor,
}

impl SequenceBatch {
    pub fn rows(&self) -> usize {
        self.batch * self.length
    }

    pub fn validate(&self, config: &RssmConfig) -> Result<()> {
        let n = self.rows();
        let usage = |m: String| Err(Error::Usage(m));
        if self.batch == 0 || self.length == 0 {
            return usage("empty sequence batch".into());
        }
        if self.obs.len() != config.modalities.len() {
            return Err(Error::Config(format!(
                "batch carries {} modalities, model declares {}",
                self.obs.len(),
                config.modalities.len()
            )));
        }
        for (t, m) in self.obs.iter().zip(&config.modalities) {
            if t.rows() != n || t.cols() != m.kind.width() {
                return usage(format!(
                    "modality '{}' has shape {:?}, expected [{n}, {}]",
                    m.id,
                    t.shape(),
                    m.kind.width()
                ));
            }
        }
        if self.actions.rows() != n || self.actions.cols() != config.action_dim {
            return usage(format!(
                "actions have shape {:?}, expected [{n}, {}]",
                self.actions.shape(),
                config.action_dim
            ));
        }
        if self.rewards.rows() != n || self.rewards.cols() != 1 {
            return usage(format!(
                "rewards have shape {:?}, expected [{n}, 1]",
                self.rewards.shape()
            ));
        }
        Ok(())
    }
}

/// Posterior and prior chains from [`Rssm::posterior_rollout`].
#[derive(Clone, Debug)]
pub struct Rollout {
    pub batch: usize,
    pub length: usize,
    pub posts: Vec<StateVars>,
    pub priors: Vec<GaussianVar>,
    /// Per-modality embeddings, `[length * batch, width]`.
    pub embeds: Vec<Var>,
}

impl Rollout {
    /// Posterior `h` and `s` stacked time-major, `[length * batch, ·]`.
    pub fn stacked(&self, g: &mut Graph) -> Result<(Var, Var)> {
        let hs: Vec<Var> = self.posts.iter().map(|s| s.h).collect();
        let ss: Vec<Var> = self.posts.iter().map(|s| s.s).collect();
        Ok((g.concat_rows(&hs)?, g.concat_rows(&ss)?))
    }

    /// Stacked posterior and prior distributions.
    pub fn stacked_dists(&self, g: &mut Graph) -> Result<(GaussianVar, GaussianVar)> {
        let stack = |g: &mut Graph, f: &dyn Fn(usize) -> Var| -> Result<Var> {
            let parts: Vec<Var> = (0..self.length).map(f).collect();
            g.concat_rows(&parts)
        };
        let post = GaussianVar {
            mean: stack(g, &|t| self.posts[t].dist.mean)?,
            std: stack(g, &|t| self.posts[t].dist.std)?,
        };
        let prior = GaussianVar {
            mean: stack(g, &|t| self.priors[t].mean)?,
            std: stack(g, &|t| self.priors[t].std)?,
        };
        Ok((post, prior))
    }
}

/// States, actions and predicted rewards of an imagined rollout.
/// `states[0]` is the start; `rewards[t]` is predicted at `states[t + 1]`.
#[derive(Clone, Debug)]
pub struct Imagined {
    pub states: Vec<StateVars>,
    pub actions: Vec<Var>,
    pub rewards: Vec<Var>,
}

/// The recurrent state space model and all heads trained with it.
#[derive(Clone, Debug)]
pub struct Rssm {
    pub config: RssmConfig,
    pub params: ParamStore,
    encoders: Vec<Encoder>,
    embed_widths: Vec<usize>,
    decoders: Vec<Option<Decoder>>,
    score_heads: Vec<Option<ScoreHead>>,
    det_net: Mlp,
    gru: GruParams,
    prior_net: Mlp,
    post_net: Mlp,
    reward_net: Mlp,
    inverse_net: Option<Mlp>,
}

fn with_gaussian_heads(spec: &MlpSpec, dim: usize) -> MlpSpec {
    let mut s = spec.clone();
    s.heads = vec![("mean".into(), dim), ("std".into(), dim)];
    s
}

fn with_mean_head(spec: &MlpSpec, dim: usize) -> MlpSpec {
    let mut s = spec.clone();
    s.heads = vec![("mean".into(), dim)];
    s
}

impl Rssm {
    pub fn new(config: RssmConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let latent = config.feature_width();
        let mut encoders = Vec::new();
        let mut embed_widths = Vec::new();
        let mut decoders = Vec::new();
        let mut score_heads = Vec::new();
        for m in &config.modalities {
            let (enc, width) = match (&m.encoder, m.kind) {
                (EncoderSpec::Conv(ch), ModalityKind::Image(shape)) => {
                    let e = ConvEncoder::new(&mut store, &format!("enc.{}", m.id), shape, ch, rng)?;
                    let w = e.out_width();
                    (Encoder::Conv(e), w)
                }
                (EncoderSpec::Mlp(spec), kind) => {
                    let mut spec = spec.clone();
                    spec.heads.clear();
                    let e = Mlp::new(
                        &mut store,
                        &format!("enc.{}", m.id),
                        kind.width(),
                        &spec,
                        rng,
                    )?;
                    let w = e.out_width();
                    (Encoder::Mlp(e), w)
                }
                (EncoderSpec::Conv(_), ModalityKind::Vector(_)) => {
                    return Err(Error::Config(format!(
                        "modality '{}': conv encoder on a vector",
                        m.id
                    )))
                }
            };
            encoders.push(enc);
            embed_widths.push(width);
            let dec = match (&m.decoder, m.kind) {
                (None, _) => None,
                (Some(DecoderSpec::Conv(ch)), ModalityKind::Image(shape)) => Some(Decoder::Conv(
                    ConvDecoder::new(&mut store, &format!("dec.{}", m.id), latent, shape, ch, rng)?,
                )),
                (Some(DecoderSpec::Mlp(spec)), kind) => Some(Decoder::Mlp(Mlp::new(
                    &mut store,
                    &format!("dec.{}", m.id),
                    latent,
                    &with_mean_head(spec, kind.width()),
                    rng,
                )?)),
                (Some(DecoderSpec::Conv(_)), ModalityKind::Vector(_)) => {
                    return Err(Error::Config(format!(
                        "modality '{}': conv decoder on a vector",
                        m.id
                    )))
                }
            };
            decoders.push(dec);
            let head = if m.loss.is_contrastive() {
                Some(ScoreHead::new(
                    &mut store,
                    &format!("score.{}", m.id),
                    width,
                    latent,
                    config.score_dim,
                    &config.score_hidden,
                    rng,
                )?)
            } else {
                None
            };
            score_heads.push(head);
        }
        let det_net = Mlp::new(
            &mut store,
            "det",
            config.stoch + config.action_dim,
            &config.det_net,
            rng,
        )?;
        let gru = GruParams::new(&mut store, "gru", det_net.out_width(), config.deter, rng);
        let prior_net = Mlp::new(
            &mut store,
            "prior",
            config.deter,
            &with_gaussian_heads(&config.prior_net, config.stoch),
            rng,
        )?;
        let embed_total: usize = embed_widths.iter().sum();
        let post_net = Mlp::new(
            &mut store,
            "post",
            config.deter + embed_total,
            &with_gaussian_heads(&config.post_net, config.stoch),
            rng,
        )?;
        let reward_net = Mlp::new(
            &mut store,
            "reward",
            latent,
            &with_mean_head(&config.reward_net, 1),
            rng,
        )?;
        let inverse_net = if config.has_predictive() {
            Some(Mlp::new(
                &mut store,
                "inverse",
                2 * latent,
                &with_mean_head(&config.inverse_net, config.action_dim),
                rng,
            )?)
        } else {
            None
        };
        Ok(Rssm {
            config,
            params: store,
            encoders,
            embed_widths,
            decoders,
            score_heads,
            det_net,
            gru,
            prior_net,
            post_net,
            reward_net,
            inverse_net,
        })
    }

    pub fn embed_widths(&self) -> &[usize] {
        &self.embed_widths
    }

    pub fn embed_width(&self) -> usize {
        self.embed_widths.iter().sum()
    }

    pub fn score_head(&self, k: usize) -> Option<&ScoreHead> {
        self.score_heads.get(k).and_then(Option::as_ref)
    }

    pub fn has_inverse_dynamics(&self) -> bool {
        self.inverse_net.is_some()
    }

    // ----- graph-level operations -------------------------------------

    /// `h = 0`, `s = 0`, unit-Gaussian belief, for `batch` rows.
    pub fn initial_state(&self, g: &mut Graph, batch: usize) -> StateVars {
        let h = g.constant(Tensor::zeros(&[batch, self.config.deter]));
        let s = g.constant(Tensor::zeros(&[batch, self.config.stoch]));
        let std = g.constant(Tensor::full(&[batch, self.config.stoch], 1.0));
        StateVars {
            h,
            s,
            dist: GaussianVar { mean: s, std },
        }
    }

    /// Applies modality `k`'s encoder to `[N, width]` rows.
    pub fn encode_modality(&self, g: &mut Graph, k: usize, x: Var) -> Result<Var> {
        let m = &self.config.modalities[k];
        let w = g.value(x).cols();
        if w != m.kind.width() {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("modality '{}' width {w}, expected {}", m.id, m.kind.width()),
            });
        }
        match &self.encoders[k] {
            Encoder::Conv(e) => e.apply(g, &self.params, x),
            Encoder::Mlp(e) => e.apply_one(g, &self.params, x),
        }
    }

    /// Per-modality embeddings and their concatenation in declared order.
    pub fn encode_vars(&self, g: &mut Graph, obs: &[Var]) -> Result<(Var, Vec<Var>)> {
        if obs.len() != self.encoders.len() {
            return Err(Error::Config(format!(
                "{} modality inputs for {} declared modalities",
                obs.len(),
                self.encoders.len()
            )));
        }
        let parts = obs
            .iter()
            .enumerate()
            .map(|(k, &x)| self.encode_modality(g, k, x))
            .collect::<Result<Vec<_>>>()?;
        let joint = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_cols(&parts)?
        };
        Ok((joint, parts))
    }

    /// `h_t = GRU(ψ_det([s_{t-1}; a_{t-1}]), h_{t-1})`.
    pub fn det_step(&self, g: &mut Graph, prev: &StateVars, action: Var) -> Result<Var> {
        let sa = g.concat_cols(&[prev.s, action])?;
        let x = self.det_net.apply_one(g, &self.params, sa)?;
        gru_cell(g, &self.params, &self.gru, x, prev.h)
    }

    pub fn prior(&self, g: &mut Graph, h: Var) -> Result<GaussianVar> {
        let out = self.prior_net.apply(g, &self.params, h)?;
        Ok(GaussianVar::from_raw(g, out[0], out[1]))
    }

    pub fn posterior(&self, g: &mut Graph, h: Var, embed: Var) -> Result<GaussianVar> {
        let x = g.concat_cols(&[h, embed])?;
        let out = self.post_net.apply(g, &self.params, x)?;
        Ok(GaussianVar::from_raw(g, out[0], out[1]))
    }

    /// One filtering step; returns the posterior state and the prior.
    pub fn observe_step(
        &self,
        g: &mut Graph,
        prev: &StateVars,
        action: Var,
        embed: Var,
        noise: &mut NoiseSource,
    ) -> Result<(StateVars, GaussianVar)> {
        let h = self.det_step(g, prev, action)?;
        let prior = self.prior(g, h)?;
        let post = self.posterior(g, h, embed)?;
        let rows = g.value(h).rows();
        let eps = g.constant(noise.normal(rows, self.config.stoch));
        let s = post.rsample(g, eps)?;
        Ok((StateVars { h, s, dist: post }, prior))
    }

    /// One prior (open-loop) step.
    pub fn imagine_step(
        &self,
        g: &mut Graph,
        prev: &StateVars,
        action: Var,
        noise: &mut NoiseSource,
    ) -> Result<StateVars> {
        let h = self.det_step(g, prev, action)?;
        let prior = self.prior(g, h)?;
        let rows = g.value(h).rows();
        let eps = g.constant(noise.normal(rows, self.config.stoch));
        let s = prior.rsample(g, eps)?;
        Ok(StateVars { h, s, dist: prior })
    }

    /// Filters every window of `batch` from `init`.
    pub fn posterior_rollout(
        &self,
        g: &mut Graph,
        batch: &SequenceBatch,
        init: &StateVars,
        noise: &mut NoiseSource,
    ) -> Result<Rollout> {
        batch.validate(&self.config)?;
        if init.rows(g) != batch.batch {
            return Err(Error::Usage(format!(
                "initial state has {} rows for a batch of {}",
                init.rows(g),
                batch.batch
            )));
        }
        let b = batch.batch;
        let obs: Vec<Var> = batch.obs.iter().map(|t| g.constant(t.clone())).collect();
        let (joint, embeds) = self.encode_vars(g, &obs)?;
        let actions = g.constant(batch.actions.clone());
        let zero_action = g.constant(Tensor::zeros(&[b, self.config.action_dim]));
        let mut posts = Vec::with_capacity(batch.length);
        let mut priors = Vec::with_capacity(batch.length);
        let mut state = *init;
        for t in 0..batch.length {
            let action = if t == 0 {
                zero_action
            } else {
                g.slice_rows(actions, (t - 1) * b, t * b)?
            };
            let embed = g.slice_rows(joint, t * b, (t + 1) * b)?;
            let (post, prior) = self.observe_step(g, &state, action, embed, noise)?;
            posts.push(post);
            priors.push(prior);
            state = post;
        }
        Ok(Rollout {
            batch: b,
            length: batch.length,
            posts,
            priors,
            embeds,
        })
    }

    /// Rolls the prior forward `horizon` steps under `policy`, which maps
    /// features `[h; mean]` to actions. Never touches observations.
    pub fn imagine(
        &self,
        g: &mut Graph,
        start: &StateVars,
        horizon: usize,
        policy: &mut dyn FnMut(&mut Graph, Var) -> Result<Var>,
        noise: &mut NoiseSource,
    ) -> Result<Imagined> {
        if horizon == 0 {
            return Err(Error::Usage(
                "imagination horizon must be at least 1".into(),
            ));
        }
        let mut states = vec![*start];
        let mut actions = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let cur = *states.last().expect("nonempty");
            let feats = cur.features(g)?;
            let a = policy(g, feats)?;
            let next = self.imagine_step(g, &cur, a, noise)?;
            rewards.push(self.predict_reward(g, next.h, next.s)?);
            actions.push(a);
            states.push(next);
        }
        Ok(Imagined {
            states,
            actions,
            rewards,
        })
    }

    /// Reward mean from `[h; s]`, `[N, 1]`; the std is fixed at 1.
    pub fn predict_reward(&self, g: &mut Graph, h: Var, s: Var) -> Result<Var> {
        let z = g.concat_cols(&[h, s])?;
        self.reward_net.apply_one(g, &self.params, z)
    }

    /// Reconstruction mean of modality `k` from `[h; s]`, `[N, width]`.
    pub fn decode(&self, g: &mut Graph, k: usize, h: Var, s: Var) -> Result<Var> {
        let dec = self
            .decoders
            .get(k)
            .and_then(Option::as_ref)
            .ok_or_else(|| {
                let id = self.config.modalities.get(k).map_or("?", |m| m.id.as_str());
                Error::Config(format!("modality '{id}' has no decoder"))
            })?;
        let z = g.concat_cols(&[h, s])?;
        match dec {
            Decoder::Conv(d) => d.apply(g, &self.params, z),
            Decoder::Mlp(d) => d.apply_one(g, &self.params, z),
        }
    }

    /// Inverse dynamics prediction `â` from consecutive features.
    pub fn predict_action(&self, g: &mut Graph, f_t: Var, f_next: Var) -> Result<Var> {
        let net = self
            .inverse_net
            .as_ref()
            .ok_or_else(|| Error::Config("model has no inverse dynamics predictor".into()))?;
        let x = g.concat_cols(&[f_t, f_next])?;
        net.apply_one(g, &self.params, x)
    }

    // ----- plain-value operations -------------------------------------

    pub fn initial_latent(&self) -> LatentState {
        LatentState {
            h: vec![0.0; self.config.deter],
            s: vec![0.0; self.config.stoch],
            dist: DiagGaussian::standard(self.config.stoch),
        }
    }

    /// Puts plain states on a graph as constants, one row each.
    pub fn state_vars(&self, g: &mut Graph, states: &[LatentState]) -> StateVars {
        let rows = |f: &dyn Fn(&LatentState) -> Vec<f64>| {
            Tensor::from_rows(&states.iter().map(f).collect::<Vec<_>>())
        };
        let h = g.constant(rows(&|s| s.h.clone()));
        let s = g.constant(rows(&|s| s.s.clone()));
        let mean = g.constant(rows(&|s| s.dist.mean().to_vec()));
        let std = g.constant(rows(&|s| s.dist.std().to_vec()));
        StateVars {
            h,
            s,
            dist: GaussianVar { mean, std },
        }
    }

    /// Observation rows `[1, width]` per modality in declared order.
    pub fn bundle_rows(&self, bundle: &ObservationBundle) -> Result<Vec<Tensor>> {
        for id in bundle.items.keys() {
            if self.config.modality_index(id).is_none() {
                return Err(Error::Config(format!(
                    "undeclared modality '{id}' in bundle"
                )));
            }
        }
        self.config
            .modalities
            .iter()
            .map(|m| {
                let obs = bundle
                    .get(&m.id)
                    .ok_or_else(|| Error::Config(format!("missing modality '{}'", m.id)))?;
                match (obs, m.kind) {
                    (Observation::Image(img), ModalityKind::Image(shape))
                        if img.size == shape.size && img.channels == shape.channels => {}
                    (Observation::Vector(v), ModalityKind::Vector(d)) if v.len() == d => {}
                    _ => {
                        return Err(Error::Shape {
                            op: "encode",
                            detail: format!(
                                "modality '{}' payload does not match {:?}",
                                m.id, m.kind
                            ),
                        })
                    }
                }
                Ok(Tensor::row(&obs.to_row()))
            })
            .collect()
    }

    /// Joint embedding of one bundle.
    pub fn encode(&self, bundle: &ObservationBundle) -> Result<Vec<f64>> {
        let rows = self.bundle_rows(bundle)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = rows.into_iter().map(|r| g.constant(r)).collect();
        let (joint, _) = self.encode_vars(&mut g, &vars)?;
        Ok(g.value(joint).data().to_vec())
    }

    /// Filters one step for a batch of environments.
    pub fn observe(
        &self,
        prev: &[LatentState],
        actions: &[Vec<f64>],
        bundles: &[ObservationBundle],
        noise: &mut NoiseSource,
    ) -> Result<Vec<LatentState>> {
        if prev.len() != actions.len() || prev.len() != bundles.len() || prev.is_empty() {
            return Err(Error::Usage(
                "observe needs equally many states, actions and bundles".into(),
            ));
        }
        if actions.iter().any(|a| a.len() != self.config.action_dim) {
            return Err(Error::Shape {
                op: "observe",
                detail: format!("action width differs from {}", self.config.action_dim),
            });
        }
        let per_bundle = bundles
            .iter()
            .map(|b| self.bundle_rows(b))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let obs: Vec<Var> = (0..self.config.modalities.len())
            .map(|k| {
                let rows: Vec<Vec<f64>> = per_bundle.iter().map(|r| r[k].data().to_vec()).collect();
                g.constant(Tensor::from_rows(&rows))
            })
            .collect();
        let (joint, _) = self.encode_vars(&mut g, &obs)?;
        let state = self.state_vars(&mut g, prev);
        let a = g.constant(Tensor::from_rows(actions));
        let (post, _) = self.observe_step(&mut g, &state, a, joint, noise)?;
        Ok((0..prev.len()).map(|r| post.row(&g, r)).collect())
    }

    /// `h_t` for a single state and action.
    pub fn det_step_value(&self, prev: &LatentState, action: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let state = self.state_vars(&mut g, std::slice::from_ref(prev));
        let a = g.constant(Tensor::row(action));
        let h = self.det_step(&mut g, &state, a)?;
        Ok(g.value(h).data().to_vec())
    }

    pub fn prior_value(&self, h: &[f64]) -> Result<DiagGaussian> {
        let mut g = Graph::new();
        let hv = g.constant(Tensor::row(h));
        Ok(self.prior(&mut g, hv)?.row(&g, 0))
    }

    pub fn posterior_value(&self, h: &[f64], embed: &[f64]) -> Result<DiagGaussian> {
        let mut g = Graph::new();
        let hv = g.constant(Tensor::row(h));
        let ev = g.constant(Tensor::row(embed));
        Ok(self.posterior(&mut g, hv, ev)?.row(&g, 0))
    }

    /// Unit-std reward distribution at `state`.
    pub fn predict_reward_value(&self, state: &LatentState) -> Result<DiagGaussian> {
        let mut g = Graph::new();
        let sv = self.state_vars(&mut g, std::slice::from_ref(state));
        let r = self.predict_reward(&mut g, sv.h, sv.s)?;
        DiagGaussian::new(g.value(r).data().to_vec(), vec![1.0])
    }

    pub fn decode_value(&self, state: &LatentState, id: &str) -> Result<Vec<f64>> {
        let k = self
            .config
            .modality_index(id)
            .ok_or_else(|| Error::Config(format!("unknown modality '{id}'")))?;
        if self.config.modalities[k].loss != LossKind::Reconstruction {
            return Err(Error::Config(format!(
                "modality '{id}' is contrastive and has no decoder"
            )));
        }
        let mut g = Graph::new();
        let sv = self.state_vars(&mut g, std::slice::from_ref(state));
        let out = self.decode(&mut g, k, sv.h, sv.s)?;
        Ok(g.value(out).data().to_vec())
    }
}
