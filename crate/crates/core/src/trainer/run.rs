use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Mode, TrainConfig};
use super::policy::{ActMode, Agent, LatentPolicy, Policy, RandomPolicy};
use super::replay::{assemble_batch, sample_subsequences, CropMode, EpisodeRecord, ReplayBuffer};
use crate::agents::{imagination_update, sac_update, ImaginationNets, SacBatch, SacNets};
use crate::diffgraph::{Adam, Graph, Tensor};
use crate::evalkit::iqm;
use crate::objectives::model_objective;
use crate::rssm::{LatentState, ModalityKind, NoiseSource, Rssm, SequenceBatch};
use crate::worlds::Environment;
use crate::{Error, Result};

/// Independent random stream `k` of a run seeded with `seed`.
pub fn rng_stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

const STREAM_MODEL: u64 = 1;
const STREAM_AGENT: u64 = 2;
const STREAM_SAMPLE: u64 = 3;
const STREAM_COLLECT: u64 = 4;
const STREAM_UPDATE: u64 = 5;

/// Plays one episode from `seed` until the environment reports done.
pub fn run_episode(
    env: &mut dyn Environment,
    policy: &mut dyn Policy,
    seed: u64,
) -> Result<EpisodeRecord> {
    policy.reset();
    let mut bundle = env.reset(seed);
    let mut bundles = vec![bundle.clone()];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    for _ in 0..env.episode_steps() {
        let a = policy.act(&bundle)?;
        let r = env.step(&a)?;
        actions.push(a);
        rewards.push(r.reward);
        bundles.push(r.bundle.clone());
        bundle = r.bundle;
        if r.done {
            break;
        }
    }
    EpisodeRecord::new(bundles, actions, rewards, seed)
}

/// SAC transitions between consecutive posterior features of one batch:
/// `(f_t, a_t, r_{t+1}, f_{t+1})` for `t < length - 1`.
pub fn transitions(batch: &SequenceBatch, feats: &Tensor, gamma: f64) -> SacBatch {
    let (b, l) = (batch.batch, batch.length);
    let n = (l - 1) * b;
    let f = feats.cols();
    let adim = batch.actions.cols();
    SacBatch {
        features: Tensor::new(vec![n, f], feats.data()[..n * f].to_vec()),
        actions: Tensor::new(vec![n, adim], batch.actions.data()[..n * adim].to_vec()),
        rewards: Tensor::new(vec![n, 1], batch.rewards.data()[b..].to_vec()),
        next_features: Tensor::new(vec![n, f], feats.data()[b * f..].to_vec()),
        discounts: Tensor::full(&[n, 1], gamma),
    }
}

/// Model digests around agent-only updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SeparationLog {
    pub checks: usize,
    pub violations: usize,
}

/// Returns of one evaluation point, in episode order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub returns: Vec<f64>,
}

/// Column-stable metrics table; `None` cells are written empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl MetricsLog {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|c| c.map_or(String::new(), |v| v.to_string()))
                .collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

const AGENT_COLUMNS: [&str; 6] = [
    "critic_loss",
    "actor_loss",
    "alpha",
    "entropy",
    "value_loss",
    "imagined_return",
];

/// Loss term names `model_objective` reports for this model, in order.
pub fn objective_terms(model: &Rssm, config: &TrainConfig) -> Result<Vec<String>> {
    let (b, l) = (2, 2);
    let obs = model
        .config
        .modalities
        .iter()
        .map(|m| Tensor::zeros(&[b * l, m.kind.width()]))
        .collect();
    let batch = SequenceBatch {
        batch: b,
        length: l,
        obs,
        actions: Tensor::zeros(&[b * l, model.config.action_dim]),
        rewards: Tensor::zeros(&[b * l, 1]),
    };
    let mut g = Graph::new();
    let init = model.initial_state(&mut g, b);
    let rollout = model.posterior_rollout(&mut g, &batch, &init, &mut NoiseSource::Zero)?;
    let out = model_objective(
        &mut g,
        model,
        &rollout,
        &batch,
        &config.objective,
        &mut NoiseSource::Zero,
    )?;
    Ok(out.report.terms.keys().cloned().collect())
}

/// Outcome of one representation update.
pub struct ModelStep {
    /// Reported objective terms in header order.
    pub terms: Vec<f64>,
    pub total: f64,
    pub batch: SequenceBatch,
    /// Posterior `[h; mean]`, time-major.
    pub features: Tensor,
    /// Posterior states, time-major; filled for the imagination agent only.
    pub states: Vec<LatentState>,
}

/// Running means over one collection cycle.
#[derive(Default)]
struct Accumulator {
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Accumulator {
            sums: vec![0.0; n],
            counts: vec![0; n],
        }
    }

    fn add(&mut self, i: usize, v: f64) {
        self.sums[i] += v;
        self.counts[i] += 1;
    }

    fn mean(&self, i: usize) -> Option<f64> {
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }
}

/// Everything one training run owns. A single writer mutates the model
/// and agent; evaluation reads them.
pub struct Trainer<E: Environment> {
    pub config: TrainConfig,
    pub env: E,
    pub model: Rssm,
    pub model_opt: Adam,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    /// Environment steps collected so far, counting action repeats.
    pub env_steps: usize,
    pub total_updates: usize,
    pub separation: SeparationLog,
    pub metrics: MetricsLog,
    pub evals: Vec<EvalPoint>,
    terms: Vec<String>,
    sample_rng: ChaCha8Rng,
    collect_rng: ChaCha8Rng,
    update_rng: ChaCha8Rng,
    next_eval: usize,
}

impl<E: Environment> Trainer<E> {
    /// Builds the model and the mode's agent from `config`.
    pub fn new(config: TrainConfig, env: E) -> Result<Self> {
        config.validate()?;
        let mut model_rng = rng_stream(config.seed, STREAM_MODEL);
        let model = Rssm::new(config.rssm_config(), &mut model_rng)?;
        let mut agent_rng = rng_stream(config.seed, STREAM_AGENT);
        let feat = model.config.feature_width();
        let adim = env.action_dim();
        let agent = match config.mode {
            Mode::ModelFree => Agent::Sac(SacNets::new(
                config.sac.clone(),
                feat,
                adim,
                &mut agent_rng,
            )?),
            Mode::ModelBased => Agent::Imagination(ImaginationNets::new(
                config.imagination.clone(),
                feat,
                adim,
                &mut agent_rng,
            )?),
        };
        Self::from_parts(config, env, model, agent)
    }

    pub fn from_parts(config: TrainConfig, env: E, model: Rssm, agent: Agent) -> Result<Self> {
        config.validate()?;
        let mode_ok = matches!(
            (config.mode, &agent),
            (Mode::ModelFree, Agent::Sac(_)) | (Mode::ModelBased, Agent::Imagination(_))
        );
        if !mode_ok {
            return Err(Error::Config(format!(
                "agent does not match mode {}",
                config.mode.name()
            )));
        }
        if env.action_dim() != model.config.action_dim {
            return Err(Error::Config(format!(
                "environment acts in {} dimensions, model expects {}",
                env.action_dim(),
                model.config.action_dim
            )));
        }
        let emitted = env.modalities();
        for m in &model.config.modalities {
            let Some((_, kind)) = emitted.iter().find(|(id, _)| *id == m.id) else {
                return Err(Error::Config(format!(
                    "environment does not emit modality '{}'",
                    m.id
                )));
            };
            let fits = match (kind, m.kind) {
                (ModalityKind::Image(src), ModalityKind::Image(dst)) => {
                    src.size >= dst.size && src.channels == dst.channels
                }
                (ModalityKind::Vector(a), ModalityKind::Vector(b)) => *a == b,
                _ => false,
            };
            if !fits {
                return Err(Error::Config(format!(
                    "modality '{}' is emitted as {kind:?} but the model expects {:?}",
                    m.id, m.kind
                )));
            }
        }
        if config.length > env.episode_steps() + 1 {
            return Err(Error::Config(format!(
                "train.length {} exceeds the {} observations of an episode",
                config.length,
                env.episode_steps() + 1
            )));
        }
        let terms = objective_terms(&model, &config)?;
        let mut header: Vec<String> = ["step", "episodes", "updates", "train_return"]
            .map(String::from)
            .to_vec();
        header.extend(terms.iter().cloned());
        header.push("model_total".into());
        header.extend(AGENT_COLUMNS.map(String::from));
        header.extend(["eval_return_mean", "eval_return_iqm"].map(String::from));
        Ok(Trainer {
            model_opt: Adam::new(config.adam(), &model.params),
            buffer: ReplayBuffer::new(config.buffer_capacity),
            env_steps: 0,
            total_updates: 0,
            separation: SeparationLog::default(),
            metrics: MetricsLog {
                header,
                rows: Vec::new(),
            },
            evals: Vec::new(),
            terms,
            sample_rng: rng_stream(config.seed, STREAM_SAMPLE),
            collect_rng: rng_stream(config.seed, STREAM_COLLECT),
            update_rng: rng_stream(config.seed, STREAM_UPDATE),
            next_eval: config.eval_interval,
            config,
            env,
            model,
            agent,
        })
    }

    /// Collects one episode with the random policy, or with the agent
    /// (stochastic actor for SAC, mean plus clipped Gaussian noise for
    /// imagination). Stores it and counts its environment steps.
    pub fn collect(&mut self, random: bool) -> Result<f64> {
        let seed: u64 = self.collect_rng.random();
        let act_rng = ChaCha8Rng::seed_from_u64(self.collect_rng.random());
        let ep = if random {
            let mut p = RandomPolicy {
                action_dim: self.env.action_dim(),
                rng: act_rng,
            };
            run_episode(&mut self.env, &mut p, seed)?
        } else {
            let mode = match self.agent {
                Agent::Sac(_) => ActMode::Stochastic(act_rng),
                Agent::Imagination(_) => ActMode::Noisy(act_rng, self.config.explore_sigma),
            };
            let mut p = LatentPolicy::new(&self.model, &self.agent, mode);
            run_episode(&mut self.env, &mut p, seed)?
        };
        self.env_steps += ep.len() * self.env.action_repeat();
        let ret = ep.total_reward();
        self.buffer.push(ep);
        Ok(ret)
    }

    /// Deterministic returns on the fixed evaluation seeds.
    pub fn evaluate(&mut self) -> Result<Vec<f64>> {
        let mut p = LatentPolicy::new(&self.model, &self.agent, ActMode::Deterministic);
        crate::evalkit::evaluate_policy(
            &mut self.env,
            &mut p,
            self.config.eval_rollouts,
            self.config.eval_seed,
        )
    }

    fn sample_batch(&mut self) -> Result<SequenceBatch> {
        let (b, l) = (self.config.batch, self.config.length);
        let windows = sample_subsequences(&self.buffer, b, l, &mut self.sample_rng)?;
        assemble_batch(
            &self.buffer,
            &windows,
            l,
            &self.model.config,
            &mut self.sample_rng,
            CropMode::Train,
        )
    }

    /// One representation step on a fresh batch. Returns the reported
    /// terms, the batch, and the posterior features `[h; mean]` and states
    /// as plain values (time-major).
    pub fn model_step(&mut self) -> Result<ModelStep> {
        let batch = self.sample_batch()?;
        let mut noise = NoiseSource::seeded(self.update_rng.random());
        let mut g = Graph::new();
        let init = self.model.initial_state(&mut g, batch.batch);
        let rollout = self
            .model
            .posterior_rollout(&mut g, &batch, &init, &mut noise)?;
        let out = model_objective(
            &mut g,
            &self.model,
            &rollout,
            &batch,
            &self.config.objective,
            &mut noise,
        )?;
        let feats: Vec<Tensor> = rollout
            .posts
            .iter()
            .map(|s| {
                let f = s.features(&mut g)?;
                Ok(g.value(f).clone())
            })
            .collect::<Result<_>>()?;
        let states = match self.agent {
            Agent::Imagination(_) => rollout
                .posts
                .iter()
                .flat_map(|s| (0..batch.batch).map(|r| s.row(&g, r)).collect::<Vec<_>>())
                .collect(),
            Agent::Sac(_) => Vec::new(),
        };
        let grads = g.backward(out.loss)?.for_store(&g, &self.model.params);
        // a diverged step is rejected before it can reach the parameters
        if !out.report.total.is_finite() {
            return Err(Error::NonFinite("model objective".into()));
        }
        if grads
            .iter()
            .flatten()
            .any(|t| t.data().iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite("model gradient".into()));
        }
        self.model_opt.step(&mut self.model.params, grads);
        let terms = self
            .terms
            .iter()
            .map(|t| out.report.term(t).unwrap_or(f64::NAN))
            .collect();
        Ok(ModelStep {
            terms,
            total: out.report.total,
            batch,
            features: Tensor::concat_rows(&feats),
            states,
        })
    }

    /// One agent-only update; the model must not change.
    fn agent_step(
        &mut self,
        batch: &SequenceBatch,
        feats: &Tensor,
        starts: &[LatentState],
        acc: &mut Accumulator,
        base: usize,
    ) -> Result<()> {
        let before = self
            .config
            .check_separation
            .then(|| self.model.params.digest());
        match &mut self.agent {
            Agent::Sac(nets) => {
                if batch.length >= 2 {
                    let sb = transitions(batch, feats, nets.config.gamma);
                    let s = sac_update(nets, &sb, &mut self.update_rng)?;
                    acc.add(base, s.critic_loss);
                    acc.add(base + 1, s.actor_loss);
                    acc.add(base + 2, s.alpha);
                    acc.add(base + 3, s.entropy);
                }
            }
            Agent::Imagination(nets) => {
                let s = imagination_update(nets, &self.model, starts, &mut self.update_rng)?;
                acc.add(base + 1, s.actor_loss);
                acc.add(base + 4, s.value_loss);
                acc.add(base + 5, s.mean_return);
            }
        }
        if let Some(b) = before {
            self.separation.checks += 1;
            if self.model.params.digest() != b {
                self.separation.violations += 1;
            }
        }
        Ok(())
    }

    /// `n` alternating model and agent updates.
    fn update_cycle(&mut self, n: usize) -> Result<Accumulator> {
        let k = self.terms.len();
        let mut acc = Accumulator::new(k + 1 + AGENT_COLUMNS.len());
        for _ in 0..n {
            let step = self.model_step()?;
            for (i, v) in step.terms.iter().enumerate() {
                acc.add(i, *v);
            }
            acc.add(k, step.total);
            self.agent_step(&step.batch, &step.features, &step.states, &mut acc, k + 1)?;
            self.total_updates += 1;
        }
        Ok(acc)
    }

    fn push_row(
        &mut self,
        train_return: f64,
        acc: &Accumulator,
        eval: Option<&[f64]>,
    ) -> Result<()> {
        let mut row = vec![
            Some(self.env_steps as f64),
            Some(self.buffer.len() as f64),
            Some(self.total_updates as f64),
            Some(train_return),
        ];
        row.extend((0..acc.sums.len()).map(|i| acc.mean(i)));
        match eval {
            Some(r) => {
                row.push(Some(r.iter().sum::<f64>() / r.len() as f64));
                row.push(Some(iqm(r)?));
            }
            None => row.extend([None, None]),
        }
        self.metrics.rows.push(row);
        Ok(())
    }

    fn maybe_evaluate(&mut self, force: bool) -> Result<Option<Vec<f64>>> {
        let due = self.env_steps >= self.next_eval;
        let stale = self.evals.last().is_none_or(|e| e.step != self.env_steps);
        if !(due || (force && stale)) {
            return Ok(None);
        }
        while self.next_eval <= self.env_steps {
            self.next_eval += self.config.eval_interval;
        }
        let returns = self.evaluate()?;
        self.evals.push(EvalPoint {
            step: self.env_steps,
            returns: returns.clone(),
        });
        Ok(Some(returns))
    }

    /// Runs the configured protocol until the step budget is spent: random
    /// seed episodes, then cycles of updates followed by one collected
    /// episode. Evaluates at every interval and once at the end.
    pub fn run(&mut self) -> Result<()> {
        let width = self.terms.len() + 1 + AGENT_COLUMNS.len();
        let updates = self.config.updates();
        while self.env_steps < self.config.total_env_steps {
            let seeding = self.buffer.len() < self.config.seed_episodes;
            let acc = if seeding || updates == 0 {
                Accumulator::new(width)
            } else {
                self.update_cycle(updates)?
            };
            let ret = self.collect(seeding || updates == 0)?;
            let last = self.env_steps >= self.config.total_env_steps;
            let eval = self.maybe_evaluate(last)?;
            self.push_row(ret, &acc, eval.as_deref())?;
        }
        Ok(())
    }

    /// Writes `metrics.csv`, `eval.csv`, `run.json` and the checkpoint
    /// pair under `dir`.
    pub fn write_outputs(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics.to_csv())?;
        std::fs::write(dir.join("eval.csv"), self.eval_csv())?;
        let meta = self.run_metadata();
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("run.json"), text + "\n")?;
        std::fs::write(dir.join("config.txt"), self.config.to_text())?;
        super::checkpoint::save_checkpoint(
            &dir.join("checkpoint"),
            &self.model,
            &self.model_opt,
            &self.agent,
            meta,
        )
    }

    /// One row per evaluation episode: `step,episode,return`.
    pub fn eval_csv(&self) -> String {
        let mut s = String::from("step,episode,return\n");
        for e in &self.evals {
            for (k, r) in e.returns.iter().enumerate() {
                let _ = writeln!(s, "{},{k},{r}", e.step);
            }
        }
        s
    }

    pub fn run_metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "variant": self.config.world.variant.name(),
            "objective": self.config.objective_label(),
            "mode": self.config.mode.name(),
            "seed": self.config.seed,
            "env_steps": self.env_steps,
            "updates": self.total_updates,
            "separation_checks": self.separation.checks,
            "separation_violations": self.separation.violations,
        })
    }
}

/// Runs the model-free protocol; `trainer` must be configured for it.
pub fn train_model_free<E: Environment>(trainer: &mut Trainer<E>) -> Result<()> {
    if trainer.config.mode != Mode::ModelFree {
        return Err(Error::Config(
            "train_model_free needs run.mode = model_free".into(),
        ));
    }
    trainer.run()
}

/// Runs the model-based protocol; `trainer` must be configured for it.
pub fn train_model_based<E: Environment>(trainer: &mut Trainer<E>) -> Result<()> {
    if trainer.config.mode != Mode::ModelBased {
        return Err(Error::Config(
            "train_model_based needs run.mode = model_based".into(),
        ));
    }
    trainer.run()
}
