use serde::{Deserialize, Serialize};

use crate::agents::{ImaginationConfig, SacConfig};
use crate::diffgraph::{AdamConfig, ImageShape, MlpSpec};
use crate::objectives::ObjectiveConfig;
use crate::rssm::{DecoderSpec, EncoderSpec, LossKind, ModalityConfig, RssmConfig};
use crate::worlds::{Variant, WorldConfig, IMAGE_ID, PROPRIO_ID};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ModelFree,
    ModelBased,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "model_free" | "model-free" | "mf" => Some(Mode::ModelFree),
            "model_based" | "model-based" | "mb" => Some(Mode::ModelBased),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::ModelFree => "model_free",
            Mode::ModelBased => "model_based",
        }
    }
}

/// Adam moment pair used for the representation optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentPreset {
    /// `(0.99, 0.9)`.
    Published,
    /// `(0.9, 0.999)`.
    Conventional,
}

/// Every knob of a training run. Parsed from flat `section.key = value`
/// text; see [`TrainConfig::keys`] for the accepted keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Environment-step budget, counting action repeats.
    pub total_env_steps: usize,
    pub eval_interval: usize,
    pub eval_rollouts: usize,
    /// First seed of the fixed evaluation episode set.
    pub eval_seed: u64,
    pub seed_episodes: usize,
    /// Updates per collected episode; `None` picks the mode default.
    pub updates_per_collection: Option<usize>,
    pub batch: usize,
    pub length: usize,
    pub lr: f64,
    pub clip: f64,
    pub moments: MomentPreset,
    pub objective: ObjectiveConfig,
    /// `(modality id, loss)` in model order.
    pub modalities: Vec<(String, LossKind)>,
    pub deter: usize,
    pub stoch: usize,
    pub hidden: usize,
    pub conv_channels: Vec<usize>,
    pub deconv_channels: Vec<usize>,
    pub vector_hidden: Vec<usize>,
    pub score_dim: usize,
    pub score_hidden: Vec<usize>,
    pub explore_sigma: f64,
    /// Hash the model before and after every agent update.
    pub check_separation: bool,
    /// Replay cap in stored steps; `None` keeps everything.
    pub buffer_capacity: Option<usize>,
    pub world: WorldConfig,
    pub sac: SacConfig,
    pub imagination: ImaginationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::ModelFree,
            seed: 0,
            total_env_steps: 50_000,
            eval_interval: 2_000,
            eval_rollouts: 20,
            eval_seed: 1_000_000,
            seed_episodes: 5,
            updates_per_collection: None,
            batch: 32,
            length: 32,
            lr: 3e-4,
            clip: 10.0,
            moments: MomentPreset::Published,
            objective: ObjectiveConfig::default(),
            modalities: vec![
                (IMAGE_ID.into(), LossKind::Reconstruction),
                (PROPRIO_ID.into(), LossKind::Reconstruction),
            ],
            deter: 200,
            stoch: 30,
            hidden: 128,
            conv_channels: vec![16, 32, 32],
            deconv_channels: vec![32, 16],
            vector_hidden: vec![64, 64, 64],
            score_dim: 50,
            score_hidden: vec![256, 256],
            explore_sigma: 0.3,
            check_separation: true,
            buffer_capacity: None,
            world: WorldConfig::default(),
            sac: SacConfig::default(),
            imagination: ImaginationConfig::default(),
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_opt_usize(v: &str) -> Option<Option<usize>> {
    if v == "auto" || v == "none" {
        Some(None)
    } else {
        v.parse().ok().map(Some)
    }
}

fn parse_modalities(v: &str) -> Option<Vec<(String, LossKind)>> {
    v.split(',')
        .map(|item| {
            let (id, loss) = item.trim().split_once(':')?;
            Some((id.trim().to_string(), LossKind::parse(loss.trim())?))
        })
        .collect()
}

impl TrainConfig {
    /// Mode-specific defaults: batch 32x32 model-free, 50x50 model-based.
    pub fn for_mode(mode: Mode) -> Self {
        let mut c = TrainConfig {
            mode,
            ..TrainConfig::default()
        };
        if mode == Mode::ModelBased {
            c.batch = 50;
            c.length = 50;
        }
        c
    }

    /// Accepted keys with a one-line description, for help text.
    pub fn keys() -> &'static [(&'static str, &'static str)] {
        &[
            ("run.mode", "model_free | model_based"),
            ("run.seed", "global seed"),
            ("run.total_env_steps", "environment-step budget"),
            ("run.eval_interval", "environment steps between evaluations"),
            ("run.eval_rollouts", "episodes per evaluation"),
            ("run.eval_seed", "first seed of the evaluation episode set"),
            (
                "run.seed_episodes",
                "random episodes collected before learning",
            ),
            (
                "run.updates_per_collection",
                "updates per collected episode, or auto",
            ),
            (
                "run.check_separation",
                "hash model parameters around agent updates",
            ),
            ("run.buffer_capacity", "replay cap in steps, or none"),
            ("train.batch", "sequences per batch"),
            ("train.length", "steps per sequence"),
            ("train.lr", "representation learning rate"),
            ("train.clip", "representation gradient-norm clip"),
            ("train.moments", "published | conventional Adam moments"),
            ("train.kl_balance", "weight of the prior-side KL term"),
            ("train.free_nats", "KL floor"),
            (
                "train.beta",
                "KL scale of the contrastive predictive objective",
            ),
            (
                "model.modalities",
                "comma list of id:loss (image, proprio; recon | cv | cpc)",
            ),
            ("model.deter", "GRU width"),
            ("model.stoch", "stochastic state width"),
            (
                "model.hidden",
                "width of the dynamics, posterior and reward networks",
            ),
            ("model.conv", "encoder conv channels"),
            ("model.deconv", "decoder transposed-conv channels"),
            ("model.vector_hidden", "vector encoder and decoder widths"),
            ("model.score_dim", "score projection width"),
            ("model.score_hidden", "score state-projection widths"),
            ("world.variant", "clean | distractor | occlusion"),
            ("world.image_size", "model image size"),
            ("world.precrop_size", "rendered image size"),
            ("world.episode_length", "environment steps per episode"),
            ("world.action_repeat", "environment steps per action"),
            ("world.reward_sigma", "reward kernel width"),
            (
                "world.occluder_radius",
                "occluder radius, fraction of the image",
            ),
            ("sac.hidden", "actor and critic widths"),
            ("sac.lr", "actor and critic learning rate"),
            ("sac.alpha_lr", "temperature learning rate"),
            ("sac.init_alpha", "initial temperature"),
            ("sac.gamma", "discount"),
            ("sac.target_decay", "target critic EMA decay"),
            ("imagination.hidden", "actor and value widths"),
            ("imagination.horizon", "imagination horizon"),
            ("imagination.lr", "actor and value learning rate"),
            ("imagination.gamma", "discount"),
            ("imagination.lambda", "return mixing"),
            ("imagination.explore_sigma", "collection noise std"),
        ]
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let bad = || format!("invalid value {v:?} for {key}");
        macro_rules! num {
            ($field:expr) => {
                $field = v.parse().map_err(|_| bad())?
            };
        }
        macro_rules! list {
            ($field:expr) => {
                $field = parse_list(v).ok_or_else(bad)?
            };
        }
        match key {
            "run.mode" => {
                let m = Mode::parse(v).ok_or_else(bad)?;
                if m != self.mode {
                    let keep = self.clone();
                    *self = TrainConfig::for_mode(m);
                    self.seed = keep.seed;
                }
            }
            "run.seed" => num!(self.seed),
            "run.total_env_steps" => num!(self.total_env_steps),
            "run.eval_interval" => num!(self.eval_interval),
            "run.eval_rollouts" => num!(self.eval_rollouts),
            "run.eval_seed" => num!(self.eval_seed),
            "run.seed_episodes" => num!(self.seed_episodes),
            "run.updates_per_collection" => {
                self.updates_per_collection = parse_opt_usize(v).ok_or_else(bad)?
            }
            "run.check_separation" => self.check_separation = parse_bool(v).ok_or_else(bad)?,
            "run.buffer_capacity" => self.buffer_capacity = parse_opt_usize(v).ok_or_else(bad)?,
            "train.batch" => num!(self.batch),
            "train.length" => num!(self.length),
            "train.lr" => num!(self.lr),
            "train.clip" => num!(self.clip),
            "train.moments" => {
                self.moments = match v {
                    "published" => MomentPreset::Published,
                    "conventional" => MomentPreset::Conventional,
                    _ => return Err(bad()),
                }
            }
            "train.kl_balance" => num!(self.objective.kl_balance),
            "train.free_nats" => num!(self.objective.free_nats),
            "train.beta" => num!(self.objective.beta),
            "model.modalities" => self.modalities = parse_modalities(v).ok_or_else(bad)?,
            "model.deter" => num!(self.deter),
            "model.stoch" => num!(self.stoch),
            "model.hidden" => num!(self.hidden),
            "model.conv" => list!(self.conv_channels),
            "model.deconv" => list!(self.deconv_channels),
            "model.vector_hidden" => list!(self.vector_hidden),
            "model.score_dim" => num!(self.score_dim),
            "model.score_hidden" => list!(self.score_hidden),
            "world.variant" => self.world.variant = Variant::parse(v).ok_or_else(bad)?,
            "world.image_size" => num!(self.world.image_size),
            "world.precrop_size" => num!(self.world.precrop_size),
            "world.episode_length" => num!(self.world.episode_length),
            "world.action_repeat" => num!(self.world.action_repeat),
            "world.reward_sigma" => num!(self.world.reward_sigma),
            "world.occluder_radius" => num!(self.world.occluder_radius),
            "sac.hidden" => list!(self.sac.hidden),
            "sac.lr" => num!(self.sac.lr),
            "sac.alpha_lr" => num!(self.sac.alpha_lr),
            "sac.init_alpha" => num!(self.sac.init_alpha),
            "sac.gamma" => num!(self.sac.gamma),
            "sac.target_decay" => num!(self.sac.target_decay),
            "imagination.hidden" => list!(self.imagination.hidden),
            "imagination.horizon" => num!(self.imagination.horizon),
            "imagination.lr" => num!(self.imagination.lr),
            "imagination.gamma" => num!(self.imagination.gamma),
            "imagination.lambda" => num!(self.imagination.lambda),
            "imagination.explore_sigma" => num!(self.explore_sigma),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses flat `section.key = value` text. `#` starts a comment.
    /// A `run.mode` line resets mode-dependent defaults, so it should come
    /// first. Errors carry the 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            c.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Flat text that [`TrainConfig::parse`] maps back to `self`.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let opt = |v: Option<usize>, none: &str| v.map_or(none.to_string(), |x| x.to_string());
        let mods = self
            .modalities
            .iter()
            .map(|(id, l)| format!("{id}:{}", l.name()))
            .collect::<Vec<_>>()
            .join(",");
        let moments = match self.moments {
            MomentPreset::Published => "published",
            MomentPreset::Conventional => "conventional",
        };
        let lines = [
            ("run.mode", self.mode.name().to_string()),
            ("run.seed", self.seed.to_string()),
            ("run.total_env_steps", self.total_env_steps.to_string()),
            ("run.eval_interval", self.eval_interval.to_string()),
            ("run.eval_rollouts", self.eval_rollouts.to_string()),
            ("run.eval_seed", self.eval_seed.to_string()),
            ("run.seed_episodes", self.seed_episodes.to_string()),
            (
                "run.updates_per_collection",
                opt(self.updates_per_collection, "auto"),
            ),
            ("run.check_separation", self.check_separation.to_string()),
            ("run.buffer_capacity", opt(self.buffer_capacity, "none")),
            ("train.batch", self.batch.to_string()),
            ("train.length", self.length.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.clip", self.clip.to_string()),
            ("train.moments", moments.to_string()),
            ("train.kl_balance", self.objective.kl_balance.to_string()),
            ("train.free_nats", self.objective.free_nats.to_string()),
            ("train.beta", self.objective.beta.to_string()),
            ("model.modalities", mods),
            ("model.deter", self.deter.to_string()),
            ("model.stoch", self.stoch.to_string()),
            ("model.hidden", self.hidden.to_string()),
            ("model.conv", join(&self.conv_channels)),
            ("model.deconv", join(&self.deconv_channels)),
            ("model.vector_hidden", join(&self.vector_hidden)),
            ("model.score_dim", self.score_dim.to_string()),
            ("model.score_hidden", join(&self.score_hidden)),
            ("world.variant", self.world.variant.name().to_string()),
            ("world.image_size", self.world.image_size.to_string()),
            ("world.precrop_size", self.world.precrop_size.to_string()),
            (
                "world.episode_length",
                self.world.episode_length.to_string(),
            ),
            ("world.action_repeat", self.world.action_repeat.to_string()),
            ("world.reward_sigma", self.world.reward_sigma.to_string()),
            (
                "world.occluder_radius",
                self.world.occluder_radius.to_string(),
            ),
            ("sac.hidden", join(&self.sac.hidden)),
            ("sac.lr", self.sac.lr.to_string()),
            ("sac.alpha_lr", self.sac.alpha_lr.to_string()),
            ("sac.init_alpha", self.sac.init_alpha.to_string()),
            ("sac.gamma", self.sac.gamma.to_string()),
            ("sac.target_decay", self.sac.target_decay.to_string()),
            ("imagination.hidden", join(&self.imagination.hidden)),
            ("imagination.horizon", self.imagination.horizon.to_string()),
            ("imagination.lr", self.imagination.lr.to_string()),
            ("imagination.gamma", self.imagination.gamma.to_string()),
            ("imagination.lambda", self.imagination.lambda.to_string()),
            ("imagination.explore_sigma", self.explore_sigma.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Short label such as `image:recon+proprio:cpc`.
    pub fn objective_label(&self) -> String {
        self.modalities
            .iter()
            .map(|(id, l)| {
                let short = match l {
                    LossKind::Reconstruction => "recon",
                    LossKind::ContrastiveVariational => "cv",
                    LossKind::ContrastivePredictive => "cpc",
                };
                format!("{id}:{short}")
            })
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let cfg = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.length == 0 {
            return cfg("train.batch and train.length must be positive".into());
        }
        if self.eval_rollouts == 0 || self.eval_interval == 0 {
            return cfg("run.eval_rollouts and run.eval_interval must be positive".into());
        }
        if self
            .modalities
            .iter()
            .any(|(id, _)| id != IMAGE_ID && id != PROPRIO_ID)
        {
            return cfg(format!(
                "model.modalities may only name '{IMAGE_ID}' and '{PROPRIO_ID}'"
            ));
        }
        if self
            .modalities
            .iter()
            .any(|(_, l)| *l == LossKind::ContrastivePredictive)
            && self.length < 2
        {
            return cfg(
                "train.length must be at least 2 with a contrastive_predictive modality".into(),
            );
        }
        if !(self.lr > 0.0 && self.clip > 0.0) {
            return cfg("train.lr and train.clip must be positive".into());
        }
        if self.explore_sigma < 0.0 {
            return cfg("imagination.explore_sigma must be nonnegative".into());
        }
        self.rssm_config().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        let (beta1, beta2) = match self.moments {
            MomentPreset::Published => (0.99, 0.9),
            MomentPreset::Conventional => (0.9, 0.999),
        };
        AdamConfig {
            lr: self.lr,
            beta1,
            beta2,
            eps: 1e-8,
            clip: Some(self.clip),
        }
    }

    /// Updates per collected episode: half the agent steps of an episode
    /// (model-free) or 100 (model-based), unless overridden.
    pub fn updates(&self) -> usize {
        self.updates_per_collection.unwrap_or(match self.mode {
            Mode::ModelFree => self.world.agent_steps() / 2,
            Mode::ModelBased => 100,
        })
    }

    pub fn rssm_config(&self) -> RssmConfig {
        let shape = ImageShape {
            size: self.world.image_size,
            channels: self.world.channels,
        };
        let modalities = self
            .modalities
            .iter()
            .map(|(id, loss)| {
                let mut m = if id == IMAGE_ID {
                    ModalityConfig::image(id, shape, *loss)
                } else {
                    ModalityConfig::vector(id, 6, *loss)
                };
                if id == IMAGE_ID {
                    m.encoder = EncoderSpec::Conv(self.conv_channels.clone());
                    if m.decoder.is_some() {
                        m.decoder = Some(DecoderSpec::Conv(self.deconv_channels.clone()));
                    }
                } else {
                    m.encoder = EncoderSpec::Mlp(MlpSpec::elu(self.vector_hidden.clone()));
                    if m.decoder.is_some() {
                        m.decoder =
                            Some(DecoderSpec::Mlp(MlpSpec::elu(self.vector_hidden.clone())));
                    }
                }
                m
            })
            .collect();
        let mut c = RssmConfig::new(modalities, 2).with_hidden(self.hidden);
        c.deter = self.deter;
        c.stoch = self.stoch;
        c.score_dim = self.score_dim;
        c.score_hidden = self.score_hidden.clone();
        c
    }
}
