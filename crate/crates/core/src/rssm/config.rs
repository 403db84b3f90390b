use serde::{Deserialize, Serialize};

use crate::diffgraph::{ActivationKind, ImageShape, MlpSpec};
use crate::{Error, Result};

/// Per-modality training signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Reconstruction,
    ContrastiveVariational,
    ContrastivePredictive,
}

impl LossKind {
    pub fn is_contrastive(self) -> bool {
        !matches!(self, LossKind::Reconstruction)
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "reconstruction" | "recon" | "r" => Some(LossKind::Reconstruction),
            "contrastive_variational" | "cv" => Some(LossKind::ContrastiveVariational),
            "contrastive_predictive" | "cpc" => Some(LossKind::ContrastivePredictive),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Reconstruction => "reconstruction",
            LossKind::ContrastiveVariational => "contrastive_variational",
            LossKind::ContrastivePredictive => "contrastive_predictive",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    /// Square image at model resolution (after cropping).
    Image(ImageShape),
    Vector(usize),
}

impl ModalityKind {
    /// Flat width of one observation row.
    pub fn width(&self) -> usize {
        match self {
            ModalityKind::Image(s) => s.len(),
            ModalityKind::Vector(d) => *d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSpec {
    /// Stride-2 convolutions with the given output channels.
    Conv(Vec<usize>),
    /// Headless MLP; the last layer width is the embedding width.
    Mlp(MlpSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderSpec {
    /// Transposed-convolution channels, coarsest first; the last stage
    /// emits the image channels.
    Conv(Vec<usize>),
    /// Hidden layers; a linear `mean` head of the observation width is added.
    Mlp(MlpSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub id: String,
    pub kind: ModalityKind,
    pub loss: LossKind,
    pub encoder: EncoderSpec,
    pub decoder: Option<DecoderSpec>,
}

impl ModalityConfig {
    /// Image modality with a three-stage conv encoder, plus a matching
    /// decoder when the loss is reconstruction.
    pub fn image(id: &str, shape: ImageShape, loss: LossKind) -> Self {
        ModalityConfig {
            id: id.to_string(),
            kind: ModalityKind::Image(shape),
            loss,
            encoder: EncoderSpec::Conv(vec![16, 32, 32]),
            decoder: (loss == LossKind::Reconstruction).then(|| DecoderSpec::Conv(vec![32, 16])),
        }
    }

    /// Vector modality with a 3x64 ELU encoder (3x64 decoder if reconstructed).
    pub fn vector(id: &str, dim: usize, loss: LossKind) -> Self {
        ModalityConfig {
            id: id.to_string(),
            kind: ModalityKind::Vector(dim),
            loss,
            encoder: EncoderSpec::Mlp(MlpSpec::elu(vec![64, 64, 64])),
            decoder: (loss == LossKind::Reconstruction)
                .then(|| DecoderSpec::Mlp(MlpSpec::elu(vec![64, 64, 64]))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(format!("modality '{}': {msg}", self.id)));
        if self.id.is_empty() {
            return Err(Error::Config("modality id must be nonempty".into()));
        }
        if self.kind.width() == 0 {
            return cfg("zero observation width".into());
        }
        match &self.encoder {
            EncoderSpec::Conv(ch) => {
                if matches!(self.kind, ModalityKind::Vector(_)) {
                    return cfg("vector modality cannot use a conv encoder".into());
                }
                if ch.is_empty() || ch.contains(&0) {
                    return cfg("conv encoder needs positive channel counts".into());
                }
            }
            EncoderSpec::Mlp(spec) => spec.validate()?,
        }
        match (&self.loss, &self.decoder) {
            (LossKind::Reconstruction, None) => cfg("reconstruction requires a decoder".into()),
            (l, Some(_)) if l.is_contrastive() => cfg(format!(
                "{} loss uses a score head, not a decoder",
                l.name()
            )),
            (_, Some(DecoderSpec::Conv(_))) if matches!(self.kind, ModalityKind::Vector(_)) => {
                cfg("vector modality cannot use a conv decoder".into())
            }
            (_, Some(DecoderSpec::Mlp(spec))) => spec.validate(),
            _ => Ok(()),
        }
    }
}

/// Widths and layer shapes of one model instance.
///
/// Full-scale values: `deter` 200, `stoch` 30, 2x400 ELU heads for the
/// deterministic input, dynamics and posterior networks, 3x400 vector
/// encoders, 2x128 reward head (model-free) or 3x300 (model-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RssmConfig {
    pub modalities: Vec<ModalityConfig>,
    pub action_dim: usize,
    pub deter: usize,
    pub stoch: usize,
    /// Network applied to `[s; a]` before the GRU.
    pub det_net: MlpSpec,
    /// Hidden layers of the prior over `h`; `mean` and `std` heads are added.
    pub prior_net: MlpSpec,
    /// Hidden layers of the posterior over `[h; embedding]`.
    pub post_net: MlpSpec,
    /// Hidden layers of the reward head over `[h; s]`.
    pub reward_net: MlpSpec,
    pub score_dim: usize,
    pub score_hidden: Vec<usize>,
    /// Hidden layers of the inverse dynamics predictor (CPC only).
    pub inverse_net: MlpSpec,
}

impl RssmConfig {
    pub fn new(modalities: Vec<ModalityConfig>, action_dim: usize) -> Self {
        RssmConfig {
            modalities,
            action_dim,
            deter: 200,
            stoch: 30,
            det_net: MlpSpec::elu(vec![128]),
            prior_net: MlpSpec::elu(vec![128, 128]),
            post_net: MlpSpec::elu(vec![128, 128]),
            reward_net: MlpSpec::elu(vec![128, 128]),
            score_dim: 50,
            score_hidden: vec![256, 256],
            inverse_net: MlpSpec::elu(vec![128, 128]),
        }
    }

    /// Uniformly resizes every hidden network to `width`, keeping depths.
    pub fn with_hidden(mut self, width: usize) -> Self {
        for spec in [
            &mut self.det_net,
            &mut self.prior_net,
            &mut self.post_net,
            &mut self.reward_net,
            &mut self.inverse_net,
        ] {
            spec.layers.iter_mut().for_each(|w| *w = width);
        }
        self
    }

    pub fn with_activation(mut self, act: ActivationKind) -> Self {
        for spec in [
            &mut self.det_net,
            &mut self.prior_net,
            &mut self.post_net,
            &mut self.reward_net,
            &mut self.inverse_net,
        ] {
            spec.activation = act;
        }
        self
    }

    pub fn modality_index(&self, id: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.id == id)
    }

    pub fn has_predictive(&self) -> bool {
        self.modalities
            .iter()
            .any(|m| m.loss == LossKind::ContrastivePredictive)
    }

    /// Width of `[h; s]` and of the policy features `[h; mean]`.
    pub fn feature_width(&self) -> usize {
        self.deter + self.stoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if self.deter == 0 || self.stoch == 0 || self.action_dim == 0 {
            return Err(Error::Config(
                "deter, stoch and action_dim must be positive".into(),
            ));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            m.validate()?;
            if self.modalities[..i].iter().any(|o| o.id == m.id) {
                return Err(Error::Config(format!("duplicate modality id '{}'", m.id)));
            }
        }
        let predictive = self.has_predictive();
        let variational = self
            .modalities
            .iter()
            .any(|m| m.loss == LossKind::ContrastiveVariational);
        if predictive && variational {
            return Err(Error::Config(
                "contrastive_predictive and contrastive_variational modalities cannot be mixed in one model".into(),
            ));
        }
        for spec in [
            &self.det_net,
            &self.prior_net,
            &self.post_net,
            &self.reward_net,
            &self.inverse_net,
        ] {
            spec.validate()?;
        }
        if self.score_dim == 0 || self.score_hidden.contains(&0) {
            return Err(Error::Config("score widths must be positive".into()));
        }
        Ok(())
    }
}
