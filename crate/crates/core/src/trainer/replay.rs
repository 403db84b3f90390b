use rand::Rng;
use sha2::{Digest, Sha256};

use crate::diffgraph::Tensor;
use crate::rssm::{
    ImageObs, ModalityKind, Observation, ObservationBundle, RssmConfig, SequenceBatch,
};
use crate::{Error, Result};

/// One stored episode: `T + 1` observations around `T` actions.
/// `rewards[t]` is received on arriving at `bundles[t + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub bundles: Vec<ObservationBundle>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub seed: u64,
}

impl EpisodeRecord {
    pub fn new(
        bundles: Vec<ObservationBundle>,
        actions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let t = actions.len();
        if bundles.len() != t + 1 || rewards.len() != t {
            return Err(Error::Usage(format!(
                "episode with {t} actions needs {} observations and {t} rewards, got {} and {}",
                t + 1,
                bundles.len(),
                rewards.len()
            )));
        }
        Ok(EpisodeRecord {
            bundles,
            actions,
            rewards,
            seed,
        })
    }

    /// Number of actions `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// SHA-256 over every observation, action and reward bit pattern.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for b in &self.bundles {
            for (id, obs) in &b.items {
                h.update(id.as_bytes());
                match obs {
                    Observation::Image(img) => {
                        h.update((img.size as u64).to_le_bytes());
                        h.update(&img.pixels);
                    }
                    Observation::Vector(v) => {
                        v.iter().for_each(|x| h.update(x.to_bits().to_le_bytes()))
                    }
                }
            }
        }
        for a in &self.actions {
            a.iter().for_each(|x| h.update(x.to_bits().to_le_bytes()));
        }
        self.rewards
            .iter()
            .for_each(|x| h.update(x.to_bits().to_le_bytes()));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Start of a training window: observations `start .. start + length`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub episode: usize,
    pub start: usize,
}

/// Append-only episode store. With a step cap, whole episodes are evicted
/// oldest first once the cap is exceeded; the newest episode is always kept.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    episodes: Vec<EpisodeRecord>,
    capacity: Option<usize>,
    steps: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: Option<usize>) -> Self {
        ReplayBuffer {
            episodes: Vec::new(),
            capacity,
            steps: 0,
        }
    }

    pub fn push(&mut self, episode: EpisodeRecord) {
        self.steps += episode.len();
        self.episodes.push(episode);
        if let Some(cap) = self.capacity {
            while self.steps > cap && self.episodes.len() > 1 {
                let old = self.episodes.remove(0);
                self.steps -= old.len();
            }
        }
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Stored actions across all episodes.
    pub fn total_steps(&self) -> usize {
        self.steps
    }

    /// Valid window starts of `length` observations in each episode.
    fn starts_per_episode(&self, length: usize) -> Vec<usize> {
        self.episodes
            .iter()
            .map(|e| (e.bundles.len() + 1).saturating_sub(length))
            .collect()
    }

    pub fn num_windows(&self, length: usize) -> usize {
        self.starts_per_episode(length).iter().sum()
    }

    /// Digest over every stored episode, in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.episodes {
            h.update(e.digest().as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `count` windows of `length` observations, uniform over every valid
/// `(episode, start)` pair, with replacement.
pub fn sample_subsequences(
    buffer: &ReplayBuffer,
    count: usize,
    length: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Window>> {
    if length == 0 {
        return Err(Error::Usage("window length must be positive".into()));
    }
    let per = buffer.starts_per_episode(length);
    let total: usize = per.iter().sum();
    if total == 0 {
        return Err(Error::Usage(format!(
            "no stored episode holds {length} consecutive observations"
        )));
    }
    let mut cumulative = Vec::with_capacity(per.len());
    let mut acc = 0;
    for n in &per {
        acc += n;
        cumulative.push(acc);
    }
    Ok((0..count)
        .map(|_| {
            let u = rng.random_range(0..total);
            let episode = cumulative.partition_point(|&c| c <= u);
            let before = if episode == 0 {
                0
            } else {
                cumulative[episode - 1]
            };
            Window {
                episode,
                start: u - before,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// One random offset per sequence.
    Train,
    /// Center offset.
    Eval,
}

/// Crops every frame of a sequence at one shared offset, returned with
/// the cropped frames as `(top, left)`.
pub fn crop_augment(
    frames: &[&ImageObs],
    crop: usize,
    rng: &mut impl Rng,
    mode: CropMode,
) -> Result<(Vec<ImageObs>, (usize, usize))> {
    let Some(first) = frames.first() else {
        return Ok((Vec::new(), (0, 0)));
    };
    let src = first.size;
    if frames.iter().any(|f| f.size != src) {
        return Err(Error::Usage("frames in one sequence differ in size".into()));
    }
    if crop > src || crop == 0 {
        return Err(Error::Usage(format!(
            "cannot crop {crop}x{crop} from a {src}x{src} image"
        )));
    }
    let slack = src - crop;
    let offset = match mode {
        CropMode::Eval => (slack / 2, slack / 2),
        CropMode::Train => (rng.random_range(0..=slack), rng.random_range(0..=slack)),
    };
    let out = frames
        .iter()
        .map(|f| f.crop(offset.0, offset.1, crop))
        .collect::<Result<_>>()?;
    Ok((out, offset))
}

/// The bundle a model sees: its declared modalities only, with images
/// center-cropped to the model resolution.
pub fn model_view(config: &RssmConfig, bundle: &ObservationBundle) -> Result<ObservationBundle> {
    let mut out = ObservationBundle::new();
    for m in &config.modalities {
        let obs = bundle.get(&m.id).ok_or_else(|| {
            Error::Config(format!("environment does not emit modality '{}'", m.id))
        })?;
        let item = match (obs, m.kind) {
            (Observation::Image(img), ModalityKind::Image(shape)) if img.size != shape.size => {
                let slack = img.size.checked_sub(shape.size).ok_or_else(|| {
                    Error::Usage(format!(
                        "cannot crop {0}x{0} from a {1}x{1} image",
                        shape.size, img.size
                    ))
                })?;
                Observation::Image(img.crop(slack / 2, slack / 2, shape.size)?)
            }
            _ => obs.clone(),
        };
        out.items.insert(m.id.clone(), item);
    }
    Ok(out)
}

fn fetch<'a>(e: &'a EpisodeRecord, t: usize, id: &str) -> Result<&'a Observation> {
    e.bundles[t]
        .get(id)
        .ok_or_else(|| Error::Config(format!("stored episode lacks modality '{id}'")))
}

/// Time-major training batch for `windows`. Images of contrastive
/// modalities get a random per-sequence crop in [`CropMode::Train`];
/// every other image is center-cropped. Actions past the episode end and
/// the reward before the first observation are zero.
pub fn assemble_batch(
    buffer: &ReplayBuffer,
    windows: &[Window],
    length: usize,
    config: &RssmConfig,
    rng: &mut impl Rng,
    mode: CropMode,
) -> Result<SequenceBatch> {
    let b = windows.len();
    if b == 0 || length == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    let eps = buffer.episodes();
    for w in windows {
        let ok = eps
            .get(w.episode)
            .is_some_and(|e| w.start + length <= e.bundles.len());
        if !ok {
            return Err(Error::Usage(format!(
                "window {w:?} of length {length} is out of range"
            )));
        }
    }
    let mut obs = Vec::with_capacity(config.modalities.len());
    for m in &config.modalities {
        let width = m.kind.width();
        let mut data = vec![0.0; length * b * width];
        for (i, w) in windows.iter().enumerate() {
            let e = &eps[w.episode];
            let rows: Vec<Vec<f64>> = match m.kind {
                ModalityKind::Image(shape) => {
                    let frames = (w.start..w.start + length)
                        .map(|t| {
                            fetch(e, t, &m.id)?.as_image().ok_or_else(|| {
                                Error::Config(format!("modality '{}' is not an image", m.id))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let crop_mode = if m.loss.is_contrastive() {
                        mode
                    } else {
                        CropMode::Eval
                    };
                    let (cropped, _) = crop_augment(&frames, shape.size, rng, crop_mode)?;
                    cropped.iter().map(ImageObs::to_unit).collect()
                }
                ModalityKind::Vector(_) => (w.start..w.start + length)
                    .map(|t| Ok(fetch(e, t, &m.id)?.to_row()))
                    .collect::<Result<_>>()?,
            };
            for (t, row) in rows.iter().enumerate() {
                if row.len() != width {
                    return Err(Error::Shape {
                        op: "assemble_batch",
                        detail: format!(
                            "modality '{}' row of width {} for {width}",
                            m.id,
                            row.len()
                        ),
                    });
                }
                let r = t * b + i;
                data[r * width..(r + 1) * width].copy_from_slice(row);
            }
        }
        obs.push(Tensor::new(vec![length * b, width], data));
    }
    let adim = config.action_dim;
    let mut actions = Tensor::zeros(&[length * b, adim]);
    let mut rewards = Tensor::zeros(&[length * b, 1]);
    for (i, w) in windows.iter().enumerate() {
        let e = &eps[w.episode];
        for t in 0..length {
            let j = w.start + t;
            let r = t * b + i;
            if let Some(a) = e.actions.get(j) {
                if a.len() != adim {
                    return Err(Error::Shape {
                        op: "assemble_batch",
                        detail: format!("stored action of width {} for {adim}", a.len()),
                    });
                }
                actions.data_mut()[r * adim..(r + 1) * adim].copy_from_slice(a);
            }
            if j > 0 {
                rewards.data_mut()[r] = e.rewards[j - 1];
            }
        }
    }
    Ok(SequenceBatch {
        batch: b,
        length,
        obs,
        actions,
        rewards,
    })
}
