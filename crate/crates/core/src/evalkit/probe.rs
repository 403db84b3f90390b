use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffgraph::{Adam, AdamConfig, ConvDecoder, Graph, ImageShape, ParamStore, Tensor};
use crate::rssm::{ImageObs, ModalityKind, NoiseSource, Rssm};
use crate::trainer::{model_view, Agent};
use crate::worlds::{Environment, Reacher, WorldConfig, IMAGE_ID};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Transposed-conv channels of the probe decoder.
    pub channels: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            channels: vec![32, 16],
            steps: 500,
            batch: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Plain-value latents paired with occlusion-free target images.
#[derive(Clone, Debug, Default)]
pub struct ProbeData {
    pub latents: Vec<Vec<f64>>,
    pub targets: Vec<ImageObs>,
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub decoder: ConvDecoder,
    pub params: ParamStore,
    /// Training loss per step.
    pub losses: Vec<f64>,
    /// Mean squared error over the whole dataset after training.
    pub mse: f64,
    /// Mean squared error per pixel (averaged over samples and channels).
    pub pixel_error: Vec<f64>,
    /// Reconstructions of the first few samples, in `[0, 1]` HWC order.
    pub reconstructions: Vec<Vec<f64>>,
}

/// Filters `episodes` episodes of `world` with `model` (posterior means)
/// and records `[h; mean]` next to the center-cropped ground-truth render.
/// Actions come from `agent` deterministically, or uniformly at random.
pub fn collect_probe_data(
    model: &Rssm,
    agent: Option<&Agent>,
    world: &WorldConfig,
    episodes: usize,
    first_seed: u64,
) -> Result<ProbeData> {
    let k = model
        .config
        .modality_index(IMAGE_ID)
        .ok_or_else(|| Error::Config("the probe needs a model with an image modality".into()))?;
    let ModalityKind::Image(shape) = model.config.modalities[k].kind else {
        return Err(Error::Config("modality 'image' is not an image".into()));
    };
    let mut env = Reacher::new(world.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(first_seed);
    let mut data = ProbeData::default();
    let crop = |img: ImageObs| {
        let slack = img.size - shape.size;
        img.crop(slack / 2, slack / 2, shape.size)
    };
    for e in 0..episodes as u64 {
        let mut bundle = env.reset(first_seed + e);
        let mut state = model.initial_latent();
        let mut action = vec![0.0; model.config.action_dim];
        let mut done = false;
        // every observation of the episode, terminal one included
        loop {
            let view = model_view(&model.config, &bundle)?;
            state = model
                .observe(&[state], &[action.clone()], &[view], &mut NoiseSource::Zero)?
                .remove(0);
            let truth = env.ground_truth_image().expect("environment was reset");
            data.latents.push(state.features());
            data.targets.push(crop(truth)?);
            if done {
                break;
            }
            action = match agent {
                Some(a) => a.act(&Tensor::row(&state.features()), None)?.into_data(),
                None => (0..model.config.action_dim)
                    .map(|_| rng.random_range(-1.0..=1.0))
                    .collect(),
            };
            let step = env.step(&action)?;
            bundle = step.bundle;
            done = step.done;
        }
    }
    Ok(data)
}

/// Regresses images from frozen latents with a small transposed-conv
/// decoder. Latents are plain values, so nothing reaches the model that
/// produced them.
pub fn train_probe_decoder(data: &ProbeData, config: &ProbeConfig) -> Result<ProbeResult> {
    let n = data.latents.len();
    if n == 0 || data.targets.len() != n {
        return Err(Error::Usage(format!(
            "probe needs equally many latents and targets, got {n} and {}",
            data.targets.len()
        )));
    }
    if config.batch == 0 {
        return Err(Error::Usage("probe batch must be positive".into()));
    }
    let shape = ImageShape {
        size: data.targets[0].size,
        channels: data.targets[0].channels,
    };
    let width = data.latents[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    let decoder = ConvDecoder::new(
        &mut params,
        "probe",
        width,
        shape,
        &config.channels,
        &mut rng,
    )?;
    let mut opt = Adam::new(AdamConfig::conventional(config.lr, Some(100.0)), &params);
    let targets: Vec<Vec<f64>> = data.targets.iter().map(ImageObs::to_unit).collect();
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch).map(|_| rng.random_range(0..n)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(
            &idx.iter()
                .map(|&i| data.latents[i].clone())
                .collect::<Vec<_>>(),
        ));
        let y = g.constant(Tensor::from_rows(
            &idx.iter().map(|&i| targets[i].clone()).collect::<Vec<_>>(),
        ));
        let pred = decoder.apply(&mut g, &params, x)?;
        let d = g.sub(pred, y)?;
        let sq = g.square(d);
        let loss = g.mean(sq);
        losses.push(g.scalar(loss));
        let grads = g.backward(loss)?.for_store(&g, &params);
        opt.step(&mut params, grads);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&data.latents));
    let pred = decoder.apply(&mut g, &params, x)?;
    let pred = g.value(pred);
    let c = shape.channels;
    let pixels = shape.size * shape.size;
    let mut pixel_error = vec![0.0; pixels];
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        for (j, (p, y)) in pred.row_slice(i).iter().zip(t).enumerate() {
            let e = (p - y) * (p - y);
            pixel_error[j / c] += e / (n * c) as f64;
            total += e;
        }
    }
    Ok(ProbeResult {
        reconstructions: (0..n.min(4)).map(|i| pred.row_slice(i).to_vec()).collect(),
        mse: total / (n * pixels * c) as f64,
        decoder,
        params,
        losses,
        pixel_error,
    })
}
