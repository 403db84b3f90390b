use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffgraph::{Graph, Tensor, Var};
use crate::rssm::{LatentState, ModalityKind, NoiseSource, ObservationBundle, Rssm};
use crate::trainer::model_view;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SaliencyMethod {
    /// One backward pass per latent dimension.
    Exact,
    /// Mean of `(vᵀJ)²` over Rademacher probes `v`; unbiased for the
    /// squared norm.
    Probes { count: usize, seed: u64 },
}

/// Per-pixel Jacobian norms, row-major `size x size`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub size: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.size + x]
    }
}

/// Norm over latent dimensions and channels of `∂[h; mean]/∂pixel` for
/// the posterior after filtering `bundle` from `prev` with `action`.
/// Pixels are in model units (`[0, 1]`).
pub fn saliency_map(
    model: &Rssm,
    prev: &LatentState,
    action: &[f64],
    bundle: &ObservationBundle,
    image_id: &str,
    method: SaliencyMethod,
) -> Result<SaliencyMap> {
    let k = model
        .config
        .modality_index(image_id)
        .ok_or_else(|| Error::Config(format!("model has no modality '{image_id}'")))?;
    let ModalityKind::Image(shape) = model.config.modalities[k].kind else {
        return Err(Error::Config(format!(
            "modality '{image_id}' is not an image"
        )));
    };
    let rows = model.bundle_rows(&model_view(&model.config, bundle)?)?;
    let mut g = Graph::new();
    let inputs: Vec<Var> = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| if i == k { g.leaf(r) } else { g.constant(r) })
        .collect();
    let (joint, _) = model.encode_vars(&mut g, &inputs)?;
    let state = model.state_vars(&mut g, std::slice::from_ref(prev));
    let a = g.constant(Tensor::row(action));
    let (post, _) = model.observe_step(&mut g, &state, a, joint, &mut NoiseSource::Zero)?;
    let feats = post.features(&mut g)?;
    let dim = g.value(feats).cols();

    let mut sq = vec![0.0; shape.len()];
    let mut accumulate = |g: &mut Graph, v: Tensor, weight: f64| -> Result<()> {
        let probe = g.constant(v);
        let proj = g.matmul(feats, probe)?;
        let root = g.sum(proj);
        if let Some(grad) = g.backward(root)?.wrt(inputs[k]) {
            for (s, d) in sq.iter_mut().zip(grad.data()) {
                *s += weight * d * d;
            }
        }
        Ok(())
    };
    match method {
        SaliencyMethod::Exact => {
            for j in 0..dim {
                accumulate(
                    &mut g,
                    Tensor::from_fn(&[dim, 1], |r, _| if r == j { 1.0 } else { 0.0 }),
                    1.0,
                )?;
            }
        }
        SaliencyMethod::Probes { count, seed } => {
            if count == 0 {
                return Err(Error::Usage(
                    "probe estimator needs at least one probe".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..count {
                let signs: Vec<f64> = (0..dim)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                accumulate(&mut g, Tensor::new(vec![dim, 1], signs), 1.0 / count as f64)?;
            }
        }
    }
    let c = shape.channels;
    let values = (0..shape.size * shape.size)
        .map(|p| sq[p * c..(p + 1) * c].iter().sum::<f64>().sqrt())
        .collect();
    Ok(SaliencyMap {
        size: shape.size,
        values,
    })
}
