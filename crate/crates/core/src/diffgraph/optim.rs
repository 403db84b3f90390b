use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip: Option<f64>,
}

impl AdamConfig {
    /// Representation-learning optimizer settings: lr 3e-4, moments
    /// (0.99, 0.9) as published for this setup, eps 1e-8, clip 10.
    pub fn representation() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.99,
            beta2: 0.9,
            eps: 1e-8,
            clip: Some(10.0),
        }
    }

    /// The conventional (0.9, 0.999) moment pair.
    pub fn conventional(lr: f64, clip: Option<f64>) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm and whether scaling happened.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> StepStats {
    let norm = grads
        .iter()
        .flatten()
        .map(Tensor::sq_norm)
        .sum::<f64>()
        .sqrt();
    let clipped = norm > max_norm;
    if clipped {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    StepStats {
        grad_norm: norm,
        clipped,
    }
}

/// Adam with bias correction and optional global-norm clipping.
///
/// Parameters whose gradient is `None` are left untouched and their moments
/// are not advanced.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
    pub(crate) steps: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, mut grads: Vec<Option<Tensor>>) -> StepStats {
        assert_eq!(
            grads.len(),
            store.len(),
            "gradient list does not match store"
        );
        let stats = match self.config.clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => StepStats {
                grad_norm: grads
                    .iter()
                    .flatten()
                    .map(Tensor::sq_norm)
                    .sum::<f64>()
                    .sqrt(),
                clipped: false,
            },
        };
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let p = store.get_mut(super::ParamId(i)).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        stats
    }

    /// Moment tensors and step counters, for checkpointing.
    pub fn state(&self) -> (&[Tensor], &[Tensor], &[u64]) {
        (&self.m, &self.v, &self.steps)
    }

    pub fn restore(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, steps: Vec<u64>) {
        assert_eq!(m.len(), self.m.len());
        self.m = m;
        self.v = v;
        self.steps = steps;
    }
}
