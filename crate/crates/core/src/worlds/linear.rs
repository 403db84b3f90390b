use nalgebra::{Cholesky, DMatrix, DVector, Schur, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffgraph::{ActivationKind, MlpSpec, Tensor};
use crate::rssm::{
    DecoderSpec, EncoderSpec, LossKind, ModalityConfig, ModalityKind, Rssm, RssmConfig,
};
use crate::{Error, Result};

/// `x_{t+1} = A x_t + B u_t + w`, `y_k = H_k x + v_k`, with diagonal noise
/// covariances `q` and `r_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// One observation matrix per modality.
    pub h: Vec<DMatrix<f64>>,
    pub q: DVector<f64>,
    pub r: Vec<DVector<f64>>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
}

/// Filtered mean and covariance at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Belief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LinearGaussianSpec {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn obs_dims(&self) -> Vec<usize> {
        self.h.iter().map(|h| h.nrows()).collect()
    }

    /// Observation matrix and noise of all modalities stacked.
    pub fn stacked_observation(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.state_dim();
        let p: usize = self.obs_dims().iter().sum();
        let mut h = DMatrix::zeros(p, n);
        let mut r = DVector::zeros(p);
        let mut row = 0;
        for (hk, rk) in self.h.iter().zip(&self.r) {
            h.view_mut((row, 0), (hk.nrows(), n)).copy_from(hk);
            r.rows_mut(row, rk.len()).copy_from(rk);
            row += hk.nrows();
        }
        (h, r)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let cfg = |m: String| Err(Error::Config(format!("linear world: {m}")));
        if n == 0 || self.a.ncols() != n || self.b.nrows() != n || self.b.ncols() == 0 {
            return cfg("A must be square and B must have the state's row count".into());
        }
        if self.h.is_empty() || self.h.len() != self.r.len() {
            return cfg("need one noise vector per observation matrix".into());
        }
        for (hk, rk) in self.h.iter().zip(&self.r) {
            if hk.ncols() != n || hk.nrows() != rk.len() || hk.nrows() == 0 {
                return cfg("observation matrix shape mismatch".into());
            }
            if rk.iter().any(|&v| !(v >= 0.0)) {
                return cfg("observation noise must be nonnegative".into());
            }
        }
        if self.q.len() != n || self.q.iter().any(|&v| !(v >= 0.0)) {
            return cfg("process noise must have one nonnegative entry per state".into());
        }
        if self.init_mean.len() != n || self.init_cov.shape() != (n, n) {
            return cfg("initial belief shape mismatch".into());
        }
        let radius = Schur::new(self.a.clone())
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if radius > 1.0 + 1e-12 {
            return cfg(format!("spectral radius {radius} exceeds 1"));
        }
        Ok(())
    }

    /// Stationary posterior covariance and Kalman gain from iterating the
    /// Riccati recursion to a fixed point.
    pub fn steady_state(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.validate()?;
        let (h, r) = self.stacked_observation();
        let q = DMatrix::from_diagonal(&self.q);
        let rm = DMatrix::from_diagonal(&r);
        let n = self.state_dim();
        let mut p = DMatrix::identity(n, n);
        let mut k = DMatrix::zeros(n, h.nrows());
        for _ in 0..100_000 {
            let pred = &self.a * &p * self.a.transpose() + &q;
            let s = &h * &pred * h.transpose() + &rm;
            let s_inv = Cholesky::new(s)
                .ok_or_else(|| {
                    Error::Numeric("innovation covariance is not positive definite".into())
                })?
                .inverse();
            k = &pred * h.transpose() * s_inv;
            let next = (DMatrix::identity(n, n) - &k * &h) * &pred;
            let next = (&next + next.transpose()) * 0.5;
            let delta = (&next - &p).abs().max();
            p = next;
            if delta < 1e-15 {
                break;
            }
        }
        Ok((p, k))
    }

    /// Exact filtered beliefs. `obs[t]` stacks all modalities of step `t`;
    /// `actions[t]` is applied before `obs[t]` is emitted, starting from the
    /// initial belief.
    pub fn kalman_posterior(
        &self,
        obs: &[DVector<f64>],
        actions: &[DVector<f64>],
    ) -> Result<Vec<Belief>> {
        self.validate()?;
        if obs.len() != actions.len() {
            return Err(Error::Usage(format!(
                "{} observations but {} actions",
                obs.len(),
                actions.len()
            )));
        }
        let (h, r) = self.stacked_observation();
        let n = self.state_dim();
        if obs.iter().any(|y| y.len() != h.nrows())
            || actions.iter().any(|u| u.len() != self.action_dim())
        {
            return Err(Error::Shape {
                op: "kalman_posterior",
                detail: "observation or action width mismatch".into(),
            });
        }
        let q = DMatrix::from_diagonal(&self.q);
        let rm = DMatrix::from_diagonal(&r);
        let mut mean = self.init_mean.clone();
        let mut cov = self.init_cov.clone();
        let mut out = Vec::with_capacity(obs.len());
        for (y, u) in obs.iter().zip(actions) {
            let m_pred = &self.a * &mean + &self.b * u;
            let p_pred = &self.a * &cov * self.a.transpose() + &q;
            let s = &h * &p_pred * h.transpose() + &rm;
            let chol = Cholesky::new(s).ok_or_else(|| {
                Error::Numeric("innovation covariance is not positive definite".into())
            })?;
            let k = &p_pred * h.transpose() * chol.inverse();
            mean = &m_pred + &k * (y - &h * &m_pred);
            let c = (DMatrix::identity(n, n) - &k * &h) * &p_pred;
            cov = (&c + c.transpose()) * 0.5;
            out.push(Belief {
                mean: mean.clone(),
                cov: cov.clone(),
            });
        }
        Ok(out)
    }

    /// Samples a trajectory; returns per-step stacked observations,
    /// the states that emitted them, and their length equals `actions`.
    pub fn simulate(
        &self,
        actions: &[DVector<f64>],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        self.validate()?;
        let n = self.state_dim();
        let (h, r) = self.stacked_observation();
        let eig = SymmetricEigen::new(self.init_cov.clone());
        let root =
            &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        let mut z = |len: usize| DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x = &self.init_mean + root * z(n);
        let mut ys = Vec::with_capacity(actions.len());
        let mut xs = Vec::with_capacity(actions.len());
        for u in actions {
            x = &self.a * &x + &self.b * u + self.q.map(f64::sqrt).component_mul(&z(n));
            let y = &h * &x + r.map(f64::sqrt).component_mul(&z(h.nrows()));
            xs.push(x.clone());
            ys.push(y);
        }
        Ok((ys, xs))
    }

    /// Modality ids used by [`Self::rssm_instantiation`].
    pub fn modality_ids(&self) -> Vec<String> {
        (0..self.h.len()).map(|k| format!("y{k}")).collect()
    }

    /// Deterministic RSSM whose posterior means equal the steady-state
    /// Kalman filter means when started from the stationary covariance and
    /// run without sampling noise.
    ///
    /// Construction: `ψ_det` passes `[s; a]` through; the GRU update gate is
    /// saturated and the candidate is `tanh(ε [s; a])`, so `h ≈ ε [s; a]`;
    /// encoders pass observations through; the posterior mean is
    /// `(1/ε)(I − KH)[A B] h + K y`. Residual error is `O(ε²)` relative.
    pub fn rssm_instantiation(&self, rng: &mut ChaCha8Rng) -> Result<Rssm> {
        const EPS: f64 = 1e-6;
        let (_, k) = self.steady_state()?;
        let (h, _) = self.stacked_observation();
        let n = self.state_dim();
        let m = self.action_dim();
        let dims = self.obs_dims();
        let p: usize = dims.iter().sum();
        let ident = |w: usize| MlpSpec {
            layers: vec![w],
            activation: ActivationKind::Identity,
            heads: Vec::new(),
        };
        let modalities = self
            .modality_ids()
            .iter()
            .zip(&dims)
            .map(|(id, &d)| ModalityConfig {
                id: id.clone(),
                kind: ModalityKind::Vector(d),
                loss: LossKind::Reconstruction,
                encoder: EncoderSpec::Mlp(ident(d)),
                decoder: Some(DecoderSpec::Mlp(ident(1))),
            })
            .collect();
        let mut cfg = RssmConfig::new(modalities, m);
        cfg.deter = n + m;
        cfg.stoch = n;
        cfg.det_net = ident(n + m);
        cfg.prior_net = ident(1);
        cfg.post_net = ident(n + m + p);
        cfg.reward_net = ident(1);
        let mut model = Rssm::new(cfg, rng)?;
        let store = &mut model.params;
        store.zero_all();
        let mut set = |name: &str, t: Tensor| -> Result<()> {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Shape {
                    op: "rssm_instantiation",
                    detail: format!("{name}: {:?} vs {:?}", store.get(id).shape(), t.shape()),
                });
            }
            *store.get_mut(id) = t;
            Ok(())
        };
        let eye = |d: usize| Tensor::from_fn(&[d, d], |i, j| if i == j { 1.0 } else { 0.0 });
        for (id, &d) in self.modality_ids().iter().zip(&dims) {
            set(&format!("enc.{id}.l0.w"), eye(d))?;
        }
        set("det.l0.w", eye(n + m))?;
        let w = n + m;
        set("gru.b_update", Tensor::full(&[1, w], 40.0))?;
        set(
            "gru.w_cand",
            Tensor::from_fn(&[2 * w, w], |i, j| if i == j { EPS } else { 0.0 }),
        )?;
        set("post.l0.w", eye(n + m + p))?;
        // Row-vector convention: out = x W, so W holds transposed blocks.
        let ikh = DMatrix::identity(n, n) - &k * &h;
        let mut ab = DMatrix::zeros(n, n + m);
        ab.view_mut((0, 0), (n, n)).copy_from(&self.a);
        ab.view_mut((0, n), (n, m)).copy_from(&self.b);
        let dyn_block = (ikh * ab) / EPS;
        set(
            "post.mean.w",
            Tensor::from_fn(&[n + m + p, n], |i, j| {
                if i < n + m {
                    dyn_block[(j, i)]
                } else {
                    k[(j, i - n - m)]
                }
            }),
        )?;
        Ok(model)
    }
}
