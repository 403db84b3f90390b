use rand::Rng;

use crate::diffgraph::{Graph, Mlp, MlpSpec, ParamStore, Tensor, Var};
use crate::dists::{normal_tensor, GaussianVar};
use crate::Result;

/// `log |d tanh(u)/du| = 2(log 2 − u − softplus(−2u))`, per element.
/// Stable for large `|u|`, where `1 − tanh²(u)` underflows.
pub fn tanh_log_det(g: &mut Graph, u: Var) -> Var {
    let neg2u = g.scale(u, -2.0);
    let sp = g.softplus(neg2u);
    let s = g.add(u, sp).expect("same shape");
    let t = g.neg(s);
    let t = g.offset(t, std::f64::consts::LN_2);
    g.scale(t, 2.0)
}

/// Gaussian policy squashed by `tanh` into `[-1, 1]^d`.
#[derive(Clone, Debug)]
pub struct TanhGaussianActor {
    pub net: Mlp,
    pub action_dim: usize,
}

impl TanhGaussianActor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: &[usize],
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spec = MlpSpec::elu(hidden.to_vec())
            .with_head("mean", action_dim)
            .with_head("std", action_dim);
        Ok(TanhGaussianActor {
            net: Mlp::new(store, name, inputs, &spec, rng)?,
            action_dim,
        })
    }

    /// Pre-squash distribution.
    pub fn dist(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<GaussianVar> {
        let out = self.net.apply(g, store, features)?;
        Ok(GaussianVar::from_raw(g, out[0], out[1]))
    }

    /// Reparameterized action and its log density `[N, 1]` under the
    /// squashed distribution.
    pub fn sample(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        noise: Var,
    ) -> Result<(Var, Var)> {
        let d = self.dist(g, store, features)?;
        let u = d.rsample(g, noise)?;
        let lp = d.log_prob(g, u)?;
        let ld = tanh_log_det(g, u);
        let ld = g.sum_cols(ld);
        let logp = g.sub(lp, ld)?;
        Ok((g.tanh(u), logp))
    }

    /// Plain-value actions: the squashed mean when `rng` is `None`,
    /// otherwise a sample.
    pub fn act(
        &self,
        store: &ParamStore,
        features: &Tensor,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let d = self.dist(&mut g, store, f)?;
        let u = match rng {
            None => d.mean,
            Some(r) => {
                let mut r = r;
                let eps = g.constant(normal_tensor(&mut r, &[features.rows(), self.action_dim]));
                d.rsample(&mut g, eps)?
            }
        };
        let a = g.tanh(u);
        Ok(g.value(a).clone())
    }
}
