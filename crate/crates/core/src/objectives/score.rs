use rand::Rng;

use crate::diffgraph::{
    normalize, Graph, Mlp, MlpSpec, NormedDense, ParamId, ParamStore, Tensor, Var,
};
use crate::Result;

/// Bilinear score `f(o, z) = exp(ρ_o(e)ᵀ ρ_z(z) / λ)` for one contrastive
/// modality; `λ = exp(log_lambda) > 0`.
#[derive(Clone, Debug)]
pub struct ScoreHead {
    pub dim: usize,
    obs_proj: NormedDense,
    state_net: Mlp,
    state_gain: ParamId,
    state_bias: ParamId,
    pub log_lambda: ParamId,
}

impl ScoreHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed_width: usize,
        state_width: usize,
        dim: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let obs_proj = NormedDense::new(store, &format!("{name}.rho_o"), embed_width, dim, rng);
        let spec = MlpSpec::elu(hidden.to_vec()).with_head("proj", dim);
        let state_net = Mlp::new(store, &format!("{name}.rho_z"), state_width, &spec, rng)?;
        let state_gain = store.add(
            format!("{name}.rho_z.ln_gain"),
            Tensor::full(&[1, dim], 1.0),
        );
        let state_bias = store.add(format!("{name}.rho_z.ln_bias"), Tensor::zeros(&[1, dim]));
        let log_lambda = store.add(format!("{name}.log_lambda"), Tensor::scalar(0.0));
        Ok(ScoreHead {
            dim,
            obs_proj,
            state_net,
            state_gain,
            state_bias,
            log_lambda,
        })
    }

    pub fn lambda(&self, store: &ParamStore) -> f64 {
        store.get(self.log_lambda).data()[0].exp()
    }

    /// `ρ_o(e)`, `[N, dim]`.
    pub fn project_obs(&self, g: &mut Graph, store: &ParamStore, embed: Var) -> Result<Var> {
        self.obs_proj.apply(g, store, embed)
    }

    /// `ρ_z(z)` for `z = [h; s]`, `[N, dim]`.
    pub fn project_state(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let p = self.state_net.apply_one(g, store, z)?;
        normalize(g, store, p, self.state_gain, self.state_bias)
    }

    /// Log-score matrix `L[i][j] = log f(o_j, z_i)` from already projected
    /// rows; `[N, N]`.
    pub fn log_scores_projected(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pz: Var,
        po: Var,
    ) -> Result<Var> {
        let pot = g.transpose(po);
        let dots = g.matmul(pz, pot)?;
        let ll = g.param(store, self.log_lambda);
        let neg = g.neg(ll);
        let inv_lambda = g.exp(neg);
        g.mul_scalar(dots, inv_lambda)
    }

    /// Log-score matrix for embeddings `embed` and states `z` with matching
    /// rows; row `i` holds state `i` against every observation.
    pub fn log_scores(&self, g: &mut Graph, store: &ParamStore, embed: Var, z: Var) -> Result<Var> {
        let po = self.project_obs(g, store, embed)?;
        let pz = self.project_state(g, store, z)?;
        self.log_scores_projected(g, store, pz, po)
    }

    /// Per-row `log f(o_i, z_i)`, `[N, 1]`.
    pub fn log_score_pairs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embed: Var,
        z: Var,
    ) -> Result<Var> {
        let po = self.project_obs(g, store, embed)?;
        let pz = self.project_state(g, store, z)?;
        let prod = g.mul(po, pz)?;
        let dots = g.sum_cols(prod);
        let ll = g.param(store, self.log_lambda);
        let neg = g.neg(ll);
        let inv_lambda = g.exp(neg);
        g.mul_scalar(dots, inv_lambda)
    }
}
