//! Diagonal Gaussian utilities, as plain values and as graph expressions.

use std::f64::consts::PI;

use crate::diffgraph::{softplus, Graph, Tensor, Var};
use crate::{Error, Result};

/// Lower bound added to every learned standard deviation.
pub const MIN_STD: f64 = 0.1;

/// `0.5 * ln(2π)`.
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

fn dim_check(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            detail: format!("dimension {a} vs {b}"),
        });
    }
    Ok(())
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        dim_check("DiagGaussian::new", mean.len(), std.len())?;
        if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Domain(format!(
                "standard deviation must be positive, got {s}"
            )));
        }
        Ok(DiagGaussian { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + std * noise`.
    pub fn rsample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        dim_check("rsample", self.dim(), noise.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.std)
            .zip(noise)
            .map(|((m, s), e)| m + s * e)
            .collect())
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        dim_check("log_prob", self.dim(), x.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.std)
            .zip(x)
            .map(|((m, s), v)| {
                let z = (v - m) / s;
                -0.5 * z * z - s.ln() - HALF_LOG_2PI
            })
            .sum())
    }
}

/// `KL(q || p)` summed over dimensions.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    dim_check("kl_diag", q.dim(), p.dim())?;
    Ok((0..q.dim())
        .map(|i| {
            let (mq, sq, mp, sp) = (q.mean[i], q.std[i], p.mean[i], p.std[i]);
            (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// `softplus(raw) + MIN_STD`.
pub fn std_from_raw(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&r| softplus(r) + MIN_STD).collect()
}

/// A batch of diagonal Gaussians on a graph; `mean` and `std` are `[rows, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVar {
    pub mean: Var,
    pub std: Var,
}

impl GaussianVar {
    /// Builds from a mean head and a raw (pre-softplus) std head.
    pub fn from_raw(g: &mut Graph, mean: Var, raw_std: Var) -> Self {
        let sp = g.softplus(raw_std);
        let std = g.offset(sp, MIN_STD);
        GaussianVar { mean, std }
    }

    pub fn detach(&self, g: &mut Graph) -> Self {
        GaussianVar {
            mean: g.detach(self.mean),
            std: g.detach(self.std),
        }
    }

    /// Row `r` as a plain distribution.
    pub fn row(&self, g: &Graph, r: usize) -> DiagGaussian {
        DiagGaussian {
            mean: g.value(self.mean).row_slice(r).to_vec(),
            std: g.value(self.std).row_slice(r).to_vec(),
        }
    }

    pub fn rsample(&self, g: &mut Graph, noise: Var) -> Result<Var> {
        let scaled = g.mul(self.std, noise)?;
        g.add(self.mean, scaled)
    }

    /// Per-row log density, `[rows, 1]`.
    pub fn log_prob(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let diff = g.sub(x, self.mean)?;
        let inv = g.log(self.std);
        let sq = g.square(diff);
        let var = g.square(self.std);
        let var_inv = {
            let l = g.log(var);
            let n = g.neg(l);
            g.exp(n)
        };
        let quad = g.mul(sq, var_inv)?;
        let half = g.scale(quad, -0.5);
        let t = g.sub(half, inv)?;
        let t = g.offset(t, -HALF_LOG_2PI);
        Ok(g.sum_cols(t))
    }

    /// Per-row `KL(self || p)`, `[rows, 1]`.
    pub fn kl(&self, g: &mut Graph, p: &GaussianVar) -> Result<Var> {
        let log_sp = g.log(p.std);
        let log_sq = g.log(self.std);
        let log_ratio = g.sub(log_sp, log_sq)?;
        let vq = g.square(self.std);
        let dm = g.sub(self.mean, p.mean)?;
        let dm2 = g.square(dm);
        let num = g.add(vq, dm2)?;
        let vp = g.square(p.std);
        let two_vp = g.scale(vp, 2.0);
        let lv = g.log(two_vp);
        let nlv = g.neg(lv);
        let inv = g.exp(nlv);
        let frac = g.mul(num, inv)?;
        let t = g.add(log_ratio, frac)?;
        let t = g.offset(t, -0.5);
        Ok(g.sum_cols(t))
    }
}

/// Per-row log density of a unit-variance Gaussian centred at `mean`, the
/// likelihood used by decoders and the reward head. `[rows, 1]`.
pub fn unit_log_prob(g: &mut Graph, mean: Var, x: Var) -> Result<Var> {
    let diff = g.sub(x, mean)?;
    let sq = g.square(diff);
    let half = g.scale(sq, -0.5);
    let t = g.offset(half, -HALF_LOG_2PI);
    Ok(g.sum_cols(t))
}

/// Plain-value log density of `x` under a unit-variance Gaussian at `mean`.
pub fn unit_log_prob_value(mean: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(x)
        .map(|(m, v)| -0.5 * (v - m) * (v - m) - HALF_LOG_2PI)
        .sum()
}

/// Standard-normal noise tensor of the given shape.
pub fn normal_tensor(rng: &mut impl rand::Rng, shape: &[usize]) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
}

/// `2π`, exported for quadrature tests.
pub const TWO_PI: f64 = 2.0 * PI;
