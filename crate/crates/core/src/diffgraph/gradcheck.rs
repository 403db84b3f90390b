use super::{Error, Graph, ParamStore, Result, Tensor, Var};

/// Relative difference with a small absolute floor so components that are
/// zero analytically do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences at `point`, returning the largest componentwise
/// relative error. Detached values are held at their values at `point`,
/// so the oracle differentiates the same stop-gradient surrogate.
///
/// `f` receives a fresh graph and one leaf per entry of `point` and must
/// return a single-element node.
pub fn check_gradients<F>(f: F, point: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Usage(format!("epsilon must be positive, got {eps}")));
    }
    let eval = |pt: &[Tensor], frozen: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_detach_replay(frozen.to_vec());
        let leaves: Vec<Var> = pt.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Usage(format!(
                "gradient check needs a scalar output, got {:?}",
                v.shape()
            )));
        }
        let x = v.data()[0];
        if !x.is_finite() {
            return Err(Error::NonFinite("function value".into()));
        }
        Ok(x)
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    if g.value(out).len() != 1 {
        return Err(Error::Usage("gradient check needs a scalar output".into()));
    }
    let grads = g.backward(out)?;
    let frozen = g.detached_values();

    let mut worst = 0.0f64;
    let mut pt: Vec<Tensor> = point.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .wrt(*leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(point[li].shape()));
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of input {li}")));
        }
        for k in 0..point[li].len() {
            let x0 = point[li].data()[k];
            pt[li].data_mut()[k] = x0 + eps;
            let up = eval(&pt, &frozen)?;
            pt[li].data_mut()[k] = x0 - eps;
            let down = eval(&pt, &frozen)?;
            pt[li].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Like [`check_gradients`], but over the parameters of the store that
/// `select` picks out of `owner`, so `f` may evaluate any structure that
/// owns the store. At most `per_tensor` evenly spaced coordinates of each
/// parameter are probed; unreached parameters must have zero numerical
/// derivative.
pub fn check_param_gradients<T, S, F>(
    owner: &mut T,
    select: S,
    f: F,
    eps: f64,
    per_tensor: usize,
) -> Result<f64>
where
    S: Fn(&mut T) -> &mut ParamStore,
    F: Fn(&mut Graph, &T) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Usage(format!("epsilon must be positive, got {eps}")));
    }
    let eval = |owner: &T, frozen: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_detach_replay(frozen.to_vec());
        let out = f(&mut g, owner)?;
        let x = g.value(out).data()[0];
        if !x.is_finite() {
            return Err(Error::NonFinite("function value".into()));
        }
        Ok(x)
    };
    let mut g = Graph::new();
    let out = f(&mut g, owner)?;
    if g.value(out).len() != 1 {
        return Err(Error::Usage("gradient check needs a scalar output".into()));
    }
    let grads = g.backward(out)?.for_store(&g, select(owner));
    let frozen = g.detached_values();
    let ids: Vec<_> = select(owner).ids().collect();
    let mut worst = 0.0f64;
    for (id, grad) in ids.into_iter().zip(grads) {
        let n = select(owner).get(id).len();
        let step = (n / per_tensor.max(1)).max(1);
        for k in (0..n).step_by(step).take(per_tensor.max(1)) {
            let analytic = grad.as_ref().map_or(0.0, |t| t.data()[k]);
            let x0 = select(owner).get(id).data()[k];
            select(owner).get_mut(id).data_mut()[k] = x0 + eps;
            let up = eval(owner, &frozen);
            select(owner).get_mut(id).data_mut()[k] = x0 - eps;
            let down = eval(owner, &frozen);
            select(owner).get_mut(id).data_mut()[k] = x0;
            let numeric = (up? - down?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}
