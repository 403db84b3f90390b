//! Layers built from graph primitives: dense stacks, the GRU cell, and
//! strided conv / transposed-conv stacks for small images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::ConvGeom;
use super::graph::{Activation, Graph, Var};
use super::params::{glorot_uniform, ParamId, ParamStore};
use super::{Error, Result, Tensor};

/// Shape of a fully connected network: hidden layers followed by optional
/// named affine heads read off the last hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<usize>,
    pub activation: ActivationKind,
    pub heads: Vec<(String, usize)>,
}

/// Serializable mirror of [`Activation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Elu,
    Tanh,
    Identity,
}

impl From<ActivationKind> for Activation {
    fn from(k: ActivationKind) -> Self {
        match k {
            ActivationKind::Elu => Activation::Elu,
            ActivationKind::Tanh => Activation::Tanh,
            ActivationKind::Identity => Activation::Identity,
        }
    }
}

impl MlpSpec {
    pub fn elu(layers: Vec<usize>) -> Self {
        MlpSpec {
            layers,
            activation: ActivationKind::Elu,
            heads: Vec::new(),
        }
    }

    pub fn with_head(mut self, name: &str, width: usize) -> Self {
        self.heads.push((name.to_string(), width));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        if self
            .layers
            .iter()
            .chain(self.heads.iter().map(|(_, w)| w))
            .any(|&w| w == 0)
        {
            return Err(Error::Config(format!("zero-width layer in {:?}", self)));
        }
        Ok(())
    }

    /// Width of the first head, or of the last hidden layer when headless.
    pub fn out_width(&self) -> usize {
        self.heads
            .first()
            .map_or_else(|| *self.layers.last().unwrap_or(&0), |h| h.1)
    }
}

/// A weight matrix `[in, out]` and bias row `[1, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            glorot_uniform(rng, &[inputs, outputs], inputs, outputs),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, outputs]));
        Dense {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub inputs: usize,
    layers: Vec<Dense>,
    heads: Vec<Dense>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        spec: &MlpSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut width = inputs;
        for (i, &w) in spec.layers.iter().enumerate() {
            layers.push(Dense::new(store, &format!("{name}.l{i}"), width, w, rng));
            width = w;
        }
        let heads = spec
            .heads
            .iter()
            .map(|(h, w)| Dense::new(store, &format!("{name}.{h}"), width, *w, rng))
            .collect();
        Ok(Mlp {
            spec: spec.clone(),
            inputs,
            layers,
            heads,
        })
    }

    /// Runs the stack; returns one output per head, or the last hidden
    /// activation when the layout has no heads.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let w = g.value(x).cols();
        if w != self.inputs {
            return Err(Error::Shape {
                op: "mlp_apply",
                detail: format!("input width {w}, expected {}", self.inputs),
            });
        }
        let act = Activation::from(self.spec.activation);
        let mut h = x;
        for layer in &self.layers {
            let z = layer.apply(g, store, h)?;
            h = g.activate(z, act);
        }
        if self.heads.is_empty() {
            return Ok(vec![h]);
        }
        self.heads
            .iter()
            .map(|head| head.apply(g, store, h))
            .collect()
    }

    pub fn apply_one(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.apply(g, store, x)?[0])
    }

    pub fn out_width(&self) -> usize {
        self.spec.out_width()
    }
}

/// Gate weights of a GRU cell. Each matrix maps `[x; h]` (or `[x; r*h]`
/// for the candidate) to the hidden width.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub inputs: usize,
    pub hidden: usize,
    pub w_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub b_cand: ParamId,
}

impl GruParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = inputs + hidden;
        let mut gate = |store: &mut ParamStore, g: &str| {
            let w = store.add(
                format!("{name}.w_{g}"),
                glorot_uniform(rng, &[fan, hidden], fan, hidden),
            );
            let b = store.add(format!("{name}.b_{g}"), Tensor::zeros(&[1, hidden]));
            (w, b)
        };
        let (w_update, b_update) = gate(store, "update");
        let (w_reset, b_reset) = gate(store, "reset");
        let (w_cand, b_cand) = gate(store, "cand");
        GruParams {
            inputs,
            hidden,
            w_update,
            b_update,
            w_reset,
            b_reset,
            w_cand,
            b_cand,
        }
    }
}

/// One GRU step:
/// `u = σ(W_u[x;h] + b_u)`, `r = σ(W_r[x;h] + b_r)`,
/// `c = tanh(W_c[x; r⊙h] + b_c)`, `h' = (1-u)⊙h + u⊙c`.
pub fn gru_cell(g: &mut Graph, store: &ParamStore, p: &GruParams, x: Var, h: Var) -> Result<Var> {
    let (xw, hw) = (g.value(x).cols(), g.value(h).cols());
    if xw != p.inputs || hw != p.hidden {
        return Err(Error::Shape {
            op: "gru_cell",
            detail: format!(
                "input/hidden widths {xw}/{hw}, expected {}/{}",
                p.inputs, p.hidden
            ),
        });
    }
    let xh = g.concat_cols(&[x, h])?;
    let gate = |g: &mut Graph, input: Var, w: ParamId, b: ParamId| -> Result<Var> {
        let w = g.param(store, w);
        let b = g.param(store, b);
        let z = g.matmul(input, w)?;
        g.add_row(z, b)
    };
    let u_pre = gate(g, xh, p.w_update, p.b_update)?;
    let u = g.sigmoid(u_pre);
    let r_pre = gate(g, xh, p.w_reset, p.b_reset)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h)?;
    let xrh = g.concat_cols(&[x, rh])?;
    let c_pre = gate(g, xrh, p.w_cand, p.b_cand)?;
    let c = g.tanh(c_pre);
    let diff = g.sub(c, h)?;
    let step = g.mul(u, diff)?;
    g.add(h, step)
}

/// Square image geometry `size x size x channels`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub size: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

/// Stack of stride-2 convolutions, each halving the spatial size, ELU
/// between layers; output is the flattened final feature map.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub input: ImageShape,
    layers: Vec<ConvLayer>,
    out_width: usize,
}

impl ConvEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: ImageShape,
        channels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let depth = channels.len();
        if depth == 0 || !input.size.is_multiple_of(1 << depth) {
            return Err(Error::Config(format!(
                "image size {} must be divisible by 2^{depth}",
                input.size
            )));
        }
        let mut layers = Vec::new();
        let (mut size, mut c) = (input.size, input.channels);
        for (i, &oc) in channels.iter().enumerate() {
            let geom = ConvGeom {
                image_h: size,
                image_w: size,
                image_c: c,
                kernel: KERNEL,
                stride: STRIDE,
                pad: PAD,
            };
            let fan_in = geom.patch_len();
            let w = store.add(
                format!("{name}.conv{i}.w"),
                glorot_uniform(rng, &[fan_in, oc], fan_in, KERNEL * KERNEL * oc),
            );
            let b = store.add(format!("{name}.conv{i}.b"), Tensor::zeros(&[1, oc]));
            layers.push(ConvLayer { w, b, geom });
            size /= 2;
            c = oc;
        }
        Ok(ConvEncoder {
            input,
            layers,
            out_width: size * size * c,
        })
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let w = g.param(store, layer.w);
            let b = g.param(store, layer.b);
            let z = g.conv2d(h, w, b, layer.geom)?;
            h = g.elu(z);
        }
        Ok(h)
    }
}

/// Dense projection to a small feature map followed by stride-2 transposed
/// convolutions that double the spatial size; the last layer is linear.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    pub output: ImageShape,
    inputs: usize,
    dense: Dense,
    layers: Vec<ConvLayer>,
}

impl ConvDecoder {
    /// `channels` lists the feature-map widths from the smallest map up; the
    /// final layer maps to `output.channels`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        output: ImageShape,
        channels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let depth = channels.len();
        if depth == 0 || !output.size.is_multiple_of(1 << depth) {
            return Err(Error::Config(format!(
                "image size {} must be divisible by 2^{depth}",
                output.size
            )));
        }
        let base = output.size >> depth;
        let dense = Dense::new(
            store,
            &format!("{name}.dense"),
            inputs,
            base * base * channels[0],
            rng,
        );
        let mut layers = Vec::new();
        let mut size = base;
        for i in 0..depth {
            let in_c = channels[i];
            let out_c = channels.get(i + 1).copied().unwrap_or(output.channels);
            let out_size = ConvGeom::transposed_out(size, KERNEL, STRIDE, PAD);
            let geom = ConvGeom {
                image_h: out_size,
                image_w: out_size,
                image_c: out_c,
                kernel: KERNEL,
                stride: STRIDE,
                pad: PAD,
            };
            let w = store.add(
                format!("{name}.deconv{i}.w"),
                glorot_uniform(
                    rng,
                    &[in_c, geom.patch_len()],
                    KERNEL * KERNEL * in_c,
                    geom.patch_len(),
                ),
            );
            let b = store.add(format!("{name}.deconv{i}.b"), Tensor::zeros(&[1, out_c]));
            layers.push(ConvLayer { w, b, geom });
            size = out_size;
        }
        Ok(ConvDecoder {
            output,
            inputs,
            dense,
            layers,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.value(x).cols();
        if w != self.inputs {
            return Err(Error::Shape {
                op: "conv_decoder",
                detail: format!("input width {w}, expected {}", self.inputs),
            });
        }
        let z = self.dense.apply(g, store, x)?;
        let mut h = g.elu(z);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(store, layer.w);
            let b = g.param(store, layer.b);
            let z = g.conv_transpose2d(h, w, b, layer.geom)?;
            h = if i == last { z } else { g.elu(z) };
        }
        Ok(h)
    }
}

/// Affine projection followed by a learnable-gain layer norm.
#[derive(Clone, Debug)]
pub struct NormedDense {
    dense: Dense,
    gain: ParamId,
    bias: ParamId,
}

impl NormedDense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let dense = Dense::new(store, name, inputs, outputs, rng);
        let gain = store.add(format!("{name}.ln_gain"), Tensor::full(&[1, outputs], 1.0));
        let bias = store.add(format!("{name}.ln_bias"), Tensor::zeros(&[1, outputs]));
        NormedDense { dense, gain, bias }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let z = self.dense.apply(g, store, x)?;
        normalize(g, store, z, self.gain, self.bias)
    }
}

/// `layer_norm(x) * gain + bias`.
pub fn normalize(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    gain: ParamId,
    bias: ParamId,
) -> Result<Var> {
    let n = g.layer_norm(x);
    let gv = g.param(store, gain);
    let bv = g.param(store, bias);
    let scaled = g.mul_row(n, gv)?;
    g.add_row(scaled, bv)
}
