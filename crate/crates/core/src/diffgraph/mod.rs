//! Reverse-mode automatic differentiation over dense `f64` arrays, plus the
//! layers, optimizer and checkpoint format built on it.

mod conv;
mod gradcheck;
mod graph;
mod nn;
mod optim;
mod params;
mod serialize;
mod tensor;

pub use crate::error::{Error, Result};
pub use conv::{col2im, im2col, ConvGeom};
pub use gradcheck::{check_gradients, check_param_gradients, relative_error};
pub(crate) use graph::softplus;
pub use graph::{Activation, Gradients, Graph, Var};
pub use nn::{
    gru_cell, normalize, ActivationKind, ConvDecoder, ConvEncoder, Dense, GruParams, ImageShape,
    Mlp, MlpSpec, NormedDense,
};
pub use optim::{clip_global_norm, Adam, AdamConfig, StepStats};
pub use params::{glorot_uniform, ParamId, ParamStore};
pub use serialize::{load_tensors, save_tensors, Manifest, TensorEntry, FORMAT};
pub use tensor::Tensor;
