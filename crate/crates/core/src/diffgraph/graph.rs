//! Define-by-run reverse-mode differentiation.
//!
//! Every op evaluates eagerly and records its inputs on the tape. A
//! [`Graph`] lives for one training step: build, call [`Graph::backward`],
//! read gradients, drop.

use std::collections::HashMap;

use super::conv::{col2im, im2col, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Source,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Elu(Var),
    Softplus(Var),
    Relu(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    LogSumExpRows(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Diag(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    RepeatRows(Var),
    Reshape(Var),
    LayerNorm(Var, Vec<f64>),
    Conv(Var, Var, Var, ConvGeom),
    ConvTranspose(Var, Var, Var, ConvGeom),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Elementwise activation used by layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
}

/// A computation tape over dense `f64` tensors.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, usize), Var>,
    detached: Vec<Var>,
    replay: Option<std::vec::IntoIter<Tensor>>,
}

const LN_EPS: f64 = 1e-5;

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `detach` calls return `values` in order instead of
    /// the current values. Finite-difference oracles use this to hold
    /// stop-gradient quantities at a reference point.
    pub fn with_detach_replay(values: Vec<Tensor>) -> Self {
        Graph {
            replay: Some(values.into_iter()),
            ..Self::default()
        }
    }

    /// Values produced by every `detach` call so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor> {
        self.detached
            .iter()
            .map(|v| self.value(*v).clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Source, false)
    }

    /// An input that the caller wants gradients for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Source, true)
    }

    /// Binds a parameter. Repeated calls return the same node so gradients
    /// from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id.0);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bound.insert(key, v);
        v
    }

    /// Copies the value of `x` into a fresh node that blocks gradients.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = match self.replay.as_mut().and_then(Iterator::next) {
            Some(v) => {
                assert_eq!(
                    v.shape(),
                    self.nodes[x.0].value.shape(),
                    "detach replay out of step"
                );
                v
            }
            None => self.nodes[x.0].value.clone(),
        };
        let v = self.constant(value);
        self.detached.push(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Reads a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Returns the cached forward value at `root`.
    pub fn eval_forward(&self, root: Var) -> Result<&Tensor> {
        self.nodes
            .get(root.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Usage(format!("node {} is not on this graph", root.0)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("min", a, b)?;
        let v = self.value(a).zip_map(self.value(b), f64::min);
        Ok(self.binary(a, b, v, Op::Min(a, b)))
    }

    fn row_vec_check(&self, op: &'static str, x: Var, r: Var) -> Result<()> {
        let cols = self.value(x).cols();
        let rv = self.value(r);
        if rv.len() != cols || rv.rows() != 1 {
            return Err(shape_err(
                op,
                format!(
                    "row vector {:?} against {:?}",
                    rv.shape(),
                    self.value(x).shape()
                ),
            ));
        }
        Ok(())
    }

    /// `x[i, j] + b[j]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_vec_check("add_row", x, b)?;
        let cols = self.value(x).cols();
        let mut v = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for row in v.data_mut().chunks_mut(cols.max(1)) {
            for (a, c) in row.iter_mut().zip(&bd) {
                *a += c;
            }
        }
        Ok(self.binary(x, b, v, Op::AddRow(x, b)))
    }

    /// `x[i, j] * g[j]`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_vec_check("mul_row", x, g)?;
        let cols = self.value(x).cols();
        let mut v = self.value(x).clone();
        let gd = self.value(g).data().to_vec();
        for row in v.data_mut().chunks_mut(cols.max(1)) {
            for (a, c) in row.iter_mut().zip(&gd) {
                *a *= c;
            }
        }
        Ok(self.binary(x, g, v, Op::MulRow(x, g)))
    }

    /// `x[i, j] + c[i]` for a column `c` of shape `[rows, 1]`.
    pub fn add_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        let cv = self.value(c);
        if cv.len() != rows || cv.cols() != 1 {
            return Err(shape_err(
                "add_col",
                format!(
                    "column {:?} against {:?}",
                    cv.shape(),
                    self.value(x).shape()
                ),
            ));
        }
        let cd = cv.data().to_vec();
        let mut v = self.value(x).clone();
        for (i, row) in v.data_mut().chunks_mut(cols.max(1)).enumerate() {
            for a in row {
                *a += cd[i];
            }
        }
        Ok(self.binary(x, c, v, Op::AddCol(x, c)))
    }

    /// Multiplies every element of `x` by the `[1, 1]` node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err(
                "mul_scalar",
                format!(
                    "expected a single-element factor, got {:?}",
                    self.value(s).shape()
                ),
            ));
        }
        let k = self.scalar(s);
        let v = self.value(x).map(|a| a * k);
        Ok(self.binary(x, s, v, Op::MulScalarVar(x, s)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|a| a * k);
        self.push_unary(x, v, Op::Scale(x, k))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.push_unary(x, v, Op::Offset(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        Ok(self.binary(a, b, Tensor::new(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push_unary(x, v, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.push_unary(x, v, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push_unary(x, v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push_unary(x, v, Op::Sigmoid(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(elu);
        self.push_unary(x, v, Op::Elu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.push_unary(x, v, Op::Softplus(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push_unary(x, v, Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.push_unary(x, v, Op::Square(x))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Elu => self.elu(x),
            Activation::Tanh => self.tanh(x),
            Activation::Identity => x,
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push_unary(x, v, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        self.push_unary(x, v, Op::MeanAll(x))
    }

    /// Sums each row: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols().max(1);
        let data: Vec<f64> = t.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let v = Tensor::new(vec![t.rows(), 1], data);
        self.push_unary(x, v, Op::SumCols(x))
    }

    /// Row-wise log-sum-exp: `[m, n] -> [m, 1]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols().max(1);
        let data: Vec<f64> = t.data().chunks(cols).map(lse).collect();
        let v = Tensor::new(vec![t.rows(), 1], data);
        self.push_unary(x, v, Op::LogSumExpRows(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols().max(1);
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let m = lse(row);
            for a in row.iter_mut() {
                *a = (*a - m).exp();
            }
        }
        self.push_unary(x, out, Op::SoftmaxRows(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push_unary(x, v, Op::Transpose(x))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != t.cols() {
            return Err(shape_err("diag", format!("non-square {:?}", t.shape())));
        }
        let n = t.rows();
        let data = (0..n).map(|i| t.data()[i * n + i]).collect();
        let v = Tensor::new(vec![n, 1], data);
        Ok(self.push_unary(x, v, Op::Diag(x)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs".into()));
        };
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("row counts {rows} vs {}", t.rows()),
                ));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("column counts {cols} vs {}", t.cols()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if start > end || end > cols {
            return Err(shape_err(
                "slice_cols",
                format!("{start}..{end} of {cols} columns"),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows() * w);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + end]);
        }
        let v = Tensor::new(vec![t.rows(), w], data);
        Ok(self.push_unary(x, v, Op::SliceCols(x, start)))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let rows = t.rows();
        if start > end || end > rows {
            return Err(shape_err(
                "slice_rows",
                format!("{start}..{end} of {rows} rows"),
            ));
        }
        let cols = t.cols();
        let v = Tensor::new(
            vec![end - start, cols],
            t.data()[start * cols..end * cols].to_vec(),
        );
        Ok(self.push_unary(x, v, Op::SliceRows(x, start)))
    }

    /// Tiles a `[1, n]` row into `[m, n]`.
    pub fn repeat_rows(&mut self, x: Var, m: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != 1 {
            return Err(shape_err(
                "repeat_rows",
                format!("expected one row, got {:?}", t.shape()),
            ));
        }
        let mut data = Vec::with_capacity(m * t.len());
        for _ in 0..m {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![m, t.len()], data);
        Ok(self.push_unary(x, v, Op::RepeatRows(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", t.shape()),
            ));
        }
        let v = t.clone().reshaped(shape.to_vec());
        Ok(self.push_unary(x, v, Op::Reshape(x)))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols().max(1);
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for a in row.iter_mut() {
                *a = (*a - mean) * is;
            }
            inv_std.push(is);
        }
        self.push_unary(x, out, Op::LayerNorm(x, inv_std))
    }

    /// Strided convolution of `[n, H*W*C]` images with weights
    /// `[k*k*C, out_c]` and bias `[1, out_c]`. Output is `[n, h*w*out_c]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let xt = self.value(x);
        let n = xt.rows();
        if xt.cols() != geom.image_len() {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input row width {} but geometry expects {}",
                    xt.cols(),
                    geom.image_len()
                ),
            ));
        }
        let wt = self.value(w);
        if wt.rows() != geom.patch_len() {
            return Err(shape_err(
                "conv2d",
                format!(
                    "weight {:?} but patch length {}",
                    wt.shape(),
                    geom.patch_len()
                ),
            ));
        }
        let oc = wt.cols();
        if self.value(b).len() != oc {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} for {oc} channels", self.value(b).shape()),
            ));
        }
        let cols = im2col(xt.data(), n, &geom);
        let pos = n * geom.grid_len();
        let mut out = vec![0.0; pos * oc];
        for row in out.chunks_mut(oc) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            pos,
            geom.patch_len(),
            oc,
            &cols,
            false,
            wt.data(),
            false,
            &mut out,
            1.0,
        );
        let v = Tensor::new(vec![n, geom.grid_len() * oc], out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(v, Op::Conv(x, w, b, geom), ng))
    }

    /// Transposed convolution: `[n, gh*gw*in_c]` grids onto `[n, H*W*C]`
    /// images, weights `[in_c, k*k*C]`, bias `[1, C]`. `geom` describes the
    /// output image.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let xt = self.value(x);
        let n = xt.rows();
        let wt = self.value(w);
        let in_c = wt.rows();
        if xt.cols() != geom.grid_len() * in_c {
            return Err(shape_err(
                "conv_transpose2d",
                format!(
                    "input row width {} but grid expects {}",
                    xt.cols(),
                    geom.grid_len() * in_c
                ),
            ));
        }
        if wt.cols() != geom.patch_len() {
            return Err(shape_err(
                "conv_transpose2d",
                format!(
                    "weight {:?} but patch length {}",
                    wt.shape(),
                    geom.patch_len()
                ),
            ));
        }
        if self.value(b).len() != geom.image_c {
            return Err(shape_err(
                "conv_transpose2d",
                format!(
                    "bias {:?} for {} channels",
                    self.value(b).shape(),
                    geom.image_c
                ),
            ));
        }
        let pos = n * geom.grid_len();
        let mut cols = vec![0.0; pos * geom.patch_len()];
        gemm(
            pos,
            in_c,
            geom.patch_len(),
            xt.data(),
            false,
            wt.data(),
            false,
            &mut cols,
            0.0,
        );
        let mut img = col2im(&cols, n, &geom);
        let bd = self.value(b).data();
        for px in img.chunks_mut(geom.image_c) {
            for (a, c) in px.iter_mut().zip(bd) {
                *a += c;
            }
        }
        let v = Tensor::new(vec![n, geom.image_len()], img);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(v, Op::ConvTranspose(x, w, b, geom), ng))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward from node {} which was never evaluated on this graph",
                root.0
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Source) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Source => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = g.clone();
                let mut gb = g.clone();
                for k in 0..g.len() {
                    if av[k] <= bv[k] {
                        gb.data_mut()[k] = 0.0;
                    } else {
                        ga.data_mut()[k] = 0.0;
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*b) {
                    let bshape = self.value(*b).shape().to_vec();
                    self.acc(grads, *b, column_sums(g).reshaped(bshape));
                }
            }
            Op::MulRow(x, r) => {
                let cols = g.cols().max(1);
                if self.ng(*x) {
                    let rv = self.value(*r).data();
                    let mut gx = g.clone();
                    for row in gx.data_mut().chunks_mut(cols) {
                        for (a, c) in row.iter_mut().zip(rv) {
                            *a *= c;
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.ng(*r) {
                    let prod = g.zip_map(self.value(*x), |a, b| a * b);
                    let rshape = self.value(*r).shape().to_vec();
                    self.acc(grads, *r, column_sums(&prod).reshaped(rshape));
                }
            }
            Op::AddCol(x, c) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*c) {
                    let cols = g.cols().max(1);
                    let data = g.data().chunks(cols).map(|r| r.iter().sum()).collect();
                    let cshape = self.value(*c).shape().to_vec();
                    self.acc(grads, *c, Tensor::new(cshape, data));
                }
            }
            Op::MulScalarVar(x, s) => {
                let k = self.scalar(*s);
                if self.ng(*x) {
                    self.acc(grads, *x, g.map(|a| a * k));
                }
                if self.ng(*s) {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(a, b)| a * b)
                        .sum();
                    let sshape = self.value(*s).shape().to_vec();
                    self.acc(grads, *s, Tensor::new(sshape, vec![d]));
                }
            }
            Op::Scale(x, k) => self.acc(grads, *x, g.map(|a| a * k)),
            Op::Offset(x) => self.acc(grads, *x, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, 0.0);
                    self.acc(grads, *a, Tensor::new(vec![m, k], ga));
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, 0.0);
                    self.acc(grads, *b, Tensor::new(vec![k, n], gb));
                }
            }
            Op::Exp(x) => self.acc(grads, *x, g.zip_map(out, |a, y| a * y)),
            Op::Log(x) => self.acc(grads, *x, g.zip_map(self.value(*x), |a, v| a / v)),
            Op::Tanh(x) => self.acc(grads, *x, g.zip_map(out, |a, y| a * (1.0 - y * y))),
            Op::Sigmoid(x) => self.acc(grads, *x, g.zip_map(out, |a, y| a * y * (1.0 - y))),
            Op::Elu(x) => self.acc(
                grads,
                *x,
                g.zip_map(out, |a, y| if y > 0.0 { a } else { a * (y + 1.0) }),
            ),
            Op::Softplus(x) => {
                self.acc(grads, *x, g.zip_map(self.value(*x), |a, v| a * sigmoid(v)))
            }
            Op::Relu(x) => self.acc(
                grads,
                *x,
                g.zip_map(self.value(*x), |a, v| if v > 0.0 { a } else { 0.0 }),
            ),
            Op::Square(x) => self.acc(grads, *x, g.zip_map(self.value(*x), |a, v| 2.0 * a * v)),
            Op::SumAll(x) => {
                let s = g.data()[0];
                self.acc(grads, *x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let s = g.data()[0] / xv.len().max(1) as f64;
                self.acc(grads, *x, Tensor::full(xv.shape(), s));
            }
            Op::SumCols(x) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut gx = Vec::with_capacity(xv.len());
                for r in 0..xv.rows() {
                    gx.extend(std::iter::repeat_n(g.data()[r], cols));
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx));
            }
            Op::LogSumExpRows(x) => {
                let xv = self.value(*x);
                let cols = xv.cols().max(1);
                let mut gx = xv.clone();
                for (r, row) in gx.data_mut().chunks_mut(cols).enumerate() {
                    let (m, gr) = (out.data()[r], g.data()[r]);
                    for a in row.iter_mut() {
                        *a = gr * (*a - m).exp();
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let cols = out.cols().max(1);
                let mut gx = out.clone();
                for (row, (gr, yr)) in gx
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(g.data().chunks(cols).zip(out.data().chunks(cols)))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((a, gi), yi) in row.iter_mut().zip(gr).zip(yr) {
                        *a = yi * (gi - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Transpose(x) => self.acc(grads, *x, g.transpose()),
            Op::Diag(x) => {
                let n = g.rows();
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for k in 0..n {
                    gx.data_mut()[k * n + k] = g.data()[k];
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        let shape = self.value(p).shape().to_vec();
                        self.acc(grads, p, Tensor::new(shape, d));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        let shape = self.value(p).shape().to_vec();
                        self.acc(
                            grads,
                            p,
                            Tensor::new(shape, g.data()[off..off + len].to_vec()),
                        );
                    }
                    off += len;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (cols, w) = (xv.cols(), g.cols());
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    gx.data_mut()[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.acc(grads, *x, gx);
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                gx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, gx);
            }
            Op::RepeatRows(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, column_sums(g).reshaped(shape));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.clone().reshaped(shape));
            }
            Op::LayerNorm(x, inv_std) => {
                let cols = out.cols().max(1);
                let n = cols as f64;
                let mut gx = g.clone();
                for (r, row) in gx.data_mut().chunks_mut(cols).enumerate() {
                    let y = &out.data()[r * cols..(r + 1) * cols];
                    let mean_g = row.iter().sum::<f64>() / n;
                    let mean_gy = row.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (a, yi) in row.iter_mut().zip(y) {
                        *a = inv_std[r] * (*a - mean_g - yi * mean_gy);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Conv(x, w, b, geom) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.rows();
                let oc = wv.cols();
                let pos = n * geom.grid_len();
                let patch = geom.patch_len();
                if self.ng(*b) {
                    let gb = column_sums(&g.clone().reshaped(vec![pos, oc]));
                    let shape = self.value(*b).shape().to_vec();
                    self.acc(grads, *b, gb.reshaped(shape));
                }
                if self.ng(*w) {
                    let cols = im2col(xv.data(), n, geom);
                    let mut gw = vec![0.0; patch * oc];
                    gemm(patch, pos, oc, &cols, true, g.data(), false, &mut gw, 0.0);
                    self.acc(grads, *w, Tensor::new(wv.shape().to_vec(), gw));
                }
                if self.ng(*x) {
                    let mut gcols = vec![0.0; pos * patch];
                    gemm(
                        pos,
                        oc,
                        patch,
                        g.data(),
                        false,
                        wv.data(),
                        true,
                        &mut gcols,
                        0.0,
                    );
                    let gx = col2im(&gcols, n, geom);
                    self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                }
            }
            Op::ConvTranspose(x, w, b, geom) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.rows();
                let in_c = wv.rows();
                let pos = n * geom.grid_len();
                let patch = geom.patch_len();
                if self.ng(*b) {
                    let gb = column_sums(
                        &g.clone()
                            .reshaped(vec![g.len() / geom.image_c, geom.image_c]),
                    );
                    let shape = self.value(*b).shape().to_vec();
                    self.acc(grads, *b, gb.reshaped(shape));
                }
                let gcols = im2col(g.data(), n, geom);
                if self.ng(*w) {
                    let mut gw = vec![0.0; in_c * patch];
                    gemm(
                        in_c,
                        pos,
                        patch,
                        xv.data(),
                        true,
                        &gcols,
                        false,
                        &mut gw,
                        0.0,
                    );
                    self.acc(grads, *w, Tensor::new(wv.shape().to_vec(), gw));
                }
                if self.ng(*x) {
                    let mut gx = vec![0.0; pos * in_c];
                    gemm(
                        pos,
                        patch,
                        in_c,
                        &gcols,
                        false,
                        wv.data(),
                        true,
                        &mut gx,
                        0.0,
                    );
                    self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                }
            }
        }
    }
}

fn lse(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

fn column_sums(t: &Tensor) -> Tensor {
    let cols = t.cols().max(1);
    let mut out = vec![0.0; cols];
    for row in t.data().chunks(cols) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a;
        }
    }
    Tensor::new(vec![1, cols], out)
}

/// Gradients from one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient at a leaf or parameter node; `None` if nothing reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store` in store order; `None` for
    /// parameters not bound on `graph` or not reached by the sweep.
    pub fn for_store(&self, graph: &Graph, store: &ParamStore) -> Vec<Option<Tensor>> {
        store
            .ids()
            .map(|id| {
                graph
                    .bound
                    .get(&(store.tag(), id.0))
                    .and_then(|v| self.wrt(*v).cloned())
            })
            .collect()
    }
}
