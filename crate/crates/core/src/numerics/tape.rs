//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. Parameters are bound lazily from
//! a borrowed [`ParamStore`] and never copied onto the tape. `backward` walks
//! the nodes in reverse and returns one gradient per touched parameter.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, layer_norm_forward, softmax_rows_masked, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Gelu,
    Softplus,
    Square,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    ExpandCols(Var),
    Affine(Var, f64),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    RowMax(Var, Vec<usize>),
    L2NormRows(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    dropout: Option<ChaCha8Rng>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            bound: HashMap::new(),
            dropout: None,
        }
    }

    /// A tape without parameters; only constant inputs can be recorded.
    pub fn detached() -> Tape<'static> {
        Tape {
            store: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
            dropout: None,
        }
    }

    /// Enables dropout for this tape. Without it `dropout` is the identity.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout = Some(rng);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.expect("param node without store").value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "param() on a detached tape");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a × bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(shape_err("mul_const", ta, &c));
        }
        let out = ta.zip_map(&c, |x, y| x * y);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    /// `x[n×d] + b[d]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 2 || tb.shape() != [tx.cols()] {
            return Err(shape_err("add_bias", tx, tb));
        }
        let d = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % d];
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// Row i of `x[n×d]` multiplied by `g[i]`.
    pub fn scale_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        if tx.rank() != 2 || tg.shape() != [tx.rows()] {
            return Err(shape_err("scale_rows", tx, tg));
        }
        let d = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= tg.data()[i / d];
        }
        let rg = self.rg(&[x, g]);
        Ok(self.push(out, Op::ScaleRows(x, g), rg))
    }

    /// Column j of `x[n×m]` multiplied by `v[j]`.
    pub fn scale_cols(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tx.rank() != 2 || tv.shape() != [tx.cols()] {
            return Err(shape_err("scale_cols", tx, tv));
        }
        let m = tx.cols();
        let mut out = tx.clone();
        for (i, e) in out.data_mut().iter_mut().enumerate() {
            *e *= tv.data()[i % m];
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::ScaleCols(x, v), rg))
    }

    /// `g[n]` to an `n×dim` matrix whose row j repeats `g[j]`.
    pub fn expand_cols(&mut self, g: Var, dim: usize) -> Result<Var> {
        let tg = self.value(g);
        if tg.rank() != 1 || dim == 0 {
            return Err(Error::invalid(format!(
                "expand_cols needs a vector and dim >= 1, got {:?} and {dim}",
                tg.shape()
            )));
        }
        let n = tg.len();
        let data = tg.data().iter().flat_map(|&v| std::iter::repeat_n(v, dim)).collect();
        let out = Tensor::matrix(n, dim, data)?;
        let rg = self.rg(&[g]);
        Ok(self.push(out, Op::ExpandCols(g), rg))
    }

    /// `a * x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let out = self.value(x).map(|v| a * v + b);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, a), rg)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Gelu => gelu,
            Unary::Softplus => softplus,
            Unary::Square => |v| v * v,
        };
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(x, kind), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    /// `ln(1 + eˣ)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(shape_err("softmax_rows", tx, tx));
        }
        let out = softmax_rows_masked(tx, None);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Softmax where columns with `allowed[j] == false` behave as −∞ logits.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || allowed.len() != tx.cols() {
            return Err(Error::invalid(format!(
                "mask of length {} for logits {:?}",
                allowed.len(),
                tx.shape()
            )));
        }
        if !allowed.iter().any(|&a| a) {
            return Err(Error::invalid("attention mask excludes every key"));
        }
        let out = softmax_rows_masked(tx, Some(allowed));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.rank() != 2 || tg.shape() != [tx.cols()] || tb.shape() != [tx.cols()] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (out, xhat, inv_std) = layer_norm_forward(tx, tg, tb, eps);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || len == 0 || start + len > tx.cols() {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{} out of {:?}",
                start + len,
                tx.shape()
            )));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?);
        let r = first.rows();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != r {
                return Err(shape_err("concat_cols", first, t));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?);
        let c = first.cols();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != c {
                return Err(shape_err("concat_rows", first, t));
            }
        }
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows of a matrix (or elements of a vector) at `idx`, in that order.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let n = if tx.rank() == 2 { tx.rows() } else { tx.len() };
        if idx.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {:?}",
                tx.shape()
            )));
        }
        let out = if tx.rank() == 2 {
            let c = tx.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                data.extend_from_slice(tx.row(i));
            }
            Tensor::matrix(idx.len(), c, data)?
        } else {
            Tensor::vector(idx.iter().map(|&i| tx.data()[i]).collect())
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather(x, idx.to_vec()), rg))
    }

    /// Per-row maximum of `x[n×m]`, giving a vector of length n.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(shape_err("row_max", tx, tx));
        }
        let mut vals = Vec::with_capacity(tx.rows());
        let mut arg = Vec::with_capacity(tx.rows());
        for i in 0..tx.rows() {
            let row = tx.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            vals.push(row[best]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(vals), Op::RowMax(x, arg), rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(shape_err("l2_normalize_rows", tx, tx));
        }
        let mut out = tx.clone();
        let c = tx.cols();
        let mut norms = Vec::with_capacity(tx.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2NormRows(x, norms), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Inverted dropout. Identity unless the tape was built `with_dropout`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if self.dropout.is_none() {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::invalid("dropout rate must be below 1"));
        }
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let rng = self.dropout.as_mut().unwrap();
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(x, Tensor::new(shape, mask)?)
    }

    /// Gradients of the scalar `loss` with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Some(v) = &node.value {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "forward value of node {i} ({})",
                        op_name(&node.op)
                    )));
                }
            }
        }
        let nparams = self.store.map_or(0, |s| s.len());
        let mut out = Gradients::with_len(nparams);
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &node.op, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, op: &Op, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) -> Result<()> {
        let y = || self.nodes[i].value.as_ref().unwrap();
        match op {
            Op::Input => {}
            Op::Param(id) => {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter #{}", id.0)));
                }
                out.add_to(*id, g);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), tb.data(), &mut da, m, n, k);
                    self.acc(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(ta.data(), g.data(), &mut db, k, m, n);
                    self.acc(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g.data(), tb.data(), &mut da, m, n, k);
                    self.acc(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g.data(), ta.data(), &mut db, n, m, k);
                    self.acc(grads, *b, Tensor::matrix(n, k, db)?);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.map(|v| -v));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, g.zip_map(tb, |x, y| x * y));
                self.acc(grads, *b, g.zip_map(ta, |x, y| x * y));
            }
            Op::MulConst(a, c) => self.acc(grads, *a, g.zip_map(c, |x, y| x * y)),
            Op::AddBias(x, b) => {
                let d = g.cols();
                let mut db = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.acc(grads, *b, Tensor::vector(db));
                self.acc(grads, *x, g);
            }
            Op::ScaleRows(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let d = g.cols();
                let ds: Vec<f64> = g
                    .data()
                    .chunks(d)
                    .zip(tx.data().chunks(d))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                let mut dx = g;
                for (k, v) in dx.data_mut().iter_mut().enumerate() {
                    *v *= ts.data()[k / d];
                }
                self.acc(grads, *s, Tensor::vector(ds));
                self.acc(grads, *x, dx);
            }
            Op::ScaleCols(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let m = g.cols();
                let mut ds = vec![0.0; m];
                for (k, (gv, xv)) in g.data().iter().zip(tx.data()).enumerate() {
                    ds[k % m] += gv * xv;
                }
                let mut dx = g;
                for (k, v) in dx.data_mut().iter_mut().enumerate() {
                    *v *= ts.data()[k % m];
                }
                self.acc(grads, *s, Tensor::vector(ds));
                self.acc(grads, *x, dx);
            }
            Op::ExpandCols(s) => {
                let d = g.cols();
                let ds = g.data().chunks(d).map(|r| r.iter().sum()).collect();
                self.acc(grads, *s, Tensor::vector(ds));
            }
            Op::Affine(x, a) => self.acc(grads, *x, g.map(|v| v * a)),
            Op::Unary(x, kind) => {
                let tx = self.value(*x);
                let ty = y();
                let dx = match kind {
                    Unary::Exp => g.zip_map(ty, |gv, yv| gv * yv),
                    Unary::Log => g.zip_map(tx, |gv, xv| gv / xv),
                    Unary::Tanh => g.zip_map(ty, |gv, yv| gv * (1.0 - yv * yv)),
                    Unary::Sigmoid => g.zip_map(ty, |gv, yv| gv * yv * (1.0 - yv)),
                    Unary::Gelu => g.zip_map(tx, |gv, xv| gv * gelu_grad(xv)),
                    Unary::Softplus => g.zip_map(tx, |gv, xv| gv * sigmoid(xv)),
                    Unary::Square => g.zip_map(tx, |gv, xv| 2.0 * gv * xv),
                };
                self.acc(grads, *x, dx);
            }
            Op::Clamp(x, lo, hi) => {
                let tx = self.value(*x);
                let dx = g.zip_map(tx, |gv, xv| if xv < *lo || xv > *hi { 0.0 } else { gv });
                self.acc(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let p = y();
                let c = p.cols();
                let mut dx = g;
                for (dr, pr) in dx.data_mut().chunks_mut(c).zip(p.data().chunks(c)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (d, &pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gamma);
                let d = g.cols();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                for (r, (gr, hr)) in g.data().chunks(d).zip(xhat.data().chunks(d)).enumerate() {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * tg.data()[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let is = inv_std[r];
                    for j in 0..d {
                        let dh = gr[j] * tg.data()[j];
                        dx[r * d + j] = is / d as f64 * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.acc(grads, *gamma, Tensor::vector(dgamma));
                self.acc(grads, *beta, Tensor::vector(dbeta));
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let (c, len) = (tx.cols(), g.cols());
                let mut dx = Tensor::zeros(tx.shape());
                for (r, gr) in g.data().chunks(len).enumerate() {
                    dx.data_mut()[r * c + start..r * c + start + len].copy_from_slice(gr);
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.cols();
                    let mut data = Vec::with_capacity(tp.len());
                    for gr in g.data().chunks(total) {
                        data.extend_from_slice(&gr[off..off + w]);
                    }
                    off += w;
                    self.acc(grads, p, Tensor::new(tp.shape().to_vec(), data)?);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.len();
                    let part = Tensor::new(tp.shape().to_vec(), g.data()[off..off + n].to_vec())?;
                    off += n;
                    self.acc(grads, p, part);
                }
            }
            Op::Gather(x, idx) => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.shape());
                let c = if tx.rank() == 2 { tx.cols() } else { 1 };
                for (k, &src) in idx.iter().enumerate() {
                    let gr = &g.data()[k * c..(k + 1) * c];
                    for (d, v) in dx.data_mut()[src * c..(src + 1) * c].iter_mut().zip(gr) {
                        *d += v;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::RowMax(x, arg) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                for (r, &j) in arg.iter().enumerate() {
                    dx.data_mut()[r * c + j] = g.data()[r];
                }
                self.acc(grads, *x, dx);
            }
            Op::L2NormRows(x, norms) => {
                let ty = y();
                let c = ty.cols();
                let mut dx = g;
                for ((dr, yr), n) in dx.data_mut().chunks_mut(c).zip(ty.data().chunks(c)).zip(norms) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (d, &yv) in dr.iter_mut().zip(yr) {
                        *d = (*d - yv * dot) / n;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Sum(x) => {
                let s = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::full(&s, g.item()));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let s = t.shape().to_vec();
                self.acc(grads, *x, Tensor::full(&s, g.item() / t.len() as f64));
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.reshape(&s)?);
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::MulConst(..) => "mul_const",
        Op::AddBias(..) => "add_bias",
        Op::ScaleRows(..) => "scale_rows",
        Op::ScaleCols(..) => "scale_cols",
        Op::ExpandCols(_) => "expand_cols",
        Op::Affine(..) => "affine",
        Op::Unary(_, k) => match k {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Gelu => "gelu",
            Unary::Softplus => "softplus",
            Unary::Square => "square",
        },
        Op::Clamp(..) => "clamp",
        Op::Softmax(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::Gather(..) => "gather",
        Op::RowMax(..) => "row_max",
        Op::L2NormRows(..) => "l2_normalize_rows",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Reshape(_) => "reshape",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn square_gradient() {
        let (s, id) = store_with("theta", Tensor::scalar(3.0));
        let mut tape = Tape::new(&s);
        let th = tape.param(id);
        let loss = tape.square(th);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap().item(), 6.0);
    }

    #[test]
    fn independent_loss_has_no_gradient() {
        let (s, id) = store_with("theta", Tensor::scalar(3.0));
        let mut tape = Tape::new(&s);
        let _ = tape.param(id);
        let c = tape.input(Tensor::scalar(2.0));
        let loss = tape.square(c);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(id).is_none_or(|t| t.item() == 0.0));
    }

    #[test]
    fn softmax_row_sums_kill_the_gradient() {
        let w = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.3, 0.9, 0.2, -0.7]).unwrap();
        let (s, id) = store_with("w", w);
        let mut tape = Tape::new(&s);
        let wv = tape.param(id);
        let x = tape.input(Tensor::matrix(3, 4, (0..12).map(|v| v as f64 / 7.0).collect()).unwrap());
        let wx = tape.matmul(wv, x).unwrap();
        let p = tape.softmax_rows(wx).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(id).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::detached();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let (s, id) = store_with("x", Tensor::scalar(-1.0));
        let mut tape = Tape::new(&s);
        let x = tape.param(id);
        let l = tape.log(x);
        assert!(matches!(tape.backward(l), Err(Error::NonFinite(_))));
    }

    #[test]
    fn param_is_bound_once() {
        let (s, id) = store_with("x", Tensor::scalar(2.0));
        let mut tape = Tape::new(&s);
        let a = tape.param(id);
        let b = tape.param(id);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(id).unwrap().item(), 4.0);
    }

    #[test]
    fn dropout_is_identity_without_rng() {
        let mut tape = Tape::detached();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.dropout(x, 0.5).unwrap(), x);
    }
}
