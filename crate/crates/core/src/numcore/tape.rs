//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Operations append nodes to a [`Tape`] in execution order, so the tape is
//! already a topological order of the computation. [`Tape::backward`] replays
//! it in reverse, accumulating adjoints. A tape is built per example and
//! dropped after its gradients have been harvested.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numcore::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use crate::numcore::{ParamId, ParamStore, Rng, SparseMatrix, Tensor};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    Input,
    Param(ParamId),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Tanh(usize),
    Gelu(usize),
    RowSoftmax(usize),
    MeanRows(usize),
    MaxRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(usize, Vec<f64>),
    ScaleRows(usize, usize),
    Propagate(usize, Rc<SparseMatrix>),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}{:?}", self.id, v.shape())
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf, in tape order. A parameter used
    /// twice on one tape appears twice.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(move |&(node, pid)| self.grads[node].as_deref().map(|g| (pid, g)))
    }

    /// Adds `scale *` every parameter gradient into the store's buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (pid, g) in self.param_grads() {
            store.accumulate_grad(pid, g, scale);
        }
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param(_) | Op::Input => true,
            _ => inputs.iter().any(|&i| nodes[i].needs_grad),
        };
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let mut value = value;
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, &[])
    }

    /// Records a differentiable leaf that is not tied to a parameter store.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut value = value;
        value.set_requires_grad(false);
        self.push(value, Op::Input, &[])
    }

    /// Records parameter `id` of `store` as a differentiable leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let src = store.get(id);
        let value = Tensor::from_vec(src.rows(), src.cols(), src.data().to_vec())
            .expect("store tensors are well-formed");
        self.push(value, Op::Param(id), &[])
    }

    /// Reverse pass from a scalar (1×1) output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape();
        if out_shape != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                lhs: out_shape,
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(pid) => Some((i, pid)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Adjoint buffer of `id`, allocated on first use; `None` for constants.
fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut [f64]> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = &node.value;
    match &node.op {
        Op::Leaf | Op::Input | Op::Param(_) => {}
        Op::Add(a, b) => {
            for &i in [a, b].into_iter() {
                if let Some(ga) = acc(grads, nodes, i) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            let cols = y.cols();
            if let Some(gr) = acc(grads, nodes, *row) {
                for chunk in g.chunks(cols) {
                    gr.iter_mut().zip(chunk).for_each(|(x, d)| *x += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
            }
        }
        Op::Hadamard(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, d), o) in ga.iter_mut().zip(g).zip(bv) {
                    *x += d * o;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ((x, d), o) in gb.iter_mut().zip(g).zip(av) {
                    *x += d * o;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += s * d);
            }
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (&nodes[*a].value, &nodes[*b].value);
            let (r, k, c) = (at.rows(), at.cols(), bt.cols());
            if let Some(ga) = acc(grads, nodes, *a) {
                // g · bᵀ
                matmul_nt_into(g, bt.data(), ga, r, c, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // aᵀ · g
                matmul_tn_into(at.data(), g, gb, k, r, c);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = y.shape();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Relu(a) => {
            let xv = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, d), v) in ga.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *x += d;
                    }
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, d), t) in ga.iter_mut().zip(g).zip(y.data()) {
                    *x += d * (1.0 - t * t);
                }
            }
        }
        Op::Gelu(a) => {
            let xv = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, d), v) in ga.iter_mut().zip(g).zip(xv) {
                    *x += d * gelu_grad(*v);
                }
            }
        }
        Op::RowSoftmax(a) => {
            let cols = y.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((gr, yr), out) in g
                    .chunks(cols)
                    .zip(y.data().chunks(cols))
                    .zip(ga.chunks_mut(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(d, p)| d * p).sum();
                    for ((o, d), p) in out.iter_mut().zip(gr).zip(yr) {
                        *o += p * (d - dot);
                    }
                }
            }
        }
        Op::MeanRows(a) => {
            let (rows, cols) = nodes[*a].value.shape();
            if let Some(ga) = acc(grads, nodes, *a) {
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * cols + c] += g[c] * inv;
                    }
                }
            }
        }
        Op::MaxRows(a, argmax) => {
            let cols = nodes[*a].value.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (c, &r) in argmax.iter().enumerate() {
                    ga[r * cols + c] += g[c];
                }
            }
        }
        Op::ConcatCols(parts) => {
            let cols = y.cols();
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                if let Some(gp) = acc(grads, nodes, p) {
                    for (r, out) in gp.chunks_mut(pc).enumerate() {
                        let src = &g[r * cols + offset..r * cols + offset + pc];
                        out.iter_mut().zip(src).for_each(|(x, d)| *x += d);
                    }
                }
                offset += pc;
            }
        }
        Op::GatherRows(a, idx) => {
            let cols = y.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, &src) in idx.iter().enumerate() {
                    let dst = &mut ga[src * cols..(src + 1) * cols];
                    dst.iter_mut()
                        .zip(&g[i * cols..(i + 1) * cols])
                        .for_each(|(x, d)| *x += d);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let cols = y.cols();
            let gain_v = nodes[*gain].value.data().to_vec();
            if let Some(gb) = acc(grads, nodes, *bias) {
                for chunk in g.chunks(cols) {
                    gb.iter_mut().zip(chunk).for_each(|(x, d)| *x += d);
                }
            }
            if let Some(gg) = acc(grads, nodes, *gain) {
                for (chunk, xh) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for ((o, d), h) in gg.iter_mut().zip(chunk).zip(xh) {
                        *o += d * h;
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let n = cols as f64;
                for (r, ((chunk, xh), out)) in g
                    .chunks(cols)
                    .zip(xhat.chunks(cols))
                    .zip(gx.chunks_mut(cols))
                    .enumerate()
                {
                    let dxhat: Vec<f64> = chunk.iter().zip(&gain_v).map(|(d, w)| d * w).collect();
                    let sum: f64 = dxhat.iter().sum();
                    let dot: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for ((o, dh), h) in out.iter_mut().zip(&dxhat).zip(xh) {
                        *o += rstd[r] / n * (n * dh - sum - h * dot);
                    }
                }
            }
        }
        Op::Dropout(a, mask) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, d), m) in ga.iter_mut().zip(g).zip(mask) {
                    *x += d * m;
                }
            }
        }
        Op::ScaleRows(a, s) => {
            let (av, sv) = (&nodes[*a].value, nodes[*s].value.data().to_vec());
            let cols = av.cols();
            let a_data = av.data().to_vec();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, (out, gr)) in ga.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                    out.iter_mut().zip(gr).for_each(|(x, d)| *x += d * sv[r]);
                }
            }
            if let Some(gs) = acc(grads, nodes, *s) {
                for (r, (gr, ar)) in g.chunks(cols).zip(a_data.chunks(cols)).enumerate() {
                    gs[r] += gr.iter().zip(ar).map(|(d, x)| d * x).sum::<f64>();
                }
            }
        }
        Op::Propagate(a, sparse) => {
            let cols = y.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                sparse.transpose_apply_into(g, cols, ga);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let classes = nodes[*logits].value.cols();
            let scale = g[0] / labels.len() as f64;
            if let Some(gl) = acc(grads, nodes, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    /// Value of a 1×1 variable.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.shape(), (1, 1));
        v.data()[0]
    }

    fn unary(&self, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = {
            let v = self.value();
            let data = v.data().iter().map(|&x| f(x)).collect();
            Tensor::from_vec(v.rows(), v.cols(), data).expect("same shape")
        };
        self.tape.push(out, op(self.id), &[self.id])
    }

    fn zip_same(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(dim_err(name, &a, &b));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
        };
        Ok(self.tape.push(out, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "hadamard", Op::Hadamard(self.id, other.id), |a, b| a * b)
    }

    /// Adds a `1×c` row vector to every row.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), row.value());
            if b.rows() != 1 || b.cols() != a.cols() {
                return Err(dim_err("add_row", &a, &b));
            }
            let mut out = a.clone();
            for r in 0..out.rows() {
                out.row_mut(r).iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
            }
            out
        };
        Ok(self.tape.push(out, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(|a| Op::Scale(a, s), |x| s * x)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    /// GeLU, tanh approximation `0.5x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu, gelu)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.cols() != b.rows() {
                return Err(dim_err("matmul", &a, &b));
            }
            let mut out = Tensor::zeros(a.rows(), b.cols());
            matmul_into(a.data(), b.data(), out.data_mut(), a.rows(), a.cols(), b.cols());
            out
        };
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(&self) -> Var<'t> {
        let out = self.value().transpose();
        self.tape.push(out, Op::Transpose(self.id), &[self.id])
    }

    /// Softmax along each row, computed with the row maximum subtracted.
    pub fn row_softmax(&self) -> Var<'t> {
        let out = {
            let v = self.value();
            let mut out = Tensor::zeros(v.rows(), v.cols());
            let cols = v.cols();
            if cols > 0 {
                for (src, dst) in v.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)) {
                    softmax_row(src, dst);
                }
            }
            out
        };
        self.tape.push(out, Op::RowSoftmax(self.id), &[self.id])
    }

    /// Column-wise mean over rows, giving `1×c`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            if v.rows() == 0 {
                return Err(Error::EmptyGraph);
            }
            let mut out = Tensor::zeros(1, v.cols());
            for r in 0..v.rows() {
                out.data_mut().iter_mut().zip(v.row(r)).for_each(|(o, x)| *o += x);
            }
            let inv = 1.0 / v.rows() as f64;
            out.data_mut().iter_mut().for_each(|o| *o *= inv);
            out
        };
        Ok(self.tape.push(out, Op::MeanRows(self.id), &[self.id]))
    }

    /// Column-wise max over rows, giving `1×c`; ties resolve to the first row.
    pub fn max_rows(&self) -> Result<Var<'t>> {
        let (out, argmax) = {
            let v = self.value();
            if v.rows() == 0 {
                return Err(Error::EmptyGraph);
            }
            let mut argmax = vec![0usize; v.cols()];
            let mut out = Tensor::from_vec(1, v.cols(), v.row(0).to_vec())?;
            for r in 1..v.rows() {
                for (c, &x) in v.row(r).iter().enumerate() {
                    if x > out.data()[c] {
                        out.data_mut()[c] = x;
                        argmax[c] = r;
                    }
                }
            }
            (out, argmax)
        };
        Ok(self.tape.push(out, Op::MaxRows(self.id, argmax), &[self.id]))
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat_cols of nothing".into()))?;
        let tape = first.tape;
        let out = {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let rows = values[0].rows();
            for v in &values {
                if v.rows() != rows {
                    return Err(dim_err("concat_cols", &values[0], v));
                }
            }
            let cols: usize = values.iter().map(|v| v.cols()).sum();
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let mut offset = 0;
                for v in &values {
                    let vc = v.cols();
                    out.row_mut(r)[offset..offset + vc].copy_from_slice(v.row(r));
                    offset += vc;
                }
            }
            out
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(out, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Rows `indices` of `self`, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            let mut out = Tensor::zeros(indices.len(), v.cols());
            for (i, &src) in indices.iter().enumerate() {
                if src >= v.rows() {
                    return Err(Error::Index {
                        what: "gather_rows",
                        index: src,
                        len: v.rows(),
                    });
                }
                out.row_mut(i).copy_from_slice(v.row(src));
            }
            out
        };
        Ok(self
            .tape
            .push(out, Op::GatherRows(self.id, indices.to_vec()), &[self.id]))
    }

    /// Row-wise layer normalisation with learnable `1×c` gain and bias.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let (out, xhat, rstd) = {
            let (x, gv, bv) = (self.value(), gain.value(), bias.value());
            let cols = x.cols();
            if gv.shape() != (1, cols) {
                return Err(dim_err("layer_norm", &x, &gv));
            }
            if bv.shape() != (1, cols) {
                return Err(dim_err("layer_norm", &x, &bv));
            }
            let mut out = Tensor::zeros(x.rows(), cols);
            let mut xhat = vec![0.0; x.len()];
            let mut rstd = vec![0.0; x.rows()];
            for r in 0..x.rows() {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[r] = rs;
                for c in 0..cols {
                    let h = (row[c] - mean) * rs;
                    xhat[r * cols + c] = h;
                    out.set(r, c, h * gv.data()[c] + bv.data()[c]);
                }
            }
            (out, xhat, rstd)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            rstd,
        };
        Ok(self.tape.push(out, op, &[self.id, gain.id, bias.id]))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout(&self, p: f64, rng: &mut Rng, train: bool) -> Var<'t> {
        if !train || p <= 0.0 {
            return *self;
        }
        let keep = 1.0 - p;
        let (out, mask) = {
            let v = self.value();
            let mask: Vec<f64> = (0..v.len())
                .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            (Tensor::from_vec(v.rows(), v.cols(), data).expect("same shape"), mask)
        };
        self.tape.push(out, Op::Dropout(self.id, mask), &[self.id])
    }

    /// Multiplies row `r` by `s[r]`, where `s` is `n×1`.
    pub fn scale_rows(&self, s: &Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (a, sv) = (self.value(), s.value());
            if sv.shape() != (a.rows(), 1) {
                return Err(dim_err("scale_rows", &a, &sv));
            }
            let mut out = a.clone();
            for r in 0..out.rows() {
                let f = sv.data()[r];
                out.row_mut(r).iter_mut().for_each(|x| *x *= f);
            }
            out
        };
        Ok(self.tape.push(out, Op::ScaleRows(self.id, s.id), &[self.id, s.id]))
    }

    /// Left-multiplies by a constant sparse matrix.
    pub fn propagate(&self, sparse: &Rc<SparseMatrix>) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            if sparse.cols() != v.rows() {
                return Err(Error::Dimension {
                    op: "propagate",
                    lhs: (sparse.rows(), sparse.cols()),
                    rhs: v.shape(),
                });
            }
            let mut out = Tensor::zeros(sparse.rows(), v.cols());
            sparse.apply_into(v.data(), v.cols(), out.data_mut());
            out
        };
        Ok(self
            .tape
            .push(out, Op::Propagate(self.id, Rc::clone(sparse)), &[self.id]))
    }

    /// Mean negative log-softmax of the labelled class over the rows.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (out, probs) = {
            let v = self.value();
            if labels.len() != v.rows() {
                return Err(Error::Dimension {
                    op: "cross_entropy",
                    lhs: v.shape(),
                    rhs: (labels.len(), 1),
                });
            }
            let classes = v.cols();
            let mut probs = vec![0.0; v.len()];
            let mut loss = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(Error::Index {
                        what: "class label",
                        index: label,
                        len: classes,
                    });
                }
                let row = v.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - row[label];
                softmax_row(row, &mut probs[r * classes..(r + 1) * classes]);
            }
            let n = labels.len().max(1) as f64;
            (Tensor::from_vec(1, 1, vec![loss / n]).expect("scalar"), probs)
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.tape.push(out, op, &[self.id]))
    }

    /// Sum of all entries, as a 1×1 value.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum::<f64>();
        self.tape
            .push(Tensor::from_vec(1, 1, vec![s]).expect("scalar"), Op::Sum(self.id), &[self.id])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_row() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 3));
        let y = x.row_softmax();
        for &p in y.value().data() {
            assert!(approx(p, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_large_logits_are_stable() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1000.0, 0.0]]).unwrap());
        let y = x.row_softmax();
        assert_eq!(y.value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn gelu_center_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 1));
        assert_eq!(x.gelu().scalar(), 0.0);
    }

    #[test]
    fn gather_rows_in_given_order() {
        let tape = Tape::new();
        let m = tape.constant(Tensor::from_rows(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]).unwrap());
        let g = m.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.value().data(), &[3.0, 3.0, 1.0, 1.0]);
        assert!(matches!(m.gather_rows(&[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(1, 4, 2.5));
        let gain = tape.constant(Tensor::full(1, 4, 1.0));
        let bias = tape.constant(Tensor::zeros(1, 4));
        let y = x.layer_norm(&gain, &bias).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 2));
        assert!(approx(x.cross_entropy(&[0]).unwrap().scalar(), 2f64.ln(), 1e-12));
        let y = tape.constant(Tensor::from_rows(&[[10.0, -10.0]]).unwrap());
        let l = y.cross_entropy(&[0]).unwrap().scalar();
        assert!(approx(l, 2.061_153_6e-9, 1e-15), "{l}");
        assert!(matches!(y.cross_entropy(&[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn max_rows_ties_route_to_first() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[1.0, 5.0], [1.0, 2.0]]).unwrap());
        let m = x.max_rows().unwrap();
        assert_eq!(m.value().data(), &[1.0, 5.0]);
        let grads = tape.backward(m.sum()).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(10, 10, 1.0));
        let mut rng = Rng::new(1);
        let same = x.dropout(0.5, &mut rng, false);
        assert_eq!(same.value().data(), x.value().data());
        let d = x.dropout(0.5, &mut rng, true);
        assert!(d.value().data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_masks_reproduce_with_seed() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(4, 8, 1.0));
        let a = x.dropout(0.3, &mut Rng::new(9), true).to_tensor();
        let b = x.dropout(0.3, &mut Rng::new(9), true).to_tensor();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn param_grads_accumulate_into_store() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_rows(&[[2.0]]).unwrap());
        let tape = Tape::new();
        let x = tape.param(&store, w);
        let y = x.hadamard(&x).unwrap();
        let grads = tape.backward(y).unwrap();
        grads.accumulate_into(&mut store, 1.0);
        assert_eq!(store.get(w).grad().unwrap(), &[4.0]);
    }

    #[test]
    fn matmul_dimension_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }
}
