//! Define-by-run reverse-mode autodiff.
//!
//! Every forward pass records onto a fresh [`Tape`]. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] visits it once in reverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_into, matmul_tn_into, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    MulConst { x: Var, mask: Vec<f64> },
    Relu(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Transpose { x: Var, rows: usize, cols: usize },
    ConcatRows(Vec<Var>),
    ConcatCols { parts: Vec<Var>, rows: usize },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { shape, value, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim("dims2", format!("expected 2-D node, got {other:?}"))),
        }
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Records a value that gradients flow into.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        self.push("input", t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Binds a parameter of `store` to this tape. Repeated calls return the
    /// same node, so a parameter shared across windows accumulates one
    /// gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let idx = id.index();
        if self.param_vars.len() <= idx {
            self.param_vars.resize(idx + 1, None);
        }
        if let Some(v) = self.param_vars[idx] {
            return Ok(v);
        }
        let v = self.input(store.get(id))?;
        self.param_vars[idx] = Some(v);
        Ok(v)
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(id.index()).copied().flatten()
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::dim("matmul", format!("{m}x{k} by {br}x{bc} (trans_b={trans_b})")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n, trans_b);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", vec![m, n], out, ng, Op::MatMul { a, b, trans_b })
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(op_name, self.shape(a).to_vec(), out, ng, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::dim("add_bias", "scalar input"))?;
        if self.value(bias).len() != d {
            return Err(Error::dim("add_bias", format!("bias {:?} for last axis {d}", self.shape(bias))));
        }
        let b = self.value(bias);
        let out = self.value(x).chunks(d).flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c)).collect();
        let ng = self.ng(x) || self.ng(bias);
        self.push("add_bias", self.shape(x).to_vec(), out, ng, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        self.push("scale", self.shape(x).to_vec(), out, self.ng(x), Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v + c).collect();
        self.push("add_scalar", self.shape(x).to_vec(), out, self.ng(x), Op::AddScalar { x })
    }

    /// Elementwise product with a constant mask (used by dropout).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::dim("mul_const", format!("mask {} for {:?}", mask.len(), self.shape(x))));
        }
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push("mul_const", self.shape(x).to_vec(), out, self.ng(x), Op::MulConst { x, mask })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        self.push("relu", self.shape(x).to_vec(), out, self.ng(x), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| libm::exp(*v)).collect();
        self.push("exp", self.shape(x).to_vec(), out, self.ng(x), Op::Exp(x))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        self.push("clamp", self.shape(x).to_vec(), out, self.ng(x), Op::Clamp { x, lo, hi })
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(Error::dim("softmax", "empty axis"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).to_vec();
        softmax_strided(&mut out, outer, len, inner);
        self.push("softmax", shape, out, self.ng(x), Op::Softmax { x, outer, len, inner })
    }

    /// Layer normalization over the last axis followed by `gamma`/`beta`.
    ///
    /// The mean is accumulated relative to the first element so that a
    /// constant vector centres to exactly zero and the output is `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim("layer_norm", format!("gamma/beta must have length {d}")));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let pivot = row[0];
            let shift = row.iter().map(|v| v - pivot).sum::<f64>() / d as f64;
            let mean = pivot + shift;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push("layer_norm", self.shape(x).to_vec(), out, ng, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        let v = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v[i * cols + j];
            }
        }
        self.push("transpose", vec![cols, rows], out, self.ng(x), Op::Transpose { x, rows, cols })
    }

    /// Stacks 2-D nodes with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let (_, cols) = self.dims2(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(Error::dim("concat_rows", format!("column mismatch {c} vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_rows", vec![rows, cols], out, ng, Op::ConcatRows(parts.to_vec()))
    }

    /// Joins 2-D nodes with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let (rows, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row mismatch {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_cols", vec![rows, total], out, ng, Op::ConcatCols { parts: parts.to_vec(), rows })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", Vec::new(), vec![s], self.ng(x), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::dim("mean", "empty input"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Vec::new(), vec![m], self.ng(x), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape, out, self.ng(x), Op::Reshape(x))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[r×c]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(logits)?;
        if targets.len() != r {
            return Err(Error::dim("softmax_cross_entropy", format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::dim("softmax_cross_entropy", format!("target {t} out of {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        softmax_strided(&mut probs, r, c, 1);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = &self.value(logits)[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
                lse - row[t]
            })
            .sum::<f64>()
            / r as f64;
        let ng = self.ng(logits);
        self.push(
            "softmax_cross_entropy",
            Vec::new(),
            vec![loss],
            ng,
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        if !grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and stores the result in every parameter of
    /// `store`. Parameters that never reached the loss get zero gradients.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for id in store.ids() {
            let g = self
                .param_var(id)
                .and_then(|v| grads.get(v))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
            store.get_mut(id).set_grad(g)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.shape[1];
                let av = self.value(*a);
                let bv = self.value(*b);
                if *trans_b {
                    // C = A·Bᵀ, B is n×k
                    self.accumulate(grads, *a, |da| matmul_into(g, bv, da, m, n, k, false));
                    self.accumulate(grads, *b, |db| matmul_tn_into(g, av, db, m, n, k));
                } else {
                    self.accumulate(grads, *a, |da| matmul_into(g, bv, da, m, n, k, true));
                    self.accumulate(grads, *b, |db| matmul_tn_into(av, g, db, m, k, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(g).zip(bv).for_each(|((o, gv), y)| *o += gv * y)
                });
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(g).zip(av).for_each(|((o, gv), x)| *o += gv * x)
                });
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, |d| add_into(d, g));
                let w = self.value(*bias).len();
                self.accumulate(grads, *bias, |d| {
                    for row in g.chunks(w) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += v * factor));
            }
            Op::AddScalar { x } => self.accumulate(grads, *x, |d| add_into(d, g)),
            Op::MulConst { x, mask } => {
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(g).zip(mask).for_each(|((o, v), m)| *o += v * m)
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(g).zip(xv).for_each(|((o, v), i)| {
                        if *i > 0.0 {
                            *o += v
                        }
                    })
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).zip(y).for_each(|((o, v), e)| *o += v * e));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(g).zip(xv).for_each(|((o, v), i)| {
                        if *i >= *lo && *i <= *hi {
                            *o += v
                        }
                    })
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                let (outer, len, inner) = (*outer, *len, *inner);
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| o * len * inner + a * inner + i;
                            let s: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                d[at(a)] += y[at(a)] * (g[at(a)] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d_model = self.value(*gamma).len();
                let gv = self.value(*gamma);
                self.accumulate(grads, *gamma, |d| {
                    for (grow, hrow) in g.chunks(d_model).zip(xhat.chunks(d_model)) {
                        d.iter_mut().zip(grow).zip(hrow).for_each(|((o, gg), h)| *o += gg * h);
                    }
                });
                self.accumulate(grads, *beta, |d| {
                    for grow in g.chunks(d_model) {
                        add_into(d, grow);
                    }
                });
                self.accumulate(grads, *x, |d| {
                    let n = d_model as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let sl = r * d_model..(r + 1) * d_model;
                        let grow = &g[sl.clone()];
                        let hrow = &xhat[sl.clone()];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d_model {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        for (j, o) in d[sl].iter_mut().enumerate() {
                            let dh = grow[j] * gv[j];
                            *o += is * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                self.accumulate(grads, *x, |d| {
                    for i in 0..rows {
                        for j in 0..cols {
                            d[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total = node.shape[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |d| {
                        for r in 0..*rows {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::Sum(x) => self.accumulate(grads, *x, |d| d.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |d| add_into(d, g)),
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let r = targets.len() as f64;
                self.accumulate(grads, *logits, |d| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[i * c + j] += g[0] * (probs[i * c + j] - onehot) / r;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

/// In-place softmax over the middle axis of an `outer × len × inner` layout.
pub(crate) fn softmax_strided(v: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * len * inner + a * inner + i;
            let max = (0..len).map(|a| v[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = libm::exp(v[at(a)] - max);
                v[at(a)] = e;
                total += e;
            }
            for a in 0..len {
                v[at(a)] /= total;
            }
        }
    }
}
