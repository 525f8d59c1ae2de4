//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: the forward value is computed
//! when the op is added, and [`Graph::backward`] walks the tape in reverse
//! accumulating gradients into every node that requires them. Leaves that do
//! not require gradients (frozen weights, data) cut the backward walk short.

use super::attention::{attention_backward, attention_forward, AttentionSpec};
use super::kernels::{self, dot};
use super::param::Parameter;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    RowNorm(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Attention {
        spec: AttentionSpec,
        q: Var,
        k: Var,
        v: Var,
        prompt: Option<(Var, Var)>,
        probs: Vec<T>,
        prompt_probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape over scalars of type `T`.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn grad_buf<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient accumulated into `v` by the last [`Graph::backward`] call.
    /// Nodes the loss does not depend on get an all-zero gradient.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(name, "non-finite forward value"));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Constant built from working-precision data.
    pub fn constant_f32(&mut self, value: &Tensor<f32>) -> Result<Var> {
        self.leaf(value.cast(), false)
    }

    /// Leaf for a [`Parameter`]; gradients are tracked only when it is trainable.
    pub fn param(&mut self, p: &Parameter) -> Result<Var> {
        self.leaf(p.value.cast(), p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::config(format!("matmul shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::config(format!("transpose needs 2-D, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), rg, "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// `x + bias` with `bias` broadcast over every row of the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(Error::config(format!(
                "add_row: bias of {} for rows of {c}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg, "scale")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::config(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::config(format!("concat shapes {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); outer * total * inner];
        let mut offset = 0;
        for p in parts {
            let len = self.shape(*p)[axis];
            let src = self.value(*p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::config(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(&oshape, out)?,
            Op::Slice { x, axis, start },
            rg,
            "slice",
        )
    }

    /// Pick entries of the first axis by index (repeats allowed).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        if idx.is_empty() {
            return Err(Error::config("gather with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::config(format!("gather index {bad} >= {rows}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut oshape = shape;
        oshape[0] = idx.len();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(&oshape, out)?,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
            "gather",
        )
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::config(format!("reduce axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let s = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(s) {
                    *d += v;
                }
            }
        }
        if mean {
            let inv = T::one() / T::of(len as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[x]);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        self.push(
            Tensor::new(&drop_axis(&shape, axis), out)?,
            op,
            rg,
            if mean { "mean_axis" } else { "sum_axis" },
        )
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg, "sum_all")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            kernels::softmax_row(row);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg, "softmax")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::config("layer_norm: affine size mismatch"));
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = self.value(x).clone();
        let rows = out.rows();
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let inv_c = T::one() / T::of(c as f64);
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = T::one() / (var + T::of(LN_EPS)).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[i] + b[i];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            rg,
            "layer_norm",
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            let u = T::of(GELU_C) * (v + T::of(0.044715) * v * v * v);
            T::of(0.5) * v * (T::one() + kernels::tanh_exp(u))
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg, "gelu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg, "tanh")
    }

    /// Euclidean norm of every row: `[.., C] -> [rows]`.
    /// The gradient at a zero row is taken as zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let out: Vec<T> = t.data().chunks(c).map(|r| dot(r, r).sqrt()).collect();
        let n = out.len();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[n], out)?, Op::RowNorm(x), rg, "row_norm")
    }

    /// Scale every row to unit length. A zero row is a numeric fault.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = dot(row, row).sqrt();
            if n == T::zero() {
                return Err(Error::numeric("normalize_rows", "zero-norm row"));
            }
            let inv = T::one() / n;
            row.iter_mut().for_each(|v| *v *= inv);
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::NormalizeRows { x, norms }, rg, "normalize_rows")
    }

    /// Cosine similarity between every row of `a` and every row of `b`:
    /// `[n, d] x [m, d] -> [n, m]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// Row-wise cosine similarity of two equally shaped matrices: `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        let p = self.mul(an, bn)?;
        let last = self.shape(p).len() - 1;
        self.sum_axis(p, last)
    }

    /// Multi-head scaled dot-product attention over `nseq` packed sequences.
    ///
    /// `q`, `k`, `v` are `[nseq * seq, d]`. When `prompt` is given, its
    /// `(keys, values)` are `[nseq * plen, d]` and are attended through a
    /// separate softmax whose output is added to the token branch; an all-zero
    /// value block therefore leaves the output unchanged.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prompt: Option<(Var, Var)>,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let d = self.value(q).cols();
        let rows = spec.nseq * spec.seq;
        for x in [q, k, v] {
            if self.shape(x) != [rows, d] {
                return Err(Error::config(format!(
                    "attention input {:?}, expected [{rows}, {d}]",
                    self.shape(x)
                )));
            }
        }
        if d % spec.heads != 0 {
            return Err(Error::config("attention: d not divisible by heads"));
        }
        if let Some((pk, pv)) = prompt {
            let prow = spec.nseq * spec.plen;
            if spec.plen == 0 || self.shape(pk) != [prow, d] || self.shape(pv) != [prow, d] {
                return Err(Error::config("attention: prompt key/value shape"));
            }
        }
        let pvals = prompt.map(|(pk, pv)| (self.value(pk).data(), self.value(pv).data()));
        let (out, probs, prompt_probs) = attention_forward(
            &spec,
            d,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            pvals,
        );
        let mut deps = vec![q, k, v];
        if let Some((pk, pv)) = prompt {
            deps.push(pk);
            deps.push(pv);
        }
        let rg = self.rg(&deps);
        self.push(
            Tensor::new(&[rows, d], out)?,
            Op::Attention {
                spec,
                q,
                k,
                v,
                prompt,
                probs,
                prompt_probs,
            },
            rg,
            "attention",
        )
    }

    /// Summed cross-entropy `sum_i -log softmax(logits_i)[labels_i]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::config(format!(
                "cross_entropy logits {s:?} for {} labels",
                labels.len()
            )));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::config(format!("label {bad} out of {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            kernels::softmax_row(row);
            loss -= row[y].max(T::min_positive_value()).ln();
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Reverse pass from a one-element `loss`. Gradients from earlier calls
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage("backward needs a scalar loss"));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        let Graph { nodes, grads } = self;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::numeric("backward", format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn backward_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            if let Some(da) = grad_buf(grads, nodes, *a) {
                kernels::matmul_nt_acc(g, val(*b), da, m, n, k);
            }
            if let Some(db) = grad_buf(grads, nodes, *b) {
                kernels::matmul_tn_acc(val(*a), g, db, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (shape(*a)[0], shape(*a)[1]);
            if let Some(da) = grad_buf(grads, nodes, *a) {
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] += g[c * m + r];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for x in [*a, *b] {
                if let Some(d) = grad_buf(grads, nodes, x) {
                    kernels::axpy(T::one(), g, d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = grad_buf(grads, nodes, *a) {
                kernels::axpy(T::one(), g, d);
            }
            if let Some(d) = grad_buf(grads, nodes, *b) {
                kernels::axpy(-T::one(), g, d);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
            if let Some(d) = grad_buf(grads, nodes, *a) {
                for ((dv, &gv), &o) in d.iter_mut().zip(g).zip(&bv) {
                    *dv += gv * o;
                }
            }
            if let Some(d) = grad_buf(grads, nodes, *b) {
                for ((dv, &gv), &o) in d.iter_mut().zip(g).zip(&av) {
                    *dv += gv * o;
                }
            }
        }
        Op::AddRow(x, b) => {
            if let Some(d) = grad_buf(grads, nodes, *x) {
                kernels::axpy(T::one(), g, d);
            }
            if let Some(d) = grad_buf(grads, nodes, *b) {
                let c = d.len();
                for row in g.chunks(c) {
                    kernels::axpy(T::one(), row, d);
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(d) = grad_buf(grads, nodes, *x) {
                kernels::axpy(*s, g, d);
            }
        }
        Op::Reshape(x) => {
            if let Some(d) = grad_buf(grads, nodes, *x) {
                kernels::axpy(T::one(), g, d);
            }
        }
        Op::Concat { parts, axis } => {
            let oshape = nodes[i].value.shape();
            let (outer, total, inner) = split_axis(oshape, *axis);
            let mut offset = 0;
            for p in parts {
                let len = shape(*p)[*axis];
                if let Some(d) = grad_buf(grads, nodes, *p) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        kernels::axpy(
                            T::one(),
                            &g[src..src + len * inner],
                            &mut d[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, full, inner) = split_axis(shape(*x), *axis);
            let len = nodes[i].value.shape()[*axis];
            if let Some(d) = grad_buf(grads, nodes, *x) {
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    kernels::axpy(
                        T::one(),
                        &g[o * len * inner..(o + 1) * len * inner],
                        &mut d[dst..dst + len * inner],
                    );
                }
            }
        }
        Op::Gather { x, idx } => {
            let width: usize = shape(*x)[1..].iter().product();
            if let Some(d) = grad_buf(grads, nodes, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    kernels::axpy(
                        T::one(),
                        &g[r * width..(r + 1) * width],
                        &mut d[src * width..(src + 1) * width],
                    );
                }
            }
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            let (outer, len, inner) = split_axis(shape(*x), *axis);
            let f = if matches!(nodes[i].op, Op::MeanAxis { .. }) {
                T::one() / T::of(len as f64)
            } else {
                T::one()
            };
            if let Some(d) = grad_buf(grads, nodes, *x) {
                for o in 0..outer {
                    for l in 0..len {
                        kernels::axpy(
                            f,
                            &g[o * inner..(o + 1) * inner],
                            &mut d[(o * len + l) * inner..(o * len + l + 1) * inner],
                        );
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(d) = grad_buf(grads, nodes, *x) {
                d.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Softmax(x) => {
            let y = nodes[i].value.data();
            let c = nodes[i].value.cols();
            if let Some(d) = grad_buf(grads, nodes, *x) {
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let s = dot(yr, gr);
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let gv = val(*gamma).to_vec();
            let c = gv.len();
            let inv_c = T::one() / T::of(c as f64);
            let rows = mean.len();
            let mut xhat = vec![T::zero(); xv.len()];
            for r in 0..rows {
                for j in 0..c {
                    xhat[r * c + j] = (xv[r * c + j] - mean[r]) * rstd[r];
                }
            }
            if let Some(dg) = grad_buf(grads, nodes, *gamma) {
                for r in 0..rows {
                    for j in 0..c {
                        dg[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if let Some(db) = grad_buf(grads, nodes, *beta) {
                for r in 0..rows {
                    for j in 0..c {
                        db[j] += g[r * c + j];
                    }
                }
            }
            if let Some(dx) = grad_buf(grads, nodes, *x) {
                let mut dxhat = vec![T::zero(); c];
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    for j in 0..c {
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() * inv_c;
                    let m2 = dot(&dxhat, xr) * inv_c;
                    for j in 0..c {
                        dx[r * c + j] += rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x).to_vec();
            if let Some(d) = grad_buf(grads, nodes, *x) {
                let c = T::of(GELU_C);
                let a = T::of(0.044715);
                let half = T::of(0.5);
                for ((dv, &gv), &v) in d.iter_mut().zip(g).zip(&xv) {
                    let t = kernels::tanh_exp(c * (v + a * v * v * v));
                    let dudx = c * (T::one() + T::of(3.0) * a * v * v);
                    *dv += gv * (half * (T::one() + t) + half * v * (T::one() - t * t) * dudx);
                }
            }
        }
        Op::Tanh(x) => {
            let y = nodes[i].value.data();
            if let Some(d) = grad_buf(grads, nodes, *x) {
                for ((dv, &gv), &t) in d.iter_mut().zip(g).zip(y) {
                    *dv += gv * (T::one() - t * t);
                }
            }
        }
        Op::RowNorm(x) => {
            let xv = val(*x).to_vec();
            let norms = nodes[i].value.data();
            let c = nodes[x.0].value.cols();
            if let Some(d) = grad_buf(grads, nodes, *x) {
                for (r, &n) in norms.iter().enumerate() {
                    if n == T::zero() {
                        continue;
                    }
                    let f = g[r] / n;
                    kernels::axpy(f, &xv[r * c..(r + 1) * c], &mut d[r * c..(r + 1) * c]);
                }
            }
        }
        Op::NormalizeRows { x, norms } => {
            let y = nodes[i].value.data();
            let c = nodes[i].value.cols();
            if let Some(d) = grad_buf(grads, nodes, *x) {
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let s = dot(yr, gr);
                    let inv = T::one() / n;
                    for j in 0..c {
                        d[r * c + j] += (gr[j] - yr[j] * s) * inv;
                    }
                }
            }
        }
        Op::Attention {
            spec,
            q,
            k,
            v,
            prompt,
            probs,
            prompt_probs,
        } => {
            let d = nodes[q.0].value.cols();
            let pvals = prompt.map(|(pk, pv)| (val(pk), val(pv)));
            let grads_local = attention_backward(
                spec,
                d,
                g,
                val(*q),
                val(*k),
                val(*v),
                pvals,
                probs,
                prompt_probs,
            );
            let mut targets = vec![*q, *k, *v];
            if let Some((pk, pv)) = prompt {
                targets.push(*pk);
                targets.push(*pv);
            }
            for (t, local) in targets.into_iter().zip(grads_local) {
                if let Some(dst) = grad_buf(grads, nodes, t) {
                    kernels::axpy(T::one(), &local, dst);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = nodes[logits.0].value.cols();
            if let Some(d) = grad_buf(grads, nodes, *logits) {
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { T::one() } else { T::zero() };
                        d[r * c + j] += g[0] * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
    }
}
