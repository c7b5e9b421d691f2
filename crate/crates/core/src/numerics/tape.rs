//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node whose parents already live on the
//! tape, so the node order is a topological order and `backward` is a
//! single reverse sweep. Nodes that cannot reach a gradient-requiring
//! leaf are skipped during the sweep.

use std::collections::BTreeMap;

use super::tensor::{matmul_raw, transpose_raw};
use super::{NumericsError, Tensor};

const LAYER_NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
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
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        src: Var,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Softmax(Var),
    Rope {
        src: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations for one forward/backward pass.
///
/// A tape is owned by a single thread; independent tapes may run in
/// parallel on disjoint data.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every grad-requiring leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies the value of `x` into a fresh node with no parents.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<(), NumericsError> {
        let (xv, rv) = (self.value(x), self.value(row));
        if xv.shape().is_empty() || rv.numel() != xv.last_dim() {
            return Err(mismatch(op, xv, rv));
        }
        Ok(())
    }

    /// Adds a row vector (any shape with `last_dim` elements) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        self.check_row("add_row", x, row)?;
        let r = self.value(row).data();
        let xv = self.value(x);
        let c = r.len();
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// Multiplies every row of `x` elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        self.check_row("mul_row", x, row)?;
        let r = self.value(row).data();
        let xv = self.value(x);
        let c = r.len();
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v *= b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::MulRow(x, row), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat" })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(NumericsError::Axis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", self.value(*first), self.value(*p)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Copies `len` entries starting at `start` along `axis`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(NumericsError::Axis {
                op: "slice",
                axis,
                shape,
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Slice { src: x, axis, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut data = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / c.max(1));
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LayerNorm { src: x, inv_std }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis, stabilized by the row maximum.
    ///
    /// `mask` has one flag per entry of the trailing two axes (`true` =
    /// kept) and is broadcast over leading axes. Masked entries come out
    /// as exactly zero and the remaining entries are normalized among
    /// themselves.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if c == 0 {
            return Err(NumericsError::Empty { op: "softmax" });
        }
        if !xv.all_finite() {
            return Err(NumericsError::NonFinite { op: "softmax" });
        }
        let rows = xv.numel() / c;
        let mask_rows = mask.map(|m| m.len() / c);
        if let (Some(m), Some(mr)) = (mask, mask_rows) {
            if mr == 0 || m.len() % c != 0 || !rows.is_multiple_of(mr) {
                return Err(NumericsError::MaskShape {
                    mask_len: m.len(),
                    shape: xv.shape().to_vec(),
                });
            }
        }
        let mut data = xv.data().to_vec();
        for (r, row) in data.chunks_mut(c).enumerate() {
            let keep: Option<&[bool]> = match (mask, mask_rows) {
                (Some(m), Some(mr)) => {
                    let mrow = r % mr;
                    Some(&m[mrow * c..(mrow + 1) * c])
                }
                _ => None,
            };
            let kept = |j: usize| keep.is_none_or(|k| k[j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::FullyMaskedRow { row: r });
            }
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if kept(j) {
                    *v = (*v - max).exp();
                    total += *v;
                } else {
                    *v = 0.0;
                }
            }
            for (j, v) in row.iter_mut().enumerate() {
                if kept(j) {
                    *v /= total;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Rotates channel pairs `(2j, 2j+1)` of each row by per-row angles.
    ///
    /// `cos` and `sin` hold `rows * width/2` entries in row-major order.
    pub fn rope(&mut self, x: Var, cos: Vec<f64>, sin: Vec<f64>) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if c % 2 != 0 || cos.len() != r * c / 2 || sin.len() != cos.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "rope",
                left: xv.shape().to_vec(),
                right: vec![cos.len()],
            });
        }
        let half = c / 2;
        let mut data = xv.data().to_vec();
        for i in 0..r {
            for j in 0..half {
                let (a, b) = (data[i * c + 2 * j], data[i * c + 2 * j + 1]);
                let (cs, sn) = (cos[i * half + j], sin[i * half + j]);
                data[i * c + 2 * j] = a * cs - b * sn;
                data[i * c + 2 * j + 1] = a * sn + b * cs;
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Rope { src: x, cos, sin }, rg))
    }

    /// Gradients of scalar `loss` with respect to every leaf.
    ///
    /// Leaves that do not influence the loss get a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.insert(Var(i), Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) {
                out.insert(Var(i), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if rg(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if rg(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                if rg(*b) {
                    acc(*b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bv = self.value(*b).data();
                    acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if rg(*b) {
                    let av = self.value(*a).data();
                    acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| s * x).collect()),
            Op::AddRow(x, row) => {
                acc(*x, g.to_vec());
                if rg(*row) {
                    let c = self.value(*row).numel();
                    let mut gr = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    acc(*row, gr);
                }
            }
            Op::MulRow(x, row) => {
                let rv = self.value(*row).data();
                let c = rv.len();
                if rg(*x) {
                    let mut gx = g.to_vec();
                    for chunk in gx.chunks_mut(c) {
                        for (o, r) in chunk.iter_mut().zip(rv) {
                            *o *= r;
                        }
                    }
                    acc(*x, gx);
                }
                if rg(*row) {
                    let xv = self.value(*x).data();
                    let mut gr = vec![0.0; c];
                    for (gc, xc) in g.chunks(c).zip(xv.chunks(c)) {
                        for ((o, gv), xv) in gr.iter_mut().zip(gc).zip(xc) {
                            *o += gv * xv;
                        }
                    }
                    acc(*row, gr);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let pn = self.value(*p).shape()[*axis];
                    if rg(*p) {
                        let mut gp = Vec::with_capacity(outer * pn * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + pn * inner]);
                        }
                        acc(*p, gp);
                    }
                    offset += pn;
                }
            }
            Op::Slice { src, axis, start } => {
                let sv = self.value(*src);
                let (outer, n, inner) = split_axis(sv.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut gs = vec![0.0; sv.numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src_off = o * len * inner;
                    gs[dst..dst + len * inner].copy_from_slice(&g[src_off..src_off + len * inner]);
                }
                acc(*src, gs);
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, transpose_raw(g, r, c));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::LayerNorm { src, inv_std } => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut gx = vec![0.0; y.len()];
                for (r, ((gxr, gr), yr)) in gx
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(y.chunks(c))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, gv), yv) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                acc(*src, gx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                    })
                    .collect();
                acc(*x, gx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::Rope { src, cos, sin } => {
                let c = node.value.last_dim();
                let half = c / 2;
                let mut gx = g.to_vec();
                for (i, row) in gx.chunks_mut(c).enumerate() {
                    for j in 0..half {
                        let (a, b) = (row[2 * j], row[2 * j + 1]);
                        let (cs, sn) = (cos[i * half + j], sin[i * half + j]);
                        row[2 * j] = a * cs + b * sn;
                        row[2 * j + 1] = -a * sn + b * cs;
                    }
                }
                acc(*src, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_gradient_closed_form() {
        let mut tape = Tape::new();
        let xs = vec![1.0, 2.0, -1.0, 0.5];
        let ys = vec![0.0, 3.0, 1.0, 0.5];
        let x = tape.leaf(Tensor::vector(xs.clone()));
        let y = tape.constant(Tensor::vector(ys.clone()));
        let d = tape.sub(x, y).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean(sq);
        let g = tape.backward(loss).unwrap();
        for (i, gv) in g.get(x).unwrap().data().iter().enumerate() {
            assert!((gv - 2.0 * (xs[i] - ys[i]) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::NotScalar { .. })
        ));
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let sa = tape.softmax_lastdim(a, None).unwrap();
        let sb = tape.softmax_lastdim(b, None).unwrap();
        assert_eq!(tape.value(sa).data(), &[0.5, 0.5]);
        assert_eq!(tape.value(sb).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite_and_fully_masked() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(
            tape.softmax_lastdim(a, None),
            Err(NumericsError::NonFinite { .. })
        ));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.softmax_lastdim(b, Some(&[false, false])),
            Err(NumericsError::FullyMaskedRow { row: 0 })
        ));
    }

    #[test]
    fn masked_entries_are_exact_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 5.0, 2.0]]).unwrap());
        let s = tape.softmax_lastdim(a, Some(&[true, false, true])).unwrap();
        assert_eq!(tape.value(s).data()[1], 0.0);
        let kept = tape.value(s).data()[0] + tape.value(s).data()[2];
        assert!((kept - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stop_grad_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -0.5]));
        let s = tape.stop_grad(x);
        assert!(tape.value(s).bit_eq(tape.value(x)));
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -0.5]));
        let s = tape.stop_grad(x);
        let p = tape.mul(x, s).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.5, -0.5]);
    }

    #[test]
    fn concat_and_slice_along_columns() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert!(tape.value(s).bit_eq(tape.value(b)));
        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let p = tape.mul(s, w).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_errors_surface() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.add(a, b).is_err());
        assert!(tape.concat(&[a, b], 0).is_err());
        assert!(tape.slice(a, 1, 2, 2).is_err());
        let odd = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(tape.rope(odd, vec![1.0], vec![0.0]).is_err());
    }
}
