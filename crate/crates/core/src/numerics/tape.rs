//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every op as a node holding its output value and enough
//! saved state to run the op's adjoint. [`Var`] is a plain index into the tape.
//! [`Tape::backward`] walks the nodes in reverse creation order (which is a
//! topological order) exactly once and returns gradients for every leaf that
//! was registered with `requires_grad`.
//!
//! Broadcasting is limited to leading-axis expansion: a binary op accepts
//! operands whose shapes are equal or where one shape is a suffix of the other.

use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is repeated over the leading axes of lhs.
    Rhs,
    /// lhs is repeated over the leading axes of rhs.
    Lhs,
}

/// Cos/sin tables for rotating consecutive value pairs, one row per token.
#[derive(Clone, Debug)]
pub struct PairRotation {
    pub tokens: usize,
    /// Number of pairs in the rotated (last) axis.
    pub pairs: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        extents: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        inner: usize,
        extent: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: Var,
        index: Arc<Vec<usize>>,
        row: usize,
    },
    Softmax(Var),
    Sum(Var),
    SumAxis {
        x: Var,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Rotate(Var, Arc<PairRotation>),
    Map(Var, fn(f64) -> f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the tape's tracked leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or an error if `v` was not a tracked leaf.
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.get(v)
            .ok_or_else(|| invalid(format!("no gradient recorded for node {}", v.0)))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `tanh` through a single `exp`; libm's version is several times slower.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `f(long[i], short[i % short.len()])`, with `short.len()` dividing `long.len()`.
fn cycle_map(long: &[f64], short: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(long.len());
    for c in long.chunks(short.len()) {
        out.extend(c.iter().zip(short).map(|(&x, &y)| f(x, y)));
    }
    out
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    if a == b {
        Ok((a.to_vec(), Bcast::Same))
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok((a.to_vec(), Bcast::Rhs))
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok((b.to_vec(), Bcast::Lhs))
    } else {
        Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Sums `g` (length a multiple of `n`) down to length `n` over its leading repeats.
fn reduce_leading(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(&src) {
                *a += b;
            }
        }
        None => *dst = Some(src),
    }
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

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_raw(t, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(Tensor::from_parts(shape, data), op, rg))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (shape, bc) = broadcast(name, self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.data(a), self.data(b));
        let data: Vec<f64> = match bc {
            Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Rhs => cycle_map(ad, bd, f),
            Bcast::Lhs => cycle_map(bd, ad, |y, x| f(x, y)),
        };
        self.push(name, shape, data, mk(a, b, bc), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, data, Op::Scale(x, s), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v + s).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, data, Op::AddScalar(x), &[x])
    }

    /// Matrix product over the last two axes.
    ///
    /// `a: [.., m, k]` with `b: [k, n]` (shared weight) or `b: [.., k, n]` with
    /// the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && &sb[..sb.len() - 2] != lead {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        if shared_b {
            kernels::gemm(ad, bd, &mut out, batch * m, k, n);
        } else {
            for i in 0..batch {
                kernels::gemm(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_b,
        };
        self.push("matmul", shape, out, op, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push_raw(t, Op::Reshape(x), rg))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid(format!("permute: {perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (out_shape, data) = kernels::permute(self.data(x), &shape, perm);
        self.push("permute", out_shape, data, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().ok_or_else(|| invalid("concat of nothing"))?.0)
            .map(|n| n.value.shape().to_vec())
            .unwrap();
        if axis >= first.len() {
            return Err(invalid(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            extents.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                let d = self.data(p);
                data.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let op = Op::Concat {
            parts: parts.to_vec(),
            outer,
            inner,
            extents,
        };
        self.push("concat", shape, data, op, parts)
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(format!(
                "narrow: range {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let op = Op::Narrow {
            x,
            outer,
            inner,
            extent,
            start,
            len,
        };
        self.push("narrow", out_shape, data, op, &[x])
    }

    /// Rows of `x` (axis 0) picked by `index`; output axis 0 has `index.len()` rows.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index.is_empty() {
            return Err(invalid("gather_rows needs rank >= 1 and a non-empty index"));
        }
        let rows = shape[0];
        let row: usize = shape[1..].iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(invalid(format!("gather_rows: index {bad} out of {rows} rows")));
        }
        let d = self.data(x);
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index.iter() {
            data.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        self.push("gather_rows", out_shape, data, Op::GatherRows { x, index, row }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| invalid("softmax of a scalar"))?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push("softmax", shape, data, Op::Softmax(x), &[x])
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid(format!("sum_axis {axis} on {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let d = self.data(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for e in 0..extent {
                let src = &d[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let op = Op::SumAxis {
            x,
            outer,
            extent,
            inner,
        };
        self.push("sum_axis", out_shape, data, op, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let extent = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| invalid(format!("mean_axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / extent as f64)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| invalid("layer_norm of a scalar"))?;
        let d = self.data(x);
        let mut data = Vec::with_capacity(d.len());
        let mut rstd = Vec::with_capacity(d.len() / n);
        for row in d.chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            data.extend(row.iter().map(|v| (v - mu) * r));
        }
        self.push("layer_norm", shape, data, Op::LayerNorm { x, rstd }, &[x])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, data, op, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v < 0.0) {
            return Err(invalid("sqrt of a negative value"));
        }
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    /// Element-wise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        self.unary("map", x, f, Op::Map(x, df))
    }

    /// Rotates consecutive pairs of the last axis by per-token angles.
    ///
    /// `x` has token-major layout `[tokens, .., 2 * pairs]`; every group of
    /// `2 * pairs` values within a token shares that token's table row.
    pub fn rotate_pairs(&mut self, x: Var, rot: Arc<PairRotation>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = 2 * rot.pairs;
        if shape.first() != Some(&rot.tokens) || shape.last() != Some(&width) {
            return Err(Error::Shape {
                op: "rotate_pairs",
                lhs: shape,
                rhs: vec![rot.tokens, width],
            });
        }
        let data = rotate(self.data(x), &rot, false);
        self.push("rotate_pairs", shape, data, Op::Rotate(x, rot), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut g: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        g.resize_with(loss.0 + 1, || None);
        g[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = Vec::new();
        out.resize_with(self.nodes.len(), || None);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let grad = g[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                out[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), grad));
                continue;
            }
            let Some(gy) = g[i].take() else { continue };
            self.adjoint(node, &gy, &mut g);
        }
        // Tracked leaves created after the loss node never contribute.
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adjoint(&self, node: &Node, gy: &[f64], g: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    let ga = match bc {
                        Bcast::Lhs => reduce_leading(gy, self.value(*a).len()),
                        _ => gy.to_vec(),
                    };
                    add_into(&mut g[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = match bc {
                        Bcast::Rhs => reduce_leading(gy, self.value(*b).len()),
                        _ => gy.to_vec(),
                    };
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    add_into(&mut g[b.0], gb);
                }
            }
            Op::Mul(a, b, bc) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let (na, nb) = (ad.len(), bd.len());
                if self.wants(*a) {
                    let full: Vec<f64> = cycle_map(gy, bd, |v, y| v * y);
                    let ga = if *bc == Bcast::Lhs { reduce_leading(&full, na) } else { full };
                    add_into(&mut g[a.0], ga);
                }
                if self.wants(*b) {
                    let full: Vec<f64> = cycle_map(gy, ad, |v, x| v * x);
                    let gb = if *bc == Bcast::Rhs { reduce_leading(&full, nb) } else { full };
                    add_into(&mut g[b.0], gb);
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    add_into(&mut g[x.0], gy.iter().map(|v| v * s).collect());
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(&mut g[x.0], gy.to_vec());
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if *shared_b {
                    let rows = batch * m;
                    if self.wants(*a) {
                        let bt = kernels::transpose(bd, k, n);
                        let mut ga = vec![0.0; rows * k];
                        kernels::gemm(gy, &bt, &mut ga, rows, n, k);
                        add_into(&mut g[a.0], ga);
                    }
                    if self.wants(*b) {
                        let at = kernels::transpose(ad, rows, k);
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(&at, gy, &mut gb, k, rows, n);
                        add_into(&mut g[b.0], gb);
                    }
                } else {
                    if self.wants(*a) {
                        let mut ga = vec![0.0; batch * m * k];
                        for i in 0..batch {
                            let bt = kernels::transpose(&bd[i * k * n..(i + 1) * k * n], k, n);
                            kernels::gemm(
                                &gy[i * m * n..(i + 1) * m * n],
                                &bt,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        add_into(&mut g[a.0], ga);
                    }
                    if self.wants(*b) {
                        let mut gb = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            let at = kernels::transpose(&ad[i * m * k..(i + 1) * m * k], m, k);
                            kernels::gemm(
                                &at,
                                &gy[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                        add_into(&mut g[b.0], gb);
                    }
                }
            }
            Op::Permute(x, perm) => {
                if self.wants(*x) {
                    let (_, gx) = kernels::permute(gy, node.value.shape(), &kernels::invert_perm(perm));
                    add_into(&mut g[x.0], gx);
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
                extents,
            } => {
                let total: usize = extents.iter().sum();
                let mut offset = 0;
                for (&p, &e) in parts.iter().zip(extents) {
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * e * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&gy[base..base + e * inner]);
                        }
                        add_into(&mut g[p.0], gp);
                    }
                    offset += e;
                }
            }
            Op::Narrow {
                x,
                outer,
                inner,
                extent,
                start,
                len,
            } => {
                if self.wants(*x) {
                    let gx = g[x.0].get_or_insert_with(|| vec![0.0; outer * extent * inner]);
                    for o in 0..*outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        for (a, b) in gx[dst..dst + len * inner].iter_mut().zip(&gy[src..src + len * inner]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::GatherRows { x, index, row } => {
                if self.wants(*x) {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (r, &i) in index.iter().enumerate() {
                        let dst = &mut gx[i * row..(i + 1) * row];
                        for (a, b) in dst.iter_mut().zip(&gy[r * row..(r + 1) * row]) {
                            *a += b;
                        }
                    }
                    add_into(&mut g[x.0], gx);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let n = *node.value.shape().last().unwrap();
                    let mut gx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(n).zip(gy.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        gx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                    }
                    add_into(&mut g[x.0], gx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    add_into(&mut g[x.0], vec![gy[0]; self.value(*x).len()]);
                }
            }
            Op::SumAxis {
                x,
                outer,
                extent,
                inner,
            } => {
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(outer * extent * inner);
                    for o in 0..*outer {
                        for _ in 0..*extent {
                            gx.extend_from_slice(&gy[o * inner..(o + 1) * inner]);
                        }
                    }
                    add_into(&mut g[x.0], gx);
                }
            }
            Op::LayerNorm { x, rstd } => {
                if self.wants(*x) {
                    let n = *node.value.shape().last().unwrap();
                    let mut gx = Vec::with_capacity(y.len());
                    for ((yr, gr), r) in y.chunks(n).zip(gy.chunks(n)).zip(rstd) {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        gx.extend(yr.iter().zip(gr).map(|(yv, gv)| r * (gv - mg - yv * mgy)));
                    }
                    add_into(&mut g[x.0], gx);
                }
            }
            Op::Gelu(x) => self.elementwise(*x, y, gy, g, |xv, _| gelu_grad(xv)),
            Op::Silu(x) => self.elementwise(*x, y, gy, g, |xv, _| {
                let s = sigmoid(xv);
                s * (1.0 + xv * (1.0 - s))
            }),
            Op::Sigmoid(x) => self.elementwise(*x, y, gy, g, |_, yv| yv * (1.0 - yv)),
            Op::Softplus(x) => self.elementwise(*x, y, gy, g, |xv, _| sigmoid(xv)),
            Op::Abs(x) => self.elementwise(*x, y, gy, g, |xv, _| {
                if xv > 0.0 {
                    1.0
                } else if xv < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Square(x) => self.elementwise(*x, y, gy, g, |xv, _| 2.0 * xv),
            Op::Sqrt(x) => self.elementwise(*x, y, gy, g, |_, yv| 0.5 / yv),
            Op::Map(x, df) => {
                let df = *df;
                self.elementwise(*x, y, gy, g, |xv, _| df(xv))
            }
            Op::Rotate(x, rot) => {
                if self.wants(*x) {
                    add_into(&mut g[x.0], rotate(gy, rot, true));
                }
            }
        }
    }

    fn elementwise(
        &self,
        x: Var,
        y: &[f64],
        gy: &[f64],
        g: &mut [Option<Vec<f64>>],
        d: impl Fn(f64, f64) -> f64,
    ) {
        if !self.wants(x) {
            return;
        }
        let gx = self
            .data(x)
            .iter()
            .zip(y)
            .zip(gy)
            .map(|((&xv, &yv), &gv)| gv * d(xv, yv))
            .collect();
        add_into(&mut g[x.0], gx);
    }
}

/// Applies the pair rotation (or its inverse) to token-major data.
fn rotate(x: &[f64], rot: &PairRotation, inverse: bool) -> Vec<f64> {
    let width = 2 * rot.pairs;
    let per_token = x.len() / rot.tokens;
    let mut out = vec![0.0; x.len()];
    for t in 0..rot.tokens {
        let cos = &rot.cos[t * rot.pairs..(t + 1) * rot.pairs];
        let sin = &rot.sin[t * rot.pairs..(t + 1) * rot.pairs];
        let src = &x[t * per_token..(t + 1) * per_token];
        let dst = &mut out[t * per_token..(t + 1) * per_token];
        for (sv, dv) in src.chunks(width).zip(dst.chunks_mut(width)) {
            for i in 0..rot.pairs {
                let (a, b) = (sv[2 * i], sv[2 * i + 1]);
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                dv[2 * i] = a * c - b * s;
                dv[2 * i + 1] = a * s + b * c;
            }
        }
    }
    out
}
