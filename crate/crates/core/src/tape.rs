//! Reverse-mode differentiation over a linear operation record.
//!
//! Every op appends one node holding its output value plus whatever it needs
//! to replay the adjoint. `backward` walks the nodes in exact reverse order.
//! A tape may run `backward` once; call [`Tape::reset`] before running it again.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad, gelu_scalar, gemm_acc, gemm_at_acc, softmax_in_place, transpose, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head attention call over `batch` sequences of
/// `len` positions. `pad[b * len + t]` marks padding keys.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub causal: bool,
    pub pad: Vec<bool>,
}

impl AttentionSpec {
    #[inline]
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        !self.pad[b * self.len + j] && (!self.causal || j <= i)
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MulConst(Var, Vec<F>),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    Gather { table: Var, index: Vec<usize> },
    ConcatRows(Var, Var),
    Sum(Var),
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<F>, drop: Option<Vec<F>> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
    visited: Vec<usize>,
}

/// Inverted-dropout multiplier mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<F: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - rate));
    (0..len).map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep }).collect()
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false, visited: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t`. Gradients reach it only if `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.nodes.push(Node { value: t.clone(), op: Op::Leaf, needs_grad: t.requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Node indices in the order the last `backward` visited them.
    pub fn backward_order(&self) -> &[usize] {
        &self.visited
    }

    /// Drops every node recorded after the first `len`, e.g. between
    /// independent inference chunks that share parameter leaves.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.visited.clear();
        self.backward_done = false;
    }

    fn out_shape(a: &Tensor<F>, last: usize) -> Vec<usize> {
        let mut s = a.shape().to_vec();
        *s.last_mut().unwrap() = last;
        s
    }

    /// `a[..×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return shape_err(format!("matmul {:?} x {:?}", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![F::zero(); m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let t = Tensor::new(Self::out_shape(av, n), out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[..×k] · b[n×k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.cols() {
            return shape_err(format!("matmul_bt {:?} x {:?}T", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let bt = transpose(bv.data(), n, k);
        let mut out = vec![F::zero(); m * n];
        gemm_acc(av.data(), &bt, &mut out, m, k, n);
        let t = Tensor::new(Self::out_shape(av, n), out)?;
        Ok(self.push(t, Op::MatMulBt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!("{what} {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`c` bias to every row of `x[..×c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return shape_err(format!("add_row {:?} + {:?}", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Elementwise product with a non-differentiable multiplier (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Vec<F>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return shape_err(format!("mask of {} for tensor of {}", mask.len(), av.len()));
        }
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulConst(a, mask), &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu_scalar(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.max(F::zero())).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(t, Op::Relu(a), &[a])
    }

    /// Normalizes each vector along the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d {
            return shape_err(format!("layer_norm width {d} with gain {:?}", gv.shape()));
        }
        let rows = xv.rows();
        let eps = F::of(LAYER_NORM_EPS);
        let dn = F::of(d as f64);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(av.cols()) {
            softmax_in_place(row);
        }
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, classes) = (lv.rows(), lv.cols());
        if targets.len() != b {
            return shape_err(format!("{} targets for {b} logit rows", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index(format!("target {bad} with {classes} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            total += lse - row[t];
            softmax_in_place(&mut probs[r * classes..(r + 1) * classes]);
        }
        let loss = Tensor::scalar(total / F::of(b as f64));
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(loss, op, &[logits]))
    }

    /// Row lookup: output row `i` is `table[index[i]]`.
    pub fn gather(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("row {bad} of table with {v} rows")));
        }
        if index.is_empty() {
            return shape_err("gather with empty index".into());
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![index.len(), d], data)?;
        Ok(self.push(t, Op::Gather { table, index: index.to_vec() }, &[table]))
    }

    /// Stacks the rows of `a` above the rows of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return shape_err(format!("concat {:?} with {:?}", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let t = Tensor::new(vec![av.rows() + bv.rows(), av.cols()], data)?;
        Ok(self.push(t, Op::ConcatRows(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Fused scaled dot-product attention over `heads` heads.
    ///
    /// `q`, `k`, `v` are `[batch·len × d]`. Disallowed keys (padding, or later
    /// positions under `causal`) get zero weight; a query with no allowed key
    /// outputs zeros. `drop`, when given, multiplies the post-softmax weights.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec, drop: Option<Vec<F>>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (bsz, n, h) = (spec.batch, spec.len, spec.heads);
        let d = qv.cols();
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rows() != bsz * n {
            return shape_err(format!("attention q{:?} k{:?} v{:?}", qv.shape(), kv.shape(), vv.shape()));
        }
        if h == 0 || d % h != 0 || spec.pad.len() != bsz * n {
            return shape_err(format!("attention width {d} heads {h} pad {}", spec.pad.len()));
        }
        if let Some(m) = &drop {
            if m.len() != bsz * h * n * n {
                return shape_err(format!("attention dropout mask of {}", m.len()));
            }
        }
        let dh = d / h;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut probs = vec![F::zero(); bsz * h * n * n];
        let mut out = vec![F::zero(); bsz * n * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..bsz {
            for hh in 0..h {
                let off = hh * dh;
                for i in 0..n {
                    let base = ((b * h + hh) * n + i) * n;
                    let qi = &qd[(b * n + i) * d + off..][..dh];
                    let mut max = F::neg_infinity();
                    for j in 0..n {
                        if spec.allowed(b, i, j) {
                            let kj = &kd[(b * n + j) * d + off..][..dh];
                            let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<F>() * scale;
                            probs[base + j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == F::neg_infinity() {
                        continue;
                    }
                    let mut total = F::zero();
                    for j in 0..n {
                        if spec.allowed(b, i, j) {
                            let e = (probs[base + j] - max).exp();
                            probs[base + j] = e;
                            total += e;
                        }
                    }
                    let oi = &mut out[(b * n + i) * d + off..][..dh];
                    for j in 0..n {
                        if spec.allowed(b, i, j) {
                            let p = probs[base + j] / total;
                            probs[base + j] = p;
                            let a = match &drop {
                                Some(m) => p * m[base + j],
                                None => p,
                            };
                            let vj = &vd[(b * n + j) * d + off..][..dh];
                            for (o, &x) in oi.iter_mut().zip(vj) {
                                *o += a * x;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(qv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Attention { q, k, v, spec, probs, drop }, &[q, k, v]))
    }

    /// Populates gradients of `loss` with respect to every node that needs one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape; reset it first".into()));
        }
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward needs a scalar, got {:?}", self.value(loss).shape()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.visited.clear();
        self.grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.visited.push(id);
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, g: &[F]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        fn with<F: Scalar>(grads: &mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var, f: impl FnOnce(&mut [F])) {
            if nodes[v.0].needs_grad {
                let n = nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]));
            }
        }
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                with(grads, nodes, *a, |ga| {
                    let bt = transpose(bv.data(), k, n);
                    gemm_acc(g, &bt, ga, m, n, k);
                });
                with(grads, nodes, *b, |gb| gemm_at_acc(av.data(), g, gb, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                with(grads, nodes, *a, |ga| gemm_acc(g, bv.data(), ga, m, n, k));
                with(grads, nodes, *b, |gb| gemm_at_acc(g, av.data(), gb, m, n, k));
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    with(grads, nodes, *x, |gx| {
                        for (o, &v) in gx.iter_mut().zip(g) {
                            *o += v;
                        }
                    });
                }
            }
            Op::AddRow(x, bias) => {
                with(grads, nodes, *x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                with(grads, nodes, *bias, |gb| {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with(grads, nodes, *a, |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *o += gv * y;
                    }
                });
                with(grads, nodes, *b, |gb| {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av.data()) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(a, c) => with(grads, nodes, *a, |ga| {
                for (o, &gv) in ga.iter_mut().zip(g) {
                    *o += gv * *c;
                }
            }),
            Op::MulConst(a, mask) => with(grads, nodes, *a, |ga| {
                for ((o, &gv), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            }),
            Op::Gelu(a) => {
                let av = val(*a);
                with(grads, nodes, *a, |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                        *o += gv * gelu_grad(x);
                    }
                });
            }
            Op::Relu(a) => {
                let av = val(*a);
                with(grads, nodes, *a, |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                        if x > F::zero() {
                            *o += gv;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gainv = val(*gain).data();
                let d = gainv.len();
                let dn = F::of(d as f64);
                with(grads, nodes, *gain, |gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                with(grads, nodes, *bias, |gb| {
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                });
                with(grads, nodes, *x, |gx| {
                    let mut dxhat = vec![F::zero(); d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            dxhat[j] = grow[j] * gainv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hrow[j];
                        }
                        let k = rstd[r] / dn;
                        for j in 0..d {
                            gx[r * d + j] += k * (dn * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &nodes[id].value;
                let c = y.cols();
                with(grads, nodes, *a, |ga| {
                    for (r, (grow, yrow)) in g.chunks(c).zip(y.data().chunks(c)).enumerate() {
                        let dot = grow.iter().zip(yrow).map(|(&u, &v)| u * v).sum::<F>();
                        for j in 0..c {
                            ga[r * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = val(*logits).cols();
                let coeff = g[0] / F::of(targets.len() as f64);
                with(grads, nodes, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let mut p = probs[r * c + j];
                            if j == t {
                                p -= F::one();
                            }
                            gl[r * c + j] += coeff * p;
                        }
                    }
                });
            }
            Op::Gather { table, index } => {
                let d = val(*table).cols();
                with(grads, nodes, *table, |gt| {
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).len();
                with(grads, nodes, *a, |ga| {
                    for (o, &v) in ga.iter_mut().zip(&g[..split]) {
                        *o += v;
                    }
                });
                with(grads, nodes, *b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(&g[split..]) {
                        *o += v;
                    }
                });
            }
            Op::Sum(a) => with(grads, nodes, *a, |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Attention { q, k, v, spec, probs, drop } => {
                attention_backward(grads, nodes, g, (*q, *k, *v), spec, probs, drop.as_deref());
            }
        }
    }
}

fn attention_backward<F: Scalar>(
    grads: &mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    g: &[F],
    (q, k, v): (Var, Var, Var),
    spec: &AttentionSpec,
    probs: &[F],
    drop: Option<&[F]>,
) {
    let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
    let d = nodes[q.0].value.cols();
    let (bsz, n, h) = (spec.batch, spec.len, spec.heads);
    let dh = d / h;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut gq = vec![F::zero(); qd.len()];
    let mut gk = vec![F::zero(); kd.len()];
    let mut gv = vec![F::zero(); vd.len()];
    let mut dp = vec![F::zero(); n];
    for b in 0..bsz {
        for hh in 0..h {
            let off = hh * dh;
            for i in 0..n {
                let base = ((b * h + hh) * n + i) * n;
                let go = &g[(b * n + i) * d + off..][..dh];
                let mut weighted = F::zero();
                for j in 0..n {
                    dp[j] = F::zero();
                    if !spec.allowed(b, i, j) {
                        continue;
                    }
                    let m = drop.map_or(F::one(), |m| m[base + j]);
                    let a = probs[base + j] * m;
                    let vj = &vd[(b * n + j) * d + off..][..dh];
                    let da = go.iter().zip(vj).map(|(&x, &y)| x * y).sum::<F>();
                    let gvj = &mut gv[(b * n + j) * d + off..][..dh];
                    for (o, &x) in gvj.iter_mut().zip(go) {
                        *o += a * x;
                    }
                    dp[j] = da * m;
                    weighted += probs[base + j] * dp[j];
                }
                for j in 0..n {
                    if !spec.allowed(b, i, j) {
                        continue;
                    }
                    let ds = probs[base + j] * (dp[j] - weighted) * scale;
                    let qrow = (b * n + i) * d + off;
                    let krow = (b * n + j) * d + off;
                    for t in 0..dh {
                        gq[qrow + t] += ds * kd[krow + t];
                        gk[krow + t] += ds * qd[qrow + t];
                    }
                }
            }
        }
    }
    for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
        if nodes[var.0].needs_grad {
            let len = buf.len();
            let slot = grads[var.0].get_or_insert_with(|| vec![F::zero(); len]);
            for (o, x) in slot.iter_mut().zip(buf) {
                *o += x;
            }
        }
    }
}
