//! Reverse-mode differentiation over a linear operation tape.
//!
//! A [`Graph`] records every operation applied to its variables. Parameter
//! leaves are borrowed, not copied; only trainable parameters are tracked.
//! [`Graph::backward`] replays the tape in reverse and returns the gradient
//! of a scalar loss with respect to every trainable parameter that reached it.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::{softmax_strided, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which queries may attend to which keys.
///
/// Attention runs independently within each of `groups` blocks; block `b`
/// owns query rows `b*queries..(b+1)*queries` and key rows
/// `b*keys..(b+1)*keys`. `allowed` is row-major `groups x queries x keys`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub groups: usize,
    pub queries: usize,
    pub keys: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    /// Every query sees the same set of attendable keys.
    pub fn from_keys(queries: usize, attendable: &[bool]) -> Self {
        let mut allowed = Vec::with_capacity(queries * attendable.len());
        for _ in 0..queries {
            allowed.extend_from_slice(attendable);
        }
        AttnMask { groups: 1, queries, keys: attendable.len(), allowed }
    }

    /// Query `i` sees key `j` iff `j <= i` and `attendable[j]`.
    pub fn causal(attendable: &[bool]) -> Self {
        Self::causal_grouped(1, attendable)
    }

    /// Independent causal masks over `groups` equal-length sequences laid
    /// out back to back in `attendable`.
    pub fn causal_grouped(groups: usize, attendable: &[bool]) -> Self {
        let n = if groups == 0 { 0 } else { attendable.len() / groups };
        let mut allowed = vec![false; groups * n * n];
        for b in 0..groups {
            for i in 0..n {
                for j in 0..=i {
                    allowed[(b * n + i) * n + j] = attendable[b * n + j];
                }
            }
        }
        AttnMask { groups, queries: n, keys: n, allowed }
    }

    pub fn full(queries: usize, keys: usize) -> Self {
        AttnMask { groups: 1, queries, keys, allowed: vec![true; queries * keys] }
    }

    #[inline]
    pub fn get(&self, group: usize, q: usize, k: usize) -> bool {
        self.allowed[(group * self.queries + q) * self.keys + k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `-log softmax(z)[label]`
    Softmax,
    /// Sum of per-class binary cross-entropies against the one-hot label.
    Sigmoid,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { a: Var, c: T },
    Swish { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: AttnMask, probs: Vec<T> },
    RepeatRows { a: Var, reps: usize },
    SelectRow { a: Var, row: usize },
    ConcatRows { parts: Vec<Var> },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
    Sum { a: Var },
    Reshape { a: Var },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<&'a str>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: &str, grad: Tensor<T>) {
        self.map.insert(String::from(name), grad);
    }

    /// Copies each gradient into the matching parameter's `grad` buffer.
    pub fn write_into(&self, p: &mut Parameter<T>) -> Result<bool> {
        match self.map.get(p.name()) {
            Some(g) => {
                p.set_grad(g.clone())?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn accumulate(&mut self, name: &str, shape: &[usize], g: &[T]) {
        match self.map.get_mut(name) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            None => {
                let t = Tensor::new(shape.to_vec(), g.to_vec()).expect("gradient shape");
                self.map.insert(String::from(name), t);
            }
        }
    }
}

/// Recording context for one forward/backward pass.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Result<Var> {
        t.check_finite("constant")?;
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, requires_grad: false, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Borrows a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, p: &'a Parameter<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(p.value()),
            op: Op::Leaf,
            requires_grad: p.trainable,
            param: if p.trainable { Some(p.name()) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a[..., k] @ b[k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.rank() == 0 || av.last_dim() != bv.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} @ {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.rows(), bv.shape()[0], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, rg, "matmul")
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 1 || av.last_dim() != bv.len() {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let d = bv.len();
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::AddBias { a, b }, rg, "add_bias")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg, "add")
    }

    /// Sum of same-shaped variables, accumulated left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or(Error::Empty("add_all"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale { a, c }, rg, "scale")
    }

    /// `x * sigmoid(x)`
    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x * crate::tensor::sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(t, Op::Swish { a }, rg, "swish")
    }

    /// Normalizes the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let dn = T::from_usize(d);
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg, "layer_norm")
    }

    /// Scaled dot-product attention over `heads` equal slices of the model
    /// dimension. Disallowed (query, key) pairs get zero weight and are never read.
    /// A query with no allowed key (a padded patch preceded only by padding)
    /// gets a zero output; callers never read such rows as keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: AttnMask, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2 {
            return Err(Error::shape("attention", "q, k, v must be matrices"));
        }
        let d = qv.shape()[1];
        if kv.shape()[1] != d || vv.shape() != kv.shape() {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model dim {} not divisible by {} heads", d, heads)));
        }
        let (groups, nq, nk) = (mask.groups, mask.queries, mask.keys);
        if groups * nq != qv.shape()[0] || groups * nk != kv.shape()[0] || mask.allowed.len() != groups * nq * nk {
            return Err(Error::shape(
                "attention",
                format!("mask {}x{}x{} for q {:?}, k {:?}", groups, nq, nk, qv.shape(), kv.shape()),
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).sqrt();
        let mut probs = vec![T::zero(); groups * heads * nq * nk];
        let mut out = vec![T::zero(); groups * nq * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..nq {
                    let qr = (b * nq + i) * d + off;
                    let pb = ((b * heads + h) * nq + i) * nk;
                    let p = &mut probs[pb..pb + nk];
                    let qi = &qd[qr..qr + dh];
                    let mut max = T::neg_infinity();
                    for j in 0..nk {
                        if mask.get(b, i, j) {
                            let kr = (b * nk + j) * d + off;
                            let s = dot(qi, &kd[kr..kr + dh]) * scale;
                            p[j] = s;
                            if s > max {
                                max = s;
                            }
                        }
                    }
                    let mut sum = T::zero();
                    for j in 0..nk {
                        if mask.get(b, i, j) {
                            let e = (p[j] - max).exp();
                            p[j] = e;
                            sum = sum + e;
                        }
                    }
                    let o = &mut out[qr..qr + dh];
                    for j in 0..nk {
                        if mask.get(b, i, j) {
                            p[j] = p[j] / sum;
                            let vr = (b * nk + j) * d + off;
                            for (oo, &vv) in o.iter_mut().zip(&vd[vr..vr + dh]) {
                                *oo = *oo + p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let shape = [groups * nq, d];
        self.push(Tensor::new(shape, out)?, Op::Attention { q, k, v, heads, mask, probs }, rg, "attention")
    }

    /// `[r, d] -> [r * reps, d]` with each row repeated `reps` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, reps: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::shape("repeat_rows", format!("expected a matrix, got {:?}", av.shape())));
        }
        let (r, d) = (av.shape()[0], av.shape()[1]);
        let mut out = Vec::with_capacity(r * reps * d);
        for i in 0..r {
            for _ in 0..reps {
                out.extend_from_slice(av.row(i));
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new([r * reps, d], out)?, Op::RepeatRows { a, reps }, rg, "repeat_rows")
    }

    /// Row `row` of a matrix as a vector.
    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || row >= av.shape()[0] {
            return Err(Error::shape("select_row", format!("row {} of {:?}", row, av.shape())));
        }
        let t = Tensor::vector(av.row(row).to_vec());
        let rg = self.rg(&[a]);
        self.push(t, Op::SelectRow { a, row }, rg, "select_row")
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        let d = self.value(parts[0]).last_dim();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.shape()[1] != d {
                return Err(Error::shape("concat_rows", format!("part {:?} vs width {}", pv.shape(), d)));
            }
            rows += pv.shape()[0];
            out.extend_from_slice(pv.data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::new([rows, d], out)?, Op::ConcatRows { parts: parts.to_vec() }, rg, "concat_rows")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let t = crate::tensor::softmax(av, axis)?;
        let shape = av.shape();
        let (outer, len, inner) = (
            shape[..axis].iter().product(),
            shape[axis],
            shape[axis + 1..].iter().product(),
        );
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax { a, outer, len, inner }, rg, "softmax")
    }

    /// Scalar loss of one logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize, kind: LossKind) -> Result<Var> {
        let lv = self.value(logits);
        let k = lv.len();
        if k == 0 {
            return Err(Error::EmptyAxis { op: "cross_entropy" });
        }
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let (loss, probs) = match kind {
            LossKind::Softmax => {
                let mut p = lv.data().to_vec();
                let max = p.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + p.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
                let loss = lse - p[label];
                softmax_strided(&mut p, 0, k, 1);
                (loss, p)
            }
            LossKind::Sigmoid => {
                let mut loss = T::zero();
                let mut p = Vec::with_capacity(k);
                for (c, &z) in lv.data().iter().enumerate() {
                    // -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
                    let y = if c == label { -z } else { z };
                    loss = loss + softplus(y);
                    p.push(crate::tensor::sigmoid(z));
                }
                (loss, p)
            }
        };
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }, rg, "cross_entropy")
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() || target.is_empty() {
            return Err(Error::shape("mse", format!("{} predictions vs {} targets", pv.len(), target.len())));
        }
        let n = T::from_usize(target.len());
        let loss = pv.data().iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n;
        let rg = self.rg(&[pred]);
        self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.to_vec() }, rg, "mse")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg, "sum")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape { a }, rg, "reshape")
    }

    /// Gradients of scalar `loss` with respect to all trainable parameters reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Some(name) = node.param {
                out.accumulate(name, node.value.shape(), &g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        for (name, t) in out.map.iter() {
            if !t.is_finite() {
                return Err(Error::Diverged(format!("non-finite gradient for {}", name)));
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let bv = nodes[b.0].value.data();
                    let ga = acc(grads, *a, m * k);
                    // ga[i, p] += sum_j g[i, j] * b[p, j]
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] = ga[i * k + p] + dot(gi, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if wants(*b) {
                    let av = nodes[a.0].value.data();
                    let gb = acc(grads, *b, k * n);
                    // gb[p, j] += sum_i a[i, p] * g[i, j]
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (r, &gg) in row.iter_mut().zip(gi) {
                                *r = *r + aip * gg;
                            }
                        }
                    }
                }
            }
            Op::AddBias { a, b } => {
                if wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let d = nodes[b.0].value.len();
                    let gb = acc(grads, *b, d);
                    for row in g.chunks_exact(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    add_into(acc(grads, *b, g.len()), g);
                }
            }
            Op::Scale { a, c } => {
                let ga = acc(grads, *a, g.len());
                for (x, &gg) in ga.iter_mut().zip(g) {
                    *x = *x + gg * *c;
                }
            }
            Op::Swish { a } => {
                let av = nodes[a.0].value.data();
                let ga = acc(grads, *a, g.len());
                for ((x, &gg), &z) in ga.iter_mut().zip(g).zip(av) {
                    let s = crate::tensor::sigmoid(z);
                    *x = *x + gg * (s + z * s * (T::one() - s));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = nodes[gamma.0].value.data();
                let d = gam.len();
                let rows = inv_std.len();
                if wants(*gamma) {
                    let gg = acc(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = acc(grads, *beta, d);
                    for row in g.chunks_exact(d) {
                        add_into(gb, row);
                    }
                }
                if wants(*x) {
                    let dn = T::from_usize(d);
                    let gx = acc(grads, *x, rows * d);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gam[j];
                            mean_d = mean_d + dxhat[j];
                            mean_dx = mean_dx + dxhat[j] * xhat[r * d + j];
                        }
                        mean_d = mean_d / dn;
                        mean_dx = mean_dx / dn;
                        for j in 0..d {
                            let v = inv_std[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                            gx[r * d + j] = gx[r * d + j] + v;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, mask, probs } => {
                self.attention_backward(*q, *k, *v, *heads, mask, probs, g, grads);
            }
            Op::RepeatRows { a, reps } => {
                let d = nodes[a.0].value.last_dim();
                let r = nodes[a.0].value.rows();
                let ga = acc(grads, *a, r * d);
                for i in 0..r {
                    for t in 0..*reps {
                        let src = &g[(i * reps + t) * d..(i * reps + t + 1) * d];
                        add_into(&mut ga[i * d..(i + 1) * d], src);
                    }
                }
            }
            Op::SelectRow { a, row } => {
                let av = &nodes[a.0].value;
                let d = av.last_dim();
                let ga = acc(grads, *a, av.len());
                add_into(&mut ga[row * d..(row + 1) * d], g);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(*p) {
                        add_into(acc(grads, *p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                let ga = acc(grads, *a, y.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut s = T::zero();
                        for t in 0..*len {
                            let at = base + t * inner;
                            s = s + g[at] * y[at];
                        }
                        for t in 0..*len {
                            let at = base + t * inner;
                            ga[at] = ga[at] + y[at] * (g[at] - s);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                let ga = acc(grads, *logits, probs.len());
                for (c, (x, &p)) in ga.iter_mut().zip(probs).enumerate() {
                    let y = if c == *label { T::one() } else { T::zero() };
                    *x = *x + g[0] * (p - y);
                }
            }
            Op::Mse { pred, target } => {
                let pv = nodes[pred.0].value.data();
                let two_n = T::from_f64(2.0) / T::from_usize(target.len());
                let gp = acc(grads, *pred, target.len());
                for ((x, &p), &t) in gp.iter_mut().zip(pv).zip(target) {
                    *x = *x + g[0] * two_n * (p - t);
                }
            }
            Op::Sum { a } => {
                let len = nodes[a.0].value.len();
                let ga = acc(grads, *a, len);
                for x in ga.iter_mut() {
                    *x = *x + g[0];
                }
            }
            Op::Reshape { a } => {
                add_into(acc(grads, *a, g.len()), g);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttnMask,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
        let (groups, nq, nk) = (mask.groups, mask.queries, mask.keys);
        let d = nodes[q.0].value.last_dim();
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).sqrt();
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut ds = vec![T::zero(); nk];
        for b in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..nq {
                    let pb = ((b * heads + h) * nq + i) * nk;
                    let p = &probs[pb..pb + nk];
                    let qr = (b * nq + i) * d + off;
                    let gi = &g[qr..qr + dh];
                    let mut inner = T::zero();
                    for j in 0..nk {
                        if mask.get(b, i, j) {
                            let vr = (b * nk + j) * d + off;
                            let da = dot(gi, &vd[vr..vr + dh]);
                            ds[j] = da;
                            inner = inner + p[j] * da;
                            for (x, &gg) in gv[vr..vr + dh].iter_mut().zip(gi) {
                                *x = *x + p[j] * gg;
                            }
                        }
                    }
                    for j in 0..nk {
                        if mask.get(b, i, j) {
                            let s = p[j] * (ds[j] - inner) * scale;
                            let kr = (b * nk + j) * d + off;
                            for (x, &kk) in gq[qr..qr + dh].iter_mut().zip(&kd[kr..kr + dh]) {
                                *x = *x + s * kk;
                            }
                            for (x, &qq) in gk[kr..kr + dh].iter_mut().zip(&qd[qr..qr + dh]) {
                                *x = *x + s * qq;
                            }
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if nodes[var.0].requires_grad {
                add_into(acc(grads, var, buf.len()), &buf);
            }
        }
    }
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

/// `out[m, n] = a[m, k] @ b[k, n]` (out must be zeroed).
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (x, &bb) in o.iter_mut().zip(brow) {
                *x = *x + aip * bb;
            }
        }
    }
}
