//! Shared neural building blocks recorded on a [`Graph`].

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::param::{Module, Parameter};
use crate::rng::{gaussian, Rng};
use crate::tape::{AttnMask, Graph, LossKind, Var};
use crate::tensor::{Real, Tensor};

/// `x @ w + b` over the trailing axis.
pub fn linear<'a, T: Real>(g: &mut Graph<'a, T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

fn init_weight<T: Real>(rng: &mut Rng, name: String, fan_in: usize, fan_out: usize) -> Parameter<T> {
    let std = 1.0 / libm_sqrt(fan_in as f64);
    Parameter::new(name, gaussian(rng, &[fan_in, fan_out], std))
}

fn libm_sqrt(v: f64) -> f64 {
    num_traits::Float::sqrt(v)
}

/// `y = swish(x W_h + b_h) W_o + b_o + x W_s`
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub w_hidden: Parameter<T>,
    pub b_hidden: Parameter<T>,
    pub w_out: Parameter<T>,
    pub b_out: Parameter<T>,
    pub w_skip: Parameter<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        ResidualBlock {
            w_hidden: init_weight(rng, format!("{prefix}.w_hidden"), d_in, d_hidden),
            b_hidden: Parameter::new(format!("{prefix}.b_hidden"), Tensor::zeros([d_hidden])),
            w_out: init_weight(rng, format!("{prefix}.w_out"), d_hidden, d_out),
            b_out: Parameter::new(format!("{prefix}.b_out"), Tensor::zeros([d_out])),
            w_skip: init_weight(rng, format!("{prefix}.w_skip"), d_in, d_out),
        }
    }

    /// Builds a block from explicit weights, validating the dimension chain.
    pub fn from_tensors(
        prefix: &str,
        w_hidden: Tensor<T>,
        b_hidden: Tensor<T>,
        w_out: Tensor<T>,
        b_out: Tensor<T>,
        w_skip: Tensor<T>,
    ) -> Result<Self> {
        let ok = w_hidden.rank() == 2
            && w_out.rank() == 2
            && w_skip.rank() == 2
            && b_hidden.shape() == [w_hidden.shape()[1]]
            && w_out.shape()[0] == w_hidden.shape()[1]
            && b_out.shape() == [w_out.shape()[1]]
            && w_skip.shape() == [w_hidden.shape()[0], w_out.shape()[1]];
        if !ok {
            return Err(Error::shape("residual_block", "inconsistent dimension chain"));
        }
        Ok(ResidualBlock {
            w_hidden: Parameter::new(format!("{prefix}.w_hidden"), w_hidden),
            b_hidden: Parameter::new(format!("{prefix}.b_hidden"), b_hidden),
            w_out: Parameter::new(format!("{prefix}.w_out"), w_out),
            b_out: Parameter::new(format!("{prefix}.b_out"), b_out),
            w_skip: Parameter::new(format!("{prefix}.w_skip"), w_skip),
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w_out.shape()[1]
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        if g.value(x).last_dim() != self.d_in() {
            return Err(Error::shape(
                "residual_block",
                format!("input width {} vs block input {}", g.value(x).last_dim(), self.d_in()),
            ));
        }
        let wh = g.param(&self.w_hidden);
        let bh = g.param(&self.b_hidden);
        let wo = g.param(&self.w_out);
        let bo = g.param(&self.b_out);
        let ws = g.param(&self.w_skip);
        let h = linear(g, x, wh, Some(bh))?;
        let h = g.swish(h)?;
        let y = linear(g, h, wo, Some(bo))?;
        let skip = g.matmul(x, ws)?;
        g.add(y, skip)
    }
}

impl<T: Real> Module<T> for ResidualBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        for p in [&self.w_hidden, &self.b_hidden, &self.w_out, &self.b_out, &self.w_skip] {
            f(p);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for p in [&mut self.w_hidden, &mut self.b_hidden, &mut self.w_out, &mut self.b_out, &mut self.w_skip] {
            f(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Real> LayerNorm<T> {
    pub fn new(prefix: &str, d: usize) -> Self {
        LayerNorm {
            gamma: Parameter::new(format!("{prefix}.gamma"), Tensor::full([d], T::one())),
            beta: Parameter::new(format!("{prefix}.beta"), Tensor::zeros([d])),
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        let gm = g.param(&self.gamma);
        let bt = g.param(&self.beta);
        g.layer_norm(x, gm, bt, T::from_f64(LAYER_NORM_EPS))
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Query/key/value/output projections (all `D x D`, no bias) and a head count.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<T> {
    pub heads: usize,
    pub wq: Parameter<T>,
    pub wk: Parameter<T>,
    pub wv: Parameter<T>,
    pub wo: Parameter<T>,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new(prefix: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            heads,
            wq: init_weight(rng, format!("{prefix}.wq"), d, d),
            wk: init_weight(rng, format!("{prefix}.wk"), d, d),
            wv: init_weight(rng, format!("{prefix}.wv"), d, d),
            wo: init_weight(rng, format!("{prefix}.wo"), d, d),
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    /// `queries: [Nq, D]`, `keys`/`values`: `[Nk, D]` -> `[Nq, D]`.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        queries: Var,
        keys: Var,
        values: Var,
        mask: AttnMask,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (g.param(&self.wq), g.param(&self.wk), g.param(&self.wv), g.param(&self.wo));
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(keys, wk)?;
        let v = g.matmul(values, wv)?;
        let o = g.attention(q, k, v, mask, self.heads)?;
        g.matmul(o, wo)
    }
}

impl<T: Real> Module<T> for MultiHeadAttention<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        for p in [&self.wq, &self.wk, &self.wv, &self.wo] {
            f(p);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for p in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo] {
            f(p);
        }
    }
}

/// How class probabilities are produced from logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TaskKind {
    /// Softmax over K >= 2 logits.
    #[default]
    Multiclass,
    /// Independent sigmoid per logit.
    Binary,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Multiclass => "multiclass",
            TaskKind::Binary => "binary",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multiclass" => Some(TaskKind::Multiclass),
            "binary" => Some(TaskKind::Binary),
            _ => None,
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            TaskKind::Multiclass => LossKind::Softmax,
            TaskKind::Binary => LossKind::Sigmoid,
        }
    }
}

pub fn cross_entropy<'a, T: Real>(g: &mut Graph<'a, T>, logits: Var, label: usize, kind: TaskKind) -> Result<Var> {
    g.cross_entropy(logits, label, kind.loss_kind())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use alloc::vec;
    use alloc::vec::Vec;

    fn rand_tensor(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        gaussian(r, shape, 1.0)
    }

    #[test]
    fn linear_hand_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let w = g.constant(Tensor::eye(2)).unwrap();
        let b = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = linear(&mut g, x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let w = g.constant(Tensor::from_f64([2, 1], &[2.0, 3.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::vector(vec![1.0])).unwrap();
        let y = linear(&mut g, x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_matches_loop_oracle() {
        let mut r = rng(11);
        let (xs, ws, bs) = (rand_tensor(&mut r, &[4, 5]), rand_tensor(&mut r, &[5, 3]), rand_tensor(&mut r, &[3]));
        let mut g = Graph::<f64>::new();
        let (x, w, b) = (g.constant(xs.clone()).unwrap(), g.constant(ws.clone()).unwrap(), g.constant(bs.clone()).unwrap());
        let y = linear(&mut g, x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 3]);
        for i in 0..4 {
            for j in 0..3 {
                let mut s = bs.data()[j];
                for k in 0..5 {
                    s += xs.data()[i * 5 + k] * ws.data()[k * 3 + j];
                }
                assert!((g.value(y).data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_width_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([3])).unwrap();
        let w = g.constant(Tensor::zeros([2, 2])).unwrap();
        assert!(matches!(linear(&mut g, x, w, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn residual_block_zero_and_skip_cases() {
        let z = |s: &[usize]| Tensor::<f64>::zeros(s.to_vec());
        let block = ResidualBlock::from_tensors("rb", z(&[3, 4]), z(&[4]), z(&[4, 2]), z(&[2]), z(&[3, 2])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        let y = block.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let block = ResidualBlock::from_tensors("rb", z(&[3, 4]), z(&[4]), z(&[4, 3]), z(&[3]), Tensor::eye(3)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        let y = block.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn residual_block_matches_scalar_oracle() {
        let mut r = rng(3);
        let (wh, bh, wo, bo, ws) = (
            rand_tensor(&mut r, &[4, 8]),
            rand_tensor(&mut r, &[8]),
            rand_tensor(&mut r, &[8, 2]),
            rand_tensor(&mut r, &[2]),
            rand_tensor(&mut r, &[4, 2]),
        );
        let x: Vec<f64> = rand_tensor(&mut r, &[4]).into_data();
        let block = ResidualBlock::from_tensors("rb", wh.clone(), bh.clone(), wo.clone(), bo.clone(), ws.clone()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::vector(x.clone())).unwrap();
        let y = block.forward(&mut g, xv).unwrap();

        let mut hidden = [0.0f64; 8];
        for (h, hv) in hidden.iter_mut().enumerate() {
            let mut s = bh.data()[h];
            for i in 0..4 {
                s += x[i] * wh.data()[i * 8 + h];
            }
            *hv = s / (1.0 + (-s).exp());
        }
        for o in 0..2 {
            let mut s = bo.data()[o];
            for h in 0..8 {
                s += hidden[h] * wo.data()[h * 2 + o];
            }
            for i in 0..4 {
                s += x[i] * ws.data()[i * 2 + o];
            }
            assert!((g.value(y).data()[o] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_block_rejects_bad_chain() {
        let z = |s: &[usize]| Tensor::<f64>::zeros(s.to_vec());
        assert!(ResidualBlock::from_tensors("rb", z(&[3, 4]), z(&[4]), z(&[5, 2]), z(&[2]), z(&[3, 2])).is_err());
    }

    #[test]
    fn cross_entropy_hand_cases() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let loss = cross_entropy(&mut g, l, 0, TaskKind::Multiclass).unwrap();
        assert!((g.value(loss).item() - core::f64::consts::LN_2).abs() < 1e-15);
        let l = g.constant(Tensor::vector(vec![30.0, -30.0])).unwrap();
        let loss = cross_entropy(&mut g, l, 0, TaskKind::Multiclass).unwrap();
        assert!(g.value(loss).item() < 1e-25);
        assert!(matches!(
            cross_entropy(&mut g, l, 2, TaskKind::Multiclass),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        assert!(matches!(MultiHeadAttention::<f64>::new("a", 6, 4, &mut rng(0)), Err(Error::Config(_))));
    }
}
