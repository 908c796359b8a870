//! Attention classification head for arbitrary channel, length and class counts.
//!
//! Per-dataset channel embeddings are broadcast-added to the backbone tokens,
//! the tokens are flattened channel-major, and per-dataset label queries
//! cross-attend over them through one shared decoder. A `D -> 1` residual
//! block turns each attended query into a logit.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{Backbone, Features};
use crate::error::{Error, Result};
use crate::nn::{MultiHeadAttention, ResidualBlock, TaskKind};
use crate::param::{Module, Parameter};
use crate::rng::{self, gaussian};
use crate::tape::{AttnMask, Graph, Var};
use crate::tensor::{sigmoid, softmax, Real, Tensor};

/// Standard deviation of the Gaussian used for fresh embeddings and queries.
pub const TASK_INIT_STD: f64 = 0.02;

/// Channel embeddings `E [C, D]` and label queries `Q [K, D]` of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams<T> {
    pub dataset_name: String,
    pub task_kind: TaskKind,
    pub embeddings: Parameter<T>,
    pub queries: Parameter<T>,
}

impl<T: Real> TaskParams<T> {
    /// Gaussian initialization seeded by `(name, seed)` only.
    pub fn new(name: &str, channels: usize, classes: usize, dim: usize, kind: TaskKind, seed: u64) -> Result<Self> {
        if channels == 0 || classes == 0 || dim == 0 {
            return Err(Error::Config(format!("task `{name}` needs positive C, K and D")));
        }
        if kind == TaskKind::Multiclass && classes < 2 {
            return Err(Error::Config(format!("multiclass task `{name}` needs K >= 2")));
        }
        let mut r = rng::rng(rng::name_seed(name, seed));
        let e = gaussian(&mut r, &[channels, dim], TASK_INIT_STD);
        let q = gaussian(&mut r, &[classes, dim], TASK_INIT_STD);
        Self::from_tensors(name, kind, e, q)
    }

    pub fn from_tensors(name: &str, kind: TaskKind, embeddings: Tensor<T>, queries: Tensor<T>) -> Result<Self> {
        if embeddings.rank() != 2 || queries.rank() != 2 || embeddings.shape()[1] != queries.shape()[1] {
            return Err(Error::shape(
                "task_params",
                format!("E {:?} and Q {:?} must share the model dimension", embeddings.shape(), queries.shape()),
            ));
        }
        embeddings.check_finite("task_params")?;
        queries.check_finite("task_params")?;
        Ok(TaskParams {
            dataset_name: String::from(name),
            task_kind: kind,
            embeddings: Parameter::new(Self::embeddings_key(name), embeddings),
            queries: Parameter::new(Self::queries_key(name), queries),
        })
    }

    pub fn embeddings_key(name: &str) -> String {
        format!("task.{name}.E")
    }

    pub fn queries_key(name: &str) -> String {
        format!("task.{name}.Q")
    }

    pub fn channels(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

impl<T: Real> Module<T> for TaskParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.embeddings);
        f(&self.queries);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.embeddings);
        f(&mut self.queries);
    }
}

/// The shared decoding attention: one cross-attention and a `D -> 1` block.
/// Nothing here depends on channel, patch or class counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedDecoder<T> {
    pub attn: MultiHeadAttention<T>,
    pub head: ResidualBlock<T>,
}

impl<T: Real> SharedDecoder<T> {
    pub fn new(dim: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut r = rng::rng(rng::name_seed("sda", seed));
        Ok(SharedDecoder {
            attn: MultiHeadAttention::new("sda.attn", dim, heads, &mut r)?,
            head: ResidualBlock::new("sda.head", dim, dim, 1, &mut r),
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.dim()
    }

    pub fn heads(&self) -> usize {
        self.attn.heads
    }

    /// Logits `[K]` for label queries `[K, D]` attending over tokens `[N, D]`.
    pub fn decode<'a>(&'a self, g: &mut Graph<'a, T>, queries: Var, tokens: Var, key_mask: &[bool]) -> Result<Var> {
        let k = g.value(queries).shape()[0];
        if k == 0 {
            return Err(Error::Empty("decode: no label queries"));
        }
        if g.value(tokens).rows() != key_mask.len() {
            return Err(Error::shape("decode", format!("{} keys vs {} mask flags", g.value(tokens).rows(), key_mask.len())));
        }
        if !key_mask.iter().any(|&v| v) {
            return Err(Error::NoAttendableKeys);
        }
        let mask = AttnMask::from_keys(k, key_mask);
        let attended = self.attn.forward(g, queries, tokens, tokens, mask)?;
        let logits = self.head.forward(g, attended)?;
        g.reshape(logits, &[k])
    }
}

impl<T: Real> Module<T> for SharedDecoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.attn.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.attn.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// `H~[c, i, :] = H[c, i, :] + E[c, :]` on channel-major token rows `[C*L, D]`.
pub fn prompt_features_graph<'a, T: Real>(
    g: &mut Graph<'a, T>,
    tokens: Var,
    embeddings: Var,
    patches: usize,
) -> Result<Var> {
    let c = g.value(embeddings).shape()[0];
    let rows = g.value(tokens).rows();
    if c * patches != rows {
        return Err(Error::ChannelMismatch { expected: c, found: if patches == 0 { 0 } else { rows / patches } });
    }
    let rep = g.repeat_rows(embeddings, patches)?;
    g.add(tokens, rep)
}

/// Tensor form of [`prompt_features_graph`]: `tokens [C, L, D]`, `E [C, D]`.
pub fn prompt_features<T: Real>(tokens: &Tensor<T>, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
    if tokens.rank() != 3 || embeddings.rank() != 2 || tokens.shape()[2] != embeddings.shape()[1] {
        return Err(Error::shape("prompt_features", format!("H {:?}, E {:?}", tokens.shape(), embeddings.shape())));
    }
    let (c, l, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    if embeddings.shape()[0] != c {
        return Err(Error::ChannelMismatch { expected: embeddings.shape()[0], found: c });
    }
    let mut g = Graph::new();
    let h = g.constant(tokens.clone().reshape([c * l, d])?)?;
    let e = g.constant(embeddings.clone())?;
    let out = prompt_features_graph(&mut g, h, e, l)?;
    g.value(out).clone().reshape([c, l, d])
}

/// `[C, L, D] -> [C*L, D]` channel-major, with the key mask (true = attendable).
pub fn flatten_tokens<T: Real>(tokens: &Tensor<T>, valid: &[bool]) -> Result<(Tensor<T>, Vec<bool>)> {
    if tokens.rank() != 3 {
        return Err(Error::shape("flatten_tokens", format!("expected [C, L, D], got {:?}", tokens.shape())));
    }
    let (c, l, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    if valid.len() != c * l {
        return Err(Error::shape("flatten_tokens", format!("{} flags for {}x{} tokens", valid.len(), c, l)));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::NoValidPatch("flatten_tokens"));
    }
    Ok((tokens.clone().reshape([c * l, d])?, valid.to_vec()))
}

/// Class probabilities: softmax for multiclass, element-wise sigmoid for binary.
pub fn predict_proba<T: Real>(logits: &[T], kind: TaskKind) -> Result<Vec<T>> {
    match kind {
        TaskKind::Multiclass => {
            if logits.len() < 2 {
                return Err(Error::Config(format!("multiclass output needs K >= 2, got {}", logits.len())));
            }
            Ok(softmax(&Tensor::vector(logits.to_vec()), 0)?.into_data())
        }
        TaskKind::Binary => Ok(logits.iter().map(|&z| sigmoid(z)).collect()),
    }
}

/// Logits recorded on `g` from precomputed backbone features.
pub fn logits_from_features<'a, T: Real>(
    g: &mut Graph<'a, T>,
    sda: &'a SharedDecoder<T>,
    task: &'a TaskParams<T>,
    features: &'a Features<T>,
) -> Result<Var> {
    if task.channels() != features.channels {
        return Err(Error::ChannelMismatch { expected: task.channels(), found: features.channels });
    }
    let tokens = g.constant_ref(&features.tokens)?;
    let tokens = g.reshape(tokens, &[features.channels * features.patches, features.dim()])?;
    let e = g.param(&task.embeddings);
    let prompted = prompt_features_graph(g, tokens, e, features.patches)?;
    let q = g.param(&task.queries);
    sda.decode(g, q, prompted, &features.valid)
}

/// The whole path from raw `C x T` input to logits, including the backbone.
pub fn logits_from_input<'a, T: Real>(
    g: &mut Graph<'a, T>,
    backbone: &'a Backbone<T>,
    sda: &'a SharedDecoder<T>,
    task: &'a TaskParams<T>,
    values: &[T],
    missing: &[bool],
) -> Result<Var> {
    let c = task.channels();
    if values.len() % c != 0 {
        return Err(Error::ChannelMismatch { expected: c, found: 0 });
    }
    let (h, valid, patches) = backbone.extract_features_graph(g, values, missing, c)?;
    let e = g.param(&task.embeddings);
    let prompted = prompt_features_graph(g, h, e, patches)?;
    let q = g.param(&task.queries);
    sda.decode(g, q, prompted, &valid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub logits: Vec<T>,
    pub probabilities: Vec<T>,
}

pub fn classify_features<T: Real>(
    sda: &SharedDecoder<T>,
    task: &TaskParams<T>,
    features: &Features<T>,
) -> Result<Prediction<T>> {
    let mut g = Graph::new();
    let logits = logits_from_features(&mut g, sda, task, features)?;
    let logits = g.value(logits).data().to_vec();
    let probabilities = predict_proba(&logits, task.task_kind)?;
    Ok(Prediction { logits, probabilities })
}

/// extract_features -> prompt -> flatten -> decode -> probabilities.
pub fn classify<T: Real>(
    backbone: &Backbone<T>,
    sda: &SharedDecoder<T>,
    task: &TaskParams<T>,
    values: &[T],
    missing: &[bool],
    channels: usize,
) -> Result<Prediction<T>> {
    if channels != task.channels() {
        return Err(Error::ChannelMismatch { expected: task.channels(), found: channels });
    }
    let features = backbone.extract_features(values, missing, channels)?;
    classify_features(sda, task, &features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn task_params_shapes_and_budget() {
        let t = TaskParams::<f64>::new("PTB", 15, 2, 32, TaskKind::Multiclass, 0).unwrap();
        assert_eq!(t.embeddings.shape(), &[15, 32]);
        assert_eq!(t.queries.shape(), &[2, 32]);
        assert_eq!(t.num_params(), (15 + 2) * 32);
        assert!(TaskParams::<f64>::new("x", 3, 1, 8, TaskKind::Multiclass, 0).is_err());
    }

    #[test]
    fn prompt_identity_and_broadcast() {
        let h = Tensor::<f64>::from_f64([1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = prompt_features(&h, &Tensor::zeros([1, 2])).unwrap();
        assert_eq!(out, h);
        let out = prompt_features(&h, &Tensor::from_f64([1, 2], &[10.0, 20.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, 13.0, 24.0]);
        assert!(matches!(
            prompt_features(&h, &Tensor::zeros([2, 2])),
            Err(Error::ChannelMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn flatten_indexing_and_errors() {
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let h = Tensor::<f64>::from_f64([2, 3, 2], &data).unwrap();
        let (flat, mask) = flatten_tokens(&h, &[true; 6]).unwrap();
        assert_eq!(flat.shape(), &[6, 2]);
        assert_eq!(flat.row(4), &[8.0, 9.0]);
        assert!(mask.iter().all(|&m| m));
        assert!(flatten_tokens(&h, &[false; 6]).is_err());
    }

    #[test]
    fn predict_proba_cases() {
        let p = predict_proba(&[0.0f64, 0.0, 0.0], TaskKind::Multiclass).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(predict_proba(&[0.0f64], TaskKind::Binary).unwrap(), vec![0.5]);
        assert!(predict_proba(&[0.0f64], TaskKind::Multiclass).is_err());
    }

    #[test]
    fn decode_rejects_fully_masked_keys() {
        let sda = SharedDecoder::<f64>::new(8, 2, 0).unwrap();
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros([2, 8])).unwrap();
        let k = g.constant(Tensor::zeros([3, 8])).unwrap();
        assert_eq!(sda.decode(&mut g, q, k, &[false; 3]), Err(Error::NoAttendableKeys));
    }
}
