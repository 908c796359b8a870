//! Univariate patch-transformer feature extractor and its forecasting head.
//!
//! Pipeline per channel: patchify -> input residual block over
//! `[patch values | patch mask]` -> sinusoidal positions -> pre-norm causal
//! transformer stack -> final layer norm. The forecasting head maps the last
//! valid token to the next `horizon` steps and is only used for pretraining.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{linear, LayerNorm, MultiHeadAttention, ResidualBlock};
use crate::optim::{Adam, AdamConfig};
use crate::param::{Module, Parameter};
use crate::rng::{self, gaussian};
use crate::tape::{AttnMask, Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_patches: usize,
    pub horizon: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("patch_size", self.patch_size),
            ("model_dim", self.model_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("max_patches", self.max_patches),
            ("horizon", self.horizon),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("backbone.{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "backbone.model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self, length: usize) -> usize {
        length.div_ceil(self.patch_size)
    }

    /// Checks that a series of `length` steps fits in the positional table.
    pub fn check_length(&self, length: usize) -> Result<()> {
        let l = self.num_patches(length);
        if l > self.max_patches {
            return Err(Error::TooManyPatches { patches: l, max: self.max_patches });
        }
        Ok(())
    }
}

/// Non-overlapping patches of one univariate series.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedSeries<T> {
    /// `[L, P]`; padded and missing positions hold 0.
    pub values: Tensor<T>,
    /// `[L, P]`; 1 = padded or missing, 0 = observed.
    pub mask: Tensor<T>,
}

impl<T: Real> PatchedSeries<T> {
    pub fn num_patches(&self) -> usize {
        self.values.shape()[0]
    }

    /// `true` for patches with at least one observed position.
    pub fn patch_valid(&self) -> Vec<bool> {
        reduce_patch_mask(&self.mask).iter().map(|&m| m < T::one()).collect()
    }
}

/// Splits `x` into `ceil(T / P)` patches, right-padding the final one.
/// `missing[t] == true` marks an unobserved step; its value is dropped.
pub fn patchify<T: Real>(x: &[T], missing: &[bool], patch_size: usize) -> Result<PatchedSeries<T>> {
    if x.is_empty() {
        return Err(Error::Empty("patchify: series of length 0"));
    }
    if patch_size == 0 {
        return Err(Error::Config("patch_size must be positive".into()));
    }
    if missing.len() != x.len() {
        return Err(Error::shape("patchify", format!("{} values vs {} mask bits", x.len(), missing.len())));
    }
    let l = x.len().div_ceil(patch_size);
    let mut values = vec![T::zero(); l * patch_size];
    let mut mask = vec![T::one(); l * patch_size];
    for (t, (&v, &m)) in x.iter().zip(missing).enumerate() {
        if !m {
            values[t] = v;
            mask[t] = T::zero();
        }
    }
    Ok(PatchedSeries { values: Tensor::new([l, patch_size], values)?, mask: Tensor::new([l, patch_size], mask)? })
}

/// Per-patch minimum of the mask: 1 exactly when the whole patch is padded.
pub fn reduce_patch_mask<T: Real>(mask: &Tensor<T>) -> Vec<T> {
    (0..mask.rows()).map(|i| mask.row(i).iter().copied().fold(T::infinity(), T::min)).collect()
}

/// Fixed sinusoidal table `[len, d]`: `pe[i][2j] = sin(i / 10000^(2j/d))`,
/// `pe[i][2j+1] = cos(same)`.
pub fn positional_encoding<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); len * d];
    for i in 0..len {
        for c in 0..d {
            let two_j = (c - c % 2) as f64;
            let angle = i as f64 / num_traits::Float::powf(10000.0f64, two_j / d as f64);
            let v = if c % 2 == 0 { num_traits::Float::sin(angle) } else { num_traits::Float::cos(angle) };
            out[i * d + c] = T::from_f64(v);
        }
    }
    Tensor::new([len, d], out).expect("shape")
}

fn fsqrt(v: f64) -> f64 {
    num_traits::Float::sqrt(v)
}

/// Pre-norm transformer layer: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer<T> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ff_in: Parameter<T>,
    pub ff_in_bias: Parameter<T>,
    pub ff_out: Parameter<T>,
    pub ff_out_bias: Parameter<T>,
}

impl<T: Real> TransformerLayer<T> {
    fn new(prefix: &str, d: usize, heads: usize, rng: &mut rng::Rng) -> Result<Self> {
        let hidden = 4 * d;
        Ok(TransformerLayer {
            norm1: LayerNorm::new(&format!("{prefix}.norm1"), d),
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), d, heads, rng)?,
            norm2: LayerNorm::new(&format!("{prefix}.norm2"), d),
            ff_in: Parameter::new(format!("{prefix}.ff_in"), gaussian(rng, &[d, hidden], 1.0 / fsqrt(d as f64))),
            ff_in_bias: Parameter::new(format!("{prefix}.ff_in_bias"), Tensor::zeros([hidden])),
            ff_out: Parameter::new(
                format!("{prefix}.ff_out"),
                gaussian(rng, &[hidden, d], 1.0 / fsqrt(hidden as f64)),
            ),
            ff_out_bias: Parameter::new(format!("{prefix}.ff_out_bias"), Tensor::zeros([d])),
        })
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, mask: &AttnMask) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, h, mask.clone())?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let (w1, b1, w2, b2) =
            (g.param(&self.ff_in), g.param(&self.ff_in_bias), g.param(&self.ff_out), g.param(&self.ff_out_bias));
        let f = linear(g, h, w1, Some(b1))?;
        let f = g.swish(f)?;
        let f = linear(g, f, w2, Some(b2))?;
        g.add(x, f)
    }
}

impl<T: Real> Module<T> for TransformerLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.norm1.visit(f);
        self.attn.visit(f);
        self.norm2.visit(f);
        for p in [&self.ff_in, &self.ff_in_bias, &self.ff_out, &self.ff_out_bias] {
            f(p);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.norm1.visit_mut(f);
        self.attn.visit_mut(f);
        self.norm2.visit_mut(f);
        for p in [&mut self.ff_in, &mut self.ff_in_bias, &mut self.ff_out, &mut self.ff_out_bias] {
            f(p);
        }
    }
}

/// All backbone weights plus the forecasting head.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub input: ResidualBlock<T>,
    pub layers: Vec<TransformerLayer<T>>,
    pub final_norm: LayerNorm<T>,
    pub output: ResidualBlock<T>,
    positions: Tensor<T>,
}

/// Token features of one multivariate sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Features<T> {
    pub channels: usize,
    pub patches: usize,
    /// `[C, L, D]`.
    pub tokens: Tensor<T>,
    /// `C * L` flags; `false` for fully padded patches.
    pub valid: Vec<bool>,
}

impl<T: Real> Features<T> {
    pub fn dim(&self) -> usize {
        self.tokens.last_dim()
    }

    /// The `[L, D]` plane of channel `c`.
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.patches * self.dim();
        &self.tokens.data()[c * n..(c + 1) * n]
    }
}

impl<T: Real> Backbone<T> {
    /// Randomly initialized weights.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(rng::name_seed("backbone", seed));
        let d = config.model_dim;
        let input = ResidualBlock::new("backbone.input", 2 * config.patch_size, d, d, &mut r);
        let layers = (0..config.layers)
            .map(|i| TransformerLayer::new(&format!("backbone.layers.{i}"), d, config.heads, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new("backbone.final_norm", d);
        let output = ResidualBlock::new("backbone.output", d, d, config.horizon, &mut r);
        Ok(Backbone { config, input, layers, final_norm, output, positions: positional_encoding(config.max_patches, d) })
    }

    pub fn is_frozen(&self) -> bool {
        let mut frozen = true;
        self.visit(&mut |p| frozen &= !p.trainable);
        frozen
    }

    /// Zi = InputResidualBlock([Xi | Mi]) for every patch row. Rows may
    /// come from several series stacked back to back.
    pub fn embed_patches<'a>(&'a self, g: &mut Graph<'a, T>, patches: &[&PatchedSeries<T>]) -> Result<Var> {
        let p = self.config.patch_size;
        let mut rows = Vec::new();
        let mut n = 0;
        for ps in patches {
            if ps.values.last_dim() != p {
                return Err(Error::shape(
                    "embed_patches",
                    format!("patch width {} vs configured {}", ps.values.last_dim(), p),
                ));
            }
            for i in 0..ps.num_patches() {
                rows.extend_from_slice(ps.values.row(i));
                rows.extend_from_slice(ps.mask.row(i));
                n += 1;
            }
        }
        let x = g.constant(Tensor::new([n, 2 * p], rows)?)?;
        self.input.forward(g, x)
    }

    /// Adds `PE(i)` to row `i` of each of `groups` stacked `[L, D]` blocks.
    pub fn add_positions<'a>(&'a self, g: &mut Graph<'a, T>, z: Var, groups: usize) -> Result<Var> {
        let zv = g.value(z);
        let d = self.config.model_dim;
        if zv.rank() != 2 || zv.last_dim() != d || groups == 0 || zv.rows() % groups != 0 {
            return Err(Error::shape("add_positions", format!("{:?} in {} groups", zv.shape(), groups)));
        }
        let l = zv.rows() / groups;
        if l > self.config.max_patches {
            return Err(Error::TooManyPatches { patches: l, max: self.config.max_patches });
        }
        let table = &self.positions.data()[..l * d];
        let mut pe = Vec::with_capacity(groups * l * d);
        for _ in 0..groups {
            pe.extend_from_slice(table);
        }
        let pe = g.constant(Tensor::new([groups * l, d], pe)?)?;
        g.add(z, pe)
    }

    /// Stacked causal transformer over `groups` independent sequences.
    /// `valid` flags (length `rows`) exclude fully padded patches as keys.
    pub fn encode<'a>(&'a self, g: &mut Graph<'a, T>, z: Var, valid: &[bool], groups: usize) -> Result<Var> {
        if valid.len() != g.value(z).rows() {
            return Err(Error::shape("encode", format!("{} mask flags for {} rows", valid.len(), g.value(z).rows())));
        }
        let mask = AttnMask::causal_grouped(groups, valid);
        let mut h = z;
        for layer in &self.layers {
            h = layer.forward(g, h, &mask)?;
        }
        self.final_norm.forward(g, h)
    }

    /// Full univariate pipeline for several series at once. Returns token
    /// rows `[sum L, D]` and their validity flags.
    pub fn encode_series<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        patches: &[&PatchedSeries<T>],
    ) -> Result<(Var, Vec<bool>)> {
        let Some(first) = patches.first() else { return Err(Error::Empty("encode_series")) };
        let l = first.num_patches();
        if patches.iter().any(|p| p.num_patches() != l) {
            return Err(Error::shape("encode_series", "all series must have the same patch count"));
        }
        if l > self.config.max_patches {
            return Err(Error::TooManyPatches { patches: l, max: self.config.max_patches });
        }
        let valid: Vec<bool> = patches.iter().flat_map(|p| p.patch_valid()).collect();
        let z = self.embed_patches(g, patches)?;
        let z = self.add_positions(g, z, patches.len())?;
        let h = self.encode(g, z, &valid, patches.len())?;
        Ok((h, valid))
    }

    /// OutputResidualBlock applied to the last valid token of a single series.
    pub fn forecast<'a>(&'a self, g: &mut Graph<'a, T>, h: Var, valid: &[bool]) -> Result<Var> {
        let last = valid.iter().rposition(|&v| v).ok_or(Error::NoValidPatch("forecast"))?;
        let row = g.select_row(h, last)?;
        self.output.forward(g, row)
    }

    /// Per-channel features for a `C x T` sample (row-major values and
    /// missing flags).
    pub fn extract_features_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        values: &[T],
        missing: &[bool],
        channels: usize,
    ) -> Result<(Var, Vec<bool>, usize)> {
        if channels == 0 || values.len() % channels != 0 || missing.len() != values.len() {
            return Err(Error::shape(
                "extract_features",
                format!("{} values / {} mask bits for {} channels", values.len(), missing.len(), channels),
            ));
        }
        let t = values.len() / channels;
        let series = (0..channels)
            .map(|c| patchify(&values[c * t..(c + 1) * t], &missing[c * t..(c + 1) * t], self.config.patch_size))
            .collect::<Result<Vec<_>>>()?;
        for (c, s) in series.iter().enumerate() {
            if !s.patch_valid().iter().any(|&v| v) {
                return Err(Error::NoValidPatch(if c == 0 { "channel 0" } else { "a channel" }));
            }
        }
        let refs: Vec<&PatchedSeries<T>> = series.iter().collect();
        let l = series[0].num_patches();
        let (h, valid) = self.encode_series(g, &refs)?;
        Ok((h, valid, l))
    }

    /// Plain forward version of [`Backbone::extract_features_graph`].
    pub fn extract_features(&self, values: &[T], missing: &[bool], channels: usize) -> Result<Features<T>> {
        let mut g = Graph::new();
        let (h, valid, patches) = self.extract_features_graph(&mut g, values, missing, channels)?;
        let d = self.config.model_dim;
        Ok(Features { channels, patches, tokens: g.value(h).clone().reshape([channels, patches, d])?, valid })
    }

    /// Next-`horizon` forecast for one univariate context.
    pub fn predict(&self, context: &[T]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let ps = patchify(context, &vec![false; context.len()], self.config.patch_size)?;
        let (h, valid) = self.encode_series(&mut g, &[&ps])?;
        let y = self.forecast(&mut g, h, &valid)?;
        Ok(g.value(y).data().to_vec())
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.input.visit(f);
        for l in &self.layers {
            l.visit(f);
        }
        self.final_norm.visit(f);
        self.output.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.input.visit_mut(f);
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
        self.output.visit_mut(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Random context windows drawn per series per epoch.
    pub windows_per_series: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 10, batch_size: 16, lr: 1e-3, seed: 0, windows_per_series: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// One normalized forecasting example.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastWindow<T> {
    pub context: Vec<T>,
    pub target: Vec<T>,
}

/// Draws a context of a whole number of patches followed by `horizon`
/// targets, both standardized by the context's mean and deviation.
pub fn sample_window<T: Real>(
    series: &[f64],
    cfg: &BackboneConfig,
    rng: &mut rng::Rng,
) -> Option<ForecastWindow<T>> {
    use rand::Rng as _;
    let p = cfg.patch_size;
    let avail = series.len().checked_sub(cfg.horizon)?;
    let max_ctx = (avail / p).min(cfg.max_patches);
    if max_ctx == 0 {
        return None;
    }
    let n_patches = rng.random_range(1..=max_ctx);
    let ctx_len = n_patches * p;
    let start = rng.random_range(0..=avail - ctx_len);
    let ctx = &series[start..start + ctx_len];
    let tgt = &series[start + ctx_len..start + ctx_len + cfg.horizon];
    let mean = ctx.iter().sum::<f64>() / ctx_len as f64;
    let var = ctx.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ctx_len as f64;
    let sd = num_traits::Float::sqrt(var);
    let sd = if sd > 1e-6 { sd } else { 1.0 };
    Some(ForecastWindow {
        context: ctx.iter().map(|v| T::from_f64((v - mean) / sd)).collect(),
        target: tgt.iter().map(|v| T::from_f64((v - mean) / sd)).collect(),
    })
}

/// Mean forecast MSE over fixed windows drawn with `seed`.
pub fn forecast_mse<T: Real>(backbone: &Backbone<T>, corpus: &[Vec<f64>], windows: usize, seed: u64) -> Result<f64> {
    let mut r = rng::rng(seed);
    let mut total = 0.0;
    let mut n = 0usize;
    for s in corpus {
        for _ in 0..windows {
            let Some(w) = sample_window::<T>(s, &backbone.config, &mut r) else { continue };
            let pred = backbone.predict(&w.context)?;
            let mse = pred.iter().zip(&w.target).map(|(p, t)| {
                    let e = p.as_f64() - t.as_f64();
                    e * e
                })
                .sum::<f64>()
                / w.target.len() as f64;
            total += mse;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("forecast_mse: no series long enough for one window"));
    }
    Ok(total / n as f64)
}

/// Trains a fresh backbone (seeded by `cfg.seed`) on next-`horizon` MSE and
/// returns it frozen.
pub fn pretrain_forecasting<T: Real>(
    corpus: &[Vec<f64>],
    config: BackboneConfig,
    cfg: &PretrainConfig,
) -> Result<(Backbone<T>, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Empty("pretrain corpus"));
    }
    let mut backbone = Backbone::<T>::new(config, cfg.seed)?;
    backbone.set_trainable(true);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut r = rng::rng(rng::name_seed("pretrain", cfg.seed));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let mut windows = Vec::new();
        for s in corpus {
            for _ in 0..cfg.windows_per_series {
                if let Some(w) = sample_window::<T>(s, &config, &mut r) {
                    windows.push(w);
                }
            }
        }
        if windows.is_empty() {
            return Err(Error::Empty("pretrain corpus: no series long enough for one window"));
        }
        let mut sum = 0.0;
        for chunk in windows.chunks(batch) {
            let grads = {
                let mut g = Graph::new();
                let mut losses = Vec::with_capacity(chunk.len());
                for w in chunk {
                    let ps = patchify(&w.context, &vec![false; w.context.len()], config.patch_size)?;
                    let (h, valid) = backbone.encode_series(&mut g, &[&ps])?;
                    let y = backbone.forecast(&mut g, h, &valid)?;
                    losses.push(g.mse(y, &w.target)?);
                }
                let total = g.add_all(&losses)?;
                let mean = g.scale(total, T::one() / T::from_usize(chunk.len()))?;
                let lv = g.value(mean).item().as_f64();
                if !lv.is_finite() {
                    return Err(Error::Diverged(format!("pretraining loss is {lv} at epoch {epoch}")));
                }
                sum += lv * chunk.len() as f64;
                g.backward(mean)?
            };
            opt.step_module(&mut backbone, &grads)?;
        }
        let mean = sum / windows.len() as f64;
        log::debug!("pretrain epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    backbone.set_trainable(false);
    Ok((backbone, PretrainReport { epoch_losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sinusoid_corpus;

    fn config() -> BackboneConfig {
        BackboneConfig { patch_size: 4, model_dim: 8, layers: 1, heads: 2, max_patches: 4, horizon: 4 }
    }

    #[test]
    fn patchify_pads_the_last_patch() {
        let ps = patchify(&[1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &[false, true, false, false, false, false], 4).unwrap();
        assert_eq!(ps.num_patches(), 2);
        assert_eq!(ps.values.data(), &[1.0, 0.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
        assert_eq!(ps.mask.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(ps.patch_valid(), vec![true, true]);
        let all_missing = patchify(&[1.0f64; 5], &[true, true, true, true, false], 4).unwrap();
        assert_eq!(all_missing.patch_valid(), vec![false, true]);
    }

    #[test]
    fn positional_table_starts_with_sin0_cos0() {
        let pe = positional_encoding::<f64>(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row(1)[0] - 1.0f64.sin()).abs() < 1e-15);
        assert!((pe.row(1)[3] - (1.0f64 / 100.0).cos()).abs() < 1e-15);
    }

    #[test]
    fn feature_shapes_and_length_limit() {
        let bb = Backbone::<f64>::new(config(), 0).unwrap();
        let f = bb.extract_features(&[0.5; 2 * 10], &[false; 20], 2).unwrap();
        assert_eq!((f.channels, f.patches, f.dim()), (2, 3, 8));
        assert_eq!(f.valid, vec![true; 6]);
        assert!(matches!(bb.extract_features(&[0.0; 17], &[false; 17], 1), Err(Error::TooManyPatches { patches: 5, max: 4 })));
    }

    #[test]
    fn pretraining_reduces_forecast_loss_and_freezes() {
        let corpus = sinusoid_corpus(8, 64, 1);
        let pre = PretrainConfig { epochs: 12, batch_size: 8, lr: 1e-3, seed: 1, windows_per_series: 4 };
        let (bb, report) = pretrain_forecasting::<f64>(&corpus, config(), &pre).unwrap();
        let (first, last) = (report.epoch_losses[0], report.epoch_losses[11]);
        assert!(last < 0.5 * first, "{:?}", report.epoch_losses);
        assert!(bb.is_frozen());
        assert_eq!(bb.predict(&[0.1; 12]).unwrap().len(), 4);
    }
}
