//! Adam with bias correction.
//!
//! Parameters without an entry in the supplied [`Gradients`] are skipped
//! entirely for that step: their values and moments stay untouched. Frozen
//! parameters are never read or written.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::{Module, Parameter};
use crate::tape::Gradients;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub steps: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Adam<T> {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, state: BTreeMap::new() }
    }

    pub fn moments(&self, name: &str) -> Option<&Moments<T>> {
        self.state.get(name)
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Returns the number of scalars touched.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>], grads: &Gradients<T>) -> Result<usize> {
        let mut touched = 0;
        for p in params.iter_mut() {
            touched += self.step_param(p, grads)?;
        }
        Ok(touched)
    }

    /// [`Adam::step`] over every parameter of a module.
    pub fn step_module<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Gradients<T>) -> Result<usize> {
        let mut touched = 0;
        let mut err = None;
        module.visit_mut(&mut |p| {
            if err.is_none() {
                match self.step_param(p, grads) {
                    Ok(n) => touched += n,
                    Err(e) => err = Some(e),
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(touched),
        }
    }

    fn step_param(&mut self, p: &mut Parameter<T>, grads: &Gradients<T>) -> Result<usize> {
        if !p.trainable {
            return Ok(0);
        }
        let Some(g) = grads.get(p.name()) else { return Ok(0) };
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{}: grad {:?} vs value {:?}", p.name(), g.shape(), p.shape()),
            ));
        }
        p.set_grad(g.clone())?;
        let n = p.numel();
        let st = self
            .state
            .entry(String::from(p.name()))
            .or_insert_with(|| Moments { m: vec![T::zero(); n], v: vec![T::zero(); n], steps: 0 });
        if st.m.len() != n {
            return Err(Error::shape("adam_step", format!("{}: state size {} vs {}", p.name(), st.m.len(), n)));
        }
        adam_update(p.value_mut(), g.data(), st, &self.config);
        Ok(n)
    }
}

fn adam_update<T: Real>(value: &mut [T], grad: &[T], st: &mut Moments<T>, cfg: &AdamConfig) {
    st.steps += 1;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let t = st.steps as i32;
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    for i in 0..value.len() {
        let g = grad[i];
        st.m[i] = b1 * st.m[i] + (one - b1) * g;
        st.v[i] = b2 * st.v[i] + (one - b2) * g * g;
        let mhat = st.m[i] / c1;
        let vhat = st.v[i] / c2;
        value[i] = value[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn grads(name: &str, g: Vec<f64>) -> Gradients<f64> {
        let mut out = Gradients::default();
        out.insert(name, Tensor::vector(g));
        out
    }

    #[test]
    fn zero_gradient_from_zero_state_leaves_value() {
        let mut p = Parameter::new("w", Tensor::vector(vec![1.5, -2.0]));
        let mut opt = Adam::new(AdamConfig::default());
        let g = grads("w", vec![0.0, 0.0]);
        opt.step(&mut [&mut p], &g).unwrap();
        assert_eq!(p.value().data(), &[1.5, -2.0]);
        assert_eq!(opt.moments("w").unwrap().m, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = Parameter::new("w", Tensor::vector(vec![1.0]));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut [&mut p], &grads("w", vec![2.0])).unwrap();
        let m1 = opt.moments("w").unwrap().m[0];
        let v1 = opt.moments("w").unwrap().v[0];
        opt.step(&mut [&mut p], &grads("w", vec![0.0])).unwrap();
        assert_eq!(opt.moments("w").unwrap().m[0], 0.9 * m1);
        assert_eq!(opt.moments("w").unwrap().v[0], 0.999 * v1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Parameter::new("w", Tensor::vector(vec![0.0, 0.0]));
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        opt.step(&mut [&mut p], &grads("w", vec![3.0, -0.5])).unwrap();
        assert!((p.value().data()[0] + 0.01).abs() < 1e-9);
        assert!((p.value().data()[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn frozen_parameter_is_bitwise_unchanged() {
        let mut p = Parameter::new("w", Tensor::vector(vec![0.1, 0.2]));
        let before = p.clone();
        p.trainable = false;
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            assert_eq!(opt.step(&mut [&mut p], &grads("w", vec![1.0, 1.0])).unwrap(), 0);
        }
        assert_eq!(p.value().to_le_bytes(), before.value().to_le_bytes());
    }

    #[test]
    fn ten_steps_on_parabola_match_scalar_reference() {
        // f(x) = x^2, grad = 2x
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = Parameter::new("x", Tensor::vector(vec![1.0]));
        let mut opt = Adam::new(cfg);
        for _ in 0..10 {
            let x = p.value().data()[0];
            opt.step(&mut [&mut p], &grads("x", vec![2.0 * x])).unwrap();
        }
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.value().data()[0] - x).abs() < 1e-12);
    }
}
