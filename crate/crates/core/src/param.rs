use alloc::string::String;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A named, optionally trainable weight tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter { name: name.into(), value, grad, trainable: true }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Replaces the value, keeping the shape.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(
                "set_value",
                alloc::format!("{}: {:?} vs {:?}", self.name, value.shape(), self.value.shape()),
            ));
        }
        value.check_finite("set_value")?;
        self.value = value;
        Ok(())
    }

    pub fn set_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::shape(
                "set_grad",
                alloc::format!("{}: {:?} vs {:?}", self.name, grad.shape(), self.value.shape()),
            ));
        }
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = T::zero();
        }
    }

    pub(crate) fn value_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |p| p.trainable = trainable);
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.numel()
            }
        });
        n
    }
}
