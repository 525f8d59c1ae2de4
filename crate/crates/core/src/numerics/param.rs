use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// A tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor<f32>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable,
        }
    }

    pub fn zeros(shape: &[usize], trainable: bool) -> Self {
        Self::new(Tensor::zeros(shape), trainable)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    /// Add a gradient computed in any precision.
    pub fn accumulate_grad<T: Real>(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::config(format!(
                "gradient shape {:?} for parameter {:?}",
                g.shape(),
                self.value.shape()
            )));
        }
        for (d, &s) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *d += s.as_f32();
        }
        Ok(())
    }
}
