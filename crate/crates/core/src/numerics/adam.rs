use super::param::Parameter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;

/// Bias-corrected Adam moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor<f32>,
    pub second_moment: Tensor<f32>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], learning_rate: f64) -> Self {
        Self {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn for_param(p: &Parameter, learning_rate: f64) -> Self {
        Self::new(p.shape(), learning_rate)
    }

    /// One update from `param.grad`. The gradient is left in place.
    pub fn update(&mut self, param: &mut Parameter) -> Result<()> {
        if !param.trainable {
            return Err(Error::usage("adam step on a frozen parameter"));
        }
        if param.shape() != self.first_moment.shape() {
            return Err(Error::config(format!(
                "adam state {:?} for parameter {:?}",
                self.first_moment.shape(),
                param.shape()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let m = self.first_moment.data_mut();
        let v = self.second_moment.data_mut();
        for (((w, &g), mi), vi) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(param.grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g as f64;
            let m_new = b1 * (*mi as f64) + (1.0 - b1) * g;
            let v_new = b2 * (*vi as f64) + (1.0 - b2) * g * g;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let mhat = m_new / bc1;
            let vhat = v_new / bc2;
            *w = (*w as f64 - self.learning_rate * mhat / (vhat.sqrt() + self.epsilon)) as f32;
        }
        if !param.value.is_finite() {
            return Err(Error::numeric("adam_update", "parameter became non-finite"));
        }
        Ok(())
    }
}
