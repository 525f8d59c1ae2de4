//! Relevance gate: one linear layer over prompt-free features, trained from
//! zero on Gaussian replay of each modality's raw statistics.

use crate::error::{Error, Result};
use crate::numerics::{AdamState, Graph, Parameter, Tensor};
use crate::synth::Modality;

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceGate {
    /// `[d, k]`
    pub weight: Tensor<f32>,
    /// `[k]`
    pub bias: Tensor<f32>,
    pub modalities: Vec<Modality>,
}

/// Outcome of one gate fit.
#[derive(Clone, Debug, PartialEq)]
pub struct GateFit {
    pub gate: RelevanceGate,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

impl RelevanceGate {
    /// A gate over one modality: probability 1 everywhere.
    pub fn trivial(d: usize, m: Modality) -> Self {
        Self {
            weight: Tensor::zeros(&[d, 1]),
            bias: Tensor::zeros(&[1]),
            modalities: vec![m],
        }
    }

    pub fn len(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    /// Softmax weights `[n, k]` for feature rows `[n, d]`.
    pub fn probabilities(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(features.clone())?;
        let w = g.constant(self.weight.clone())?;
        let b = g.constant(self.bias.clone())?;
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        let p = g.softmax(z)?;
        Ok(g.value(p).clone())
    }

    /// Fit from zero on `(modality, samples [n, d])` groups with full-batch
    /// Adam on the summed cross-entropy.
    pub fn fit(groups: &[(Modality, Tensor<f32>)], steps: usize, lr: f64) -> Result<GateFit> {
        let first = groups.first().ok_or_else(|| Error::usage("gate needs at least one modality"))?;
        let d = first.1.cols();
        let k = groups.len();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (j, (_, s)) in groups.iter().enumerate() {
            if s.cols() != d {
                return Err(Error::config("gate samples of mixed width"));
            }
            rows.extend_from_slice(s.data());
            labels.extend(std::iter::repeat_n(j, s.rows()));
        }
        let x = Tensor::new(&[labels.len(), d], rows)?;
        let mut w = Parameter::zeros(&[d, k], true);
        let mut b = Parameter::zeros(&[k], true);
        let mut sw = AdamState::for_param(&w, lr);
        let mut sb = AdamState::for_param(&b, lr);
        let mut initial_loss = 0.0;
        let mut final_loss = 0.0;
        for step in 0..=steps {
            let mut g = Graph::<f32>::new();
            let xv = g.constant(x.clone())?;
            let wv = g.param(&w)?;
            let bv = g.param(&b)?;
            let z = g.matmul(xv, wv)?;
            let z = g.add_row(z, bv)?;
            let loss = g.cross_entropy(z, &labels)?;
            let value = g.scalar(loss) as f64;
            if step == 0 {
                initial_loss = value;
            }
            final_loss = value;
            if step == steps || k == 1 {
                break;
            }
            g.backward(loss)?;
            w.accumulate_grad(&g.grad(wv))?;
            b.accumulate_grad(&g.grad(bv))?;
            sw.update(&mut w)?;
            sb.update(&mut b)?;
            w.zero_grad();
            b.zero_grad();
        }
        let gate = RelevanceGate {
            weight: w.value,
            bias: b.value,
            modalities: groups.iter().map(|g| g.0).collect(),
        };
        let p = gate.probabilities(&x)?;
        let hits = (0..labels.len())
            .filter(|&i| crate::towers::argmax(p.row(i)) == labels[i])
            .count();
        Ok(GateFit {
            gate,
            initial_loss,
            final_loss,
            train_accuracy: hits as f64 / labels.len() as f64,
        })
    }
}
