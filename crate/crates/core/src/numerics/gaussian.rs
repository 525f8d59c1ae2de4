use std::sync::OnceLock;

use nalgebra::DMatrix;

use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative diagonal floor added before factorizing: `eps = 1e-4 * trace / d`.
pub const COVARIANCE_FLOOR: f64 = 1e-4;

/// Streaming mean/covariance of a set of feature vectors.
///
/// Statistics are kept as a running sum and a centred co-moment matrix in
/// 64-bit precision, so merging batches never needs the raw vectors again.
#[derive(Debug, Default)]
pub struct GaussianModel {
    dim: usize,
    count: u64,
    sum: Vec<f64>,
    mean: Vec<f64>,
    comoment: Vec<f64>,
    lower_factor: OnceLock<Vec<f64>>,
}

impl Clone for GaussianModel {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            count: self.count,
            sum: self.sum.clone(),
            mean: self.mean.clone(),
            comoment: self.comoment.clone(),
            lower_factor: OnceLock::new(),
        }
    }
}

impl PartialEq for GaussianModel {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.count == other.count
            && self.sum == other.sum
            && self.comoment == other.comoment
    }
}

impl GaussianModel {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            sum: vec![0.0; dim],
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
            lower_factor: OnceLock::new(),
        }
    }

    /// Model with the given mean, (sample) covariance and count.
    pub fn from_moments(mean: &[f64], covariance: &[f64], count: u64) -> Result<Self> {
        let dim = mean.len();
        if covariance.len() != dim * dim {
            return Err(Error::config("covariance must be d x d"));
        }
        let n = count as f64;
        let dof = if count >= 2 { n - 1.0 } else { 0.0 };
        Ok(Self {
            dim,
            count,
            sum: mean.iter().map(|m| m * n).collect(),
            mean: if count == 0 { vec![0.0; dim] } else { mean.to_vec() },
            comoment: covariance.iter().map(|c| c * dof).collect(),
            lower_factor: OnceLock::new(),
        })
    }

    /// Rebuild from the raw accumulators written by [`GaussianModel::raw_parts`].
    pub fn from_raw_parts(count: u64, sum: Vec<f64>, comoment: Vec<f64>) -> Result<Self> {
        let dim = sum.len();
        if comoment.len() != dim * dim {
            return Err(Error::Data("gaussian co-moment size mismatch".into()));
        }
        let mean = if count == 0 {
            vec![0.0; dim]
        } else {
            sum.iter().map(|s| s / count as f64).collect()
        };
        Ok(Self {
            dim,
            count,
            sum,
            mean,
            comoment,
            lower_factor: OnceLock::new(),
        })
    }

    /// `(count, running sum, centred co-moment)`; exact state of the model.
    pub fn raw_parts(&self) -> (u64, &[f64], &[f64]) {
        (self.count, &self.sum, &self.comoment)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Sample covariance (`n - 1` normalisation); zero below two observations.
    pub fn covariance(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.dim * self.dim];
        }
        let inv = 1.0 / (self.count as f64 - 1.0);
        self.comoment.iter().map(|c| c * inv).collect()
    }

    pub fn trace(&self) -> f64 {
        let cov = self.covariance();
        (0..self.dim).map(|i| cov[i * self.dim + i]).sum()
    }

    /// Pool a batch of row vectors `[n, dim]` into the statistics.
    pub fn merge(&self, batch: &Tensor<f32>) -> Result<Self> {
        let mut out = self.clone();
        out.merge_in_place(batch)?;
        Ok(out)
    }

    pub fn merge_in_place(&mut self, batch: &Tensor<f32>) -> Result<()> {
        let d = self.dim;
        if batch.rank() != 2 || batch.cols() != d {
            return Err(Error::config(format!(
                "gaussian of dim {d} cannot take batch {:?}",
                batch.shape()
            )));
        }
        let nb = batch.rows();
        if nb == 0 {
            return Ok(());
        }
        // running sum continues in row order so split and whole batches agree
        let mut bsum = vec![0.0f64; d];
        for r in 0..nb {
            for (j, &x) in batch.row(r).iter().enumerate() {
                self.sum[j] += x as f64;
                bsum[j] += x as f64;
            }
        }
        let bmean: Vec<f64> = bsum.iter().map(|s| s / nb as f64).collect();
        let mut bm2 = vec![0.0f64; d * d];
        let mut centred = vec![0.0f64; d];
        for r in 0..nb {
            for (j, &x) in batch.row(r).iter().enumerate() {
                centred[j] = x as f64 - bmean[j];
            }
            for a in 0..d {
                let ca = centred[a];
                for b in 0..d {
                    bm2[a * d + b] += ca * centred[b];
                }
            }
        }
        let na = self.count as f64;
        let nbf = nb as f64;
        let n = na + nbf;
        let w = na * nbf / n;
        for a in 0..d {
            let da = bmean[a] - self.mean[a];
            for b in 0..d {
                let db = bmean[b] - self.mean[b];
                self.comoment[a * d + b] += bm2[a * d + b] + da * db * w;
            }
        }
        self.count += nb as u64;
        let inv = 1.0 / self.count as f64;
        for (m, s) in self.mean.iter_mut().zip(&self.sum) {
            *m = s * inv;
        }
        self.lower_factor = OnceLock::new();
        Ok(())
    }

    fn factor(&self) -> Result<&Vec<f64>> {
        if let Some(l) = self.lower_factor.get() {
            return Ok(l);
        }
        let d = self.dim;
        let mut cov = self.covariance();
        let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        let lower = if trace <= 0.0 {
            vec![0.0; d * d]
        } else {
            let eps = COVARIANCE_FLOOR * trace / d as f64;
            for i in 0..d {
                cov[i * d + i] += eps;
            }
            let m = DMatrix::from_row_slice(d, d, &cov);
            let chol = m.cholesky().ok_or_else(|| {
                Error::numeric("gaussian_sample", "covariance not positive definite after floor")
            })?;
            let l = chol.l();
            let mut out = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..=i {
                    out[i * d + j] = l[(i, j)];
                }
            }
            out
        };
        Ok(self.lower_factor.get_or_init(|| lower))
    }

    /// Lower-triangular factor of the floored covariance, row-major.
    pub fn lower_factor(&self) -> Result<Vec<f64>> {
        self.factor().cloned()
    }

    /// Draw `n` vectors `mean + L z` with `z ~ N(0, I)`.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Tensor<f32>> {
        if self.count == 0 {
            return Err(Error::usage("cannot sample from an empty gaussian"));
        }
        if n == 0 {
            return Err(Error::usage("sample count must be positive"));
        }
        let d = self.dim;
        let l = self.factor()?;
        let mut out = Vec::with_capacity(n * d);
        let mut z = vec![0.0f64; d];
        for _ in 0..n {
            z.iter_mut().for_each(|v| *v = rng.normal());
            for i in 0..d {
                let row = &l[i * d..i * d + i + 1];
                let s: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                out.push((self.mean[i] + s) as f32);
            }
        }
        Tensor::new(&[n, d], out)
    }
}
