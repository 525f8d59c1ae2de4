use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of a scalar function with central
/// differences, in 64-bit precision.
///
/// `f` builds the scalar from one graph leaf per input tensor. Returns the
/// largest `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::config(format!("grad_check step {h} outside [1e-4, 1e-2]")));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars = xs
            .iter()
            .map(|x| g.leaf(x.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let mut g = Graph::<f64>::new();
    let vars = inputs
        .iter()
        .map(|x| g.leaf(x.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            xs[t].data_mut()[i] = orig + h;
            let fp = eval(&xs)?;
            xs[t].data_mut()[i] = orig - h;
            let fm = eval(&xs)?;
            xs[t].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::numeric("grad_check", "non-finite numeric gradient"));
            }
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
