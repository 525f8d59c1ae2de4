//! Pre-LN transformer block and the parameter-group macro.

use crate::error::Result;
use crate::numerics::{AttentionSpec, Graph, Parameter, Real, RngStream, Tensor, Var};

/// Declares a struct of [`Parameter`]s together with a matching struct of
/// graph handles and a `bind` that puts every field on a graph.
macro_rules! param_group {
    ($(#[$m:meta])* $name:ident => $vars:ident { $($field:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $(pub $field: $crate::numerics::Parameter,)*
        }

        #[derive(Clone, Copy, Debug)]
        pub struct $vars {
            $(pub $field: $crate::numerics::Var,)*
        }

        impl $vars {
            /// Handles in field order.
            pub fn list(&self) -> Vec<$crate::numerics::Var> {
                vec![$(self.$field,)*]
            }
        }

        impl $name {
            pub fn bind<T: $crate::numerics::Real>(
                &self,
                g: &mut $crate::numerics::Graph<T>,
            ) -> $crate::error::Result<$vars> {
                Ok($vars { $($field: g.param(&self.$field)?,)* })
            }

            pub fn params(&self) -> Vec<(&'static str, &$crate::numerics::Parameter)> {
                vec![$((stringify!($field), &self.$field),)*]
            }

            pub fn params_mut(&mut self) -> Vec<(&'static str, &mut $crate::numerics::Parameter)> {
                vec![$((stringify!($field), &mut self.$field),)*]
            }
        }
    };
}
pub(crate) use param_group;

pub(crate) fn gaussian(rng: &mut RngStream, shape: &[usize], std: f32) -> Parameter {
    Parameter::new(Tensor::from_fn(shape, |_| rng.normal_f32(std)), true)
}

param_group!(
    /// One pre-LN transformer layer.
    Block => BlockVars {
        ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2,
    }
);

impl Block {
    pub fn init(d: usize, hidden: usize, depth: usize, rng: &mut RngStream) -> Self {
        let s = 1.0 / (d as f32).sqrt();
        let out = s / (2.0 * depth as f32).sqrt();
        let ones = || Parameter::new(Tensor::full(&[d], 1.0), true);
        let zeros = |n: usize| Parameter::zeros(&[n], true);
        Self {
            ln1_g: ones(),
            ln1_b: zeros(d),
            wq: gaussian(rng, &[d, d], s),
            bq: zeros(d),
            wk: gaussian(rng, &[d, d], s),
            bk: zeros(d),
            wv: gaussian(rng, &[d, d], s),
            bv: zeros(d),
            wo: gaussian(rng, &[d, d], out),
            bo: zeros(d),
            ln2_g: ones(),
            ln2_b: zeros(d),
            w1: gaussian(rng, &[d, hidden], s),
            b1: zeros(hidden),
            w2: gaussian(rng, &[hidden, d], out * (d as f32 / hidden as f32).sqrt()),
            b2: zeros(d),
        }
    }
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// `prompt` rows are `[nseq * plen, d]`; they enter attention as extra keys
/// and values only, projected without bias so that zero rows stay inert.
pub(crate) fn block_forward<T: Real>(
    g: &mut Graph<T>,
    b: &BlockVars,
    x: Var,
    spec: AttentionSpec,
    prompt: Option<Var>,
) -> Result<Var> {
    let h = g.layer_norm(x, b.ln1_g, b.ln1_b)?;
    let q = linear(g, h, b.wq, b.bq)?;
    let k = linear(g, h, b.wk, b.bk)?;
    let v = linear(g, h, b.wv, b.bv)?;
    let pkv = match prompt {
        Some(p) => Some((g.matmul(p, b.wk)?, g.matmul(p, b.wv)?)),
        None => None,
    };
    let a = g.attention(q, k, v, pkv, spec)?;
    let o = linear(g, a, b.wo, b.bo)?;
    let x = g.add(x, o)?;
    let h = g.layer_norm(x, b.ln2_g, b.ln2_b)?;
    let h = linear(g, h, b.w1, b.b1)?;
    let h = g.gelu(h)?;
    let h = linear(g, h, b.w2, b.b2)?;
    g.add(x, h)
}
