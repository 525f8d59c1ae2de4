//! Fused multi-head attention kernels used by [`super::Graph::attention`].
//!
//! Every (sequence, head) pair is a handful of small strided GEMMs over the
//! packed `[rows, d]` buffers; no per-head copies are made.

use super::kernels::softmax_row;
use super::tensor::Real;

/// Geometry of a packed attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    /// Number of independent sequences packed along the rows.
    pub nseq: usize,
    /// Tokens per sequence.
    pub seq: usize,
    /// Prompt rows per sequence (0 when no prompt branch).
    pub plen: usize,
    pub heads: usize,
}

type PromptKv<'a, T> = Option<(&'a [T], &'a [T])>;

/// `scores = scale * q_h · k_hᵀ`, then row softmax, then `out_h += p · v_h`.
#[allow(clippy::too_many_arguments)]
fn branch_forward<T: Real>(
    d: usize,
    rows: usize,
    keys: usize,
    dh: usize,
    scale: T,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &mut [T],
    out: &mut [T],
) {
    T::gemm(rows, dh, keys, scale, q, (d, 1), k, (1, d), T::zero(), probs, (keys, 1));
    for row in probs.chunks_mut(keys) {
        softmax_row(row);
    }
    T::gemm(rows, keys, dh, T::one(), probs, (keys, 1), v, (d, 1), T::one(), out, (d, 1));
}

/// Backward of [`branch_forward`]; `tmp` holds `rows * keys` scratch.
#[allow(clippy::too_many_arguments)]
fn branch_backward<T: Real>(
    d: usize,
    rows: usize,
    keys: usize,
    dh: usize,
    scale: T,
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    tmp: &mut [T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let one = T::one();
    T::gemm(rows, dh, keys, one, dout, (d, 1), v, (1, d), T::zero(), tmp, (keys, 1));
    T::gemm(keys, rows, dh, one, probs, (1, keys), dout, (d, 1), one, dv, (d, 1));
    for (t, p) in tmp.chunks_mut(keys).zip(probs.chunks(keys)) {
        let acc: T = t.iter().zip(p).map(|(&a, &b)| a * b).sum();
        for (tv, &pv) in t.iter_mut().zip(p) {
            *tv = pv * (*tv - acc) * scale;
        }
    }
    T::gemm(rows, keys, dh, one, tmp, (keys, 1), k, (d, 1), one, dq, (d, 1));
    T::gemm(keys, rows, dh, one, tmp, (1, keys), q, (d, 1), one, dk, (d, 1));
}

/// Returns `(output, token_probs, prompt_probs)`.
pub(crate) fn attention_forward<T: Real>(
    spec: &AttentionSpec,
    d: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    prompt: PromptKv<'_, T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttentionSpec {
        nseq,
        seq,
        plen,
        heads,
    } = *spec;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); nseq * seq * d];
    let mut probs = vec![T::zero(); nseq * heads * seq * seq];
    let mut pprobs = if prompt.is_some() {
        vec![T::zero(); nseq * heads * seq * plen]
    } else {
        Vec::new()
    };
    for s in 0..nseq {
        for h in 0..heads {
            let base = s * seq * d + h * dh;
            let pb = (s * heads + h) * seq * seq;
            branch_forward(
                d,
                seq,
                seq,
                dh,
                scale,
                &q[base..],
                &k[base..],
                &v[base..],
                &mut probs[pb..pb + seq * seq],
                &mut out[base..],
            );
            if let Some((pk, pv)) = prompt {
                let kb = s * plen * d + h * dh;
                let ppb = (s * heads + h) * seq * plen;
                branch_forward(
                    d,
                    seq,
                    plen,
                    dh,
                    scale,
                    &q[base..],
                    &pk[kb..],
                    &pv[kb..],
                    &mut pprobs[ppb..ppb + seq * plen],
                    &mut out[base..],
                );
            }
        }
    }
    (out, probs, pprobs)
}

/// Gradients for `[q, k, v]` and, with a prompt branch, `[.., pk, pv]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    spec: &AttentionSpec,
    d: usize,
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    prompt: PromptKv<'_, T>,
    probs: &[T],
    pprobs: &[T],
) -> Vec<Vec<T>> {
    let AttentionSpec {
        nseq,
        seq,
        plen,
        heads,
    } = *spec;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let (mut dpk, mut dpv) = match prompt {
        Some((pk, pv)) => (vec![T::zero(); pk.len()], vec![T::zero(); pv.len()]),
        None => (Vec::new(), Vec::new()),
    };
    let mut tmp = vec![T::zero(); seq * seq.max(plen)];
    for s in 0..nseq {
        for h in 0..heads {
            let base = s * seq * d + h * dh;
            let pb = (s * heads + h) * seq * seq;
            branch_backward(
                d,
                seq,
                seq,
                dh,
                scale,
                &dout[base..],
                &q[base..],
                &k[base..],
                &v[base..],
                &probs[pb..pb + seq * seq],
                &mut tmp[..seq * seq],
                &mut dq[base..],
                &mut dk[base..],
                &mut dv[base..],
            );
            if let Some((pk, pv)) = prompt {
                let kb = s * plen * d + h * dh;
                let ppb = (s * heads + h) * seq * plen;
                branch_backward(
                    d,
                    seq,
                    plen,
                    dh,
                    scale,
                    &dout[base..],
                    &q[base..],
                    &pk[kb..],
                    &pv[kb..],
                    &pprobs[ppb..ppb + seq * plen],
                    &mut tmp[..seq * plen],
                    &mut dq[base..],
                    &mut dpk[kb..],
                    &mut dpv[kb..],
                );
            }
        }
    }
    let mut out = vec![dq, dk, dv];
    if prompt.is_some() {
        out.push(dpk);
        out.push(dpv);
    }
    out
}
