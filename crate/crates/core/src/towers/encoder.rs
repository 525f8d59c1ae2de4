//! The two towers: a shared encoder for every non-text modality and a text
//! encoder. Both read a learned readout token placed in front of the
//! sequence and accept deep prompts for their first `prompt_depth` layers.

use super::block::{block_forward, gaussian, param_group, Block, BlockVars};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{AttentionSpec, Graph, Parameter, Real, RngStream, Tensor, Var};

param_group!(ModalityEmbed => ModalityEmbedVars { w_in, b_in, pos, readout, ln_g, ln_b });
param_group!(TextEmbed => TextEmbedVars { tokens, pos, readout, ln_g, ln_b, out_map });

/// Deep prompts for a batch. `rows` is `[n_src, depth * plen * d]` and
/// `src[i]` picks the row used by sample `i`; every temporal slice of a
/// sample sees the same prompt.
#[derive(Clone, Debug)]
pub struct PromptFeed {
    pub rows: Var,
    pub src: Vec<usize>,
}

impl PromptFeed {
    /// The same prompt row for all `n` samples.
    pub fn shared(rows: Var, n: usize) -> Self {
        Self {
            rows,
            src: vec![0; n],
        }
    }
}

/// Samples of any non-text modality packed slice by slice.
#[derive(Clone, Debug)]
pub struct ModalityBatch {
    input: Tensor<f32>,
    slices: Vec<usize>,
}

impl ModalityBatch {
    /// Each item is `[temporal * spatial, d_in]`.
    pub fn new(items: &[&Tensor<f32>], cfg: &EncoderConfig) -> Result<Self> {
        let mut data = Vec::new();
        let mut slices = Vec::with_capacity(items.len());
        for x in items {
            let s = x.shape();
            if s.len() != 2 || s[1] != cfg.d_in || s[0] == 0 || s[0] % cfg.spatial_len != 0 {
                return Err(Error::config(format!(
                    "modality input {s:?} does not fit {} x {}",
                    cfg.spatial_len, cfg.d_in
                )));
            }
            slices.push(s[0] / cfg.spatial_len);
            data.extend_from_slice(x.data());
        }
        let rows = data.len() / cfg.d_in;
        Ok(Self {
            input: Tensor::new(&[rows, cfg.d_in], data)?,
            slices,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn num_slices(&self) -> usize {
        self.slices.iter().sum()
    }

    fn slice_owner(&self) -> Vec<usize> {
        self.slices
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| std::iter::repeat_n(i, n))
            .collect()
    }

    /// `[batch, nseq]` matrix averaging each sample's slices.
    fn pool_matrix(&self) -> Tensor<f32> {
        let nseq = self.num_slices();
        let mut m = Tensor::zeros(&[self.len(), nseq]);
        let mut col = 0;
        for (i, &n) in self.slices.iter().enumerate() {
            for _ in 0..n {
                m.data_mut()[i * nseq + col] = 1.0 / n as f32;
                col += 1;
            }
        }
        m
    }
}

fn run_stack<T: Real>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    blocks: &[BlockVars],
    x: Var,
    nseq: usize,
    seq: usize,
    prompt: Option<(Var, Vec<usize>)>,
) -> Result<Var> {
    let d = cfg.d_model;
    let plen = cfg.prompt_len;
    let per_layer = match prompt {
        Some((rows, seq_src)) => {
            let want = cfg.prompt_depth * plen * d;
            if g.shape(rows).len() != 2 || g.shape(rows)[1] != want {
                return Err(Error::config(format!(
                    "prompt rows {:?}, expected [_, {want}]",
                    g.shape(rows)
                )));
            }
            let sel = g.gather(rows, &seq_src)?;
            let sel = g.reshape(sel, &[nseq, cfg.prompt_depth, plen * d])?;
            let mut out = Vec::with_capacity(cfg.prompt_depth);
            for l in 0..cfg.prompt_depth {
                let p = g.slice(sel, 1, l, 1)?;
                out.push(g.reshape(p, &[nseq * plen, d])?);
            }
            out
        }
        None => Vec::new(),
    };
    let mut x = x;
    for (l, b) in blocks.iter().enumerate() {
        let p = per_layer.get(l).copied();
        let spec = AttentionSpec {
            nseq,
            seq,
            plen: if p.is_some() { plen } else { 0 },
            heads: cfg.num_heads,
        };
        x = block_forward(g, b, x, spec, p)?;
    }
    let x = g.reshape(x, &[nseq, seq * d])?;
    g.slice(x, 1, 0, d)
}

/// Prepend the readout token to `[nseq, len * d]` token rows.
fn with_readout<T: Real>(g: &mut Graph<T>, tokens: Var, readout: Var, nseq: usize, len: usize, d: usize) -> Result<Var> {
    let r = g.gather(readout, &vec![0; nseq])?;
    let tokens = g.reshape(tokens, &[nseq, len * d])?;
    let x = g.concat(&[r, tokens], 1)?;
    g.reshape(x, &[nseq * (len + 1), d])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityTower {
    pub embed: ModalityEmbed,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct ModalityTowerVars {
    pub embed: ModalityEmbedVars,
    pub blocks: Vec<BlockVars>,
}

impl ModalityTower {
    pub fn init(cfg: &EncoderConfig, rng: &mut RngStream) -> Self {
        let d = cfg.d_model;
        let embed = ModalityEmbed {
            w_in: gaussian(rng, &[cfg.d_in, d], 1.0 / (cfg.d_in as f32).sqrt()),
            b_in: Parameter::zeros(&[d], true),
            pos: gaussian(rng, &[cfg.spatial_len * d], 0.1),
            readout: gaussian(rng, &[1, d], 0.1),
            ln_g: Parameter::new(Tensor::full(&[d], 1.0), true),
            ln_b: Parameter::zeros(&[d], true),
        };
        let blocks = (0..cfg.num_layers)
            .map(|_| Block::init(d, cfg.mlp_hidden, cfg.num_layers, rng))
            .collect();
        Self { embed, blocks }
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Result<ModalityTowerVars> {
        Ok(ModalityTowerVars {
            embed: self.embed.bind(g)?,
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect::<Result<_>>()?,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.embed.params_mut().into_iter().map(|p| p.1).collect();
        for b in &mut self.blocks {
            out.extend(b.params_mut().into_iter().map(|p| p.1));
        }
        out
    }
}

impl ModalityTowerVars {
    pub fn list(&self) -> Vec<Var> {
        let mut out = self.embed.list();
        for b in &self.blocks {
            out.extend(b.list());
        }
        out
    }

    /// Pre-projection features `[batch, d]`, slice features mean-pooled.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        cfg: &EncoderConfig,
        batch: &ModalityBatch,
        prompt: Option<&PromptFeed>,
    ) -> Result<Var> {
        let d = cfg.d_model;
        let nseq = batch.num_slices();
        let owner = batch.slice_owner();
        let x = g.constant_f32(&batch.input)?;
        let t = g.matmul(x, self.embed.w_in)?;
        let t = g.add_row(t, self.embed.b_in)?;
        let t = g.reshape(t, &[nseq, cfg.spatial_len * d])?;
        let t = g.add_row(t, self.embed.pos)?;
        let x = with_readout(g, t, self.embed.readout, nseq, cfg.spatial_len, d)?;
        let prompt = match prompt {
            Some(p) => {
                if p.src.len() != batch.len() {
                    return Err(Error::config("prompt feed does not match batch size"));
                }
                Some((p.rows, owner.iter().map(|&i| p.src[i]).collect()))
            }
            None => None,
        };
        let h = run_stack(g, cfg, &self.blocks, x, nseq, cfg.spatial_len + 1, prompt)?;
        let h = g.layer_norm(h, self.embed.ln_g, self.embed.ln_b)?;
        if batch.slices.iter().all(|&n| n == 1) {
            return Ok(h);
        }
        let pool = g.constant_f32(&batch.pool_matrix())?;
        g.matmul(pool, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextTower {
    pub embed: TextEmbed,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct TextTowerVars {
    pub embed: TextEmbedVars,
    pub blocks: Vec<BlockVars>,
}

impl TextTower {
    pub fn init(cfg: &EncoderConfig, rng: &mut RngStream) -> Self {
        let d = cfg.d_model;
        let embed = TextEmbed {
            tokens: gaussian(rng, &[cfg.vocab_size, d], 1.0),
            pos: gaussian(rng, &[cfg.text_len * d], 0.1),
            readout: gaussian(rng, &[1, d], 0.1),
            ln_g: Parameter::new(Tensor::full(&[d], 1.0), true),
            ln_b: Parameter::zeros(&[d], true),
            out_map: gaussian(rng, &[d, cfg.d_joint()], 1.0 / (d as f32).sqrt()),
        };
        let blocks = (0..cfg.num_layers)
            .map(|_| Block::init(d, cfg.mlp_hidden, cfg.num_layers, rng))
            .collect();
        Self { embed, blocks }
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Result<TextTowerVars> {
        Ok(TextTowerVars {
            embed: self.embed.bind(g)?,
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect::<Result<_>>()?,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.embed.params_mut().into_iter().map(|p| p.1).collect();
        for b in &mut self.blocks {
            out.extend(b.params_mut().into_iter().map(|p| p.1));
        }
        out
    }
}

impl TextTowerVars {
    pub fn list(&self) -> Vec<Var> {
        let mut out = self.embed.list();
        for b in &self.blocks {
            out.extend(b.list());
        }
        out
    }

    /// Joint-space text embeddings `[n, d_joint]`, one per token sequence.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        cfg: &EncoderConfig,
        tokens: &[&[usize]],
        prompt: Option<&PromptFeed>,
    ) -> Result<Var> {
        let d = cfg.d_model;
        let n = tokens.len();
        let mut ids = Vec::with_capacity(n * cfg.text_len);
        for t in tokens {
            if t.len() != cfg.text_len {
                return Err(Error::Data(format!(
                    "class text has {} tokens, expected {}",
                    t.len(),
                    cfg.text_len
                )));
            }
            if let Some(&bad) = t.iter().find(|&&id| id >= cfg.vocab_size) {
                return Err(Error::Data(format!(
                    "token id {bad} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            ids.extend_from_slice(t);
        }
        let e = g.gather(self.embed.tokens, &ids)?;
        let e = g.reshape(e, &[n, cfg.text_len * d])?;
        let e = g.add_row(e, self.embed.pos)?;
        let x = with_readout(g, e, self.embed.readout, n, cfg.text_len, d)?;
        let prompt = match prompt {
            Some(p) => {
                if p.src.len() != n {
                    return Err(Error::config("prompt feed does not match class count"));
                }
                Some((p.rows, p.src.clone()))
            }
            None => None,
        };
        let h = run_stack(g, cfg, &self.blocks, x, n, cfg.text_len + 1, prompt)?;
        let h = g.layer_norm(h, self.embed.ln_g, self.embed.ln_b)?;
        g.matmul(h, self.embed.out_map)
    }
}
