//! Frozen two-tower backbone, projection heads and scoring.

mod block;
mod encoder;
mod pretrain;

pub use block::{Block, BlockVars};
pub use encoder::{
    ModalityBatch, ModalityEmbed, ModalityTower, ModalityTowerVars, PromptFeed, TextEmbed, TextTower,
    TextTowerVars,
};
pub use pretrain::{pretrain_backbone, retrieval_accuracy, PretrainConfig, PretrainCorpus, PretrainItem};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorStore;
use crate::numerics::{Graph, Parameter, Real, RngStream, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    /// Layers that receive prompt rows.
    pub prompt_depth: usize,
    pub prompt_len: usize,
    pub vocab_size: usize,
    /// Tokens per class name.
    pub text_len: usize,
    /// Tokens per temporal slice of a modality input.
    pub spatial_len: usize,
    /// Width of a raw modality token.
    pub d_in: usize,
    pub head_rank: usize,
    pub temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            d_model: 32,
            num_heads: 4,
            mlp_hidden: 64,
            prompt_depth: 2,
            prompt_len: 4,
            vocab_size: 64,
            text_len: 4,
            spatial_len: 16,
            d_in: 32,
            head_rank: 4,
            temperature: 0.07,
        }
    }
}

impl EncoderConfig {
    pub fn d_joint(&self) -> usize {
        self.d_model
    }

    /// Shape of one prompt stack.
    pub fn prompt_shape(&self) -> [usize; 3] {
        [self.prompt_depth, self.prompt_len, self.d_model]
    }

    pub fn prompt_size(&self) -> usize {
        self.prompt_depth * self.prompt_len * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return bad("d_model must be a positive multiple of num_heads");
        }
        if self.prompt_depth == 0 || self.prompt_depth > self.num_layers {
            return bad("prompt_depth must lie in 1..=num_layers");
        }
        if self.prompt_len == 0 || self.text_len == 0 || self.spatial_len == 0 || self.d_in == 0 {
            return bad("prompt_len, text_len, spatial_len and d_in must be positive");
        }
        if self.head_rank == 0 || self.mlp_hidden == 0 || self.vocab_size == 0 {
            return bad("head_rank, mlp_hidden and vocab_size must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        Ok(())
    }
}

/// Fresh low-rank head correction: `a` random, `b` zero, so `a·b = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankDelta {
    pub a: Parameter,
    pub b: Parameter,
}

impl LowRankDelta {
    pub fn new(cfg: &EncoderConfig, rng: &mut RngStream) -> Self {
        let d = cfg.d_model;
        let r = cfg.head_rank;
        Self {
            a: Parameter::new(Tensor::from_fn(&[d, r], |_| rng.normal_f32(1.0 / (d as f32).sqrt())), true),
            b: Parameter::zeros(&[r, cfg.d_joint()], true),
        }
    }

    pub fn dense(&self) -> Tensor<f32> {
        self.a.value.matmul(&self.b.value).expect("delta factors conform")
    }

    pub fn len(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `base + a·b` applied on the right of pre-projection features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub base: Tensor<f32>,
    pub delta: LowRankDelta,
}

impl ProjectionHead {
    pub fn effective(&self) -> Result<Tensor<f32>> {
        self.base.add(&self.delta.dense())
    }

    pub fn project(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(features.clone())?;
        let frozen = g.constant(self.base.clone())?;
        let a = g.param(&self.delta.a)?;
        let b = g.param(&self.delta.b)?;
        let v = project_vars(&mut g, x, frozen, Some((a, b)))?;
        Ok(g.value(v).clone())
    }
}

/// `x·frozen + (x·a)·b`.
pub fn project_vars<T: Real>(g: &mut Graph<T>, x: Var, frozen: Var, delta: Option<(Var, Var)>) -> Result<Var> {
    let v = g.matmul(x, frozen)?;
    match delta {
        Some((a, b)) => {
            let h = g.matmul(x, a)?;
            let h = g.matmul(h, b)?;
            g.add(v, h)
        }
        None => Ok(v),
    }
}

/// Temperature-scaled cosine logits `[n, n_cand]`.
pub fn similarity_logits<T: Real>(g: &mut Graph<T>, v: Var, text: Var, temperature: f64) -> Result<Var> {
    let c = g.cosine_matrix(v, text)?;
    g.scale(c, 1.0 / temperature)
}

/// Softmax over `cos(v, l_j) / temperature`.
pub fn class_probabilities(v: &[f32], candidates: &Tensor<f32>, temperature: f64) -> Result<Vec<f32>> {
    if candidates.rank() != 2 || candidates.rows() == 0 || candidates.cols() != v.len() {
        return Err(Error::config(format!(
            "{} candidates of shape {:?} for a {}-vector",
            candidates.rows(),
            candidates.shape(),
            v.len()
        )));
    }
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[1, v.len()], v.to_vec())?)?;
    let l = g.constant(candidates.clone())?;
    let z = similarity_logits(&mut g, x, l, temperature)?;
    let p = g.softmax(z)?;
    Ok(g.value(p).data().to_vec())
}

/// Rows scaled to unit length; zero rows stay zero.
pub fn unit_rows(t: &Tensor<f32>) -> Tensor<f32> {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let n = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

/// Index of the largest entry; ties go to the first.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// The frozen pair of encoders plus per-modality base heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: EncoderConfig,
    pub modality: ModalityTower,
    pub text: TextTower,
    /// Base projection `[d, d_joint]` per modality.
    pub heads: Vec<Parameter>,
    /// Mean prompt-free feature per modality over the pretraining corpus.
    pub centroids: Tensor<f32>,
    /// Held-out retrieval accuracy reached by pretraining.
    pub retrieval: f64,
}

/// A backbone bound onto one graph.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub modality: ModalityTowerVars,
    pub text: TextTowerVars,
}

impl Backbone {
    pub fn init(cfg: &EncoderConfig, num_modalities: usize, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let modality = ModalityTower::init(cfg, &mut rng.derive("modality"));
        let text = TextTower::init(cfg, &mut rng.derive("text"));
        let mut hr = rng.derive("heads");
        let d = cfg.d_model;
        let heads = (0..num_modalities)
            .map(|_| block::gaussian(&mut hr, &[d, cfg.d_joint()], 1.0 / (d as f32).sqrt()))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            modality,
            text,
            heads,
            centroids: Tensor::zeros(&[num_modalities, d]),
            retrieval: 0.0,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.heads.len()
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Result<BackboneVars> {
        Ok(BackboneVars {
            modality: self.modality.bind(g)?,
            text: self.text.bind(g)?,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.modality.params_mut();
        out.extend(self.text.params_mut());
        out.extend(self.heads.iter_mut());
        out
    }

    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            p.trainable = false;
            p.zero_grad();
        }
    }

    pub fn base_head(&self, m: usize) -> Result<&Tensor<f32>> {
        self.heads
            .get(m)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("no base head for modality {m}")))
    }

    /// Pre-projection features without a graph the caller keeps.
    /// `prompt` is `(rows [n_src, prompt_size], src per sample)`.
    pub fn features(&self, items: &[&Tensor<f32>], prompt: Option<(&Tensor<f32>, &[usize])>) -> Result<Tensor<f32>> {
        let batch = ModalityBatch::new(items, &self.config)?;
        let mut g = Graph::<f32>::new();
        let tower = self.modality.bind(&mut g)?;
        let feed = match prompt {
            Some((rows, src)) => Some(PromptFeed {
                rows: g.constant(rows.clone())?,
                src: src.to_vec(),
            }),
            None => None,
        };
        let v = tower.encode(&mut g, &self.config, &batch, feed.as_ref())?;
        Ok(g.value(v).clone())
    }

    /// Text embeddings with one shared prompt row (or none).
    pub fn text_embeddings(&self, tokens: &[&[usize]], prompt: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let tower = self.text.bind(&mut g)?;
        let feed = match prompt {
            Some(rows) => Some(PromptFeed::shared(
                g.constant(rows.clone().reshape(&[1, self.config.prompt_size()])?)?,
                tokens.len(),
            )),
            None => None,
        };
        let l = tower.encode(&mut g, &self.config, tokens, feed.as_ref())?;
        Ok(g.value(l).clone())
    }

    /// Index of the nearest modality centroid for each feature row.
    pub fn nearest_centroid(&self, features: &Tensor<f32>) -> Vec<usize> {
        (0..features.rows())
            .map(|i| {
                let f = features.row(i);
                let dist: Vec<f32> = (0..self.centroids.rows())
                    .map(|m| {
                        -self
                            .centroids
                            .row(m)
                            .iter()
                            .zip(f)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f32>()
                    })
                    .collect();
                argmax(&dist)
            })
            .collect()
    }

    fn named(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        for (n, p) in self.modality.embed.params() {
            out.push((format!("modality.{n}"), p));
        }
        for (i, b) in self.modality.blocks.iter().enumerate() {
            for (n, p) in b.params() {
                out.push((format!("modality.block{i}.{n}"), p));
            }
        }
        for (n, p) in self.text.embed.params() {
            out.push((format!("text.{n}"), p));
        }
        for (i, b) in self.text.blocks.iter().enumerate() {
            for (n, p) in b.params() {
                out.push((format!("text.block{i}.{n}"), p));
            }
        }
        for (i, p) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.base"), p));
        }
        out
    }

    pub fn to_store(&self) -> Result<TensorStore> {
        let mut s = TensorStore::new("backbone");
        for (n, p) in self.named() {
            s.put(n, &p.value);
        }
        s.put("centroids", &self.centroids);
        s.set_attr("config", serde_json::to_value(&self.config)?);
        s.set_attr("num_modalities", serde_json::json!(self.num_modalities()));
        s.set_attr("retrieval", serde_json::json!(self.retrieval));
        Ok(s)
    }

    /// Rebuild a frozen backbone from a checkpoint.
    pub fn from_store(s: &TensorStore) -> Result<Self> {
        if s.kind() != "backbone" {
            return Err(Error::Data(format!("checkpoint kind {} is not a backbone", s.kind())));
        }
        let cfg: EncoderConfig = serde_json::from_value(
            s.attr("config")
                .cloned()
                .ok_or_else(|| Error::Data("checkpoint lacks config".into()))?,
        )?;
        let nm = s
            .attr("num_modalities")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Data("checkpoint lacks num_modalities".into()))? as usize;
        let mut b = Backbone::init(&cfg, nm, &mut RngStream::new(0, "load"))?;
        let names: Vec<String> = b.named().into_iter().map(|(n, _)| n).collect();
        let mut loaded = Vec::with_capacity(names.len());
        for n in &names {
            loaded.push(s.get(n)?);
        }
        let mut params = b.params_mut();
        // params_mut and named walk the fields in the same order
        for (p, t) in params.iter_mut().zip(loaded) {
            if t.shape() != p.value.shape() {
                return Err(Error::Data(format!("checkpoint tensor shape {:?}", t.shape())));
            }
            p.value = t;
        }
        b.centroids = s.get("centroids")?;
        b.retrieval = s.attr("retrieval").and_then(|v| v.as_f64()).unwrap_or(0.0);
        b.freeze();
        Ok(b)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(self.to_store()?.digest())
    }
}
