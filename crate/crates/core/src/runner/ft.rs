//! Sequential fine-tuning baseline: one prompt pair and one head correction
//! shared by every modality, overwritten task after task.

use std::sync::Arc;

use crate::comm::{ClassSpec, LossBreakdown, RegisteredClass};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Graph, Parameter, RngStream, Tensor};
use crate::synth::Modality;
use crate::towers::{project_vars, similarity_logits, unit_rows, Backbone, LowRankDelta, ModalityBatch, PromptFeed};

pub struct FtModel {
    pub backbone: Arc<Backbone>,
    pub prompt: Parameter,
    pub text_prompt: Parameter,
    pub delta: LowRankDelta,
    /// Every class seen, with its modality, in order of arrival.
    pub classes: Vec<(Modality, RegisteredClass)>,
    current: Vec<ClassSpec>,
    adam: Vec<AdamState>,
    lr: f64,
}

impl FtModel {
    pub fn new(backbone: Arc<Backbone>, lr: f64, seed: u64) -> Self {
        let cfg = backbone.config.clone();
        let shape = cfg.prompt_shape();
        Self {
            prompt: Parameter::zeros(&shape, true),
            text_prompt: Parameter::zeros(&shape, true),
            delta: LowRankDelta::new(&cfg, &mut RngStream::new(seed, "ft/delta")),
            backbone,
            classes: Vec::new(),
            current: Vec::new(),
            adam: Vec::new(),
            lr,
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        let mut out: Vec<Modality> = Vec::new();
        for (m, _) in &self.classes {
            if !out.contains(m) {
                out.push(*m);
            }
        }
        out
    }

    /// Start training on `classes` of one modality with a fresh optimiser.
    pub fn begin_task(&mut self, step: usize, m: Modality, classes: &[ClassSpec]) {
        let lr = self.lr;
        self.adam = [&self.prompt, &self.text_prompt, &self.delta.a, &self.delta.b]
            .map(|p| AdamState::for_param(p, lr))
            .into();
        self.current = classes.to_vec();
        for c in classes {
            self.classes.push((
                m,
                RegisteredClass {
                    id: c.id,
                    tokens: c.tokens.clone(),
                    step,
                },
            ));
        }
    }

    /// One Adam step on the current task's classes only.
    pub fn task_step(&mut self, m: Modality, inputs: &[&Tensor<f32>], labels: &[usize]) -> Result<LossBreakdown> {
        let cfg = self.backbone.config.clone();
        let size = cfg.prompt_size();
        let mut g = Graph::<f32>::new();
        let bb = self.backbone.bind(&mut g)?;
        let p = g.param(&self.prompt)?;
        let q = g.param(&self.text_prompt)?;
        let a = g.param(&self.delta.a)?;
        let b = g.param(&self.delta.b)?;
        let prow = g.reshape(p, &[1, size])?;
        let batch = ModalityBatch::new(inputs, &cfg)?;
        let feats = bb
            .modality
            .encode(&mut g, &cfg, &batch, Some(&PromptFeed::shared(prow, inputs.len())))?;
        let frozen = g.constant_f32(self.backbone.base_head(m.index())?)?;
        let v = project_vars(&mut g, feats, frozen, Some((a, b)))?;
        let qrow = g.reshape(q, &[1, size])?;
        let tokens: Vec<&[usize]> = self.current.iter().map(|c| c.tokens.as_slice()).collect();
        let text = bb
            .text
            .encode(&mut g, &cfg, &tokens, Some(&PromptFeed::shared(qrow, tokens.len())))?;
        let logits = similarity_logits(&mut g, v, text, cfg.temperature)?;
        let loss = g.cross_entropy(logits, labels)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::numeric("ft_step", "non-finite loss"));
        }
        g.backward(loss)?;
        let grads = [p, q, a, b].map(|v| g.grad(v));
        let params = [&mut self.prompt, &mut self.text_prompt, &mut self.delta.a, &mut self.delta.b];
        for ((param, grad), st) in params.into_iter().zip(&grads).zip(&mut self.adam) {
            param.accumulate_grad(grad)?;
            st.update(param)?;
            param.zero_grad();
        }
        Ok(LossBreakdown {
            task: value,
            self_reg: 0.0,
            cross: 0.0,
            total: value,
        })
    }

    pub fn count_parameters(&self) -> (usize, usize) {
        let n = self.prompt.len() + self.text_prompt.len() + self.delta.len();
        (n, n)
    }

    /// Predicted class ids. `routes[i]` picks the modality whose base head
    /// and (in specific mode) classes are used for sample `i`; `all` widens
    /// candidates to every class seen.
    pub fn predict(&self, inputs: &[&Tensor<f32>], routes: &[Modality], all: bool) -> Result<Vec<usize>> {
        let cfg = &self.backbone.config;
        let tokens: Vec<&[usize]> = self.classes.iter().map(|(_, c)| c.tokens.as_slice()).collect();
        let text = self.backbone.text_embeddings(&tokens, Some(&self.text_prompt.value))?;
        let text = unit_rows(&text);
        let delta = self.delta.dense();
        let mut out = Vec::with_capacity(inputs.len());
        for (chunk, rchunk) in inputs.chunks(super::EVAL_CHUNK).zip(routes.chunks(super::EVAL_CHUNK)) {
            let row = self.prompt.value.clone().reshape(&[1, cfg.prompt_size()])?;
            let feats = self.backbone.features(chunk, Some((&row, &vec![0; chunk.len()])))?;
            for (i, &m) in rchunk.iter().enumerate() {
                let head = self.backbone.base_head(m.index())?.add(&delta)?;
                let x = Tensor::new(&[1, feats.cols()], feats.row(i).to_vec())?;
                let v = x.matmul(&head)?;
                let mut best = (f32::NEG_INFINITY, None);
                for (r, (cm, c)) in self.classes.iter().enumerate() {
                    if !all && *cm != m {
                        continue;
                    }
                    let s: f32 = text.row(r).iter().zip(v.data()).map(|(a, b)| a * b).sum();
                    if s > best.0 {
                        best = (s, Some(c.id));
                    }
                }
                out.push(best.1.ok_or_else(|| Error::numeric("evaluate", "no finite candidate score"))?);
            }
        }
        Ok(out)
    }
}
