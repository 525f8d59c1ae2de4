//! Prediction with or without the modality identity.

use serde::{Deserialize, Serialize};

use super::CommModel;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synth::Modality;
use crate::towers::{argmax, unit_rows};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Modality given: its own prompts, head and classes.
    Specific,
    /// Modality inferred; candidates are the classes of every modality.
    Agnostic,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "specific" => Ok(EvalMode::Specific),
            "agnostic" => Ok(EvalMode::Agnostic),
            _ => Err(Error::config(format!("unknown evaluation mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Specific => "specific",
            EvalMode::Agnostic => "agnostic",
        })
    }
}

const CHUNK: usize = 64;

struct Candidates {
    ids: Vec<usize>,
    /// Unit-length text embeddings, one row per id.
    text: Tensor<f32>,
    /// `base + accumulated delta`.
    head: Tensor<f32>,
}

/// Read-only scorer over a model between tasks.
pub struct Evaluator<'a> {
    model: &'a CommModel,
    /// Per state, in state order.
    per_modality: Vec<Candidates>,
    /// Ids of every class of every state, in state order.
    all_ids: Vec<usize>,
    /// Per state: every class encoded with that state's text prompt.
    all_text: Vec<Tensor<f32>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a CommModel) -> Result<Self> {
        if model.active_step().is_some() {
            return Err(Error::usage("evaluation during an unfinished task"));
        }
        let mut per_modality = Vec::with_capacity(model.states.len());
        for s in &model.states {
            let tokens: Vec<&[usize]> = s.classes.iter().map(|c| c.tokens.as_slice()).collect();
            let text = if tokens.is_empty() {
                Tensor::zeros(&[0, model.backbone.config.d_joint()])
            } else {
                unit_rows(&model.backbone.text_embeddings(&tokens, Some(&s.prompts.text))?)
            };
            per_modality.push(Candidates {
                ids: s.classes.iter().map(|c| c.id).collect(),
                text,
                head: model.backbone.base_head(s.modality.index())?.add(&s.head)?,
            });
        }
        let all: Vec<&[usize]> = model
            .states
            .iter()
            .flat_map(|s| s.classes.iter().map(|c| c.tokens.as_slice()))
            .collect();
        let mut all_text = Vec::with_capacity(model.states.len());
        for s in &model.states {
            all_text.push(if all.is_empty() {
                Tensor::zeros(&[0, model.backbone.config.d_joint()])
            } else {
                unit_rows(&model.backbone.text_embeddings(&all, Some(&s.prompts.text))?)
            });
        }
        let all_ids = per_modality.iter().flat_map(|c| c.ids.iter().copied()).collect();
        Ok(Self {
            model,
            per_modality,
            all_ids,
            all_text,
        })
    }

    /// State index per sample from prompt-free features.
    pub fn route(&self, raw: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(self.agnostic_weights(raw)?.data().chunks(self.per_modality.len()).map(argmax).collect())
    }

    fn agnostic_weights(&self, raw: &Tensor<f32>) -> Result<Tensor<f32>> {
        let model = self.model;
        if model.config.cross {
            return model.gate_weights(raw);
        }
        // no gate without the cross component: nearest known centroid
        let known: Vec<usize> = model.states.iter().map(|s| s.modality.index()).collect();
        let centroids = Tensor::from_rows(
            &known
                .iter()
                .map(|&i| model.backbone.centroids.row(i).to_vec())
                .collect::<Vec<_>>(),
        )?;
        let k = known.len();
        let mut w = Tensor::zeros(&[raw.rows(), k]);
        for i in 0..raw.rows() {
            let f = raw.row(i);
            let neg: Vec<f32> = (0..k)
                .map(|j| -centroids.row(j).iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f32>())
                .collect();
            w.data_mut()[i * k + argmax(&neg)] = 1.0;
        }
        Ok(w)
    }

    /// Predicted class ids for `inputs` with prompt-free features `raw`.
    /// `m` is the true modality and is only read in specific mode.
    pub fn predict(&self, mode: EvalMode, m: Modality, inputs: &[&Tensor<f32>], raw: &Tensor<f32>) -> Result<Vec<usize>> {
        if inputs.len() != raw.rows() {
            return Err(Error::usage("inputs and features disagree in length"));
        }
        let model = self.model;
        let mut out = Vec::with_capacity(inputs.len());
        for start in (0..inputs.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(inputs.len());
            let chunk = &inputs[start..end];
            let raw_chunk = Tensor::from_rows(&(start..end).map(|i| raw.row(i).to_vec()).collect::<Vec<_>>())?;
            let (weights, heads) = match mode {
                EvalMode::Specific => {
                    let j = model.state_index(m)?;
                    let w = if model.config.cross && model.config.gate_in_specific {
                        model.gate_weights(&raw_chunk)?
                    } else {
                        model.one_hot(m, chunk.len())?
                    };
                    (w, vec![j; chunk.len()])
                }
                EvalMode::Agnostic => {
                    let w = self.agnostic_weights(&raw_chunk)?;
                    let heads = w.data().chunks(self.per_modality.len()).map(argmax).collect();
                    (w, heads)
                }
            };
            let prompts = model.compose_prompts(&weights)?;
            let src: Vec<usize> = (0..chunk.len()).collect();
            let feats = model.backbone.features(chunk, Some((&prompts, &src)))?;
            for (i, &h) in heads.iter().enumerate() {
                let x = Tensor::new(&[1, feats.cols()], feats.row(i).to_vec())?;
                let v = x.matmul(&self.per_modality[h].head)?;
                // the routed modality's text prompt encodes every candidate
                let (ids, text) = match mode {
                    EvalMode::Specific => (&self.per_modality[h].ids, &self.per_modality[h].text),
                    EvalMode::Agnostic => (&self.all_ids, &self.all_text[h]),
                };
                let mut best = (f32::NEG_INFINITY, None);
                for (r, &id) in ids.iter().enumerate() {
                    let s: f32 = text.row(r).iter().zip(v.data()).map(|(a, b)| a * b).sum();
                    if s > best.0 {
                        best = (s, Some(id));
                    }
                }
                let id = best
                    .1
                    .ok_or_else(|| Error::numeric("evaluate", "no finite candidate score"))?;
                out.push(id);
            }
        }
        Ok(out)
    }

    /// Fraction of `labels` predicted correctly.
    pub fn accuracy(
        &self,
        mode: EvalMode,
        m: Modality,
        inputs: &[&Tensor<f32>],
        raw: &Tensor<f32>,
        labels: &[usize],
    ) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::usage("accuracy over an empty set"));
        }
        let pred = self.predict(mode, m, inputs, raw)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}
