//! Per-modality accumulated prompts and heads, self-regularisation, the
//! relevance gate, cross-modal prompt composition and head re-alignment.

mod eval;
mod gate;
mod step;
mod store;

pub use eval::{EvalMode, Evaluator};
pub use gate::{GateFit, RelevanceGate};
pub use step::{LossBreakdown, LossVars, PreparedSet, TaskBatch, TrainableVars};

use std::collections::BTreeMap;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamState, GaussianModel, Parameter, RngStream, Tensor};
use crate::synth::Modality;
use crate::towers::{Backbone, LowRankDelta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommConfig {
    /// Compose prompts across modalities with the relevance gate.
    pub cross: bool,
    /// Add the self-regularisation term.
    pub self_reg: bool,
    /// Re-align heads on replayed class features after each task.
    pub realign: bool,
    pub lambda_self: f64,
    pub prompt_lr: f64,
    pub gate_lr: f64,
    pub gate_steps: usize,
    /// Replay samples per modality for the gate.
    pub gate_samples: usize,
    pub realign_lr: f64,
    pub realign_steps: usize,
    pub realign_samples: usize,
    /// Use gate weights (rather than one-hot) when composing during training.
    pub gate_in_training: bool,
    /// Use gate weights (rather than one-hot) in modality-specific evaluation.
    pub gate_in_specific: bool,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            cross: true,
            self_reg: true,
            realign: true,
            lambda_self: 1.0,
            prompt_lr: 5e-3,
            gate_lr: 1e-2,
            gate_steps: 100,
            gate_samples: 128,
            realign_lr: 5e-3,
            realign_steps: 100,
            realign_samples: 32,
            gate_in_training: true,
            gate_in_specific: false,
        }
    }
}

impl CommConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prompt_lr", self.prompt_lr),
            ("gate_lr", self.gate_lr),
            ("realign_lr", self.realign_lr),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.lambda_self >= 0.0) {
            return Err(Error::config("lambda_self must be non-negative"));
        }
        if self.gate_samples < 2 || self.realign_samples == 0 {
            return Err(Error::config("gate_samples must be at least 2 and realign_samples positive"));
        }
        Ok(())
    }
}

/// Modality-side prompt `P` and text-side prompt `Q`, each
/// `[prompt_depth, prompt_len, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair {
    pub modality: Tensor<f32>,
    pub text: Tensor<f32>,
}

impl PromptPair {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            modality: Tensor::zeros(shape),
            text: Tensor::zeros(shape),
        }
    }

    pub fn len(&self) -> usize {
        self.modality.len() + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Element-wise sum; an absent previous value yields the new component.
pub fn accumulate(prev: Option<&Tensor<f32>>, component: &Tensor<f32>) -> Result<Tensor<f32>> {
    match prev {
        Some(p) => p.add(component),
        None => Ok(component.clone()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub prompts: PromptPair,
    pub head: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegisteredClass {
    pub id: usize,
    pub tokens: Vec<usize>,
    /// Time step that introduced the class.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityState {
    pub modality: Modality,
    /// Accumulated prompts.
    pub prompts: PromptPair,
    /// Accumulated dense head delta `[d, d_joint]`.
    pub head: Tensor<f32>,
    /// Accumulated values as of the end of the previous task of this modality.
    pub snapshot: Option<Snapshot>,
    /// Prompt-free features.
    pub raw_stats: GaussianModel,
    /// Prompted pre-projection features per class id.
    pub class_stats: BTreeMap<usize, GaussianModel>,
    pub classes: Vec<RegisteredClass>,
    pub tasks_completed: usize,
}

impl ModalityState {
    fn new(m: Modality, shape: &[usize], d: usize, dj: usize) -> Self {
        Self {
            modality: m,
            prompts: PromptPair::zeros(shape),
            head: Tensor::zeros(&[d, dj]),
            snapshot: None,
            raw_stats: GaussianModel::empty(d),
            class_stats: BTreeMap::new(),
            classes: Vec::new(),
            tasks_completed: 0,
        }
    }

    pub fn prompt_row(&self) -> Result<Tensor<f32>> {
        let n = self.prompts.modality.len();
        self.prompts.modality.clone().reshape(&[1, n])
    }
}

/// A class handed to [`CommModel::begin_task`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub id: usize,
    pub tokens: Vec<usize>,
}

/// Trainable per-task components of one modality.
#[derive(Clone, Debug)]
pub struct TaskComponents {
    pub prompts: PromptPairParams,
    pub delta: LowRankDelta,
    pub classes: Vec<ClassSpec>,
    /// Text embeddings of `classes` under the snapshot text prompt.
    pub snapshot_text: Option<Tensor<f32>>,
    adam: Vec<AdamState>,
}

#[derive(Clone, Debug)]
pub struct PromptPairParams {
    pub modality: Parameter,
    pub text: Parameter,
}

impl TaskComponents {
    pub fn len(&self) -> usize {
        self.prompts.modality.len() + self.prompts.text.len() + self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn params_mut(&mut self) -> [&mut Parameter; 4] {
        [
            &mut self.prompts.modality,
            &mut self.prompts.text,
            &mut self.delta.a,
            &mut self.delta.b,
        ]
    }
}

#[derive(Clone, Debug)]
struct ActiveTask {
    step: usize,
    parts: BTreeMap<Modality, TaskComponents>,
}

pub struct CommModel {
    pub backbone: Arc<Backbone>,
    pub config: CommConfig,
    /// In order of first appearance.
    pub states: Vec<ModalityState>,
    pub gate: Option<RelevanceGate>,
    active: Option<ActiveTask>,
    last_step: usize,
    seed: u64,
}

impl CommModel {
    pub fn new(backbone: Arc<Backbone>, config: CommConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            backbone,
            config,
            states: Vec::new(),
            gate: None,
            active: None,
            last_step: 0,
            seed,
        })
    }

    fn rng(&self, label: impl Into<String>) -> RngStream {
        RngStream::new(self.seed, format!("comm/{}", label.into()))
    }

    /// Modalities seen so far, in order of first appearance.
    pub fn modalities(&self) -> Vec<Modality> {
        self.states.iter().map(|s| s.modality).collect()
    }

    pub fn state(&self, m: Modality) -> Option<&ModalityState> {
        self.states.iter().find(|s| s.modality == m)
    }

    fn state_index(&self, m: Modality) -> Result<usize> {
        self.states
            .iter()
            .position(|s| s.modality == m)
            .ok_or_else(|| Error::usage(format!("modality {m} has no state")))
    }

    fn ensure_state(&mut self, m: Modality) -> usize {
        if let Ok(i) = self.state_index(m) {
            return i;
        }
        let cfg = &self.backbone.config;
        self.states
            .push(ModalityState::new(m, &cfg.prompt_shape(), cfg.d_model, cfg.d_joint()));
        self.states.len() - 1
    }

    pub fn active_step(&self) -> Option<usize> {
        self.active.as_ref().map(|a| a.step)
    }

    pub fn components(&self, m: Modality) -> Option<&TaskComponents> {
        self.active.as_ref().and_then(|a| a.parts.get(&m))
    }

    fn component_mut(&mut self, m: Modality) -> Result<&mut TaskComponents> {
        self.active
            .as_mut()
            .and_then(|a| a.parts.get_mut(&m))
            .ok_or_else(|| Error::usage(format!("modality {m} is not being trained")))
    }

    /// Merge prompt-free features `[n, d]` of modality `m` into its raw stats.
    pub fn observe_raw_features(&mut self, m: Modality, features: &Tensor<f32>) -> Result<()> {
        let i = self.ensure_state(m);
        self.states[i].raw_stats.merge_in_place(features)
    }

    /// Retrain the gate from zero over every modality with raw statistics.
    pub fn train_gate(&mut self, step: usize) -> Result<Option<GateFit>> {
        let rng = self.rng(format!("gate/{step}"));
        let mut groups = Vec::new();
        for s in &self.states {
            if s.raw_stats.count() < 2 {
                if s.tasks_completed == 0 {
                    warn!("gate skips {}: fewer than two raw observations", s.modality);
                    continue;
                }
                return Err(Error::Data(format!(
                    "modality {} has finished tasks but only {} raw observations",
                    s.modality,
                    s.raw_stats.count()
                )));
            }
            let x = s.raw_stats.sample(self.config.gate_samples, &mut rng.derive(s.modality))?;
            groups.push((s.modality, x));
        }
        if groups.is_empty() {
            self.gate = None;
            return Ok(None);
        }
        let fit = RelevanceGate::fit(&groups, self.config.gate_steps, self.config.gate_lr)?;
        self.gate = Some(fit.gate.clone());
        Ok(Some(fit))
    }

    /// Gate weights over all known modalities, or a usage error when the gate
    /// does not cover exactly the known modalities.
    pub fn gate_weights(&self, raw: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mods = self.modalities();
        match &self.gate {
            Some(g) if g.modalities == mods => g.probabilities(raw),
            None if mods.len() == 1 => Ok(Tensor::full(&[raw.rows(), 1], 1.0)),
            _ => Err(Error::usage("relevance gate is stale: retrain it for the current modalities")),
        }
    }

    /// One-hot rows on modality `m` over the known modalities.
    pub fn one_hot(&self, m: Modality, n: usize) -> Result<Tensor<f32>> {
        let k = self.states.len();
        let j = self.state_index(m)?;
        Ok(Tensor::from_fn(&[n, k], |i| if i % k == j { 1.0 } else { 0.0 }))
    }

    /// Composed prompts `[n, prompt_size]` from weights `[n, k]` and the
    /// accumulated modality prompts, live components included.
    pub fn compose_prompts(&self, weights: &Tensor<f32>) -> Result<Tensor<f32>> {
        if weights.rank() != 2 || weights.cols() != self.states.len() {
            return Err(Error::usage("composition weights do not match the known modalities"));
        }
        let stacked = Self::stack(&self.prompt_rows(None)?)?;
        weights.matmul(&stacked)
    }

    /// Start time step `t` for the given modalities: fresh zero prompts, a
    /// fresh head delta, and snapshots of the accumulated values.
    pub fn begin_task(&mut self, t: usize, parts: &[(Modality, Vec<ClassSpec>)]) -> Result<()> {
        if t == 0 || t <= self.last_step || self.active.is_some() {
            return Err(Error::usage(format!("time step {t} already begun or out of order")));
        }
        if parts.is_empty() {
            return Err(Error::usage("a task needs at least one modality"));
        }
        let cfg = self.backbone.config.clone();
        let shape = cfg.prompt_shape();
        let mut active = BTreeMap::new();
        for (m, classes) in parts {
            if active.contains_key(m) {
                return Err(Error::usage(format!("modality {m} listed twice in step {t}")));
            }
            let i = self.ensure_state(*m);
            let st = &mut self.states[i];
            st.snapshot = (st.tasks_completed > 0).then(|| Snapshot {
                prompts: st.prompts.clone(),
                head: st.head.clone(),
            });
            let snapshot_text = match &st.snapshot {
                Some(s) => {
                    let tokens: Vec<&[usize]> = classes.iter().map(|c| c.tokens.as_slice()).collect();
                    Some(self.backbone.text_embeddings(&tokens, Some(&s.prompts.text))?)
                }
                None => None,
            };
            let prompts = PromptPairParams {
                modality: Parameter::zeros(&shape, true),
                text: Parameter::zeros(&shape, true),
            };
            let delta = LowRankDelta::new(&cfg, &mut RngStream::new(self.seed, format!("comm/delta/{t}/{m}")));
            let lr = self.config.prompt_lr;
            let adam = vec![
                AdamState::for_param(&prompts.modality, lr),
                AdamState::for_param(&prompts.text, lr),
                AdamState::for_param(&delta.a, lr),
                AdamState::for_param(&delta.b, lr),
            ];
            active.insert(
                *m,
                TaskComponents {
                    prompts,
                    delta,
                    classes: classes.clone(),
                    snapshot_text,
                    adam,
                },
            );
        }
        self.last_step = t;
        self.active = Some(ActiveTask { step: t, parts: active });
        Ok(())
    }

    /// Composition weights used while training modality `m`.
    pub fn training_weights(&self, m: Modality, raw: &Tensor<f32>) -> Result<Tensor<f32>> {
        if self.config.cross && self.config.gate_in_training {
            self.gate_weights(raw)
        } else {
            self.one_hot(m, raw.rows())
        }
    }

    /// Fold the trained components of `m` into its accumulated state and
    /// record per-class statistics of the final prompted features over
    /// `samples`, which must cover every class of the task.
    pub fn end_task(&mut self, m: Modality, samples: &[PreparedSet<'_>]) -> Result<()> {
        let comp = self
            .components(m)
            .ok_or_else(|| Error::usage(format!("modality {m} is not being trained")))?;
        if let Some(c) = comp.classes.iter().find(|c| !samples.iter().any(|s| s.class == c.id)) {
            return Err(Error::usage(format!("no samples given for class {}", c.id)));
        }
        if let Some(s) = samples.iter().find(|s| !comp.classes.iter().any(|c| c.id == s.class)) {
            return Err(Error::usage(format!("class {} is not part of this task", s.class)));
        }
        let active = self.active.as_mut().expect("checked above");
        let step = active.step;
        let comp = active.parts.remove(&m).expect("checked above");
        let i = self.state_index(m)?;
        {
            let st = &mut self.states[i];
            st.prompts.modality = accumulate(Some(&st.prompts.modality), &comp.prompts.modality.value)?;
            st.prompts.text = accumulate(Some(&st.prompts.text), &comp.prompts.text.value)?;
            st.head = accumulate(Some(&st.head), &comp.delta.dense())?;
            for c in &comp.classes {
                if st.classes.iter().any(|r| r.id == c.id) {
                    return Err(Error::usage(format!("class {} registered twice for {m}", c.id)));
                }
                st.classes.push(RegisteredClass {
                    id: c.id,
                    tokens: c.tokens.clone(),
                    step,
                });
            }
            st.tasks_completed += 1;
        }
        for set in samples {
            let w = self.training_weights(m, &set.raw)?;
            let prompts = self.compose_prompts(&w)?;
            let src: Vec<usize> = (0..set.inputs.len()).collect();
            let feats = self.backbone.features(&set.inputs, Some((&prompts, &src)))?;
            let stats = GaussianModel::empty(feats.cols()).merge(&feats)?;
            self.states[i].class_stats.insert(set.class, stats);
        }
        if self.active.as_ref().is_some_and(|a| a.parts.is_empty()) {
            self.active = None;
        }
        Ok(())
    }

    /// Fit a fresh low-rank correction on replayed features of every class
    /// of `m` against all of its classes, then fold it into the head.
    /// Returns false when `m` has nothing from earlier steps.
    pub fn realign_heads(&mut self, m: Modality, step: usize) -> Result<bool> {
        step::realign(self, m, step)
    }

    /// `(trainable, accumulated)` parameter counts.
    pub fn count_parameters(&self) -> (usize, usize) {
        let trainable = self
            .active
            .as_ref()
            .map(|a| a.parts.values().map(|c| c.len()).sum())
            .unwrap_or(0);
        let d = self.backbone.config.d_model;
        let per_state: usize = self
            .states
            .iter()
            .map(|s| s.prompts.len() + s.head.len() + s.raw_stats.dim() * (1 + s.raw_stats.dim()))
            .sum();
        let gate = if self.config.cross { (d + 1) * self.states.len() } else { 0 };
        (trainable, per_state + gate)
    }
}
