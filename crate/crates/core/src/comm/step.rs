//! The prompt-phase loss, one optimiser step, and head re-alignment.

use crate::error::{Error, Result};
use crate::numerics::{AdamState, Graph, Real, RngStream, Tensor, Var};
use crate::synth::Modality;
use crate::towers::{project_vars, similarity_logits, LowRankDelta, ModalityBatch, PromptFeed};

use super::CommModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub self_reg: f64,
    /// Gate loss; zero for prompt steps.
    pub cross: f64,
    pub total: f64,
}

/// Graph handles of one modality's trainable components.
#[derive(Clone, Copy, Debug)]
pub struct TrainableVars {
    /// `[depth, plen, d]`
    pub prompt: Var,
    pub text_prompt: Var,
    pub delta_a: Var,
    pub delta_b: Var,
}

/// Loss nodes built by [`CommModel::step_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub task: Var,
    pub self_reg: Var,
    /// Prompted-feature, text and head terms of the self-regularisation.
    pub terms: Option<[Var; 3]>,
}

/// A training batch of one modality with everything that stays fixed while
/// the components move.
#[derive(Clone, Debug)]
pub struct TaskBatch<'a> {
    pub inputs: Vec<&'a Tensor<f32>>,
    /// Index into the task's class list.
    pub labels: Vec<usize>,
    /// Composition weights `[n, k]`.
    pub weights: Tensor<f32>,
    /// Features under the snapshot prompts, `[n, d]`; `None` on a first task.
    pub snapshot: Option<Tensor<f32>>,
}

/// Samples of one class handed to [`CommModel::end_task`]: inputs and their
/// prompt-free features.
#[derive(Clone, Debug)]
pub struct PreparedSet<'a> {
    pub class: usize,
    pub inputs: Vec<&'a Tensor<f32>>,
    pub raw: Tensor<f32>,
}

impl CommModel {
    /// Accumulated modality prompt rows `[1, size]` of every known modality,
    /// each including the live value of its current component if one is
    /// being trained. `replace` substitutes one modality's row.
    pub(super) fn prompt_rows(&self, replace: Option<(Modality, &Tensor<f32>)>) -> Result<Vec<Tensor<f32>>> {
        let mut rows = Vec::with_capacity(self.states.len());
        for s in &self.states {
            let mut row = s.prompt_row()?;
            if let Some((m, r)) = replace {
                if m == s.modality {
                    rows.push(r.clone());
                    continue;
                }
            }
            if let Some(c) = self.components(s.modality) {
                row = row.add(&c.prompts.modality.value.clone().reshape(row.shape())?)?;
            }
            rows.push(row);
        }
        Ok(rows)
    }

    pub(super) fn stack(rows: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let cols = rows[0].len();
        Tensor::new(&[rows.len(), cols], rows.iter().flat_map(|r| r.data().iter().copied()).collect())
    }

    /// Build a batch for a task step. `labels` index the task's classes and
    /// `raw` holds prompt-free features of `inputs`.
    pub fn prepare_batch<'a>(
        &self,
        m: Modality,
        inputs: Vec<&'a Tensor<f32>>,
        labels: Vec<usize>,
        raw: &Tensor<f32>,
    ) -> Result<TaskBatch<'a>> {
        let comp = self
            .components(m)
            .ok_or_else(|| Error::usage(format!("modality {m} is not being trained")))?;
        if inputs.len() != labels.len() || raw.rows() != inputs.len() || inputs.is_empty() {
            return Err(Error::usage("batch inputs, labels and features disagree in length"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= comp.classes.len()) {
            return Err(Error::usage(format!("label {bad} outside the task's classes")));
        }
        let weights = self.training_weights(m, raw)?;
        let snapshot = match (&self.state(m).and_then(|s| s.snapshot.as_ref()), self.self_reg_active()) {
            (Some(s), true) => {
                let n = s.prompts.modality.len();
                let own = s.prompts.modality.clone().reshape(&[1, n])?;
                let rows = Self::stack(&self.prompt_rows(Some((m, &own)))?)?;
                let composed = weights.matmul(&rows)?;
                let src: Vec<usize> = (0..inputs.len()).collect();
                Some(self.backbone.features(&inputs, Some((&composed, &src)))?)
            }
            _ => None,
        };
        Ok(TaskBatch {
            inputs,
            labels,
            weights,
            snapshot,
        })
    }

    fn self_reg_active(&self) -> bool {
        self.config.self_reg && self.config.lambda_self > 0.0
    }

    /// The prompt-phase loss of modality `m` on `batch`, with the trainable
    /// components bound as `vars`. Everything else enters the graph
    /// as a constant.
    pub fn step_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        m: Modality,
        vars: TrainableVars,
        batch: &TaskBatch<'_>,
    ) -> Result<LossVars> {
        let comp = self
            .components(m)
            .ok_or_else(|| Error::usage(format!("modality {m} is not being trained")))?;
        let st = self.state(m).expect("active modality has state");
        let cfg = &self.backbone.config;
        let size = cfg.prompt_size();
        let n = batch.inputs.len();
        let bb = self.backbone.bind(g)?;

        // live accumulated prompt of m sits among constant rows of the others
        let prev = g.constant_f32(&st.prompt_row()?)?;
        let p = g.reshape(vars.prompt, &[1, size])?;
        let live = g.add(prev, p)?;
        let mut rows = Vec::with_capacity(self.states.len());
        for (s, r) in self.states.iter().zip(self.prompt_rows(None)?) {
            rows.push(if s.modality == m { live } else { g.constant_f32(&r)? });
        }
        let rows = g.concat(&rows, 0)?;
        let w = g.constant_f32(&batch.weights)?;
        let composed = g.matmul(w, rows)?;
        let feed = PromptFeed {
            rows: composed,
            src: (0..n).collect(),
        };
        let mb = ModalityBatch::new(&batch.inputs, cfg)?;
        let feats = bb.modality.encode(g, cfg, &mb, Some(&feed))?;

        let frozen = self.backbone.base_head(m.index())?.add(&st.head)?;
        let frozen = g.constant_f32(&frozen)?;
        let v = project_vars(g, feats, frozen, Some((vars.delta_a, vars.delta_b)))?;

        let qprev = g.constant_f32(&st.prompts.text.clone().reshape(&[1, size])?)?;
        let q = g.reshape(vars.text_prompt, &[1, size])?;
        let qlive = g.add(qprev, q)?;
        let tokens: Vec<&[usize]> = comp.classes.iter().map(|c| c.tokens.as_slice()).collect();
        let text = bb
            .text
            .encode(g, cfg, &tokens, Some(&PromptFeed::shared(qlive, tokens.len())))?;

        let logits = similarity_logits(g, v, text, cfg.temperature)?;
        let task = g.cross_entropy(logits, &batch.labels)?;

        let (snap_feats, snap_text) = match (&batch.snapshot, &comp.snapshot_text) {
            (Some(f), Some(t)) if self.self_reg_active() => (f, t),
            _ => {
                let zero = g.constant(Tensor::scalar(T::zero()))?;
                return Ok(LossVars {
                    total: task,
                    task,
                    self_reg: zero,
                    terms: None,
                });
            }
        };
        let sf = g.constant_f32(snap_feats)?;
        let d1 = g.sub(feats, sf)?;
        let t1 = g.row_norm(d1)?;
        let t1 = g.sum_all(t1)?;

        let cur = g.gather(text, &batch.labels)?;
        let st_text = g.constant_f32(snap_text)?;
        let old = g.gather(st_text, &batch.labels)?;
        let d2 = g.sub(cur, old)?;
        let t2 = g.row_norm(d2)?;
        let t2 = g.sum_all(t2)?;

        // both heads see the current feature, so their difference is the
        // current low-rank delta alone
        let h = g.matmul(feats, vars.delta_a)?;
        let h = g.matmul(h, vars.delta_b)?;
        let t3 = g.row_norm(h)?;
        let t3 = g.sum_all(t3)?;

        let s = g.add(t1, t2)?;
        let s = g.add(s, t3)?;
        let weighted = g.scale(s, self.config.lambda_self)?;
        let total = g.add(task, weighted)?;
        Ok(LossVars {
            total,
            task,
            self_reg: s,
            terms: Some([t1, t2, t3]),
        })
    }

    /// One Adam step on the components of `m`.
    pub fn task_step(&mut self, m: Modality, batch: &TaskBatch<'_>) -> Result<LossBreakdown> {
        let step = self.active_step().unwrap_or(0);
        let mut g = Graph::<f32>::new();
        let comp = self
            .components(m)
            .ok_or_else(|| Error::usage(format!("modality {m} is not being trained")))?;
        let vars = TrainableVars {
            prompt: g.param(&comp.prompts.modality)?,
            text_prompt: g.param(&comp.prompts.text)?,
            delta_a: g.param(&comp.delta.a)?,
            delta_b: g.param(&comp.delta.b)?,
        };
        let loss = self
            .step_loss(&mut g, m, vars, batch)
            .map_err(|e| e.context(format!("step {step}, modality {m}")))?;
        let out = LossBreakdown {
            task: g.scalar(loss.task) as f64,
            self_reg: g.scalar(loss.self_reg) as f64,
            cross: 0.0,
            total: g.scalar(loss.total) as f64,
        };
        if !out.total.is_finite() {
            return Err(Error::numeric("task_step", format!("non-finite loss [step {step}, modality {m}]")));
        }
        g.backward(loss.total)?;
        let grads = [vars.prompt, vars.text_prompt, vars.delta_a, vars.delta_b].map(|v| g.grad(v));
        let comp = self.component_mut(m)?;
        let adam = std::mem::take(&mut comp.adam);
        let mut adam_back = Vec::with_capacity(4);
        for ((p, grad), mut a) in comp.params_mut().into_iter().zip(&grads).zip(adam) {
            p.accumulate_grad(grad)?;
            a.update(p)?;
            p.zero_grad();
            adam_back.push(a);
        }
        comp.adam = adam_back;
        Ok(out)
    }
}

/// Re-align the head of `m` on replayed class features.
pub(super) fn realign(model: &mut CommModel, m: Modality, step: usize) -> Result<bool> {
    let i = model.state_index(m)?;
    let st = &model.states[i];
    if !st.classes.iter().any(|c| c.step < step) {
        return Ok(false);
    }
    let cfg = model.backbone.config.clone();
    let rng = RngStream::new(model.seed, format!("comm/realign/{step}/{m}"));
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (j, c) in st.classes.iter().enumerate() {
        let stats = st
            .class_stats
            .get(&c.id)
            .ok_or_else(|| Error::numeric("realign_heads", format!("class {} has no statistics", c.id)))?;
        let x = stats.sample(model.config.realign_samples, &mut rng.derive(c.id))?;
        rows.extend_from_slice(x.data());
        labels.extend(std::iter::repeat_n(j, x.rows()));
    }
    let x = Tensor::new(&[labels.len(), cfg.d_model], rows)?;
    let tokens: Vec<&[usize]> = st.classes.iter().map(|c| c.tokens.as_slice()).collect();
    let text = model.backbone.text_embeddings(&tokens, Some(&st.prompts.text))?;
    let frozen = model.backbone.base_head(m.index())?.add(&st.head)?;

    let mut delta = LowRankDelta::new(&cfg, &mut rng.derive("delta"));
    let lr = model.config.realign_lr;
    let mut sa = AdamState::for_param(&delta.a, lr);
    let mut sb = AdamState::for_param(&delta.b, lr);
    for _ in 0..model.config.realign_steps {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.clone())?;
        let fv = g.constant(frozen.clone())?;
        let tv = g.constant(text.clone())?;
        let a = g.param(&delta.a)?;
        let b = g.param(&delta.b)?;
        let v = project_vars(&mut g, xv, fv, Some((a, b)))?;
        let logits = similarity_logits(&mut g, v, tv, cfg.temperature)?;
        let loss = g.cross_entropy(logits, &labels)?;
        g.backward(loss)?;
        delta.a.accumulate_grad(&g.grad(a))?;
        delta.b.accumulate_grad(&g.grad(b))?;
        sa.update(&mut delta.a)?;
        sb.update(&mut delta.b)?;
        delta.a.zero_grad();
        delta.b.zero_grad();
    }
    let st = &mut model.states[i];
    st.head = st.head.add(&delta.dense())?;
    if !st.head.is_finite() {
        return Err(Error::numeric("realign_heads", format!("non-finite head [step {step}, modality {m}]")));
    }
    Ok(true)
}
