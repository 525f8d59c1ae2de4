//! Continual training over a task stream for COMM, its ablations and the
//! fine-tuning baseline, with evaluation after every step.

mod ft;
mod metrics;
mod output;
#[cfg(test)]
mod tests;

pub use ft::FtModel;
pub use metrics::{compute_metrics, AccuracyMatrix, Metrics, MetricsReport, Unit};
pub use output::{read_metrics, write_outputs, MetricsFile, ACCURACY_FILE, LOG_FILE, METRICS_FILE, PARAMS_FILE};

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::comm::{ClassSpec, CommConfig, CommModel, EvalMode, Evaluator, LossBreakdown, PreparedSet};
use crate::error::{Error, Result};
use crate::io::TensorStore;
use crate::numerics::{RngStream, Tensor};
use crate::synth::{make_stream, Modality, Scenario, Stream, Task, World, WorldSpec};
use crate::towers::{argmax, pretrain_backbone, Backbone, EncoderConfig, PretrainConfig};

pub(crate) const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Comm,
    Ft,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "comm" => Ok(Method::Comm),
            "ft" => Ok(Method::Ft),
            _ => Err(Error::config(format!("unknown method {s:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Comm => "comm",
            Method::Ft => "ft",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModes {
    Specific,
    Agnostic,
    Both,
}

impl EvalModes {
    pub fn modes(self) -> Vec<EvalMode> {
        match self {
            EvalModes::Specific => vec![EvalMode::Specific],
            EvalModes::Agnostic => vec![EvalMode::Agnostic],
            EvalModes::Both => vec![EvalMode::Specific, EvalMode::Agnostic],
        }
    }
}

impl std::str::FromStr for EvalModes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "specific" => Ok(EvalModes::Specific),
            "agnostic" => Ok(EvalModes::Agnostic),
            "both" => Ok(EvalModes::Both),
            _ => Err(Error::config(format!("unknown evaluation mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub name: Method,
    pub cross: bool,
    #[serde(rename = "self")]
    pub self_reg: bool,
    pub realign: bool,
    pub lambda_self: f64,
    pub gate_lr: f64,
    pub gate_steps: usize,
    pub gate_samples: usize,
    pub gate_in_training: bool,
    pub realign_lr: f64,
    pub realign_steps: usize,
    pub realign_samples: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        let c = CommConfig::default();
        Self {
            name: Method::Comm,
            cross: c.cross,
            self_reg: c.self_reg,
            realign: c.realign,
            lambda_self: c.lambda_self,
            gate_lr: c.gate_lr,
            gate_steps: c.gate_steps,
            gate_samples: c.gate_samples,
            gate_in_training: c.gate_in_training,
            realign_lr: c.realign_lr,
            realign_steps: c.realign_steps,
            realign_samples: c.realign_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scenario: Scenario,
    pub reversed: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub prompt_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Random,
            reversed: false,
            epochs: 10,
            batch_size: 16,
            prompt_lr: CommConfig::default().prompt_lr,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalModes,
    pub gate_in_specific: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalModes::Both,
            gate_in_specific: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: MethodConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        self.comm_config().validate()
    }

    pub fn comm_config(&self) -> CommConfig {
        let m = &self.method;
        CommConfig {
            cross: m.cross,
            self_reg: m.self_reg,
            realign: m.realign,
            lambda_self: m.lambda_self,
            prompt_lr: self.train.prompt_lr,
            gate_lr: m.gate_lr,
            gate_steps: m.gate_steps,
            gate_samples: m.gate_samples,
            realign_lr: m.realign_lr,
            realign_steps: m.realign_steps,
            realign_samples: m.realign_samples,
            gate_in_training: m.gate_in_training,
            gate_in_specific: self.eval.gate_in_specific,
        }
    }

    /// Switch components off by name: `no-cross`, `no-self`, `no-realign`.
    pub fn ablate(&mut self, flag: &str) -> Result<()> {
        match flag.trim() {
            "no-cross" => self.method.cross = false,
            "no-self" => self.method.self_reg = false,
            "no-realign" => self.method.realign = false,
            "" => {}
            other => return Err(Error::config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }

    /// Short run label such as `comm`, `comm-no-self` or `ft`.
    pub fn label(&self) -> String {
        let m = &self.method;
        if m.name == Method::Ft {
            return "ft".into();
        }
        let mut s = String::from("comm");
        for (on, name) in [(m.cross, "cross"), (m.self_reg, "self"), (m.realign, "realign")] {
            if !on {
                s.push_str("-no-");
                s.push_str(name);
            }
        }
        s
    }
}

/// Prompt-free backbone features of every sample, computed once per class
/// and split.
#[derive(Default)]
pub struct FeatureCache {
    map: HashMap<(usize, bool), Tensor<f32>>,
}

impl FeatureCache {
    pub fn raw(&mut self, world: &World, bb: &Backbone, class: usize, test: bool) -> Result<&Tensor<f32>> {
        if !self.map.contains_key(&(class, test)) {
            let samples = if test {
                world.test_samples(class)
            } else {
                world.train_samples(class)
            };
            let items: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.input).collect();
            let mut rows = Vec::new();
            for chunk in items.chunks(EVAL_CHUNK) {
                rows.extend_from_slice(bb.features(chunk, None)?.data());
            }
            let t = Tensor::new(&[items.len(), bb.config.d_model], rows)?;
            self.map.insert((class, test), t);
        }
        Ok(&self.map[&(class, test)])
    }
}

fn class_specs(world: &World, classes: &[usize]) -> Vec<ClassSpec> {
    classes
        .iter()
        .map(|&id| ClassSpec {
            id,
            tokens: world.tokens(id).to_vec(),
        })
        .collect()
}

fn gather_rows(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let cols = parts[0].cols();
    let data: Vec<f32> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&[data.len() / cols, cols], data)
}

fn select_rows(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let c = t.cols();
    Tensor::new(&[idx.len(), c], idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect())
}

/// Nearest backbone centroid among `known` modalities.
fn nearest_known(bb: &Backbone, raw: &Tensor<f32>, known: &[Modality]) -> Vec<Modality> {
    (0..raw.rows())
        .map(|i| {
            let f = raw.row(i);
            let neg: Vec<f32> = known
                .iter()
                .map(|m| {
                    -bb.centroids
                        .row(m.index())
                        .iter()
                        .zip(f)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f32>()
                })
                .collect();
            known[argmax(&neg)]
        })
        .collect()
}

pub enum Learner {
    Comm(CommModel),
    Ft(FtModel),
}

impl Learner {
    pub fn count_parameters(&self) -> (usize, usize) {
        match self {
            Learner::Comm(m) => m.count_parameters(),
            Learner::Ft(m) => m.count_parameters(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub step: usize,
    pub trainable: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub modalities: Vec<Modality>,
    /// Mean loss per epoch, per modality.
    pub epoch_losses: BTreeMap<Modality, Vec<LossBreakdown>>,
    pub gate: Option<GateSummary>,
    pub realigned: Vec<Modality>,
    pub params: ParamRow,
    /// Overall mean accuracy after the step, per evaluation mode.
    pub mean_accuracy: BTreeMap<EvalMode, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub matrices: BTreeMap<EvalMode, AccuracyMatrix>,
    /// Present once the stream is finished.
    pub reports: BTreeMap<EvalMode, MetricsReport>,
    pub params: Vec<ParamRow>,
    pub log: Vec<StepLog>,
}

pub struct Runner<'w> {
    world: &'w World,
    backbone: Arc<Backbone>,
    config: RunConfig,
    stream: Stream,
    learner: Learner,
    cache: FeatureCache,
    matrices: BTreeMap<EvalMode, AccuracyMatrix>,
    params: Vec<ParamRow>,
    log: Vec<StepLog>,
    next: usize,
}

impl<'w> Runner<'w> {
    pub fn new(world: &'w World, backbone: Arc<Backbone>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let stream = make_stream(world, config.train.scenario, config.train.reversed, config.train.seed)?;
        let learner = match config.method.name {
            Method::Comm => Learner::Comm(CommModel::new(backbone.clone(), config.comm_config(), config.train.seed)?),
            Method::Ft => Learner::Ft(FtModel::new(backbone.clone(), config.train.prompt_lr, config.train.seed)),
        };
        let units: Vec<Unit> = stream
            .tasks
            .iter()
            .flat_map(|t| t.parts.iter().map(|p| Unit { task: t.step, modality: p.modality }))
            .collect();
        let matrices = config
            .eval
            .mode
            .modes()
            .into_iter()
            .map(|m| {
                (
                    m,
                    AccuracyMatrix {
                        units: units.clone(),
                        rows: Vec::new(),
                    },
                )
            })
            .collect();
        Ok(Self {
            world,
            backbone,
            config,
            stream,
            learner,
            cache: FeatureCache::default(),
            matrices,
            params: Vec::new(),
            log: Vec::new(),
            next: 0,
        })
    }

    pub fn stream(&self) -> &Stream {
        &self.stream
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.next == self.stream.tasks.len()
    }

    /// Train on the next task of the stream, then evaluate every task seen.
    pub fn step(&mut self) -> Result<&StepLog> {
        let task = self
            .stream
            .tasks
            .get(self.next)
            .cloned()
            .ok_or_else(|| Error::usage("stream already finished"))?;
        let mut log = self.run_time_step(&task)?;
        for mode in self.config.eval.mode.modes() {
            let row = self.evaluate(task.step, mode)?;
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            log.mean_accuracy.insert(mode, mean);
            self.matrices.get_mut(&mode).expect("mode configured").push_row(row)?;
        }
        info!(
            "step {} {:?}: {:?}",
            task.step,
            log.modalities,
            log.mean_accuracy
        );
        self.params.push(log.params);
        self.log.push(log);
        self.next += 1;
        Ok(self.log.last().expect("just pushed"))
    }

    pub fn run_all(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn result(&self) -> Result<RunResult> {
        let mut reports = BTreeMap::new();
        if self.is_done() {
            for (mode, m) in &self.matrices {
                reports.insert(*mode, compute_metrics(m)?);
            }
        }
        Ok(RunResult {
            matrices: self.matrices.clone(),
            reports,
            params: self.params.clone(),
            log: self.log.clone(),
        })
    }

    /// `(input, task-local label)` of every training sample of `classes`.
    fn training_set(&self, classes: &[usize]) -> Vec<(&'w Tensor<f32>, usize)> {
        let world = self.world;
        classes
            .iter()
            .enumerate()
            .flat_map(|(j, &c)| world.train_samples(c).iter().map(move |s| (&s.input, j)))
            .collect()
    }

    fn run_time_step(&mut self, task: &Task) -> Result<StepLog> {
        let t = task.step;
        let cfg = self.config.clone();
        let mut log = StepLog {
            step: t,
            modalities: task.modalities(),
            epoch_losses: BTreeMap::new(),
            gate: None,
            realigned: Vec::new(),
            params: ParamRow {
                step: t,
                trainable: 0,
                total: 0,
            },
            mean_accuracy: BTreeMap::new(),
        };
        let world = self.world;
        // raw features of this task's training samples, per modality
        let mut raws = BTreeMap::new();
        for part in &task.parts {
            let mut blocks = Vec::new();
            for &c in &part.classes {
                blocks.push(self.cache.raw(world, &self.backbone, c, false)?.clone());
            }
            raws.insert(part.modality, gather_rows(&blocks.iter().collect::<Vec<_>>())?);
        }
        let mut trainable = 0;
        match &mut self.learner {
            Learner::Comm(model) => {
                for part in &task.parts {
                    model.observe_raw_features(part.modality, &raws[&part.modality])?;
                }
                if cfg.method.cross {
                    if let Some(fit) = model.train_gate(t).map_err(|e| e.context(format!("step {t}, gate")))? {
                        log.gate = Some(GateSummary {
                            initial_loss: fit.initial_loss,
                            final_loss: fit.final_loss,
                            train_accuracy: fit.train_accuracy,
                        });
                    }
                }
                let parts: Vec<(Modality, Vec<ClassSpec>)> = task
                    .parts
                    .iter()
                    .map(|p| (p.modality, class_specs(world, &p.classes)))
                    .collect();
                model.begin_task(t, &parts)?;
                trainable = model.count_parameters().0;
            }
            Learner::Ft(_) => {}
        }
        for part in &task.parts {
            let m = part.modality;
            let samples = self.training_set(&part.classes);
            let raw = &raws[&m];
            if let Learner::Ft(model) = &mut self.learner {
                model.begin_task(t, m, &class_specs(world, &part.classes));
                trainable = trainable.max(model.count_parameters().0);
            }
            let mut losses = Vec::with_capacity(cfg.train.epochs);
            for epoch in 0..cfg.train.epochs {
                let mut order: Vec<usize> = (0..samples.len()).collect();
                RngStream::new(cfg.train.seed, format!("batches/{t}/{m}/{epoch}")).shuffle(&mut order);
                let mut sum = LossBreakdown::default();
                let mut batches = 0;
                for idx in order.chunks(cfg.train.batch_size) {
                    let inputs: Vec<&Tensor<f32>> = idx.iter().map(|&i| samples[i].0).collect();
                    let labels: Vec<usize> = idx.iter().map(|&i| samples[i].1).collect();
                    let l = match &mut self.learner {
                        Learner::Comm(model) => {
                            let batch = model.prepare_batch(m, inputs, labels, &select_rows(raw, idx)?)?;
                            model.task_step(m, &batch)
                        }
                        Learner::Ft(model) => model.task_step(m, &inputs, &labels),
                    }
                    .map_err(|e| e.context(format!("step {t}, modality {m}, epoch {epoch}")))?;
                    sum.task += l.task;
                    sum.self_reg += l.self_reg;
                    sum.total += l.total;
                    batches += 1;
                }
                let n = batches as f64;
                losses.push(LossBreakdown {
                    task: sum.task / n,
                    self_reg: sum.self_reg / n,
                    cross: 0.0,
                    total: sum.total / n,
                });
            }
            log.epoch_losses.insert(m, losses);
            if let Learner::Comm(model) = &mut self.learner {
                let mut sets = Vec::with_capacity(part.classes.len());
                for &c in &part.classes {
                    let inputs: Vec<&Tensor<f32>> = world.train_samples(c).iter().map(|s| &s.input).collect();
                    let raw = self.cache.raw(world, &self.backbone, c, false)?.clone();
                    sets.push(PreparedSet { class: c, inputs, raw });
                }
                model.end_task(m, &sets)?;
                if cfg.method.realign && model.realign_heads(m, t).map_err(|e| e.context(format!("step {t}, realign {m}")))? {
                    log.realigned.push(m);
                }
            }
        }
        log.params = ParamRow {
            step: t,
            trainable,
            total: self.learner.count_parameters().1,
        };
        Ok(log)
    }

    /// Accuracy on every unit introduced up to step `t`.
    fn evaluate(&mut self, t: usize, mode: EvalMode) -> Result<Vec<f64>> {
        let world = self.world;
        let units: Vec<(usize, Modality)> = self.matrices[&mode]
            .units
            .iter()
            .filter(|u| u.task <= t)
            .map(|u| (u.task, u.modality))
            .collect();
        let mut row = Vec::with_capacity(units.len());
        let evaluator = match &self.learner {
            Learner::Comm(model) => Some(Evaluator::new(model)?),
            Learner::Ft(_) => None,
        };
        for (task, m) in units {
            let part = self.stream.tasks[task - 1].part(m).expect("unit from stream");
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            let mut raws = Vec::new();
            for &c in &part.classes {
                for s in world.test_samples(c) {
                    inputs.push(&s.input);
                    labels.push(c);
                }
                raws.push(self.cache.raw(world, &self.backbone, c, true)?.clone());
            }
            let raw = gather_rows(&raws.iter().collect::<Vec<_>>())?;
            let pred = match (&self.learner, &evaluator) {
                (Learner::Comm(_), Some(ev)) => ev.predict(mode, m, &inputs, &raw)?,
                (Learner::Ft(model), _) => {
                    let routes = match mode {
                        EvalMode::Specific => vec![m; inputs.len()],
                        EvalMode::Agnostic => nearest_known(&self.backbone, &raw, &model.modalities()),
                    };
                    model.predict(&inputs, &routes, mode == EvalMode::Agnostic)?
                }
                _ => unreachable!("evaluator exists for comm"),
            };
            let hits = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
            row.push(hits as f64 / labels.len() as f64);
        }
        Ok(row)
    }
}

pub const BACKBONE_STEM: &str = "backbone";

/// How a saved backbone was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneOrigin {
    pub world: WorldSpec,
    pub pretrain: PretrainConfig,
    pub seed: u64,
}

pub fn save_backbone(dir: &Path, bb: &Backbone, origin: &BackboneOrigin) -> Result<PathBuf> {
    let mut store = bb.to_store()?;
    store.set_attr("origin", serde_json::to_value(origin)?);
    store.save(dir, BACKBONE_STEM)
}

pub fn load_backbone(dir: &Path) -> Result<(Backbone, BackboneOrigin)> {
    let store = TensorStore::load(dir, BACKBONE_STEM)?;
    let origin = store
        .attr("origin")
        .cloned()
        .ok_or_else(|| Error::Data(format!("{}: backbone checkpoint lacks its origin", dir.display())))?;
    Ok((Backbone::from_store(&store)?, serde_json::from_value(origin)?))
}

/// Load the backbone saved in `dir` if it was made from the same world,
/// encoder and pretraining settings; otherwise pretrain one and save it.
pub fn ensure_backbone(
    dir: &Path,
    world: &World,
    enc: &EncoderConfig,
    pre: &PretrainConfig,
    seed: u64,
) -> Result<Backbone> {
    let origin = BackboneOrigin {
        world: world.spec.clone(),
        pretrain: pre.clone(),
        seed,
    };
    if dir.join(format!("{BACKBONE_STEM}.json")).exists() {
        if let Ok((bb, o)) = load_backbone(dir) {
            if &bb.config == enc && o == origin {
                return Ok(bb);
            }
        }
    }
    let bb = pretrain_backbone(enc, pre, &world.pretrain_corpus(), seed)?;
    save_backbone(dir, &bb, &origin)?;
    Ok(bb)
}
