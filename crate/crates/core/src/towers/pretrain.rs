//! Contrastive pretraining of the backbone on a corpus disjoint from the
//! continual classes.

use log::info;
use serde::{Deserialize, Serialize};

use super::{argmax, project_vars, similarity_logits, Backbone, BackboneVars, EncoderConfig, ModalityBatch};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Graph, Real, RngStream, Tensor, Var};

#[derive(Clone, Debug)]
pub struct PretrainItem {
    pub modality: usize,
    /// Index into [`PretrainCorpus::class_tokens`].
    pub class: usize,
    pub input: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct PretrainCorpus {
    pub num_modalities: usize,
    pub class_tokens: Vec<Vec<usize>>,
    pub train: Vec<PretrainItem>,
    pub heldout: Vec<PretrainItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Distinct classes per contrastive batch, one sample each.
    pub batch_classes: usize,
    pub learning_rate: f64,
    pub min_retrieval: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_classes: 16,
            learning_rate: 2e-3,
            min_retrieval: 0.9,
        }
    }
}

/// Symmetric contrastive loss over a batch of distinct classes, one item
/// each: cross-entropy of matching text given modality and vice versa.
pub(crate) fn contrastive_loss<T: Real>(
    g: &mut Graph<T>,
    bb: &Backbone,
    vars: &BackboneVars,
    heads: &[Var],
    items: &[&PretrainItem],
    corpus: &PretrainCorpus,
) -> Result<Var> {
    let cfg = &bb.config;
    let n = items.len();
    let nm = heads.len();
    let inputs: Vec<&Tensor<f32>> = items.iter().map(|it| &it.input).collect();
    let batch = ModalityBatch::new(&inputs, cfg)?;
    let feats = vars.modality.encode(g, cfg, &batch, None)?;
    let all_heads = g.concat(heads, 1)?;
    let proj = project_vars(g, feats, all_heads, None)?;
    let proj = g.reshape(proj, &[n * nm, cfg.d_joint()])?;
    let pick: Vec<usize> = items.iter().enumerate().map(|(i, it)| i * nm + it.modality).collect();
    let v = g.gather(proj, &pick)?;
    let tokens: Vec<&[usize]> = items.iter().map(|it| corpus.class_tokens[it.class].as_slice()).collect();
    let l = vars.text.encode(g, cfg, &tokens, None)?;
    let logits = similarity_logits(g, v, l, cfg.temperature)?;
    let diag: Vec<usize> = (0..n).collect();
    let fwd = g.cross_entropy(logits, &diag)?;
    let lt = g.transpose(logits)?;
    let bwd = g.cross_entropy(lt, &diag)?;
    let loss = g.add(fwd, bwd)?;
    g.scale(loss, 0.5)
}

fn contrastive_step(
    bb: &mut Backbone,
    adam: &mut [AdamState],
    items: &[&PretrainItem],
    corpus: &PretrainCorpus,
) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let vars = bb.bind(&mut g)?;
    let heads: Vec<Var> = bb.heads.iter().map(|h| g.param(h)).collect::<Result<_>>()?;
    let loss = contrastive_loss(&mut g, bb, &vars, &heads, items, corpus)?;
    g.backward(loss)?;
    let mut handles = vars.modality.list();
    handles.extend(vars.text.list());
    handles.extend(heads);
    for ((p, s), h) in bb.params_mut().into_iter().zip(adam.iter_mut()).zip(handles) {
        p.accumulate_grad(&g.grad(h))?;
        s.update(p)?;
        p.zero_grad();
    }
    Ok(g.scalar(loss) as f64)
}

/// Top-1 retrieval of each item's class among all corpus classes, using the
/// item's modality head and prompt-free encoders.
pub fn retrieval_accuracy(bb: &Backbone, corpus: &PretrainCorpus, items: &[PretrainItem]) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let tokens: Vec<&[usize]> = corpus.class_tokens.iter().map(|t| t.as_slice()).collect();
    let text = bb.text_embeddings(&tokens, None)?;
    let mut correct = 0usize;
    for chunk in items.chunks(64) {
        let inputs: Vec<&Tensor<f32>> = chunk.iter().map(|it| &it.input).collect();
        let feats = bb.features(&inputs, None)?;
        for (i, it) in chunk.iter().enumerate() {
            let f = Tensor::new(&[1, feats.cols()], feats.row(i).to_vec())?;
            let v = f.matmul(bb.base_head(it.modality)?)?;
            let p = super::class_probabilities(v.data(), &text, bb.config.temperature)?;
            if argmax(&p) == it.class {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Train both towers and the base heads jointly, check held-out retrieval,
/// record per-modality feature centroids and freeze everything.
pub fn pretrain_backbone(
    enc: &EncoderConfig,
    train: &PretrainConfig,
    corpus: &PretrainCorpus,
    seed: u64,
) -> Result<Backbone> {
    let root = RngStream::new(seed, "pretrain");
    let mut bb = Backbone::init(enc, corpus.num_modalities, &mut root.derive("init"))?;
    let mut adam: Vec<AdamState> = bb
        .params_mut()
        .into_iter()
        .map(|p| AdamState::for_param(p, train.learning_rate))
        .collect();
    let nclass = corpus.class_tokens.len();
    let mut by_class = vec![Vec::new(); nclass];
    for (i, it) in corpus.train.iter().enumerate() {
        by_class[it.class].push(i);
    }
    if by_class.iter().any(|v| v.is_empty()) {
        return Err(Error::config("every pretraining class needs training samples"));
    }
    let mut rng = root.derive("batches");
    let k = train.batch_classes.min(nclass).max(1);
    let mut running = 0.0;
    for step in 0..train.steps {
        let classes = rng.choose_distinct(nclass, k);
        let items: Vec<&PretrainItem> = classes
            .iter()
            .map(|&c| &corpus.train[by_class[c][rng.below(by_class[c].len())]])
            .collect();
        let loss = contrastive_step(&mut bb, &mut adam, &items, corpus).map_err(|e| e.context(format!("pretrain step {step}")))?;
        running = if step == 0 { loss } else { 0.98 * running + 0.02 * loss };
        if (step + 1) % 250 == 0 {
            info!("pretrain step {} loss {running:.4}", step + 1);
        }
    }
    bb.freeze();
    bb.retrieval = retrieval_accuracy(&bb, corpus, &corpus.heldout)?;
    info!("held-out retrieval {:.4}", bb.retrieval);
    if bb.retrieval < train.min_retrieval {
        return Err(Error::Pretrain(format!(
            "held-out retrieval {:.4} below {:.2} after {} steps",
            bb.retrieval, train.min_retrieval, train.steps
        )));
    }
    bb.centroids = modality_centroids(&bb, corpus)?;
    Ok(bb)
}

fn modality_centroids(bb: &Backbone, corpus: &PretrainCorpus) -> Result<Tensor<f32>> {
    let d = bb.config.d_model;
    let nm = corpus.num_modalities;
    let mut sums = vec![0.0f64; nm * d];
    let mut counts = vec![0usize; nm];
    for chunk in corpus.train.chunks(64) {
        let inputs: Vec<&Tensor<f32>> = chunk.iter().map(|it| &it.input).collect();
        let feats = bb.features(&inputs, None)?;
        for (i, it) in chunk.iter().enumerate() {
            counts[it.modality] += 1;
            for (s, &f) in sums[it.modality * d..(it.modality + 1) * d].iter_mut().zip(feats.row(i)) {
                *s += f as f64;
            }
        }
    }
    Tensor::new(
        &[nm, d],
        sums.iter()
            .enumerate()
            .map(|(i, s)| (s / counts[i / d].max(1) as f64) as f32)
            .collect(),
    )
}
