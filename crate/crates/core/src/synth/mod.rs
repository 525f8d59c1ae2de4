//! Deterministic synthetic multimodal world.
//!
//! Each class owns a prototype token grid. A sample is the prototype plus
//! Gaussian noise (and, for temporal modalities, a per-slice jitter), pushed
//! through its modality's signature: a fixed random rotation plus a bias.
//! Class names are unique short token sequences.

mod stream;
#[cfg(test)]
mod tests;

pub use stream::{make_stream, Scenario, Stream, Task, TaskPart};

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorStore;
use crate::numerics::{RngStream, Tensor};
use crate::towers::{EncoderConfig, PretrainCorpus, PretrainItem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
    Depth,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Image, Modality::Video, Modality::Depth, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::config(format!("no modality with index {i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Depth => "depth",
            Modality::Audio => "audio",
        }
    }

    /// Temporal slices per sample.
    pub fn temporal_len(self) -> usize {
        match self {
            Modality::Video | Modality::Audio => 3,
            Modality::Image | Modality::Depth => 1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown modality {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub seed: u64,
    /// Continual-learning classes per modality.
    pub cl_classes: usize,
    pub pretrain_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pretrain_train_per_class: usize,
    pub pretrain_heldout_per_class: usize,
    /// Class subsets per modality, one per task.
    pub subsets: usize,
    pub prototype_scale: f32,
    pub noise: f32,
    pub slice_jitter: f32,
    pub bias_scale: f32,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            cl_classes: 20,
            pretrain_classes: 8,
            train_per_class: 40,
            test_per_class: 10,
            pretrain_train_per_class: 64,
            pretrain_heldout_per_class: 16,
            subsets: 5,
            prototype_scale: 1.0,
            noise: 0.3,
            slice_jitter: 0.15,
            bias_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassInfo {
    pub id: usize,
    pub modality: Modality,
    pub pretrain: bool,
    pub tokens: Vec<usize>,
    /// `[spatial, d_in]`
    pub prototype: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub modality: Modality,
    pub class: usize,
    /// `[temporal * spatial, d_in]`
    pub input: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub spatial_len: usize,
    pub d_in: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    /// Rotation `[d_in, d_in]` and bias `[d_in]` per modality.
    pub signatures: Vec<(Tensor<f32>, Vec<f32>)>,
    pub classes: Vec<ClassInfo>,
    train: Vec<Vec<Sample>>,
    test: Vec<Vec<Sample>>,
}

fn random_rotation(n: usize, rng: &mut RngStream) -> Tensor<f32> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.normal());
    let qr = m.qr();
    let q = qr.q();
    let r = qr.r();
    // sign fix makes the draw uniform over rotations
    Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        (q[(i, j)] * r[(j, j)].signum()) as f32
    })
}

impl World {
    pub fn build(spec: &WorldSpec, enc: &EncoderConfig) -> Result<Self> {
        if spec.cl_classes == 0 || spec.subsets == 0 || spec.cl_classes % spec.subsets != 0 {
            return Err(Error::config("cl_classes must be a positive multiple of subsets"));
        }
        if spec.train_per_class == 0 || spec.test_per_class == 0 || spec.pretrain_train_per_class == 0 {
            return Err(Error::config("every split needs at least one sample per class"));
        }
        if spec.noise < 0.0 || spec.slice_jitter < 0.0 {
            return Err(Error::config("noise scales must be non-negative"));
        }
        let per_mod = spec.cl_classes + spec.pretrain_classes;
        let total = per_mod * Modality::ALL.len();
        let capacity = (enc.vocab_size as f64).powi(enc.text_len as i32);
        if total as f64 > capacity {
            return Err(Error::config(format!(
                "{total} classes exceed the {capacity} distinct names of the token table"
            )));
        }
        let root = RngStream::new(spec.seed, "world");
        let (s, d) = (enc.spatial_len, enc.d_in);
        let signatures = Modality::ALL
            .iter()
            .map(|m| {
                let mut r = root.derive(format!("signature/{m}"));
                let rot = random_rotation(d, &mut r);
                let bias = (0..d).map(|_| r.normal_f32(spec.bias_scale)).collect();
                (rot, bias)
            })
            .collect();
        let mut names = HashSet::new();
        let mut name_rng = root.derive("names");
        let mut classes = Vec::with_capacity(total);
        for m in Modality::ALL {
            for k in 0..per_mod {
                let id = classes.len();
                let tokens = loop {
                    let t: Vec<usize> = (0..enc.text_len).map(|_| name_rng.below(enc.vocab_size)).collect();
                    if names.insert(t.clone()) {
                        break t;
                    }
                };
                let mut pr = root.derive(format!("prototype/{id}"));
                classes.push(ClassInfo {
                    id,
                    modality: m,
                    pretrain: k >= spec.cl_classes,
                    tokens,
                    prototype: Tensor::from_fn(&[s, d], |_| pr.normal_f32(spec.prototype_scale)),
                });
            }
        }
        let mut world = World {
            spec: spec.clone(),
            spatial_len: s,
            d_in: d,
            text_len: enc.text_len,
            vocab_size: enc.vocab_size,
            signatures,
            classes,
            train: Vec::new(),
            test: Vec::new(),
        };
        let mut train = Vec::with_capacity(total);
        let mut test = Vec::with_capacity(total);
        for c in &world.classes {
            let (ntr, nte) = if c.pretrain {
                (spec.pretrain_train_per_class, spec.pretrain_heldout_per_class)
            } else {
                (spec.train_per_class, spec.test_per_class)
            };
            train.push((0..ntr).map(|i| world.sample(c.id, "train", i)).collect());
            test.push((0..nte).map(|i| world.sample(c.id, "test", i)).collect());
        }
        world.train = train;
        world.test = test;
        Ok(world)
    }

    fn sample(&self, class: usize, split: &str, index: usize) -> Sample {
        let c = &self.classes[class];
        let mut rng = RngStream::new(self.spec.seed, format!("sample/{class}/{split}/{index}"));
        let (rot, bias) = &self.signatures[c.modality.index()];
        let (s, d) = (self.spatial_len, self.d_in);
        let t = c.modality.temporal_len();
        let mut raw = Vec::with_capacity(t * s * d);
        let base: Vec<f32> = c
            .prototype
            .data()
            .iter()
            .map(|&p| p + rng.normal_f32(self.spec.noise))
            .collect();
        for _ in 0..t {
            if t == 1 {
                raw.extend_from_slice(&base);
            } else {
                raw.extend(base.iter().map(|&b| b + rng.normal_f32(self.spec.slice_jitter)));
            }
        }
        let raw = Tensor::new(&[t * s, d], raw).expect("sample geometry");
        let mut input = raw.matmul(rot).expect("rotation conforms");
        for row in input.data_mut().chunks_mut(d) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        Sample {
            modality: c.modality,
            class,
            input,
        }
    }

    /// Continual-learning class ids of `m`, in generation order.
    pub fn cl_classes(&self, m: Modality) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| c.modality == m && !c.pretrain)
            .map(|c| c.id)
            .collect()
    }

    pub fn train_samples(&self, class: usize) -> &[Sample] {
        &self.train[class]
    }

    pub fn test_samples(&self, class: usize) -> &[Sample] {
        &self.test[class]
    }

    pub fn tokens(&self, class: usize) -> &[usize] {
        &self.classes[class].tokens
    }

    /// Pretraining classes of every modality, renumbered densely.
    pub fn pretrain_corpus(&self) -> PretrainCorpus {
        let mut class_tokens = Vec::new();
        let mut train = Vec::new();
        let mut heldout = Vec::new();
        for c in self.classes.iter().filter(|c| c.pretrain) {
            let local = class_tokens.len();
            class_tokens.push(c.tokens.clone());
            let item = |s: &Sample| PretrainItem {
                modality: c.modality.index(),
                class: local,
                input: s.input.clone(),
            };
            train.extend(self.train[c.id].iter().map(item));
            heldout.extend(self.test[c.id].iter().map(item));
        }
        PretrainCorpus {
            num_modalities: Modality::ALL.len(),
            class_tokens,
            train,
            heldout,
        }
    }

    /// Everything needed to inspect the world offline.
    pub fn to_store(&self) -> Result<TensorStore> {
        let mut st = TensorStore::new("world");
        st.set_attr("spec", serde_json::to_value(&self.spec)?);
        for (m, (rot, bias)) in Modality::ALL.iter().zip(&self.signatures) {
            st.put(format!("signature/{m}/rotation"), rot);
            st.put(format!("signature/{m}/bias"), &Tensor::new(&[bias.len()], bias.clone())?);
        }
        for c in &self.classes {
            st.put(format!("class/{}/prototype", c.id), &c.prototype);
            st.put(
                format!("class/{}/tokens", c.id),
                &Tensor::new(&[c.tokens.len()], c.tokens.iter().map(|&t| t as f32).collect())?,
            );
            for (split, samples) in [("train", &self.train[c.id]), ("test", &self.test[c.id])] {
                let rows = samples[0].input.rows();
                let data: Vec<f32> = samples.iter().flat_map(|s| s.input.data().iter().copied()).collect();
                st.put(
                    format!("class/{}/{split}", c.id),
                    &Tensor::new(&[samples.len(), rows, self.d_in], data)?,
                );
            }
        }
        let meta: Vec<_> = self
            .classes
            .iter()
            .map(|c| serde_json::json!({"id": c.id, "modality": c.modality, "pretrain": c.pretrain}))
            .collect();
        st.set_attr("classes", serde_json::Value::Array(meta));
        Ok(st)
    }
}
