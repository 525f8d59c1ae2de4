//! Checkpointing of the accumulated state between tasks.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::json;

use super::{CommConfig, CommModel, ModalityState, PromptPair, RegisteredClass, RelevanceGate};
use crate::error::{Error, Result};
use crate::io::TensorStore;
use crate::numerics::GaussianModel;
use crate::synth::Modality;
use crate::towers::Backbone;

fn put_gaussian(s: &mut TensorStore, name: &str, g: &GaussianModel) {
    let (count, sum, comoment) = g.raw_parts();
    let d = g.dim();
    s.put_f64(format!("{name}.sum"), &[d], sum.to_vec());
    s.put_f64(format!("{name}.comoment"), &[d, d], comoment.to_vec());
    s.set_attr(format!("{name}.count"), json!(count));
}

fn get_gaussian(s: &TensorStore, name: &str) -> Result<GaussianModel> {
    let (_, sum) = s.get_f64(&format!("{name}.sum"))?;
    let (_, comoment) = s.get_f64(&format!("{name}.comoment"))?;
    let count = s
        .attr(&format!("{name}.count"))
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Data(format!("checkpoint lacks {name}.count")))?;
    GaussianModel::from_raw_parts(count, sum, comoment)
}

impl CommModel {
    /// Everything needed to resume between tasks. The backbone is referenced
    /// by digest, not stored.
    pub fn to_store(&self) -> Result<TensorStore> {
        if self.active.is_some() {
            return Err(Error::usage("cannot checkpoint during a task"));
        }
        let mut s = TensorStore::new("comm");
        s.set_attr("config", serde_json::to_value(&self.config)?);
        s.set_attr("backbone", json!(self.backbone.digest()?));
        s.set_attr("seed", json!(self.seed));
        s.set_attr("last_step", json!(self.last_step));
        s.set_attr("modalities", serde_json::to_value(self.modalities())?);
        for (i, st) in self.states.iter().enumerate() {
            let p = format!("state{i}");
            s.put(format!("{p}.prompt"), &st.prompts.modality);
            s.put(format!("{p}.text_prompt"), &st.prompts.text);
            s.put(format!("{p}.head"), &st.head);
            put_gaussian(&mut s, &format!("{p}.raw"), &st.raw_stats);
            let classes: Vec<_> = st
                .classes
                .iter()
                .map(|c| json!({"id": c.id, "tokens": c.tokens, "step": c.step}))
                .collect();
            s.set_attr(format!("{p}.classes"), json!(classes));
            s.set_attr(format!("{p}.tasks_completed"), json!(st.tasks_completed));
            for (id, g) in &st.class_stats {
                put_gaussian(&mut s, &format!("{p}.class{id}"), g);
            }
        }
        if let Some(g) = &self.gate {
            s.put("gate.weight", &g.weight);
            s.put("gate.bias", &g.bias);
            s.set_attr("gate.modalities", serde_json::to_value(&g.modalities)?);
        }
        Ok(s)
    }

    pub fn from_store(backbone: Arc<Backbone>, s: &TensorStore) -> Result<Self> {
        if s.kind() != "comm" {
            return Err(Error::Data(format!("checkpoint kind {} is not comm", s.kind())));
        }
        let attr = |k: &str| s.attr(k).ok_or_else(|| Error::Data(format!("checkpoint lacks {k}")));
        if attr("backbone")?.as_str() != Some(backbone.digest()?.as_str()) {
            return Err(Error::Data("checkpoint was made with a different backbone".into()));
        }
        let config: CommConfig = serde_json::from_value(attr("config")?.clone())?;
        let seed = attr("seed")?.as_u64().ok_or_else(|| Error::Data("bad seed".into()))?;
        let last_step = attr("last_step")?.as_u64().ok_or_else(|| Error::Data("bad last_step".into()))? as usize;
        let modalities: Vec<Modality> = serde_json::from_value(attr("modalities")?.clone())?;
        let mut model = CommModel::new(backbone, config, seed)?;
        model.last_step = last_step;
        for (i, &m) in modalities.iter().enumerate() {
            let p = format!("state{i}");
            let mut classes = Vec::new();
            let mut class_stats = BTreeMap::new();
            let list = attr(&format!("{p}.classes"))?
                .as_array()
                .ok_or_else(|| Error::Data("bad class registry".into()))?;
            for c in list {
                let id = c["id"].as_u64().ok_or_else(|| Error::Data("bad class id".into()))? as usize;
                let tokens: Vec<usize> = serde_json::from_value(c["tokens"].clone())?;
                let step = c["step"].as_u64().ok_or_else(|| Error::Data("bad class step".into()))? as usize;
                class_stats.insert(id, get_gaussian(s, &format!("{p}.class{id}"))?);
                classes.push(RegisteredClass { id, tokens, step });
            }
            model.states.push(ModalityState {
                modality: m,
                prompts: PromptPair {
                    modality: s.get(&format!("{p}.prompt"))?,
                    text: s.get(&format!("{p}.text_prompt"))?,
                },
                head: s.get(&format!("{p}.head"))?,
                snapshot: None,
                raw_stats: get_gaussian(s, &format!("{p}.raw"))?,
                class_stats,
                classes,
                tasks_completed: attr(&format!("{p}.tasks_completed"))?.as_u64().unwrap_or(0) as usize,
            });
        }
        if let Some(m) = s.attr("gate.modalities") {
            model.gate = Some(RelevanceGate {
                weight: s.get("gate.weight")?,
                bias: s.get("gate.bias")?,
                modalities: serde_json::from_value(m.clone())?,
            });
        }
        Ok(model)
    }
}
