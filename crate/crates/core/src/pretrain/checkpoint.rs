use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MsmModel, SENTENCE_PREFIX};
use crate::numerics::checkpoint::{load_container, save_container};
use crate::numerics::optim::{Adam, AdamConfig};
use crate::numerics::{ParamStore, Tensor};

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Everything needed to resume pretraining.
    Full,
    /// Sentence encoder only, for fine-tuning.
    Export,
}

pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: MsmModel,
    pub adam: Option<Adam>,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: CheckpointKind,
    d: usize,
    sentence_layers: usize,
    doc_layers: usize,
    vocab_size: usize,
    sharing_mode: String,
    has_document_encoder: bool,
    step: usize,
    model: ModelConfig,
    adam: Option<AdamMeta>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    t: u64,
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let m = &ckpt.model;
    let mut store = m.params.clone();
    if let Some(adam) = &ckpt.adam {
        for (i, id) in m.params.ids().enumerate() {
            let name = m.params.name(id);
            store.insert(format!("{ADAM_M}{name}"), adam.m[i].clone())?;
            store.insert(format!("{ADAM_V}{name}"), adam.v[i].clone())?;
        }
    }
    let meta = Meta {
        kind: ckpt.kind,
        d: m.config.hidden,
        sentence_layers: m.config.sentence_layers,
        doc_layers: m.config.doc_layers,
        vocab_size: m.config.vocab_size,
        sharing_mode: m.config.doc_sharing.to_string(),
        has_document_encoder: m.has_document_encoder,
        step: ckpt.step,
        model: m.config.clone(),
        adam: ckpt.adam.as_ref().map(|a| AdamMeta {
            config: a.config,
            t: a.t,
        }),
    };
    save_container(dir, &store, json!(meta))
}

/// Writes the sentence encoder alone.
pub fn save_export(dir: &Path, model: &MsmModel, step: usize) -> Result<()> {
    save_checkpoint(
        dir,
        &Checkpoint {
            kind: CheckpointKind::Export,
            model: model.export_sentence_encoder(),
            adam: None,
            step,
        },
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let (store, manifest) = load_container(dir)?;
    let meta: Meta = serde_json::from_value(manifest.meta)
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
    let is_opt = |n: &str| n.starts_with(ADAM_M) || n.starts_with(ADAM_V);
    let params = store.filtered(|n| !is_opt(n));
    if !params.contains(&format!("{SENTENCE_PREFIX}tok_emb")) {
        return Err(Error::Checkpoint("checkpoint has no sentence encoder".into()));
    }
    let adam = match meta.adam {
        None => None,
        Some(am) => {
            let fetch = |prefix: &str, name: &str| -> Result<Tensor> {
                store
                    .get(&format!("{prefix}{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for `{name}`")))
            };
            let mut m = Vec::new();
            let mut v = Vec::new();
            for name in params.names() {
                m.push(fetch(ADAM_M, name)?);
                v.push(fetch(ADAM_V, name)?);
            }
            Some(Adam {
                config: am.config,
                t: am.t,
                m,
                v,
            })
        }
    };
    check_layout(&params, &meta.model, meta.has_document_encoder)?;
    Ok(Checkpoint {
        kind: meta.kind,
        model: MsmModel {
            config: meta.model,
            params,
            has_document_encoder: meta.has_document_encoder,
        },
        adam,
        step: meta.step,
    })
}

/// Names and shapes must match a freshly initialised model of the same
/// configuration.
fn check_layout(params: &ParamStore, config: &ModelConfig, full: bool) -> Result<()> {
    let fresh = MsmModel::new(config.clone(), 0)?;
    let want = if full {
        fresh.params
    } else {
        fresh.export_sentence_encoder().params
    };
    if want.names() != params.names() {
        return Err(Error::Checkpoint("parameter names do not match the model config".into()));
    }
    for id in want.ids() {
        if want.value(id).shape() != params.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                want.name(id),
                params.value(id).shape(),
                want.value(id).shape()
            )));
        }
    }
    Ok(())
}
