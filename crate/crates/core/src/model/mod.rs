//! The hierarchical network: a token-level sentence encoder pooled at
//! `[CLS]`, a shallow document encoder over sentence vectors with a learned
//! sentence-mask vector, projection heads, and a tied MLM head.

mod encoder;
mod heads;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{MAX_DOC_SENTENCES, MAX_SEQUENCE_LEN};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::seed::rng;

pub use encoder::{
    document_context, encode_document, encode_sentence, encode_sequences, mlm_forward,
    mlm_logits, sentence_vectors, DocInstance, TokenBatch,
};
pub use heads::{project, project_node, Side};

/// Projection-head arrangement in front of the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Identity on both sides.
    None,
    /// One affine map used for both sides.
    Shared,
    /// Separate affine maps for document outputs and sentence vectors.
    Asymmetric,
}

/// How document encoders (and heads) are shared across languages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocSharing {
    ShareAll,
    SepDoc,
    SepDocHead,
}

macro_rules! str_enum {
    ($ty:ident { $($name:literal => $variant:ident),+ $(,)? }) => {
        impl ::std::str::FromStr for $ty {
            type Err = $crate::Error;
            fn from_str(s: &str) -> $crate::Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err($crate::Error::invalid(format!(
                        concat!("unknown ", stringify!($ty), " `{}` (expected one of: {})"),
                        s,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
        impl ::std::fmt::Display for $ty {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}
pub(crate) use str_enum;

str_enum!(ProjectionMode { "none" => None, "shared" => Shared, "asymmetric" => Asymmetric });
str_enum!(DocSharing { "share_all" => ShareAll, "sep_doc" => SepDoc, "sep_doc_head" => SepDocHead });

/// Languages grouped into partitions, e.g. `L0;*` puts `L0` in partition 0
/// and every other language in partition 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguagePartition {
    groups: Vec<Vec<String>>,
}

impl LanguagePartition {
    pub fn groups(&self) -> usize {
        self.groups.len()
    }

    pub fn partition_of(&self, lang: &str) -> Result<usize> {
        if let Some(i) = self.groups.iter().position(|g| g.iter().any(|l| l == lang)) {
            return Ok(i);
        }
        self.groups
            .iter()
            .position(|g| g.iter().any(|l| l == "*"))
            .ok_or_else(|| Error::invalid(format!("unknown language `{lang}`")))
    }
}

impl Default for LanguagePartition {
    fn default() -> Self {
        "L0;*".parse().expect("valid default")
    }
}

impl FromStr for LanguagePartition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let groups: Vec<Vec<String>> = s
            .split(';')
            .map(|g| {
                g.split(',')
                    .map(|l| l.trim().to_string())
                    .filter(|l| !l.is_empty())
                    .collect::<Vec<_>>()
            })
            .collect();
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(Error::invalid(format!("bad language partition `{s}`")));
        }
        let mut seen = std::collections::HashSet::new();
        for l in groups.iter().flatten() {
            if !seen.insert(l) {
                return Err(Error::invalid(format!("language `{l}` in two partitions")));
            }
        }
        Ok(Self { groups })
    }
}

impl fmt::Display for LanguagePartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.groups.iter().map(|g| g.join(",")).collect();
        f.write_str(&parts.join(";"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub sentence_layers: usize,
    pub doc_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub max_sentences: usize,
    pub projection: ProjectionMode,
    pub doc_sharing: DocSharing,
    pub language_partition: LanguagePartition,
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: d = 64, two sentence layers, two document
    /// layers, four heads, feed-forward 4d.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 64,
            sentence_layers: 2,
            doc_layers: 2,
            heads: 4,
            ff_dim: 256,
            max_positions: MAX_SEQUENCE_LEN,
            max_sentences: MAX_DOC_SENTENCES,
            projection: ProjectionMode::Asymmetric,
            doc_sharing: DocSharing::ShareAll,
            language_partition: LanguagePartition::default(),
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::invalid(format!(
                "hidden {} not divisible into {} heads",
                self.hidden, self.heads
            )));
        }
        if self.sentence_layers == 0 {
            return Err(Error::invalid("sentence encoder needs at least one layer"));
        }
        if self.vocab_size <= crate::corpus::RESERVED.len() {
            return Err(Error::invalid("vocabulary too small"));
        }
        Ok(())
    }

    pub fn num_doc_encoders(&self) -> usize {
        match self.doc_sharing {
            DocSharing::ShareAll => 1,
            _ => self.language_partition.groups(),
        }
    }

    pub fn num_heads_sets(&self) -> usize {
        match self.doc_sharing {
            DocSharing::SepDocHead => self.language_partition.groups(),
            _ => 1,
        }
    }
}

/// Document encoder and head set serving one language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EncoderHandle {
    pub doc: usize,
    pub head: usize,
}

/// Parameter-name prefixes.
pub const SENTENCE_PREFIX: &str = "sent.";
pub const MLM_PREFIX: &str = "mlm.";
pub const DOC_PREFIX: &str = "doc";
pub const HEAD_PREFIX: &str = "head";

pub(crate) fn doc_prefix(i: usize) -> String {
    format!("{DOC_PREFIX}{i}.")
}

pub(crate) fn head_prefix(i: usize) -> String {
    format!("{HEAD_PREFIX}{i}.")
}

/// Configuration plus every parameter. Cloning is a deep copy.
#[derive(Clone, Debug)]
pub struct MsmModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// False once the document encoder and heads have been dropped for
    /// fine-tuning.
    pub has_document_encoder: bool,
}

fn insert_layer(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    ff: usize,
    std: f64,
    r: &mut impl rand::Rng,
) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert_normal(format!("{prefix}{w}"), &[d, d], std, r)?;
        store.insert(format!("{prefix}b{}", &w[1..]), Tensor::zeros(&[1, d]))?;
    }
    insert_ln(store, &format!("{prefix}ln1."), d)?;
    store.insert_normal(format!("{prefix}w1"), &[d, ff], std, r)?;
    store.insert(format!("{prefix}b1"), Tensor::zeros(&[1, ff]))?;
    store.insert_normal(format!("{prefix}w2"), &[ff, d], std, r)?;
    store.insert(format!("{prefix}b2"), Tensor::zeros(&[1, d]))?;
    insert_ln(store, &format!("{prefix}ln2."), d)?;
    Ok(())
}

fn insert_ln(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}g"), Tensor::full(&[1, d], 1.0))?;
    store.insert(format!("{prefix}b"), Tensor::zeros(&[1, d]))?;
    Ok(())
}

impl MsmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let (d, std) = (config.hidden, config.init_std);
        let mut p = ParamStore::new();
        p.insert_normal("sent.tok_emb", &[config.vocab_size, d], std, &mut r)?;
        p.insert_normal("sent.pos_emb", &[config.max_positions, d], std, &mut r)?;
        insert_ln(&mut p, "sent.emb_ln.", d)?;
        for l in 0..config.sentence_layers {
            insert_layer(&mut p, &format!("sent.layer{l}."), d, config.ff_dim, std, &mut r)?;
        }
        p.insert("mlm.bias", Tensor::zeros(&[1, config.vocab_size]))?;
        for i in 0..config.num_doc_encoders() {
            let pre = doc_prefix(i);
            p.insert_normal(format!("{pre}pos_emb"), &[config.max_sentences, d], std, &mut r)?;
            p.insert_normal(format!("{pre}mask_vec"), &[1, d], std, &mut r)?;
            insert_ln(&mut p, &format!("{pre}in_ln."), d)?;
            for l in 0..config.doc_layers {
                insert_layer(&mut p, &format!("{pre}layer{l}."), d, config.ff_dim, std, &mut r)?;
            }
        }
        for i in 0..config.num_heads_sets() {
            let pre = head_prefix(i);
            let sides: &[&str] = match config.projection {
                ProjectionMode::None => &[],
                ProjectionMode::Shared => &["shared"],
                ProjectionMode::Asymmetric => &["p", "h"],
            };
            for side in sides {
                p.insert(format!("{pre}{side}.w"), heads::near_identity(d, std, &mut r)?)?;
                p.insert(format!("{pre}{side}.b"), Tensor::zeros(&[1, d]))?;
            }
        }
        Ok(Self {
            config,
            params: p,
            has_document_encoder: true,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Document encoder / head set for `lang` under the sharing mode.
    pub fn select_doc_encoder(&self, lang: &str) -> Result<EncoderHandle> {
        select_doc_encoder(&self.config, lang)
    }

    /// Sentence encoder only, as handed to fine-tuning.
    pub fn export_sentence_encoder(&self) -> MsmModel {
        MsmModel {
            config: self.config.clone(),
            params: self.params.filtered(|n| n.starts_with(SENTENCE_PREFIX)),
            has_document_encoder: false,
        }
    }

    /// Parameter counts grouped by top-level component.
    pub fn summary(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for id in self.params.ids() {
            let name = self.params.name(id);
            let group = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(group).or_default() += self.params.value(id).len();
        }
        out
    }
}

pub fn select_doc_encoder(config: &ModelConfig, lang: &str) -> Result<EncoderHandle> {
    let part = config.language_partition.partition_of(lang)?;
    Ok(match config.doc_sharing {
        DocSharing::ShareAll => EncoderHandle { doc: 0, head: 0 },
        DocSharing::SepDoc => EncoderHandle { doc: part, head: 0 },
        DocSharing::SepDocHead => EncoderHandle {
            doc: part,
            head: part,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(sharing: DocSharing) -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            ff_dim: 16,
            doc_sharing: sharing,
            ..ModelConfig::new(20)
        }
    }

    #[test]
    fn partition_parsing() {
        let p: LanguagePartition = "L0;L1,L2".parse().unwrap();
        assert_eq!(p.partition_of("L2").unwrap(), 1);
        assert!(p.partition_of("L3").is_err());
        let q = LanguagePartition::default();
        assert_eq!(q.partition_of("L7").unwrap(), 1);
        assert_eq!(q.to_string(), "L0;*");
        assert!("L0;L0".parse::<LanguagePartition>().is_err());
        assert!("L0;;L1".parse::<LanguagePartition>().is_err());
    }

    #[test]
    fn share_all_uses_one_encoder() {
        let m = MsmModel::new(config(DocSharing::ShareAll), 0).unwrap();
        assert_eq!(m.select_doc_encoder("L0").unwrap(), m.select_doc_encoder("L1").unwrap());
        assert!(!m.params.contains("doc1.mask_vec"));
    }

    #[test]
    fn sep_doc_separates_encoders_but_not_heads() {
        let m = MsmModel::new(config(DocSharing::SepDoc), 0).unwrap();
        let (a, b) = (m.select_doc_encoder("L0").unwrap(), m.select_doc_encoder("L1").unwrap());
        assert_ne!(a.doc, b.doc);
        assert_eq!(a.head, b.head);
        assert_ne!(m.params.get("doc0.layer0.wq"), m.params.get("doc1.layer0.wq"));
        assert!(!m.params.contains("head1.p.w"));
    }

    #[test]
    fn sep_doc_head_shares_nothing_above_sentence_encoder() {
        let m = MsmModel::new(config(DocSharing::SepDocHead), 0).unwrap();
        let (a, b) = (m.select_doc_encoder("L0").unwrap(), m.select_doc_encoder("L1").unwrap());
        assert_ne!(a.doc, b.doc);
        assert_ne!(a.head, b.head);
        let owned_by = |i: usize| -> Vec<String> {
            m.params
                .names()
                .iter()
                .filter(|n| n.starts_with(&doc_prefix(i)) || n.starts_with(&head_prefix(i)))
                .cloned()
                .collect()
        };
        let (zero, one) = (owned_by(0), owned_by(1));
        assert!(!zero.is_empty());
        assert_eq!(zero.len(), one.len());
        assert!(zero.iter().all(|n| !one.contains(n)));
    }

    #[test]
    fn export_keeps_only_sentence_encoder() {
        let m = MsmModel::new(config(DocSharing::SepDocHead), 0).unwrap();
        let e = m.export_sentence_encoder();
        assert!(!e.has_document_encoder);
        assert!(e.params.names().iter().all(|n| n.starts_with("sent.")));
        assert!(e.params.contains("sent.tok_emb"));
    }

    #[test]
    fn enum_round_trips() {
        for s in ["share_all", "sep_doc", "sep_doc_head"] {
            assert_eq!(s.parse::<DocSharing>().unwrap().to_string(), s);
        }
        assert!("both".parse::<ProjectionMode>().is_err());
    }
}
