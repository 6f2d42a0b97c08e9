//! Flat `key=value` run configuration shared by every subcommand.
//!
//! A config file holds one `key = value` per line; `#` starts a comment.
//! Later assignments (including `--set` overrides) win.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{PairOptions, PassageWindow, SyntheticCorpusSpec};
use crate::error::{Error, Result};
use crate::loss::{BiasMode, LossConfig, NegativeSource, Similarity};
use crate::model::{DocSharing, LanguagePartition, ModelConfig, ProjectionMode};
use crate::numerics::optim::AdamConfig;
use crate::pretrain::PretrainConfig;
use crate::retriever::FinetuneConfig;

macro_rules! run_config {
    ($($key:ident : $ty:ty = $default:expr, $doc:literal;)+) => {
        /// Every tunable of a run. Field names are the config keys.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $key: $ty,)+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)+ }
            }
        }

        impl RunConfig {
            /// `(key, default, description)` for every key, in file order.
            pub fn keys() -> Vec<(&'static str, String, &'static str)> {
                let d = Self::default();
                vec![$((stringify!($key), d.$key.to_string(), $doc),)+]
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $(stringify!($key) => {
                        self.$key = value.parse::<$ty>().map_err(|e| Error::BadValue {
                            key: key.to_string(),
                            message: format!("`{value}`: {e}"),
                        })?;
                    })+
                    _ => {
                        return Err(Error::UnknownKey {
                            key: key.to_string(),
                            valid: [$(stringify!($key)),+].join(", "),
                        })
                    }
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($key) => Some(self.$key.to_string()),)+
                    _ => None,
                }
            }

            /// Every key as `key=value`, one per line, in file order.
            pub fn snapshot(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{}={}", stringify!($key), self.$key).expect("write to string");)+
                out
            }
        }
    };
}

run_config! {
    seed: u64 = 0, "Master seed for initialisation, batching and sampling";
    num_languages: usize = 2, "Synthetic corpus: number of languages";
    num_docs: usize = 1000, "Synthetic corpus: latent documents (each rendered once per language)";
    latent_vocab_size: usize = 400, "Synthetic corpus: latent token types";
    num_topics: usize = 24, "Synthetic corpus: topics in the Markov chain";
    topic_support: usize = 40, "Synthetic corpus: tokens with mass per topic";
    stickiness: f64 = 0.6, "Synthetic corpus: topic self-transition probability, in (0, 1]";
    min_sentences: usize = 4, "Synthetic corpus: fewest sentences per document";
    max_sentences: usize = 10, "Synthetic corpus: most sentences per document";
    min_tokens: usize = 6, "Synthetic corpus: fewest tokens per sentence";
    max_tokens: usize = 10, "Synthetic corpus: most tokens per sentence";
    num_styles: usize = 0, "Synthetic corpus: sentence styles (0 disables style tokens)";
    style_support: usize = 10, "Synthetic corpus: tokens per style";
    min_style_tokens: usize = 3, "Synthetic corpus: fewest style tokens per sentence";
    max_style_tokens: usize = 5, "Synthetic corpus: most style tokens per sentence";
    corpus_seed: u64 = 7, "Synthetic corpus: generator seed";
    vocab_size: usize = 5000, "Largest vocabulary, reserved tokens included";
    d: usize = 64, "Hidden size";
    sentence_layers: usize = 2, "Sentence encoder layers";
    doc_layers: usize = 2, "Document encoder layers";
    heads: usize = 4, "Attention heads";
    ff_mult: usize = 4, "Feed-forward width as a multiple of d";
    init_std: f64 = 0.02, "Std of normal weight initialisation";
    projection: ProjectionMode = ProjectionMode::Asymmetric, "Projection heads: none, shared, asymmetric";
    sharing: DocSharing = DocSharing::ShareAll, "Document encoder sharing: share_all, sep_doc, sep_doc_head";
    language_partition: LanguagePartition = LanguagePartition::default(), "Language groups for separate encoders, e.g. L0;*";
    mu: f64 = 0.5, "Weight of the dynamic bias on intra-document negatives, in [0, 1]";
    bias: BiasMode = BiasMode::Dynamic, "Intra-document bias: dynamic or none";
    negatives: NegativeSource = NegativeSource::All, "Negatives: all or cross_only";
    similarity: Similarity = Similarity::Dot, "Contrastive similarity: dot or cosine";
    cross_negative_cap: usize = 512, "Most cross-document negatives per masked sentence";
    msm_weight: f64 = 1.0, "Weight of the masked-sentence loss (0 gives MLM-only)";
    mlm_weight: f64 = 1.0, "Weight of the masked-token loss";
    mlm_rate: f64 = 0.15, "Fraction of tokens selected for masked-token prediction";
    lr: f64 = 1e-3, "Pretraining peak learning rate";
    warmup_steps: usize = 100, "Pretraining warmup steps";
    total_steps: usize = 2000, "Pretraining steps";
    batch_docs: usize = 16, "Documents per pretraining step";
    grad_clip: f64 = 1.0, "Global gradient-norm clip (0 disables)";
    adam_beta1: f64 = 0.9, "Adam beta1";
    adam_beta2: f64 = 0.999, "Adam beta2";
    adam_eps: f64 = 1e-8, "Adam epsilon";
    checkpoint_every: usize = 500, "Pretraining steps between resumable checkpoints";
    ft_lang: String = "L0".to_string(), "Language of the fine-tuning pairs";
    ft_steps: usize = 300, "Fine-tuning steps";
    ft_batch_size: usize = 32, "Fine-tuning batch size (in-batch negatives)";
    ft_lr: f64 = 1e-3, "Fine-tuning peak learning rate";
    ft_warmup_steps: usize = 30, "Fine-tuning warmup steps";
    pair_dropout: f64 = 0.2, "Query token dropout when deriving pairs";
    pairs_per_doc: usize = 1, "Retrieval pairs drawn per document";
    pair_window: PassageWindow = PassageWindow::Neighbors, "Passage window: neighbors or containing";
    test_fraction: f64 = 0.2, "Fraction of latent documents held out for evaluation";
    eval_pairs_per_doc: usize = 2, "Evaluation queries drawn per held-out document";
    eval_k: usize = 10, "Cutoff of the headline MRR";
}

fn clip(v: f64) -> Option<f64> {
    (v > 0.0).then_some(v)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_file(path)?;
        Ok(c)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("expected key=value, found `{line}`"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies `key=value` strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn corpus_spec(&self) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            num_languages: self.num_languages,
            latent_vocab_size: self.latent_vocab_size,
            num_topics: self.num_topics,
            topic_transition_stickiness: self.stickiness,
            sentences_per_doc: (self.min_sentences, self.max_sentences),
            tokens_per_sentence: (self.min_tokens, self.max_tokens),
            num_docs: self.num_docs,
            seed: self.corpus_seed,
            topic_support: self.topic_support,
            num_styles: self.num_styles,
            style_support: self.style_support,
            style_tokens_per_sentence: (self.min_style_tokens, self.max_style_tokens),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.d,
            sentence_layers: self.sentence_layers,
            doc_layers: self.doc_layers,
            heads: self.heads,
            ff_dim: self.ff_mult * self.d,
            init_std: self.init_std,
            projection: self.projection,
            doc_sharing: self.sharing,
            language_partition: self.language_partition.clone(),
            ..ModelConfig::new(vocab_size)
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mu: self.mu,
            similarity: self.similarity,
            bias: self.bias,
            negatives: self.negatives,
            cross_negative_cap: self.cross_negative_cap,
            msm_weight: self.msm_weight,
            mlm_weight: self.mlm_weight,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn pretrain_config(&self, vocab_size: usize) -> PretrainConfig {
        PretrainConfig {
            model: self.model_config(vocab_size),
            loss: self.loss_config(),
            adam: self.adam(),
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            batch_docs: self.batch_docs,
            mlm_rate: self.mlm_rate,
            grad_clip: clip(self.grad_clip),
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.ft_steps,
            batch_size: self.ft_batch_size,
            lr: self.ft_lr,
            warmup_steps: self.ft_warmup_steps,
            grad_clip: clip(self.grad_clip),
            adam: self.adam(),
            seed: self.seed,
        }
    }

    pub fn pair_options(&self) -> PairOptions {
        PairOptions {
            dropout: self.pair_dropout,
            pairs_per_doc: self.pairs_per_doc,
            window: self.pair_window,
            seed: self.seed,
        }
    }

    /// `--help` text: every key with its default and description.
    pub fn help_table() -> String {
        let keys = Self::keys();
        let w = keys.iter().map(|(k, v, _)| k.len() + v.len() + 1).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v, doc) in keys {
            let kv = format!("{k}={v}");
            writeln!(out, "  {kv:<w$}  {doc}").expect("write to string");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_parses_and_rejects() {
        let mut c = RunConfig::default();
        c.set("d", "32").unwrap();
        c.set("sharing", "sep_doc_head").unwrap();
        c.set("language_partition", "L0;L1").unwrap();
        assert_eq!(c.d, 32);
        assert_eq!(c.sharing, DocSharing::SepDocHead);
        match c.set("dim", "3") {
            Err(Error::UnknownKey { key, valid }) => {
                assert_eq!(key, "dim");
                assert!(valid.contains("sentence_layers"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(c.set("d", "x"), Err(Error::BadValue { .. })));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["mu=0.3", "ft_lang=L1", "projection=shared"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, format!("# snapshot\n{}", c.snapshot())).unwrap();
        assert_eq!(RunConfig::from_file(&p).unwrap(), c);
    }

    #[test]
    fn file_comments_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.conf");
        std::fs::write(&p, "d = 16  # small\n\n# only a comment\nheads=2\n").unwrap();
        let c = RunConfig::from_file(&p).unwrap();
        assert_eq!((c.d, c.heads), (16, 2));
        std::fs::write(&p, "d 16\n").unwrap();
        assert!(matches!(RunConfig::from_file(&p), Err(Error::Format { line: 1, .. })));
        assert!(matches!(
            RunConfig::from_file(&dir.path().join("missing.conf")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn help_lists_every_key_with_default() {
        let h = RunConfig::help_table();
        assert!(h.contains("mu=0.5"));
        assert!(h.contains("total_steps=2000"));
        assert_eq!(h.lines().count(), RunConfig::keys().len());
    }
}
