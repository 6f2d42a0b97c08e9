//! Synthetic parallel corpora.
//!
//! Latent documents are sticky Markov walks over topics; every sentence draws
//! latent tokens from its topic. Each latent document is rendered once per
//! language with a disjoint surface vocabulary (`L<lang>_<token>`), so the
//! renderings share sentence order and nothing lexical.
//!
//! Optionally each sentence also carries a few "style" tokens drawn from one
//! of `num_styles` styles chosen independently of the topic. Style tokens
//! are predictable within a sentence but say nothing about its neighbours.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::Rng;

use super::RawDocument;
use crate::error::{Error, Result};
use crate::numerics::standard_normal;
use crate::seed::{named_seed, rng, sub_seed};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticCorpusSpec {
    pub num_languages: usize,
    pub latent_vocab_size: usize,
    pub num_topics: usize,
    /// Self-transition probability of the topic chain, in (0, 1].
    pub topic_transition_stickiness: f64,
    /// Inclusive range.
    pub sentences_per_doc: (usize, usize),
    /// Inclusive range.
    pub tokens_per_sentence: (usize, usize),
    /// Latent documents; each is rendered once per language.
    pub num_docs: usize,
    pub seed: u64,
    /// Latent tokens carrying mass in each topic.
    pub topic_support: usize,
    /// Zero disables style tokens.
    pub num_styles: usize,
    /// Tokens per style; style vocabularies are disjoint from each other and
    /// from the topic vocabulary.
    pub style_support: usize,
    /// Inclusive range of style tokens added to each sentence.
    pub style_tokens_per_sentence: (usize, usize),
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_languages: 2,
            latent_vocab_size: 400,
            num_topics: 24,
            topic_transition_stickiness: 0.6,
            sentences_per_doc: (4, 10),
            tokens_per_sentence: (6, 10),
            num_docs: 1000,
            seed: 7,
            topic_support: 40,
            num_styles: 0,
            style_support: 10,
            style_tokens_per_sentence: (3, 5),
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_languages", self.num_languages),
            ("latent_vocab_size", self.latent_vocab_size),
            ("num_topics", self.num_topics),
            ("num_docs", self.num_docs),
            ("topic_support", self.topic_support),
            ("sentences_per_doc.min", self.sentences_per_doc.0),
            ("tokens_per_sentence.min", self.tokens_per_sentence.0),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        let s = self.topic_transition_stickiness;
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::invalid(format!("stickiness {s} outside (0, 1]")));
        }
        if self.sentences_per_doc.0 > self.sentences_per_doc.1
            || self.tokens_per_sentence.0 > self.tokens_per_sentence.1
        {
            return Err(Error::invalid("range with min > max"));
        }
        if self.topic_support > self.latent_vocab_size {
            return Err(Error::invalid("topic_support exceeds latent_vocab_size"));
        }
        if self.num_styles > 0
            && (self.style_support == 0
                || self.style_tokens_per_sentence.0 > self.style_tokens_per_sentence.1)
        {
            return Err(Error::invalid("bad style token settings"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDocument {
    pub id: usize,
    pub topics: Vec<usize>,
    /// Per-sentence style; empty when styles are disabled.
    pub styles: Vec<usize>,
    pub sentences: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentRow {
    pub latent_id: usize,
    pub lang: String,
    pub doc_id: String,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SyntheticCorpusSpec,
    /// Row-stochastic topic transition matrix.
    pub transitions: Vec<Vec<f64>>,
    /// Per-topic distribution over latent tokens (dense, length `latent_vocab_size`).
    pub topic_tokens: Vec<Vec<f64>>,
    pub latent: Vec<LatentDocument>,
    /// Ordered by latent id, then language.
    pub documents: Vec<RawDocument>,
    pub alignment: Vec<AlignmentRow>,
}

impl SyntheticCorpus {
    pub fn languages(&self) -> Vec<String> {
        (0..self.spec.num_languages).map(lang_tag).collect()
    }

    pub fn documents_in(&self, lang: &str) -> Vec<RawDocument> {
        self.documents
            .iter()
            .filter(|d| d.lang == lang)
            .cloned()
            .collect()
    }
}

pub fn lang_tag(lang: usize) -> String {
    format!("L{lang}")
}

pub fn surface_token(lang: usize, latent: usize) -> String {
    format!("L{lang}_{latent}")
}

pub fn doc_id(latent: usize, lang: usize) -> String {
    format!("doc{latent:06}.L{lang}")
}

pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut structure = rng(named_seed(spec.seed, "structure"));

    let topic_tokens: Vec<Vec<f64>> = (0..spec.num_topics)
        .map(|_| {
            let mut dist = vec![0.0; spec.latent_vocab_size];
            let support = sample(&mut structure, spec.latent_vocab_size, spec.topic_support);
            // Zipf weights over a random ordering of the support.
            let norm: f64 = (1..=spec.topic_support).map(|r| 1.0 / r as f64).sum();
            for (rank, tok) in support.into_iter().enumerate() {
                dist[tok] = 1.0 / ((rank + 1) as f64 * norm);
            }
            dist
        })
        .collect();

    let stick = spec.topic_transition_stickiness;
    let transitions: Vec<Vec<f64>> = (0..spec.num_topics)
        .map(|k| {
            let mut row = vec![0.0; spec.num_topics];
            if spec.num_topics == 1 {
                row[0] = 1.0;
                return row;
            }
            // Heavy-tailed successor preferences make each topic's
            // neighbourhood distinctive.
            let w: Vec<f64> = (0..spec.num_topics)
                .map(|j| {
                    if j == k {
                        0.0
                    } else {
                        (1.5 * standard_normal(&mut structure)).exp()
                    }
                })
                .collect();
            let total: f64 = w.iter().sum();
            for j in 0..spec.num_topics {
                row[j] = if j == k { stick } else { (1.0 - stick) * w[j] / total };
            }
            row
        })
        .collect();

    let token_samplers: Vec<WeightedIndex<f64>> = topic_tokens
        .iter()
        .map(|d| WeightedIndex::new(d).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<_>>()?;
    let transition_samplers: Vec<WeightedIndex<f64>> = transitions
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<_>>()?;

    let mut latent = Vec::with_capacity(spec.num_docs);
    for id in 0..spec.num_docs {
        let mut r = rng(sub_seed(spec.seed, id as u64));
        let n = r.random_range(spec.sentences_per_doc.0..=spec.sentences_per_doc.1);
        let mut topics = Vec::with_capacity(n);
        let mut styles = Vec::new();
        let mut sentences = Vec::with_capacity(n);
        let mut topic = r.random_range(0..spec.num_topics);
        for i in 0..n {
            if i > 0 {
                topic = transition_samplers[topic].sample(&mut r);
            }
            let len = r.random_range(spec.tokens_per_sentence.0..=spec.tokens_per_sentence.1);
            let mut tokens: Vec<usize> =
                (0..len).map(|_| token_samplers[topic].sample(&mut r)).collect();
            if spec.num_styles > 0 {
                let style = r.random_range(0..spec.num_styles);
                let (lo, hi) = spec.style_tokens_per_sentence;
                let base = spec.latent_vocab_size + style * spec.style_support;
                for _ in 0..r.random_range(lo..=hi) {
                    let at = r.random_range(0..=tokens.len());
                    tokens.insert(at, base + r.random_range(0..spec.style_support));
                }
                styles.push(style);
            }
            topics.push(topic);
            sentences.push(tokens);
        }
        latent.push(LatentDocument {
            id,
            topics,
            styles,
            sentences,
        });
    }

    let mut documents = Vec::with_capacity(spec.num_docs * spec.num_languages);
    let mut alignment = Vec::with_capacity(documents.capacity());
    for doc in &latent {
        for lang in 0..spec.num_languages {
            let text = doc
                .sentences
                .iter()
                .map(|s| {
                    s.iter()
                        .map(|&v| surface_token(lang, v))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect::<Vec<_>>()
                .join("\n");
            let id = doc_id(doc.id, lang);
            alignment.push(AlignmentRow {
                latent_id: doc.id,
                lang: lang_tag(lang),
                doc_id: id.clone(),
            });
            documents.push(RawDocument {
                doc_id: id,
                lang: lang_tag(lang),
                text,
            });
        }
    }

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        transitions,
        topic_tokens,
        latent,
        documents,
        alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            num_docs: 40,
            latent_vocab_size: 60,
            num_topics: 6,
            topic_support: 12,
            ..SyntheticCorpusSpec::default()
        }
    }

    #[test]
    fn renderings_are_positionally_aligned() {
        let c = generate_synthetic_corpus(&small()).unwrap();
        for pair in c.documents.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let la: Vec<&str> = a.text.lines().collect();
            let lb: Vec<&str> = b.text.lines().collect();
            assert_eq!(la.len(), lb.len());
            for (sa, sb) in la.iter().zip(&lb) {
                let ta: Vec<&str> = sa.split(' ').map(|t| t.trim_start_matches("L0_")).collect();
                let tb: Vec<&str> = sb.split(' ').map(|t| t.trim_start_matches("L1_")).collect();
                assert_eq!(ta, tb);
            }
        }
        assert_eq!(c.alignment.len(), 80);
        assert_eq!(c.alignment[3].doc_id, "doc000001.L1");
    }

    #[test]
    fn full_stickiness_keeps_one_topic() {
        let spec = SyntheticCorpusSpec {
            topic_transition_stickiness: 1.0,
            ..small()
        };
        let c = generate_synthetic_corpus(&spec).unwrap();
        for d in &c.latent {
            assert!(d.topics.iter().all(|&t| t == d.topics[0]));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic_corpus(&small()).unwrap();
        let b = generate_synthetic_corpus(&small()).unwrap();
        assert_eq!(a.documents, b.documents);
        let c = generate_synthetic_corpus(&SyntheticCorpusSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.documents, c.documents);
    }

    #[test]
    fn style_tokens_come_from_the_sentence_style() {
        let spec = SyntheticCorpusSpec {
            num_styles: 3,
            style_support: 4,
            style_tokens_per_sentence: (2, 2),
            ..small()
        };
        let c = generate_synthetic_corpus(&spec).unwrap();
        let plain = generate_synthetic_corpus(&small()).unwrap();
        for (d, p) in c.latent.iter().zip(&plain.latent) {
            assert_eq!(d.styles.len(), d.sentences.len());
            for (s, &style) in d.sentences.iter().zip(&d.styles) {
                let extra: Vec<usize> = s.iter().copied().filter(|&t| t >= 60).collect();
                assert_eq!(extra.len(), 2);
                assert!(extra.iter().all(|&t| (t - 60) / 4 == style));
            }
            assert!(p.styles.is_empty());
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for bad in [
            SyntheticCorpusSpec { num_topics: 0, ..small() },
            SyntheticCorpusSpec { topic_transition_stickiness: 0.0, ..small() },
            SyntheticCorpusSpec { topic_transition_stickiness: 1.2, ..small() },
            SyntheticCorpusSpec { sentences_per_doc: (5, 2), ..small() },
            SyntheticCorpusSpec { topic_support: 1000, ..small() },
        ] {
            assert!(generate_synthetic_corpus(&bad).is_err());
        }
    }
}
