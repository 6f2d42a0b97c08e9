#![allow(dead_code)]

use msm_core::corpus::{Document, Sentence};
use msm_core::model::{DocSharing, ModelConfig, MsmModel, ProjectionMode};
use rand::Rng;

/// Straightforward re-derivation of the masked-sentence loss, written
/// without any library helpers.
pub mod oracle {
    pub fn sim(a: &[f64], b: &[f64], cosine: bool) -> f64 {
        assert_eq!(a.len(), b.len());
        let mut s = 0.0;
        let (mut na, mut nb) = (0.0, 0.0);
        for i in 0..a.len() {
            s += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        if cosine {
            s / (na.sqrt() * nb.sqrt())
        } else {
            s
        }
    }

    pub fn alpha(p: &[f64], intra: &[Vec<f64>], cross: &[Vec<f64>], cosine: bool) -> f64 {
        if intra.is_empty() {
            return 0.0;
        }
        let mi: f64 = intra.iter().map(|h| sim(p, h, cosine)).sum::<f64>() / intra.len() as f64;
        let mc: f64 = cross.iter().map(|h| sim(p, h, cosine)).sum::<f64>() / cross.len() as f64;
        mi - mc
    }

    pub fn loss(
        p: &[f64],
        pos: &[f64],
        intra: &[Vec<f64>],
        cross: &[Vec<f64>],
        mu: f64,
        alpha: f64,
        cosine: bool,
    ) -> f64 {
        let sp = sim(p, pos, cosine);
        let mut terms = vec![sp];
        terms.extend(intra.iter().map(|h| sim(p, h, cosine) - mu * alpha));
        terms.extend(cross.iter().map(|h| sim(p, h, cosine)));
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = terms.iter().map(|t| (t - m).exp()).sum();
        -(sp - m) + denom.ln()
    }
}

pub fn random_vec(rng: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Documents of random token ids in `lang`.
pub fn random_docs(
    rng: &mut impl Rng,
    vocab_size: usize,
    lang: &str,
    count: usize,
    sentences: (usize, usize),
    tokens: (usize, usize),
) -> Vec<Document> {
    (0..count)
        .map(|i| Document {
            doc_id: format!("{lang}-{i}"),
            lang: lang.to_string(),
            sentences: (0..rng.random_range(sentences.0..=sentences.1))
                .map(|_| {
                    let n = rng.random_range(tokens.0..=tokens.1);
                    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(5..vocab_size)).collect();
                    Sentence::from_content(&ids)
                })
                .collect(),
        })
        .collect()
}

pub fn small_config(vocab: usize, d: usize, sharing: DocSharing, proj: ProjectionMode) -> ModelConfig {
    ModelConfig {
        hidden: d,
        heads: 2,
        ff_dim: 2 * d,
        doc_sharing: sharing,
        projection: proj,
        ..ModelConfig::new(vocab)
    }
}

pub fn small_model(vocab: usize, d: usize, sharing: DocSharing, proj: ProjectionMode, seed: u64) -> MsmModel {
    let mut m = MsmModel::new(small_config(vocab, d, sharing, proj), seed).unwrap();
    // Larger weights than the default init so logits are not all near zero.
    for id in m.params.ids().collect::<Vec<_>>() {
        let name = m.params.name(id).to_string();
        if name.ends_with("emb") || name.ends_with("mask_vec") {
            for v in m.params.value_mut(id).data_mut() {
                *v *= 25.0;
            }
        }
    }
    m
}
