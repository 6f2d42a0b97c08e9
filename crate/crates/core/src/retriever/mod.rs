//! Bi-encoder fine-tuning, exact nearest-neighbour search and ranking
//! metrics.

mod finetune;
mod metrics;
mod trec;

use std::cmp::Ordering;

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::model::{sentence_vectors, MsmModel, TokenBatch};
use crate::numerics::kernels::gemm;
use crate::numerics::{Graph, Tensor};

pub use finetune::{finetune_biencoder, FinetuneConfig, TokenizedPair};
pub use metrics::{
    evaluate, map_at_k, mrr_at_k, recall_at_k, recall_at_kilotokens, Metric, Qrels, Run,
};
pub use trec::{read_qrels, read_run, read_vectors, write_qrels, write_run, write_vectors};

/// Passage ids with their `[CLS]` vectors, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCorpus {
    pub ids: Vec<String>,
    pub vectors: Tensor,
}

const ENCODE_BATCH: usize = 64;

/// `[CLS]` vectors of `sentences`, encoded in fixed-size chunks.
pub fn encode_batch(model: &MsmModel, sentences: &[&Sentence]) -> Result<Tensor> {
    let d = model.hidden();
    let mut data = Vec::with_capacity(sentences.len() * d);
    for chunk in sentences.chunks(ENCODE_BATCH) {
        let batch = TokenBatch::from_sentences(chunk, model.config.max_positions)?;
        let mut g = Graph::new(&model.params);
        let v = sentence_vectors(&mut g, &model.config, &batch)?;
        data.extend_from_slice(g.value(v).data());
    }
    Tensor::new(vec![sentences.len(), d], data)
}

pub fn encode_corpus(model: &MsmModel, items: &[(String, Sentence)]) -> Result<EncodedCorpus> {
    let sentences: Vec<&Sentence> = items.iter().map(|(_, s)| s).collect();
    Ok(EncodedCorpus {
        ids: items.iter().map(|(id, _)| id.clone()).collect(),
        vectors: encode_batch(model, &sentences)?,
    })
}

/// Exact top-`k` by dot product for every query row. Equal scores are
/// ordered by passage id.
pub fn search(queries: &Tensor, corpus: &EncodedCorpus, k: usize) -> Result<Vec<Vec<(String, f64)>>> {
    let (nq, d) = queries.require_2d("search")?;
    let (np, dp) = corpus.vectors.require_2d("search")?;
    if d != dp {
        return Err(Error::ShapeMismatch {
            op: "search",
            left: queries.shape().to_vec(),
            right: corpus.vectors.shape().to_vec(),
        });
    }
    if corpus.ids.len() != np {
        return Err(Error::invalid("corpus ids and vectors differ in length"));
    }
    let mut scores = vec![0.0; nq * np];
    gemm(nq, d, np, queries.data(), false, corpus.vectors.data(), true, 0.0, &mut scores);
    let mut out = Vec::with_capacity(nq);
    for q in 0..nq {
        let row = &scores[q * np..(q + 1) * np];
        let mut order: Vec<usize> = (0..np).collect();
        let cmp = |&a: &usize, &b: &usize| -> Ordering {
            row[b]
                .total_cmp(&row[a])
                .then_with(|| corpus.ids[a].cmp(&corpus.ids[b]))
        };
        let k = k.min(np);
        if k < np {
            order.select_nth_unstable_by(k, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        out.push(order.into_iter().map(|i| (corpus.ids[i].clone(), row[i])).collect());
    }
    Ok(out)
}
