use std::collections::BTreeMap;

use rand::Rng;

use crate::corpus::{Document, MlmMaskedBatch};
use crate::error::{Error, Result};
use crate::model::{
    document_context, mlm_logits, project_node, select_doc_encoder, sentence_vectors, DocInstance,
    EncoderHandle, ModelConfig, MsmModel, Side, TokenBatch,
};
use crate::numerics::{Graph, NodeId, Tensor};

use super::{LossConfig, NegativeSource, Similarity};

/// A document's sentences as a contiguous row range of the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchDoc {
    pub start: usize,
    pub len: usize,
    pub handle: EncoderHandle,
}

impl BatchDoc {
    fn contains(&self, row: usize) -> bool {
        (self.start..self.start + self.len).contains(&row)
    }
}

/// One masked sentence: document index, position within it, and the sampled
/// cross-document negative rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskInstance {
    pub doc: usize,
    pub position: usize,
    pub cross: Vec<usize>,
}

/// Every sentence of every document in the batch is masked once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MsmBatch {
    pub sentences: TokenBatch,
    pub docs: Vec<BatchDoc>,
    pub instances: Vec<MaskInstance>,
}

impl MsmBatch {
    pub fn build(
        docs: &[&Document],
        config: &ModelConfig,
        cap: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seqs: Vec<&[usize]> = Vec::new();
        let mut bdocs = Vec::with_capacity(docs.len());
        for d in docs {
            if d.sentences.is_empty() {
                return Err(Error::EmptyDocument);
            }
            bdocs.push(BatchDoc {
                start: seqs.len(),
                len: d.sentences.len(),
                handle: select_doc_encoder(config, &d.lang)?,
            });
            seqs.extend(d.sentences.iter().map(|s| s.token_ids()));
        }
        let sentences = TokenBatch::new(&seqs, config.max_positions)?;
        let total = seqs.len();
        let mut instances = Vec::new();
        for (di, bd) in bdocs.iter().enumerate() {
            let outside = total - bd.len;
            if outside == 0 {
                return Err(Error::NoCrossNegatives);
            }
            for t in 0..bd.len {
                let map = |i: usize| if i < bd.start { i } else { i + bd.len };
                let cross: Vec<usize> = if outside <= cap {
                    (0..outside).map(map).collect()
                } else {
                    let mut picked: Vec<usize> = rand::seq::index::sample(rng, outside, cap)
                        .into_iter()
                        .map(map)
                        .collect();
                    picked.sort_unstable();
                    picked
                };
                instances.push(MaskInstance {
                    doc: di,
                    position: t,
                    cross,
                });
            }
        }
        Ok(Self {
            sentences,
            docs: bdocs,
            instances,
        })
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.num_sequences()
    }
}

/// Treatment of the dynamic bias inside the graph.
#[derive(Clone, Debug, PartialEq)]
pub enum AlphaMode {
    /// Computed from the current logits, no gradient through it.
    Detached,
    /// Computed from the current logits with gradient flowing through it.
    /// Wrong on purpose; used to show the gradient check catches it.
    Attached,
    /// Fixed per-instance values, in instance order.
    Frozen(Vec<f64>),
}

pub struct MsmForward {
    pub loss: NodeId,
    /// Per-instance alpha, in instance order.
    pub alphas: Vec<f64>,
}

impl MsmForward {
    pub fn alpha_mean(&self) -> f64 {
        if self.alphas.is_empty() {
            0.0
        } else {
            self.alphas.iter().sum::<f64>() / self.alphas.len() as f64
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Column {
    Positive,
    Intra,
    Cross,
    Excluded,
}

fn columns(batch: &MsmBatch, inst: &MaskInstance, negatives: NegativeSource) -> Vec<Column> {
    let doc = &batch.docs[inst.doc];
    let mut cols = vec![Column::Excluded; batch.num_sentences()];
    for r in doc.start..doc.start + doc.len {
        cols[r] = if r == doc.start + inst.position {
            Column::Positive
        } else if negatives == NegativeSource::All {
            Column::Intra
        } else {
            Column::Excluded
        };
    }
    for &r in &inst.cross {
        debug_assert!(!doc.contains(r));
        cols[r] = Column::Cross;
    }
    cols
}

fn alpha_from_row(row: &[f64], cols: &[Column]) -> Result<f64> {
    let (mut si, mut ni, mut sc, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for (v, c) in row.iter().zip(cols) {
        match c {
            Column::Intra => {
                si += v;
                ni += 1;
            }
            Column::Cross => {
                sc += v;
                nc += 1;
            }
            _ => {}
        }
    }
    if nc == 0 {
        return Err(Error::NoCrossNegatives);
    }
    Ok(if ni == 0 {
        0.0
    } else {
        si / ni as f64 - sc / nc as f64
    })
}

/// Mean masked-sentence loss over every instance of the batch.
pub fn msm_graph_loss(
    g: &mut Graph,
    model: &MsmModel,
    batch: &MsmBatch,
    loss: &LossConfig,
    alpha: &AlphaMode,
) -> Result<MsmForward> {
    if !model.has_document_encoder {
        return Err(Error::Checkpoint("model has no document encoder".into()));
    }
    if let AlphaMode::Frozen(a) = alpha {
        if a.len() != batch.instances.len() {
            return Err(Error::invalid(format!(
                "{} frozen alphas for {} instances",
                a.len(),
                batch.instances.len()
            )));
        }
    }
    let cfg = &model.config;
    let mu = loss.effective_mu();
    let s = batch.num_sentences();
    let h = sentence_vectors(g, cfg, &batch.sentences)?;

    let mut groups: BTreeMap<EncoderHandle, Vec<usize>> = BTreeMap::new();
    for (i, inst) in batch.instances.iter().enumerate() {
        groups
            .entry(batch.docs[inst.doc].handle)
            .or_default()
            .push(i);
    }

    let mut projected_h: BTreeMap<usize, NodeId> = BTreeMap::new();
    let mut parts = Vec::new();
    let mut targets = Vec::with_capacity(batch.instances.len());
    let mut alphas = vec![0.0; batch.instances.len()];
    for (handle, members) in &groups {
        let dis: Vec<DocInstance> = members
            .iter()
            .map(|&i| {
                let inst = &batch.instances[i];
                let d = &batch.docs[inst.doc];
                DocInstance {
                    rows: (d.start..d.start + d.len).collect(),
                    mask: Some(inst.position),
                }
            })
            .collect();
        let (out, segs) = document_context(g, cfg, handle.doc, h, &dis)?;
        let picks: Vec<usize> = members
            .iter()
            .zip(&segs)
            .map(|(&i, seg)| seg.start + batch.instances[i].position)
            .collect();
        let p = g.gather_rows(out, &picks)?;
        let mut pp = project_node(g, model, handle.head, Side::Context, p)?;
        let mut hh = match projected_h.get(&handle.head) {
            Some(&n) => n,
            None => {
                let n = project_node(g, model, handle.head, Side::Sentence, h)?;
                projected_h.insert(handle.head, n);
                n
            }
        };
        if loss.similarity == Similarity::Cosine {
            pp = g.normalize_rows(pp)?;
            hh = g.normalize_rows(hh)?;
        }
        let logits = g.matmul_t(pp, hh)?;

        let n = members.len();
        let cols: Vec<Vec<Column>> = members
            .iter()
            .map(|&i| columns(batch, &batch.instances[i], loss.negatives))
            .collect();
        let mut bias = vec![0.0; n * s];
        let mut intra_ind = vec![0.0; n * s];
        let mut weights = vec![0.0; n * s];
        for (r, &i) in members.iter().enumerate() {
            let a = match alpha {
                AlphaMode::Frozen(v) => v[i],
                _ => alpha_from_row(g.value(logits).row(r), &cols[r])?,
            };
            alphas[i] = a;
            let ni = cols[r].iter().filter(|c| **c == Column::Intra).count();
            let nc = cols[r].iter().filter(|c| **c == Column::Cross).count();
            for (j, c) in cols[r].iter().enumerate() {
                let k = r * s + j;
                match c {
                    Column::Positive => targets.push(j),
                    Column::Intra => {
                        intra_ind[k] = -mu;
                        weights[k] = 1.0 / ni as f64;
                        if *alpha != AlphaMode::Attached {
                            bias[k] = -mu * a;
                        }
                    }
                    Column::Cross => weights[k] = -1.0 / nc as f64,
                    Column::Excluded => bias[k] = f64::NEG_INFINITY,
                }
            }
        }
        let bias = g.input(Tensor::new(vec![n, s], bias)?);
        let mut shifted = g.add(logits, bias)?;
        if *alpha == AlphaMode::Attached {
            let w = g.input(Tensor::new(vec![n, s], weights)?);
            let weighted = g.mul(logits, w)?;
            let a = g.row_sum(weighted)?;
            let ind = g.input(Tensor::new(vec![n, s], intra_ind)?);
            let term = g.mul_col(ind, a)?;
            shifted = g.add(shifted, term)?;
        }
        parts.push(shifted);
    }
    let all = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)?
    };
    let loss = g.cross_entropy(all, &targets)?;
    Ok(MsmForward { loss, alphas })
}

/// Masked sequences flattened for one sentence-encoder pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmBatch {
    pub sequences: TokenBatch,
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
}

impl MlmBatch {
    pub fn new(masked: &[MlmMaskedBatch], max_positions: usize) -> Result<Self> {
        let seqs: Vec<&[usize]> = masked.iter().map(|m| m.input_ids.as_slice()).collect();
        let sequences = TokenBatch::new(&seqs, max_positions)?;
        let (mut rows, mut targets) = (Vec::new(), Vec::new());
        for (m, seg) in masked.iter().zip(&sequences.segments) {
            rows.extend(m.mask_positions.iter().map(|p| seg.start + p));
            targets.extend_from_slice(&m.target_ids);
        }
        Ok(Self {
            sequences,
            rows,
            targets,
        })
    }
}

/// Mean token cross-entropy over masked positions; zero when none are masked.
pub fn mlm_graph_loss(g: &mut Graph, model: &MsmModel, batch: &MlmBatch) -> Result<NodeId> {
    if batch.rows.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let states = crate::model::encode_sequences(g, &model.config, &batch.sequences)?;
    let logits = mlm_logits(g, states, &batch.rows)?;
    g.cross_entropy(logits, &batch.targets)
}
