use crate::corpus::{MlmMaskedBatch, Sentence};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamStore, Segment, Tensor};

use super::{doc_prefix, ModelConfig, MsmModel};

/// Token sequences flattened into one row block, one segment per sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl TokenBatch {
    pub fn new<S: AsRef<[usize]>>(sequences: &[S], max_positions: usize) -> Result<Self> {
        let mut batch = Self::default();
        for seq in sequences {
            let seq = seq.as_ref();
            if seq.is_empty() || seq.len() > max_positions {
                return Err(Error::invalid(format!(
                    "sequence length {} outside 1..={max_positions}",
                    seq.len()
                )));
            }
            batch.segments.push(Segment {
                start: batch.ids.len(),
                len: seq.len(),
            });
            batch.ids.extend_from_slice(seq);
            batch.positions.extend(0..seq.len());
        }
        Ok(batch)
    }

    pub fn from_sentences(sentences: &[&Sentence], max_positions: usize) -> Result<Self> {
        let seqs: Vec<&[usize]> = sentences.iter().map(|s| s.token_ids()).collect();
        Self::new(&seqs, max_positions)
    }

    pub fn num_sequences(&self) -> usize {
        self.segments.len()
    }

    /// Row of each sequence's first token.
    pub fn cls_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.start).collect()
    }
}

fn linear(g: &mut Graph, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
    let (w, b) = (g.param_named(w)?, g.param_named(b)?);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn layer_norm(g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gain = g.param_named(&format!("{prefix}g"))?;
    let bias = g.param_named(&format!("{prefix}b"))?;
    g.layer_norm(x, gain, bias)
}

/// Post-LN transformer layer over independent row segments.
fn encoder_layer(
    g: &mut Graph,
    prefix: &str,
    x: NodeId,
    segments: &[Segment],
    heads: usize,
) -> Result<NodeId> {
    let p = |s: &str| format!("{prefix}{s}");
    let q = linear(g, x, &p("wq"), &p("bq"))?;
    let k = linear(g, x, &p("wk"), &p("bk"))?;
    let v = linear(g, x, &p("wv"), &p("bv"))?;
    let a = g.attention(q, k, v, segments, heads)?;
    let o = linear(g, a, &p("wo"), &p("bo"))?;
    let r = g.add(x, o)?;
    let x1 = layer_norm(g, r, &p("ln1."))?;
    let f = linear(g, x1, &p("w1"), &p("b1"))?;
    let f = g.gelu(f);
    let f = linear(g, f, &p("w2"), &p("b2"))?;
    let r = g.add(x1, f)?;
    layer_norm(g, r, &p("ln2."))
}

fn stack(
    g: &mut Graph,
    prefix: &str,
    mut x: NodeId,
    segments: &[Segment],
    layers: usize,
    heads: usize,
) -> Result<NodeId> {
    for l in 0..layers {
        x = encoder_layer(g, &format!("{prefix}layer{l}."), x, segments, heads)?;
    }
    Ok(x)
}

/// Final-layer states of every token in the batch.
pub fn encode_sequences(g: &mut Graph, config: &ModelConfig, batch: &TokenBatch) -> Result<NodeId> {
    let tok = g.param_named("sent.tok_emb")?;
    let pos = g.param_named("sent.pos_emb")?;
    let t = g.embedding(tok, &batch.ids)?;
    let p = g.embedding(pos, &batch.positions)?;
    let x = g.add(t, p)?;
    let x = layer_norm(g, x, "sent.emb_ln.")?;
    stack(g, "sent.", x, &batch.segments, config.sentence_layers, config.heads)
}

/// `[CLS]` vectors, one row per sequence.
pub fn sentence_vectors(g: &mut Graph, config: &ModelConfig, batch: &TokenBatch) -> Result<NodeId> {
    let states = encode_sequences(g, config, batch)?;
    g.gather_rows(states, &batch.cls_rows())
}

/// One document-encoder input: rows of the sentence-vector matrix in
/// document order, with at most one position replaced by the mask vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocInstance {
    pub rows: Vec<usize>,
    pub mask: Option<usize>,
}

/// Runs document encoder `doc` over every instance. Returns the output rows
/// (instances stacked in order) and each instance's segment.
pub fn document_context(
    g: &mut Graph,
    config: &ModelConfig,
    doc: usize,
    h: NodeId,
    instances: &[DocInstance],
) -> Result<(NodeId, Vec<Segment>)> {
    let pre = doc_prefix(doc);
    let n_h = g.value(h).rows();
    let mask_vec = g.param_named(&format!("{pre}mask_vec"))?;
    let source = g.concat_rows(&[h, mask_vec])?;
    let (mut ids, mut positions, mut segments) = (Vec::new(), Vec::new(), Vec::new());
    for inst in instances {
        if inst.rows.is_empty() {
            return Err(Error::EmptyDocument);
        }
        if inst.rows.len() > config.max_sentences {
            return Err(Error::invalid(format!(
                "document of {} sentences exceeds {}",
                inst.rows.len(),
                config.max_sentences
            )));
        }
        if let Some(t) = inst.mask {
            if t >= inst.rows.len() {
                return Err(Error::OutOfRange {
                    what: "mask position",
                    index: t,
                    len: inst.rows.len(),
                });
            }
        }
        segments.push(Segment {
            start: ids.len(),
            len: inst.rows.len(),
        });
        for (i, &r) in inst.rows.iter().enumerate() {
            ids.push(if inst.mask == Some(i) { n_h } else { r });
            positions.push(i);
        }
    }
    let x = g.gather_rows(source, &ids)?;
    let pos_table = g.param_named(&format!("{pre}pos_emb"))?;
    let p = g.embedding(pos_table, &positions)?;
    let x = g.add(x, p)?;
    let x = layer_norm(g, x, &format!("{pre}in_ln."))?;
    let out = stack(g, &pre, x, &segments, config.doc_layers, config.heads)?;
    Ok((out, segments))
}

/// Vocabulary logits at `rows` of `states` through the tied embedding.
pub fn mlm_logits(g: &mut Graph, states: NodeId, rows: &[usize]) -> Result<NodeId> {
    let x = g.gather_rows(states, rows)?;
    let tok = g.param_named("sent.tok_emb")?;
    let bias = g.param_named("mlm.bias")?;
    let logits = g.matmul_t(x, tok)?;
    g.add_row(logits, bias)
}

fn require_sentence_encoder(params: &ParamStore) -> Result<()> {
    if !params.contains("sent.tok_emb") {
        return Err(Error::Checkpoint("model has no sentence encoder".into()));
    }
    Ok(())
}

/// `[CLS]` vector of a single sentence.
pub fn encode_sentence(model: &MsmModel, sentence: &Sentence) -> Result<Vec<f64>> {
    require_sentence_encoder(&model.params)?;
    let batch = TokenBatch::from_sentences(&[sentence], model.config.max_positions)?;
    let mut g = Graph::new(&model.params);
    let v = sentence_vectors(&mut g, &model.config, &batch)?;
    Ok(g.value(v).row(0).to_vec())
}

/// Document-encoder outputs for the sentence-vector matrix `h` (`N x d`),
/// optionally with position `mask` replaced by the mask vector.
pub fn encode_document(
    model: &MsmModel,
    doc: usize,
    h: &Tensor,
    mask: Option<usize>,
) -> Result<Tensor> {
    if !model.has_document_encoder {
        return Err(Error::Checkpoint("model has no document encoder".into()));
    }
    let mut g = Graph::new(&model.params);
    let hn = g.input(h.clone());
    let inst = DocInstance {
        rows: (0..h.rows()).collect(),
        mask,
    };
    let (out, _) = document_context(&mut g, &model.config, doc, hn, &[inst])?;
    Ok(g.value(out).clone())
}

/// Vocabulary logits at each masked position, one row per position.
pub fn mlm_forward(model: &MsmModel, batch: &MlmMaskedBatch) -> Result<Tensor> {
    require_sentence_encoder(&model.params)?;
    if !model.params.contains("mlm.bias") {
        return Err(Error::Checkpoint("model has no MLM head".into()));
    }
    let tb = TokenBatch::new(&[&batch.input_ids], model.config.max_positions)?;
    let mut g = Graph::new(&model.params);
    let states = encode_sequences(&mut g, &model.config, &tb)?;
    let logits = mlm_logits(&mut g, states, &batch.mask_positions)?;
    Ok(g.value(logits).clone())
}
