use rand::Rng;

use crate::corpus::{Document, Sentence};
use crate::error::Result;
use crate::loss::{msm_graph_loss, AlphaMode, LossConfig, MsmBatch};
use crate::model::{DocSharing, ModelConfig, MsmModel, ProjectionMode};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Graph};
use crate::seed::{named_seed, rng};

const VOCAB: usize = 40;

fn random_docs(r: &mut impl Rng) -> Vec<Document> {
    let mut docs = Vec::new();
    for (lang, count) in [("L0", 3), ("L1", 2)] {
        for i in 0..count {
            let n = r.random_range(2..=4);
            docs.push(Document {
                doc_id: format!("{lang}-{i}"),
                lang: lang.to_string(),
                sentences: (0..n)
                    .map(|_| {
                        let len = r.random_range(2..=5);
                        let ids: Vec<usize> = (0..len).map(|_| r.random_range(5..VOCAB)).collect();
                        Sentence::from_content(&ids)
                    })
                    .collect(),
            });
        }
    }
    docs
}

/// Finite-difference check of the full masked-sentence loss (sentence
/// encoder, document encoder, heads) on a small random model with two
/// sentence and two document layers.
///
/// The numerical side always holds alpha fixed at the values of the
/// analytic pass. With `attach_alpha` the analytic gradient also flows
/// through alpha, which the check is expected to reject.
pub fn msm_gradient_check(dim: usize, attach_alpha: bool, seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig {
        hidden: dim,
        heads: if dim % 2 == 0 { 2 } else { 1 },
        ff_dim: 2 * dim,
        sentence_layers: 2,
        doc_layers: 2,
        projection: ProjectionMode::Asymmetric,
        doc_sharing: DocSharing::ShareAll,
        // Large enough that logits and alpha are far from zero.
        init_std: 0.5,
        ..ModelConfig::new(VOCAB)
    };
    let model = MsmModel::new(config, named_seed(seed, "gradcheck-init"))?;
    let mut r = rng(named_seed(seed, "gradcheck-docs"));
    let docs = random_docs(&mut r);
    let refs: Vec<&Document> = docs.iter().collect();
    let loss = LossConfig::default();
    let batch = MsmBatch::build(&refs, &model.config, loss.cross_negative_cap, &mut r)?;
    let mode = if attach_alpha {
        AlphaMode::Attached
    } else {
        AlphaMode::Detached
    };
    let mut g = Graph::new(&model.params);
    let fwd = msm_graph_loss(&mut g, &model, &batch, &loss, &mode)?;
    let grads = g.backward(fwd.loss)?;
    let frozen = AlphaMode::Frozen(fwd.alphas.clone());
    drop(g);
    grad_check(
        &model.params,
        |p| {
            let m = MsmModel {
                config: model.config.clone(),
                params: p.clone(),
                has_document_encoder: true,
            };
            let mut g = Graph::new(&m.params);
            let f = msm_graph_loss(&mut g, &m, &batch, &loss, &frozen)?;
            Ok(g.value(f.loss).item())
        },
        &grads,
        &GradCheckOptions {
            coords_per_param: 4,
            seed,
            ..GradCheckOptions::default()
        },
    )
}
