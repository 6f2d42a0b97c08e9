mod common;

use common::{oracle, random_docs, small_model};
use msm_core::corpus::{make_mlm_mask, Document};
use msm_core::loss::{
    compute_alpha, msm_graph_loss, msm_loss, mlm_graph_loss, AlphaMode, BiasMode, LossConfig,
    MlmBatch, MsmBatch, NegativePools, NegativeSource, Similarity,
};
use msm_core::model::{
    encode_document, encode_sentence, project, DocSharing, MsmModel, ProjectionMode, Side,
    TokenBatch,
};
use msm_core::numerics::{grad_check, GradCheckOptions, Graph, Tensor};
use msm_core::seed::rng;

const V: usize = 40;

fn mixed_docs(seed: u64) -> Vec<Document> {
    let mut r = rng(seed);
    let mut docs = random_docs(&mut r, V, "L0", 3, (1, 4), (2, 5));
    docs.extend(random_docs(&mut r, V, "L1", 2, (2, 4), (2, 5)));
    docs
}

/// Recomputes the batch loss one instance at a time through the public
/// single-item encoders and the scalar loss.
fn per_instance_loss(model: &MsmModel, docs: &[Document], batch: &MsmBatch, cfg: &LossConfig) -> f64 {
    let sents: Vec<_> = docs.iter().flat_map(|d| d.sentences.iter()).collect();
    let h: Vec<Vec<f64>> = sents.iter().map(|s| encode_sentence(model, s).unwrap()).collect();
    let mut total = 0.0;
    for inst in &batch.instances {
        let bd = &batch.docs[inst.doc];
        let hd = Tensor::from_rows(&h[bd.start..bd.start + bd.len]).unwrap();
        let out = encode_document(model, bd.handle.doc, &hd, Some(inst.position)).unwrap();
        let p = Tensor::row_vector(out.row(inst.position));
        let p = project(model, bd.handle.head, Side::Context, &p).unwrap();
        let hh = project(model, bd.handle.head, Side::Sentence, &Tensor::from_rows(&h).unwrap()).unwrap();
        let rows: Vec<&[f64]> = (0..hh.rows()).map(|r| hh.row(r)).collect();
        let intra = if cfg.negatives == NegativeSource::All {
            (bd.start..bd.start + bd.len)
                .filter(|&r| r != bd.start + inst.position)
                .map(|r| rows[r])
                .collect()
        } else {
            Vec::new()
        };
        let pools = NegativePools {
            intra,
            cross: inst.cross.iter().map(|&r| rows[r]).collect(),
        };
        let a = compute_alpha(p.row(0), &pools, cfg.similarity).unwrap();
        total += msm_loss(p.row(0), rows[bd.start + inst.position], &pools, cfg.effective_mu(), a, cfg.similarity)
            .unwrap();
    }
    total / batch.instances.len() as f64
}

#[test]
fn batched_loss_matches_per_instance_reference() {
    let cases = [
        (DocSharing::ShareAll, ProjectionMode::Asymmetric, Similarity::Dot, NegativeSource::All, BiasMode::Dynamic, 512),
        (DocSharing::SepDoc, ProjectionMode::Shared, Similarity::Cosine, NegativeSource::All, BiasMode::Dynamic, 4),
        (DocSharing::SepDocHead, ProjectionMode::Asymmetric, Similarity::Dot, NegativeSource::CrossOnly, BiasMode::Dynamic, 512),
        (DocSharing::ShareAll, ProjectionMode::None, Similarity::Dot, NegativeSource::All, BiasMode::None, 3),
    ];
    for (i, (sharing, proj, sim, neg, bias, cap)) in cases.into_iter().enumerate() {
        let model = small_model(V, 8, sharing, proj, i as u64);
        let docs = mixed_docs(10 + i as u64);
        let refs: Vec<&Document> = docs.iter().collect();
        let cfg = LossConfig {
            similarity: sim,
            negatives: neg,
            bias,
            cross_negative_cap: cap,
            ..LossConfig::default()
        };
        let batch = MsmBatch::build(&refs, &model.config, cap, &mut rng(3)).unwrap();
        let mut g = Graph::new(&model.params);
        let fwd = msm_graph_loss(&mut g, &model, &batch, &cfg, &AlphaMode::Detached).unwrap();
        let batched = g.value(fwd.loss).item();
        let reference = per_instance_loss(&model, &docs, &batch, &cfg);
        assert!(
            (batched - reference).abs() < 1e-10,
            "case {i}: batched {batched} vs reference {reference}"
        );
    }
}

#[test]
fn detached_attached_and_frozen_agree_on_value() {
    let model = small_model(V, 8, DocSharing::ShareAll, ProjectionMode::Asymmetric, 1);
    let docs = mixed_docs(4);
    let refs: Vec<&Document> = docs.iter().collect();
    let cfg = LossConfig::default();
    let batch = MsmBatch::build(&refs, &model.config, 512, &mut rng(0)).unwrap();
    let value = |mode: &AlphaMode| {
        let mut g = Graph::new(&model.params);
        let f = msm_graph_loss(&mut g, &model, &batch, &cfg, mode).unwrap();
        (g.value(f.loss).item(), f.alphas)
    };
    let (d, alphas) = value(&AlphaMode::Detached);
    let (a, _) = value(&AlphaMode::Attached);
    let (f, _) = value(&AlphaMode::Frozen(alphas.clone()));
    assert!((d - a).abs() < 1e-12);
    assert_eq!(d, f);
    assert!(alphas.iter().any(|a| *a != 0.0));
}

fn end_to_end_check(mode: AlphaMode) -> f64 {
    let model = small_model(V, 8, DocSharing::ShareAll, ProjectionMode::Asymmetric, 2);
    let docs = mixed_docs(5);
    let refs: Vec<&Document> = docs.iter().collect();
    let cfg = LossConfig::default();
    let batch = MsmBatch::build(&refs, &model.config, 512, &mut rng(0)).unwrap();
    let mut g = Graph::new(&model.params);
    let fwd = msm_graph_loss(&mut g, &model, &batch, &cfg, &mode).unwrap();
    let grads = g.backward(fwd.loss).unwrap();
    let frozen = AlphaMode::Frozen(fwd.alphas.clone());
    let config = model.config.clone();
    let report = grad_check(
        &model.params,
        |p| {
            let m = MsmModel {
                config: config.clone(),
                params: p.clone(),
                has_document_encoder: true,
            };
            let mut g = Graph::new(&m.params);
            let f = msm_graph_loss(&mut g, &m, &batch, &cfg, &frozen)?;
            Ok(g.value(f.loss).item())
        },
        &grads,
        &GradCheckOptions {
            coords_per_param: 3,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn gradient_matches_finite_differences_with_frozen_alpha() {
    let err = end_to_end_check(AlphaMode::Detached);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn attached_alpha_gradient_is_detected() {
    let err = end_to_end_check(AlphaMode::Attached);
    assert!(err > 1e-4, "attached alpha went unnoticed ({err})");
}

#[test]
fn sentence_vectors_do_not_leak_across_batch() {
    let model = small_model(V, 8, DocSharing::ShareAll, ProjectionMode::None, 0);
    let docs = mixed_docs(6);
    let a = &docs[0].sentences[0];
    let alone = encode_sentence(&model, a).unwrap();
    let others: Vec<_> = docs.iter().flat_map(|d| d.sentences.iter()).collect();
    let batch = TokenBatch::from_sentences(&others, 66).unwrap();
    let mut g = Graph::new(&model.params);
    let v = msm_core::model::sentence_vectors(&mut g, &model.config, &batch).unwrap();
    let row = g.value(v).row(0);
    for (x, y) in alone.iter().zip(row) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn masked_position_output_ignores_masked_sentence() {
    let model = small_model(V, 8, DocSharing::ShareAll, ProjectionMode::None, 0);
    let mut r = rng(1);
    let h = Tensor::from_rows(&(0..4).map(|_| common::random_vec(&mut r, 8, 1.0)).collect::<Vec<_>>()).unwrap();
    let mut h2 = h.clone();
    h2.row_mut(2).iter_mut().for_each(|v| *v += 3.0);
    let a = encode_document(&model, 0, &h, Some(2)).unwrap();
    let b = encode_document(&model, 0, &h2, Some(2)).unwrap();
    assert_eq!(a, b);
    let c = encode_document(&model, 0, &h2, None).unwrap();
    assert_ne!(a, c);
}

#[test]
fn mlm_loss_is_zero_without_masks_and_positive_with() {
    let model = small_model(V, 8, DocSharing::ShareAll, ProjectionMode::None, 0);
    let docs = mixed_docs(7);
    let s = &docs[0].sentences[0];
    let unmasked = make_mlm_mask(s, 1e-9, V, &mut rng(0)).unwrap();
    assert!(unmasked.mask_positions.is_empty());
    let batch = MlmBatch::new(&[unmasked], 66).unwrap();
    let mut g = Graph::new(&model.params);
    let l = mlm_graph_loss(&mut g, &model, &batch).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let masked = make_mlm_mask(s, 0.9, V, &mut rng(0)).unwrap();
    assert!(!masked.mask_positions.is_empty());
    let batch = MlmBatch::new(&[masked], 66).unwrap();
    let mut g = Graph::new(&model.params);
    let l = mlm_graph_loss(&mut g, &model, &batch).unwrap();
    assert!(g.value(l).item() > 0.0);
}

#[test]
fn scalar_loss_matches_oracle_on_fixed_case() {
    let p = [0.3, -1.2, 0.5];
    let pos = [1.0, 0.0, 0.2];
    let intra = vec![vec![0.1, 0.1, 0.1], vec![-0.4, 2.0, 0.0]];
    let cross = vec![vec![0.0, 0.0, 1.0]];
    let pools = NegativePools {
        intra: intra.iter().map(|v| v.as_slice()).collect(),
        cross: cross.iter().map(|v| v.as_slice()).collect(),
    };
    let a = compute_alpha(&p, &pools, Similarity::Dot).unwrap();
    assert!((a - oracle::alpha(&p, &intra, &cross, false)).abs() < 1e-15);
    let got = msm_loss(&p, &pos, &pools, 0.5, a, Similarity::Dot).unwrap();
    let want = oracle::loss(&p, &pos, &intra, &cross, 0.5, a, false);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn batch_requires_cross_negatives() {
    let model = small_model(V, 8, DocSharing::ShareAll, ProjectionMode::None, 0);
    let docs = mixed_docs(8);
    let one = [&docs[0]];
    assert!(MsmBatch::build(&one, &model.config, 512, &mut rng(0)).is_err());
    let refs: Vec<&Document> = docs.iter().collect();
    let b = MsmBatch::build(&refs, &model.config, 2, &mut rng(0)).unwrap();
    assert!(b.instances.iter().all(|i| i.cross.len() == 2));
    let total: usize = docs.iter().map(|d| d.sentences.len()).sum();
    assert_eq!(b.instances.len(), total);
}
