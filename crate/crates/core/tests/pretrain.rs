use msm_core::corpus::{
    build_vocab, generate_synthetic_corpus, segment_all, Document, SyntheticCorpusSpec,
};
use msm_core::model::{encode_sentence, DocSharing, ModelConfig};
use msm_core::numerics::checkpoint::read_manifest;
use msm_core::pretrain::{
    format_log_line, load_checkpoint, pretrain, read_loss_log, save_checkpoint, save_export,
    PretrainConfig, Pretrainer, LOG_HEADER,
};

fn corpus(num_docs: usize) -> (Vec<Document>, usize) {
    corpus_with(num_docs, 60, 6, 12)
}

fn corpus_with(num_docs: usize, latent_vocab_size: usize, num_topics: usize, topic_support: usize) -> (Vec<Document>, usize) {
    let spec = SyntheticCorpusSpec {
        num_docs,
        latent_vocab_size,
        num_topics,
        topic_support,
        sentences_per_doc: (3, 5),
        tokens_per_sentence: (4, 6),
        ..SyntheticCorpusSpec::default()
    };
    let c = generate_synthetic_corpus(&spec).unwrap();
    let texts: Vec<&str> = c.documents.iter().map(|d| d.text.as_str()).collect();
    let vocab = build_vocab(&texts, 1000).unwrap();
    (segment_all(&c.documents, &vocab).unwrap(), vocab.len())
}

fn config(vocab: usize, sharing: DocSharing, steps: usize) -> PretrainConfig {
    let model = ModelConfig {
        hidden: 16,
        heads: 2,
        ff_dim: 32,
        doc_sharing: sharing,
        ..ModelConfig::new(vocab)
    };
    PretrainConfig {
        total_steps: steps,
        warmup_steps: 5,
        batch_docs: 6,
        lr: 3e-3,
        seed: 11,
        ..PretrainConfig::new(model)
    }
}

#[test]
fn training_reduces_both_losses() {
    let (docs, v) = corpus_with(60, 240, 40, 6);
    let mut c = config(v, DocSharing::ShareAll, 120);
    c.model.init_std = 0.1;
    let (_, log) = pretrain(c, &docs).unwrap();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let first_msm: Vec<f64> = log[..10].iter().map(|l| l.msm).collect();
    let last_msm: Vec<f64> = log[110..].iter().map(|l| l.msm).collect();
    let first_mlm: Vec<f64> = log[..10].iter().map(|l| l.mlm).collect();
    let last_mlm: Vec<f64> = log[110..].iter().map(|l| l.mlm).collect();
    assert!(mean(&last_msm) < mean(&first_msm) - 0.2, "{first_msm:?} -> {last_msm:?}");
    assert!(mean(&last_mlm) < mean(&first_mlm) - 0.2, "{first_mlm:?} -> {last_mlm:?}");
    assert!(log.iter().all(|l| (l.total - l.msm - l.mlm).abs() < 1e-12));
}

#[test]
fn mlm_only_logs_no_msm_value() {
    let (docs, v) = corpus(20);
    let mut c = config(v, DocSharing::ShareAll, 3);
    c.loss.msm_weight = 0.0;
    let (_, log) = pretrain(c, &docs).unwrap();
    assert!(log.iter().all(|l| l.msm.is_nan() && l.total == l.mlm));
}

#[test]
fn resumed_run_is_bit_identical() {
    let (docs, v) = corpus(30);
    let cfg = config(v, DocSharing::SepDocHead, 12);
    let (straight, log) = pretrain(cfg.clone(), &docs).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Pretrainer::new(cfg.clone(), &docs).unwrap();
    let mut resumed_log = Vec::new();
    first
        .run_until(5, |_, _, l| {
            resumed_log.push(*l);
            Ok(())
        })
        .unwrap();
    save_checkpoint(dir.path(), &first.checkpoint()).unwrap();
    drop(first);
    let mut second = Pretrainer::resume(cfg, &docs, load_checkpoint(dir.path()).unwrap()).unwrap();
    assert_eq!(second.step, 5);
    second
        .run_until(usize::MAX, |_, _, l| {
            resumed_log.push(*l);
            Ok(())
        })
        .unwrap();
    assert!(second.model.params.bit_eq(&straight.params));
    let lines = |l: &[msm_core::loss::LossBreakdown]| -> Vec<String> {
        l.iter().enumerate().map(|(i, x)| format_log_line(i, x)).collect()
    };
    assert_eq!(lines(&log), lines(&resumed_log));
}

#[test]
fn checkpoint_round_trip_and_export() {
    let (docs, v) = corpus(20);
    let mut t = Pretrainer::new(config(v, DocSharing::SepDoc, 3), &docs).unwrap();
    t.run_until(3, |_, _, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &t.checkpoint()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert!(back.model.params.bit_eq(&t.model.params));
    let s = &docs[0].sentences[0];
    let a = encode_sentence(&t.model, s).unwrap();
    let b = encode_sentence(&back.model, s).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.meta["d"], 16);
    assert_eq!(manifest.meta["sharing_mode"], "sep_doc");
    assert_eq!(manifest.meta["has_document_encoder"], true);

    let ex = tempfile::tempdir().unwrap();
    save_export(ex.path(), &t.model, 3).unwrap();
    let manifest = read_manifest(ex.path()).unwrap();
    assert_eq!(manifest.meta["has_document_encoder"], false);
    assert!(manifest.arrays.iter().all(|a| a.name.starts_with("sent.")));
    let exported = load_checkpoint(ex.path()).unwrap();
    assert!(exported.adam.is_none());
    let c = encode_sentence(&exported.model, s).unwrap();
    assert!(a.iter().zip(&c).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn loss_log_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.tsv");
    let l = msm_core::loss::LossBreakdown {
        msm: 1.25,
        mlm: f64::NAN,
        total: 0.1 + 0.2,
        alpha_mean: -3e-7,
    };
    std::fs::write(&path, format!("{LOG_HEADER}\n{}\n", format_log_line(7, &l))).unwrap();
    let back = read_loss_log(&path).unwrap();
    assert_eq!(back[0].0, 7);
    assert_eq!(back[0].1.total, 0.1 + 0.2);
    assert!(back[0].1.mlm.is_nan());
}
