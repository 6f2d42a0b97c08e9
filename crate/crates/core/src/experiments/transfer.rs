use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::config::RunConfig;
use crate::corpus::{
    build_vocab, generate_synthetic_corpus, make_retrieval_pairs, segment_all, Document,
    PairOptions, RawDocument, RetrievalPair, Sentence, SyntheticCorpus, Vocab,
};
use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::model::MsmModel;
use crate::pretrain::{PretrainConfig, Pretrainer};
use crate::retriever::{
    encode_batch, encode_corpus, evaluate, finetune_biencoder, search, Metric, Qrels, Run,
    TokenizedPair,
};
use crate::seed::{named_seed, rng, sub_seed};

/// Queries, passages and judgements for one language.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub lang: String,
    pub pairs: Vec<RetrievalPair>,
    pub queries: Vec<(String, Sentence)>,
    pub passages: Vec<(String, Sentence)>,
    pub qrels: Qrels,
    /// Whitespace token count of each passage.
    pub lengths: HashMap<String, usize>,
}

/// Everything a transfer run needs that does not depend on the model.
#[derive(Clone, Debug)]
pub struct TransferData {
    pub corpus: SyntheticCorpus,
    pub vocab: Vocab,
    pub train_raw: Vec<RawDocument>,
    pub test_raw: Vec<RawDocument>,
    /// Pretraining documents: every language, training split only.
    pub train_docs: Vec<Document>,
    pub ft_raw_pairs: Vec<RetrievalPair>,
    /// Fine-tuning pairs in the fine-tuning language.
    pub ft_pairs: Vec<TokenizedPair>,
    pub eval: Vec<EvalSet>,
}

/// Held-out latent ids; fixed by the corpus seed so every setting and run
/// seed sees the same split.
pub fn is_test_latent(corpus_seed: u64, latent_id: usize, fraction: f64) -> bool {
    let mut r = rng(sub_seed(named_seed(corpus_seed, "split"), latent_id as u64));
    r.random::<f64>() < fraction
}

pub fn eval_set(docs: &[RawDocument], lang: &str, opts: &PairOptions, vocab: &Vocab) -> Result<EvalSet> {
    let pairs = make_retrieval_pairs(docs, lang, opts)?;
    if pairs.is_empty() {
        return Err(Error::invalid(format!("no evaluation pairs for `{lang}`")));
    }
    let mut set = EvalSet {
        lang: lang.to_string(),
        pairs: pairs.clone(),
        queries: Vec::new(),
        passages: Vec::new(),
        qrels: Qrels::new(),
        lengths: HashMap::new(),
    };
    for p in &pairs {
        set.queries.push((p.query_id.clone(), Sentence::from_text(&p.query_text, vocab)));
        set.passages.push((p.passage_id.clone(), Sentence::from_text(&p.passage_text, vocab)));
        set.lengths.insert(p.passage_id.clone(), p.passage_text.split_whitespace().count());
        set.qrels.entry(p.query_id.clone()).or_default().insert(p.passage_id.clone());
    }
    Ok(set)
}

pub fn prepare_transfer(cfg: &RunConfig) -> Result<TransferData> {
    if !(0.0 < cfg.test_fraction && cfg.test_fraction < 1.0) {
        return Err(Error::invalid(format!("test_fraction {} outside (0, 1)", cfg.test_fraction)));
    }
    let corpus = generate_synthetic_corpus(&cfg.corpus_spec())?;
    let texts: Vec<&str> = corpus.documents.iter().map(|d| d.text.as_str()).collect();
    let vocab = build_vocab(&texts, cfg.vocab_size)?;
    let is_test = |doc: &RawDocument| -> bool {
        let row = corpus.alignment.iter().find(|a| a.doc_id == doc.doc_id);
        row.is_some_and(|a| is_test_latent(cfg.corpus_seed, a.latent_id, cfg.test_fraction))
    };
    let (test_raw, train_raw): (Vec<RawDocument>, Vec<RawDocument>) =
        corpus.documents.iter().cloned().partition(|d| is_test(d));
    let train_docs = segment_all(&train_raw, &vocab)?;
    let ft_raw_pairs = make_retrieval_pairs(&train_raw, &cfg.ft_lang, &cfg.pair_options())?;
    let ft_pairs: Vec<TokenizedPair> = ft_raw_pairs.iter().map(|p| TokenizedPair::new(p, &vocab)).collect();
    if ft_pairs.is_empty() {
        return Err(Error::invalid(format!("no fine-tuning pairs for `{}`", cfg.ft_lang)));
    }
    let eval_opts = PairOptions {
        pairs_per_doc: cfg.eval_pairs_per_doc,
        seed: named_seed(cfg.corpus_seed, "eval"),
        ..cfg.pair_options()
    };
    let eval = corpus
        .languages()
        .iter()
        .map(|l| eval_set(&test_raw, l, &eval_opts, &vocab))
        .collect::<Result<_>>()?;
    Ok(TransferData {
        corpus,
        vocab,
        train_raw,
        test_raw,
        train_docs,
        ft_raw_pairs,
        ft_pairs,
        eval,
    })
}

/// Retrieval run of `model` over one evaluation set.
pub fn retrieve(model: &MsmModel, set: &EvalSet, k: usize) -> Result<Run> {
    let corpus = encode_corpus(model, &set.passages)?;
    let qs: Vec<&Sentence> = set.queries.iter().map(|(_, s)| s).collect();
    let q = encode_batch(model, &qs)?;
    let hits = search(&q, &corpus, k)?;
    Ok(set
        .queries
        .iter()
        .map(|(id, _)| id.clone())
        .zip(hits)
        .collect())
}

pub fn default_metrics(eval_k: usize) -> Vec<Metric> {
    vec![
        Metric::Mrr(eval_k),
        Metric::Recall(100),
        Metric::Map(20),
        Metric::KiloTokenRecall(2000),
    ]
}

/// Metric values per language.
pub type LangMetrics = BTreeMap<String, Vec<(Metric, f64)>>;

pub fn evaluate_model(model: &MsmModel, data: &TransferData, metrics: &[Metric]) -> Result<LangMetrics> {
    let depth = metrics
        .iter()
        .map(|m| match m {
            Metric::Mrr(k) | Metric::Recall(k) | Metric::Map(k) => *k,
            Metric::KiloTokenRecall(_) => usize::MAX,
        })
        .max()
        .unwrap_or(10);
    let mut out = LangMetrics::new();
    for set in &data.eval {
        let run = retrieve(model, set, depth)?;
        out.insert(set.lang.clone(), evaluate(&run, &set.qrels, metrics, Some(&set.lengths))?);
    }
    Ok(out)
}

pub struct TransferOutcome {
    pub pretrain_log: Vec<LossBreakdown>,
    pub ft_losses: Vec<f64>,
    pub pretrained: MsmModel,
    pub finetuned: MsmModel,
    pub metrics: LangMetrics,
}

/// Pretrains from scratch, fine-tunes on the fine-tuning language and
/// evaluates every language.
pub fn run_transfer(cfg: &RunConfig, data: &TransferData) -> Result<TransferOutcome> {
    let pcfg: PretrainConfig = cfg.pretrain_config(data.vocab.len());
    let mut trainer = Pretrainer::new(pcfg, &data.train_docs)?;
    let mut pretrain_log = Vec::new();
    trainer.run_until(usize::MAX, |_, _, l| {
        pretrain_log.push(*l);
        Ok(())
    })?;
    finish_transfer(cfg, data, trainer.model, pretrain_log)
}

/// Fine-tunes and evaluates an already pretrained model.
pub fn finish_transfer(
    cfg: &RunConfig,
    data: &TransferData,
    pretrained: MsmModel,
    pretrain_log: Vec<LossBreakdown>,
) -> Result<TransferOutcome> {
    let (finetuned, ft_losses) = finetune_biencoder(&pretrained, &data.ft_pairs, &cfg.finetune_config())?;
    let metrics = evaluate_model(&finetuned, data, &default_metrics(cfg.eval_k))?;
    Ok(TransferOutcome {
        pretrain_log,
        ft_losses,
        pretrained,
        finetuned,
        metrics,
    })
}

/// Headline MRR for `lang`.
pub fn headline(metrics: &LangMetrics, lang: &str) -> Option<f64> {
    metrics
        .get(lang)?
        .iter()
        .find(|(m, _)| matches!(m, Metric::Mrr(_)))
        .map(|(_, v)| *v)
}
