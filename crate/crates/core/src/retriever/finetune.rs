use rand::seq::index::sample;

use crate::corpus::{RetrievalPair, Sentence, Vocab};
use crate::error::{Error, Result};
use crate::model::{sentence_vectors, MsmModel, TokenBatch};
use crate::numerics::optim::{clip_grad_norm, Adam, AdamConfig, LinearSchedule};
use crate::numerics::{Graph, Tensor};
use crate::seed::{named_seed, rng, sub_seed};

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 30,
            grad_clip: Some(1.0),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedPair {
    pub query: Sentence,
    pub passage_id: String,
    pub passage: Sentence,
}

impl TokenizedPair {
    pub fn new(pair: &RetrievalPair, vocab: &Vocab) -> Self {
        Self {
            query: Sentence::from_text(&pair.query_text, vocab),
            passage_id: pair.passage_id.clone(),
            passage: Sentence::from_text(&pair.passage_text, vocab),
        }
    }
}

/// Trains the shared sentence encoder on (query, passage) pairs with
/// in-batch negatives and dot-product scores. Returns the tuned encoder and
/// the per-step losses.
pub fn finetune_biencoder(
    encoder: &MsmModel,
    pairs: &[TokenizedPair],
    config: &FinetuneConfig,
) -> Result<(MsmModel, Vec<f64>)> {
    if config.batch_size < 2 {
        return Err(Error::invalid(format!(
            "batch size {} leaves no in-batch negatives",
            config.batch_size
        )));
    }
    if pairs.len() < 2 {
        return Err(Error::invalid("need at least two training pairs"));
    }
    let mut model = encoder.export_sentence_encoder();
    let mut adam = Adam::new(config.adam, &model.params);
    let schedule = LinearSchedule {
        peak: config.lr,
        warmup: config.warmup_steps,
        total: config.steps,
    };
    let base = named_seed(config.seed, "finetune");
    let bs = config.batch_size.min(pairs.len());
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut r = rng(sub_seed(base, step as u64));
        let mut idx = sample(&mut r, pairs.len(), bs).into_vec();
        idx.sort_unstable();
        let queries: Vec<&Sentence> = idx.iter().map(|&i| &pairs[i].query).collect();
        let passages: Vec<&Sentence> = idx.iter().map(|&i| &pairs[i].passage).collect();
        let max = model.config.max_positions;
        let (qb, pb) = (
            TokenBatch::from_sentences(&queries, max)?,
            TokenBatch::from_sentences(&passages, max)?,
        );
        // The same passage drawn twice must not be its own negative.
        let mut mask = vec![0.0; bs * bs];
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                if a != b && pairs[i].passage_id == pairs[j].passage_id {
                    mask[a * bs + b] = f64::NEG_INFINITY;
                }
            }
        }
        let (loss, grads) = {
            let mut g = Graph::new(&model.params);
            let q = sentence_vectors(&mut g, &model.config, &qb)?;
            let p = sentence_vectors(&mut g, &model.config, &pb)?;
            let logits = g.matmul_t(q, p)?;
            let m = g.input(Tensor::new(vec![bs, bs], mask)?);
            let logits = g.add(logits, m)?;
            let targets: Vec<usize> = (0..bs).collect();
            let l = g.cross_entropy(logits, &targets)?;
            (g.value(l).item(), g.backward(l)?)
        };
        model.params.zero_grads();
        model.params.accumulate(&grads);
        if let Some(c) = config.grad_clip {
            clip_grad_norm(&mut model.params, c);
        }
        adam.step(&mut model.params, schedule.lr(step))?;
        losses.push(loss);
    }
    Ok((model, losses))
}
