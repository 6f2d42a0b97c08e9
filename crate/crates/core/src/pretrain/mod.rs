//! Joint masked-sentence / masked-token pretraining.

mod checkpoint;
mod log;

use rand::seq::index::sample;

use crate::corpus::{make_mlm_mask, Document};
use crate::error::{Error, Result};
use crate::loss::{
    mlm_graph_loss, msm_graph_loss, AlphaMode, LossBreakdown, LossConfig, MlmBatch, MsmBatch,
};
use crate::model::{ModelConfig, MsmModel};
use crate::numerics::optim::{clip_grad_norm, Adam, AdamConfig, LinearSchedule};
use crate::numerics::Graph;
use crate::seed::{named_seed, rng, sub_seed};

pub use checkpoint::{load_checkpoint, save_checkpoint, save_export, Checkpoint, CheckpointKind};
pub use log::{format_log_line, read_loss_log, LOG_HEADER};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Documents per step; every sentence of each is masked once.
    pub batch_docs: usize,
    pub mlm_rate: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            lr: 1e-3,
            warmup_steps: 100,
            total_steps: 2000,
            batch_docs: 16,
            mlm_rate: 0.15,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_docs < 2 {
            return Err(Error::invalid("batch_docs must be at least 2"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0 < self.mlm_rate && self.mlm_rate < 1.0) {
            return Err(Error::invalid(format!("mlm_rate {} outside (0, 1)", self.mlm_rate)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LinearSchedule {
        LinearSchedule {
            peak: self.lr,
            warmup: self.warmup_steps,
            total: self.total_steps,
        }
    }
}

/// Inputs for one optimisation step.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub doc_indices: Vec<usize>,
    pub msm: MsmBatch,
    pub mlm: MlmBatch,
}

/// The batch for `step` depends only on the seed and step index, so a
/// resumed run sees the same batches as an uninterrupted one.
pub fn build_batch(docs: &[Document], config: &PretrainConfig, step: usize) -> Result<PretrainBatch> {
    if docs.len() < 2 {
        return Err(Error::NoCrossNegatives);
    }
    let mut r = rng(sub_seed(named_seed(config.seed, "batch"), step as u64));
    let mut doc_indices = sample(&mut r, docs.len(), config.batch_docs.min(docs.len())).into_vec();
    doc_indices.sort_unstable();
    let picked: Vec<&Document> = doc_indices.iter().map(|&i| &docs[i]).collect();
    let msm = MsmBatch::build(&picked, &config.model, config.loss.cross_negative_cap, &mut r)?;
    let mut masked = Vec::new();
    for d in &picked {
        for s in &d.sentences {
            masked.push(make_mlm_mask(s, config.mlm_rate, config.model.vocab_size, &mut r)?);
        }
    }
    let mlm = MlmBatch::new(&masked, config.model.max_positions)?;
    Ok(PretrainBatch {
        doc_indices,
        msm,
        mlm,
    })
}

/// Forward and backward for one batch. Returns the loss values and leaves
/// the gradients accumulated in `model.params`.
pub fn compute_gradients(
    model: &mut MsmModel,
    batch: &PretrainBatch,
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    let (breakdown, grads) = {
        let mut g = Graph::new(&model.params);
        let mut out = LossBreakdown {
            msm: f64::NAN,
            ..LossBreakdown::default()
        };
        let mut terms = Vec::new();
        if loss.msm_weight > 0.0 {
            let f = msm_graph_loss(&mut g, model, &batch.msm, loss, &AlphaMode::Detached)?;
            out.msm = g.value(f.loss).item();
            out.alpha_mean = f.alpha_mean();
            terms.push(g.scale(f.loss, loss.msm_weight));
        }
        if loss.mlm_weight > 0.0 {
            let l = mlm_graph_loss(&mut g, model, &batch.mlm)?;
            out.mlm = g.value(l).item();
            terms.push(g.scale(l, loss.mlm_weight));
        }
        let total = match terms.as_slice() {
            [] => return Err(Error::invalid("both loss weights are zero")),
            [t] => *t,
            [a, b] => g.add(*a, *b)?,
            _ => unreachable!(),
        };
        out.total = g.value(total).item();
        if !out.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {}", out.total)));
        }
        (out, g.backward(total)?)
    };
    model.params.zero_grads();
    model.params.accumulate(&grads);
    Ok(breakdown)
}

/// Training state: model, optimizer and the next step index.
pub struct Pretrainer<'a> {
    pub config: PretrainConfig,
    pub model: MsmModel,
    pub adam: Adam,
    pub step: usize,
    docs: &'a [Document],
}

impl<'a> Pretrainer<'a> {
    pub fn new(config: PretrainConfig, docs: &'a [Document]) -> Result<Self> {
        config.validate()?;
        let model = MsmModel::new(config.model.clone(), named_seed(config.seed, "init"))?;
        let adam = Adam::new(config.adam, &model.params);
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            docs,
        })
    }

    /// Continues from a full checkpoint.
    pub fn resume(config: PretrainConfig, docs: &'a [Document], ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.model.config != config.model {
            return Err(Error::Checkpoint("checkpoint model config differs from run config".into()));
        }
        let adam = ckpt
            .adam
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Ok(Self {
            config,
            model: ckpt.model,
            adam,
            step: ckpt.step,
            docs,
        })
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let batch = build_batch(self.docs, &self.config, self.step)?;
        let out = compute_gradients(&mut self.model, &batch, &self.config.loss)?;
        if let Some(c) = self.config.grad_clip {
            clip_grad_norm(&mut self.model.params, c);
        }
        let lr = self.config.schedule().lr(self.step);
        self.adam.step(&mut self.model.params, lr)?;
        self.step += 1;
        Ok(out)
    }

    /// Trains until `until` (capped at the configured total), calling
    /// `on_step` with each finished step index and its losses.
    pub fn run_until(
        &mut self,
        until: usize,
        mut on_step: impl FnMut(&Self, usize, &LossBreakdown) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.config.total_steps);
        while self.step < until {
            let out = self.train_step()?;
            on_step(self, self.step - 1, &out)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Full,
            model: self.model.clone(),
            adam: Some(self.adam.clone()),
            step: self.step,
        }
    }
}

/// Runs a whole pretraining job in memory. Returns the model and per-step
/// losses.
pub fn pretrain(config: PretrainConfig, docs: &[Document]) -> Result<(MsmModel, Vec<LossBreakdown>)> {
    let mut t = Pretrainer::new(config, docs)?;
    let mut log = Vec::with_capacity(t.config.total_steps);
    t.run_until(usize::MAX, |_, _, l| {
        log.push(*l);
        Ok(())
    })?;
    Ok((t.model, log))
}
