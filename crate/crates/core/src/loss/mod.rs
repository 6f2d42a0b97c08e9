//! Contrastive masked-sentence loss with a detached dynamic bias on
//! intra-document negatives, plus the masked-token loss.
//!
//! The scalar functions here work on plain vectors and define the loss; the
//! graph version in [`batched`] computes the same quantity for a whole batch
//! inside one autodiff graph.

mod batched;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::str_enum;
use crate::numerics::kernels::{dot, log_sum_exp};

pub use batched::{
    mlm_graph_loss, msm_graph_loss, AlphaMode, BatchDoc, MaskInstance, MlmBatch, MsmBatch,
    MsmForward,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Dot,
    Cosine,
}

str_enum!(Similarity { "dot" => Dot, "cosine" => Cosine });

/// Which negatives enter the denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// Other sentences of the same document plus sampled cross-document ones.
    All,
    /// Cross-document negatives only.
    CrossOnly,
}

str_enum!(NegativeSource { "all" => All, "cross_only" => CrossOnly });

/// Whether the intra-document logits are shifted by `mu * alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    Dynamic,
    None,
}

str_enum!(BiasMode { "dynamic" => Dynamic, "none" => None });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mu: f64,
    pub similarity: Similarity,
    pub bias: BiasMode,
    pub negatives: NegativeSource,
    /// Upper bound on sampled cross-document negatives per masked sentence.
    pub cross_negative_cap: usize,
    pub msm_weight: f64,
    pub mlm_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mu: 0.5,
            similarity: Similarity::Dot,
            bias: BiasMode::Dynamic,
            negatives: NegativeSource::All,
            cross_negative_cap: 512,
            msm_weight: 1.0,
            mlm_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() || !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::invalid(format!("mu {} outside [0, 1]", self.mu)));
        }
        if self.cross_negative_cap == 0 {
            return Err(Error::invalid("cross_negative_cap must be positive"));
        }
        if self.msm_weight < 0.0 || self.mlm_weight < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// The multiplier actually applied to `alpha`.
    pub fn effective_mu(&self) -> f64 {
        match self.bias {
            BiasMode::Dynamic => self.mu,
            BiasMode::None => 0.0,
        }
    }
}

/// Negatives for one masked sentence.
#[derive(Clone, Debug, Default)]
pub struct NegativePools<'a> {
    pub intra: Vec<&'a [f64]>,
    pub cross: Vec<&'a [f64]>,
}

/// Per-step loss values as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub msm: f64,
    pub mlm: f64,
    pub total: f64,
    pub alpha_mean: f64,
}

fn check_dim(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(())
}

pub fn similarity(a: &[f64], b: &[f64], sim: Similarity) -> Result<f64> {
    check_dim("similarity", a, b)?;
    let s = dot(a, b);
    Ok(match sim {
        Similarity::Dot => s,
        Similarity::Cosine => {
            let n = (dot(a, a) * dot(b, b)).sqrt();
            if n == 0.0 {
                return Err(Error::NonFinite("cosine of a zero vector".into()));
            }
            s / n
        }
    })
}

fn mean_similarity(p: &[f64], xs: &[&[f64]], sim: Similarity) -> Result<f64> {
    let mut total = 0.0;
    for x in xs {
        total += similarity(p, x, sim)?;
    }
    Ok(total / xs.len() as f64)
}

/// Mean intra-document similarity minus mean cross-document similarity.
/// Zero when there are no intra-document negatives.
pub fn compute_alpha(p: &[f64], pools: &NegativePools, sim: Similarity) -> Result<f64> {
    if pools.cross.is_empty() {
        return Err(Error::NoCrossNegatives);
    }
    let cross = mean_similarity(p, &pools.cross, sim)?;
    if pools.intra.is_empty() {
        return Ok(0.0);
    }
    Ok(mean_similarity(p, &pools.intra, sim)? - cross)
}

/// `-s(p, h+) + log(exp s(p, h+) + sum_intra exp(s - mu*alpha) + sum_cross exp s)`.
pub fn msm_loss(
    p: &[f64],
    positive: &[f64],
    pools: &NegativePools,
    mu: f64,
    alpha: f64,
    sim: Similarity,
) -> Result<f64> {
    let pos = similarity(p, positive, sim)?;
    let mut logits = Vec::with_capacity(1 + pools.intra.len() + pools.cross.len());
    logits.push(pos);
    for h in &pools.intra {
        logits.push(similarity(p, h, sim)? - mu * alpha);
    }
    for h in &pools.cross {
        logits.push(similarity(p, h, sim)?);
    }
    let loss = log_sum_exp(&logits) - pos;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("msm loss {loss}")));
    }
    Ok(loss)
}

/// Plain InfoNCE with the positive in the denominator.
pub fn info_nce(p: &[f64], positive: &[f64], negatives: &[&[f64]], sim: Similarity) -> Result<f64> {
    let pools = NegativePools {
        intra: Vec::new(),
        cross: negatives.to_vec(),
    };
    msm_loss(p, positive, &pools, 0.0, 0.0, sim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_is_mean_gap() {
        let p = [1.0, 0.0];
        let (a, b, c) = ([3.0, 0.0], [1.0, 5.0], [0.5, 0.0]);
        let pools = NegativePools {
            intra: vec![&a, &b],
            cross: vec![&c],
        };
        assert_eq!(compute_alpha(&p, &pools, Similarity::Dot).unwrap(), 1.5);
        let no_intra = NegativePools {
            intra: vec![],
            cross: vec![&c],
        };
        assert_eq!(compute_alpha(&p, &no_intra, Similarity::Dot).unwrap(), 0.0);
        let no_cross = NegativePools {
            intra: vec![&a],
            cross: vec![],
        };
        assert!(matches!(
            compute_alpha(&p, &no_cross, Similarity::Dot),
            Err(Error::NoCrossNegatives)
        ));
    }

    #[test]
    fn two_way_loss_matches_hand_value() {
        // logits: positive 1, one cross negative 0 → ln(1 + e^-1)
        let loss = info_nce(&[1.0], &[1.0], &[&[0.0]], Similarity::Dot).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn cosine_ignores_scale() {
        let s = similarity(&[2.0, 0.0], &[0.0, 3.0], Similarity::Cosine).unwrap();
        assert_eq!(s, 0.0);
        assert!(similarity(&[0.0], &[1.0], Similarity::Cosine).is_err());
        assert!(similarity(&[0.0], &[1.0, 2.0], Similarity::Dot).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            mu: 1.5,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let none = LossConfig {
            bias: BiasMode::None,
            ..LossConfig::default()
        };
        assert_eq!(none.effective_mu(), 0.0);
    }
}
