use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{standard_normal, Graph, NodeId, Tensor};

use super::{head_prefix, MsmModel, ProjectionMode};

/// Which side of the contrastive pair a vector sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Document-encoder output at the masked position.
    Context,
    /// Sentence-encoder vector (positive or negative candidate).
    Sentence,
}

/// Identity plus Normal(0, std) noise, so heads start close to a no-op.
pub(crate) fn near_identity(d: usize, std: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let mut data: Vec<f64> = (0..d * d).map(|_| std * standard_normal(rng)).collect();
    for i in 0..d {
        data[i * d + i] += 1.0;
    }
    Tensor::new(vec![d, d], data)
}

fn head_names(model: &MsmModel, head: usize, side: Side) -> Option<(String, String)> {
    let side = match (model.config.projection, side) {
        (ProjectionMode::None, _) => return None,
        (ProjectionMode::Shared, _) => "shared",
        (ProjectionMode::Asymmetric, Side::Context) => "p",
        (ProjectionMode::Asymmetric, Side::Sentence) => "h",
    };
    let pre = head_prefix(head);
    Some((format!("{pre}{side}.w"), format!("{pre}{side}.b")))
}

pub fn project_node(
    g: &mut Graph,
    model: &MsmModel,
    head: usize,
    side: Side,
    x: NodeId,
) -> Result<NodeId> {
    match head_names(model, head, side) {
        None => Ok(x),
        Some((w, b)) => {
            let (w, b) = (g.param_named(&w)?, g.param_named(&b)?);
            let y = g.matmul(x, w)?;
            g.add_row(y, b)
        }
    }
}

/// Applies head set `head` to the rows of `x`.
pub fn project(model: &MsmModel, head: usize, side: Side, x: &Tensor) -> Result<Tensor> {
    if !model.has_document_encoder {
        return Err(Error::Checkpoint("model has no projection heads".into()));
    }
    let mut g = Graph::new(&model.params);
    let xn = g.input(x.clone());
    let y = project_node(&mut g, model, head, side, xn)?;
    Ok(g.value(y).clone())
}
