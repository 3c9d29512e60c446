//! Context-aware cost aggregation.
//!
//! Every label slice is refined independently by the same dilated context
//! network, conditioned on the reference features. Slices are processed as a
//! batch of `L` images so the weights are shared by construction.

use super::features::{conv_layer, FeatureMap};
use super::layout::CONTEXT_DILATIONS;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Conv2dOptions, Tensor};

#[derive(Debug, Clone)]
pub struct Aggregated {
    pub refined: Tensor,
    pub residual: Tensor,
}

/// `initial` is `[1, L, h, w]`; `context` must share its spatial size.
pub fn aggregate_cost(initial: &Tensor, context: &FeatureMap, params: &ParamStore) -> Result<Aggregated> {
    let s = initial.shape();
    if s.len() != 4 || s[0] != 1 || s[2] != context.height() || s[3] != context.width() {
        return Err(Error::shape(
            "aggregate_cost",
            format!(
                "cost volume {s:?} vs context {:?}",
                context.tensor.shape()
            ),
        ));
    }
    let (labels, h, w) = (s[1], s[2], s[3]);
    let slices = initial.reshape(&[labels, 1, h, w])?;
    let ctx = context.tensor.repeat_axis(0, labels)?;
    let mut x = Tensor::concat(&[slices, ctx], 1)?;

    let last = CONTEXT_DILATIONS.len() - 1;
    for (i, &d) in CONTEXT_DILATIONS.iter().enumerate() {
        x = conv_layer(&x, params, &format!("agg.conv{i}"), Conv2dOptions::same(3, d))?;
        if i != last {
            x = x.relu()?;
        }
    }
    let residual = x.reshape(&[1, labels, h, w])?;
    let refined = initial.add(&residual)?;
    Ok(Aggregated { refined, residual })
}
