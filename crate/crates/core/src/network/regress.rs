use crate::error::{Error, Result};
use crate::geometry::{PlaneHypothesisSet, SamplingMode};
use crate::tensor::Tensor;

/// Soft-argmax output for one cost volume.
#[derive(Debug, Clone)]
pub struct Regression {
    /// Label probabilities, `[1, L, H, W]`.
    pub prob: Tensor,
    /// Expected 1-based label, `[1, H, W]`.
    pub labels: Tensor,
    /// Metric depth, `[1, H, W]`.
    pub depth: Tensor,
}

/// Expected label `sum_l l * p_l` and the depth it maps to. Inverse-depth
/// sampling converts through `L * d_min / label`; uniform sampling uses the
/// probability-weighted plane depth.
pub fn regress_depth(prob: &Tensor, planes: &PlaneHypothesisSet) -> Result<Regression> {
    let s = prob.shape();
    if s.len() != 4 || s[1] != planes.len() {
        return Err(Error::shape(
            "regress_depth",
            format!("probabilities {s:?} for {} planes", planes.len()),
        ));
    }
    let label_ids: Vec<f64> = (1..=planes.len()).map(|l| l as f64).collect();
    let labels = prob.weighted_sum(1, &label_ids)?;
    let depth = match planes.mode {
        SamplingMode::InverseDepth => labels
            .recip()?
            .scale(planes.len() as f64 * planes.d_min)?,
        SamplingMode::UniformDepth { .. } => prob.weighted_sum(1, &planes.depths)?,
    };
    Ok(Regression {
        prob: prob.clone(),
        labels,
        depth,
    })
}
