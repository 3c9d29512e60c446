//! Plane-sweep cost volumes and their 3D regularization.

use super::config::{CostVariant, NetworkConfig, ViewFusion};
use super::features::FeatureMap;
use super::layout::RESIDUAL_BLOCKS;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::WarpGrid;
use crate::tensor::{conv3d, grid_sample_bilinear, Conv3dOptions, SampleGrid, Tensor};

/// One paired view's cost volume before regularization:
/// `[1, C, L, h, w]` with `C = 2·CH` (concat) or `CH` (abs-diff), and the
/// in-bounds mask of its warp grid.
#[derive(Debug, Clone)]
pub struct RawCostVolume {
    pub volume: Tensor,
    pub in_bounds: Vec<bool>,
}

impl RawCostVolume {
    pub fn labels(&self) -> usize {
        self.volume.shape()[2]
    }
}

/// Number of views covering each `(l, y, x)` sample.
pub fn coverage(raw: &[RawCostVolume]) -> Vec<u32> {
    let n = raw.first().map_or(0, |r| r.in_bounds.len());
    let mut count = vec![0u32; n];
    for r in raw {
        for (c, &b) in count.iter_mut().zip(&r.in_bounds) {
            *c += b as u32;
        }
    }
    count
}

impl<'a> From<&'a WarpGrid> for SampleGrid<'a> {
    fn from(g: &'a WarpGrid) -> Self {
        SampleGrid {
            planes: g.planes,
            height: g.height,
            width: g.width,
            coords: &g.coords,
            mask: &g.in_bounds,
        }
    }
}

/// Warp each paired feature map through every plane and combine it with the
/// reference features.
pub fn build_cost_volume(
    reference: &FeatureMap,
    paired: &[FeatureMap],
    grids: &[WarpGrid],
    variant: CostVariant,
) -> Result<Vec<RawCostVolume>> {
    if paired.is_empty() {
        return Err(Error::invalid("cost volume needs at least one paired view"));
    }
    if paired.len() != grids.len() {
        return Err(Error::invalid(format!(
            "{} paired feature maps but {} warp grids",
            paired.len(),
            grids.len()
        )));
    }
    let (ch, h, w) = (reference.channels(), reference.height(), reference.width());
    let labels = grids[0].planes;
    let ref_volume = reference
        .tensor
        .reshape(&[1, ch, 1, h, w])?
        .repeat_axis(2, labels)?;

    paired
        .iter()
        .zip(grids)
        .map(|(feat, grid)| {
            if feat.tensor.shape() != reference.tensor.shape()
                || (grid.planes, grid.height, grid.width) != (labels, h, w)
            {
                return Err(Error::shape(
                    "build_cost_volume",
                    format!(
                        "reference {:?}, paired {:?}, grid {}x{}x{}",
                        reference.tensor.shape(),
                        feat.tensor.shape(),
                        grid.planes,
                        grid.height,
                        grid.width
                    ),
                ));
            }
            let warped = grid_sample_bilinear(&feat.tensor, &SampleGrid::from(grid))?;
            let volume = match variant {
                CostVariant::Concat => Tensor::concat(&[ref_volume.clone(), warped], 1)?,
                CostVariant::AbsDiff => ref_volume.sub(&warped)?.abs()?,
            };
            Ok(RawCostVolume {
                volume,
                in_bounds: grid.in_bounds.clone(),
            })
        })
        .collect()
}

/// Whether the regularizer applies its nonlinearities and biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerMode {
    Standard,
    /// Bias-free and activation-free; the stack becomes a linear map.
    Linear,
}

fn conv3d_layer(x: &Tensor, params: &ParamStore, name: &str, mode: RegularizerMode) -> Result<Tensor> {
    let w = params.get(&format!("cost.{name}.weight"))?;
    let b = match mode {
        RegularizerMode::Standard => params.find(&format!("cost.{name}.bias")),
        RegularizerMode::Linear => None,
    };
    conv3d(x, w, b, Conv3dOptions::default())
}

fn activate(x: Tensor, mode: RegularizerMode) -> Result<Tensor> {
    match mode {
        RegularizerMode::Standard => x.relu(),
        RegularizerMode::Linear => Ok(x),
    }
}

/// Shared 3D conv stack: entry conv, residual blocks, single-channel head.
/// Input `[1, C, L, h, w]`, output `[1, 1, L, h, w]`.
fn regularize_one(volume: &Tensor, params: &ParamStore, mode: RegularizerMode) -> Result<Tensor> {
    let mut x = activate(conv3d_layer(volume, params, "entry", mode)?, mode)?;
    for b in 0..RESIDUAL_BLOCKS {
        let y = activate(conv3d_layer(&x, params, &format!("res{b}.a"), mode)?, mode)?;
        let y = conv3d_layer(&y, params, &format!("res{b}.b"), mode)?;
        x = x.add(&y)?;
    }
    conv3d_layer(&x, params, "head", mode)
}

fn average(tensors: Vec<Tensor>) -> Result<Tensor> {
    let n = tensors.len();
    let mut iter = tensors.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::invalid("nothing to average"))?;
    if n == 1 {
        return Ok(first);
    }
    let total = iter.try_fold(first, |acc, t| acc.add(&t))?;
    total.scale(1.0 / n as f64)
}

/// Turn raw per-view volumes into the initial cost volume `[1, L, h, w]`.
pub fn regularize_cost_volume(
    raw: &[RawCostVolume],
    params: &ParamStore,
    cfg: &NetworkConfig,
    mode: RegularizerMode,
) -> Result<Tensor> {
    let first = raw
        .first()
        .ok_or_else(|| Error::invalid("no cost volumes to regularize"))?;
    let shape = first.volume.shape().to_vec();
    if raw.iter().any(|r| r.volume.shape() != shape.as_slice()) {
        return Err(Error::shape("regularize_cost_volume", "per-view volumes differ in shape"));
    }
    let out = match cfg.view_fusion {
        ViewFusion::AfterRegularization => {
            let per_view = raw
                .iter()
                .map(|r| regularize_one(&r.volume, params, mode))
                .collect::<Result<Vec<_>>>()?;
            average(per_view)?
        }
        ViewFusion::BeforeRegularization => {
            let mean = average(raw.iter().map(|r| r.volume.clone()).collect())?;
            regularize_one(&mean, params, mode)?
        }
    };
    out.reshape(&[1, shape[2], shape[3], shape[4]])
}
