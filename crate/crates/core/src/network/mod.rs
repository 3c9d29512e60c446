//! Depth network: feature extraction, plane-sweep cost volume, 3D
//! regularization, context-aware aggregation and soft-argmax regression.

mod aggregate;
mod config;
mod cost;
mod features;
mod layout;
mod params;
mod regress;

#[cfg(test)]
mod tests;

pub use aggregate::{aggregate_cost, Aggregated};
pub use config::{CostVariant, KeyValues, NetworkConfig, ViewFusion};
pub use cost::{build_cost_volume, coverage, regularize_cost_volume, RawCostVolume, RegularizerMode};
pub use features::{extract_features, size_multiple, FeatureMap};
pub use layout::{encoder_layers, EncoderLayer, CONTEXT_DILATIONS, RESIDUAL_BLOCKS, SPP_WINDOWS};
pub use params::{
    load_checkpoint, save_checkpoint, Init, ParamSpec, ParamStore, CHECKPOINT_CONFIG_FILE,
    CHECKPOINT_PARAMS_FILE,
};
pub use regress::{regress_depth, Regression};

use crate::error::{Error, Result};
use crate::geometry::{compute_warp_grid, sample_planes, CameraIntrinsics, CameraPose, PlaneHypothesisSet, WarpGrid};
use crate::tensor::{upsample_bilinear, Tensor};

/// Per-pixel metric depth with a validity mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if depth.len() != width * height || valid.len() != depth.len() {
            return Err(Error::shape(
                "DepthMap",
                format!("{} depths, {} flags for {width}x{height}", depth.len(), valid.len()),
            ));
        }
        if let Some(i) = (0..depth.len()).find(|&i| valid[i] && !(depth[i].is_finite() && depth[i] > 0.0)) {
            return Err(Error::invalid(format!("valid pixel {i} has depth {}", depth[i])));
        }
        Ok(Self { width, height, depth, valid })
    }

    /// Every finite positive value is valid.
    pub fn from_values(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Self::new(width, height, depth, valid)
    }

    /// Read a `[1, H, W]` or `[H, W]` depth tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [1, h, w] | [h, w] => (*h, *w),
            _ => return Err(Error::shape("DepthMap::from_tensor", format!("{s:?}"))),
        };
        Self::from_values(w, h, t.values().to_vec())
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Everything the cost-volume stages produced, at feature resolution.
#[derive(Debug, Clone)]
pub struct CostVolume {
    pub raw: Vec<RawCostVolume>,
    /// `[1, L, h, w]`
    pub initial: Tensor,
    /// Equal to `initial` when aggregation is off.
    pub refined: Tensor,
    pub residual: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub initial: Regression,
    pub refined: Regression,
    pub volume: CostVolume,
    pub planes: PlaneHypothesisSet,
}

impl ForwardOutput {
    pub fn initial_depth(&self) -> Result<DepthMap> {
        DepthMap::from_tensor(&self.initial.depth)
    }

    pub fn refined_depth(&self) -> Result<DepthMap> {
        DepthMap::from_tensor(&self.refined.depth)
    }
}

/// A paired view: its image `[1, C, H, W]` and the pose taking reference
/// camera coordinates into its own.
#[derive(Debug, Clone)]
pub struct PairedView {
    pub image: Tensor,
    pub pose: CameraPose,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore,
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: NetworkConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Self { config, params })
    }

    pub fn planes(&self) -> Result<PlaneHypothesisSet> {
        sample_planes(self.config.labels, self.config.d_min, self.config.sampling)
    }

    /// Warp grids for each paired view at feature resolution.
    pub fn warp_grids(&self, k: &CameraIntrinsics, paired: &[PairedView], fw: usize, fh: usize) -> Result<Vec<WarpGrid>> {
        let planes = self.planes()?;
        let kf = k.scaled(fw as f64 / k.width as f64, fh as f64 / k.height as f64)?;
        paired
            .iter()
            .map(|p| compute_warp_grid(&kf, &p.pose, &planes, fw, fh))
            .collect()
    }

    pub fn forward(&self, k: &CameraIntrinsics, reference: &Tensor, paired: &[PairedView]) -> Result<ForwardOutput> {
        self.forward_with(k, reference, paired, RegularizerMode::Standard)
    }

    pub fn forward_with(
        &self,
        k: &CameraIntrinsics,
        reference: &Tensor,
        paired: &[PairedView],
        mode: RegularizerMode,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if paired.is_empty() {
            return Err(Error::invalid("forward needs at least one paired view"));
        }
        let s = reference.shape();
        if s.len() != 4 || s[2] != k.height || s[3] != k.width {
            return Err(Error::shape(
                "forward",
                format!("reference {s:?} for {}x{} intrinsics", k.width, k.height),
            ));
        }
        if let Some(p) = paired.iter().find(|p| p.image.shape() != s) {
            return Err(Error::shape(
                "forward",
                format!("paired image {:?} differs from reference {s:?}", p.image.shape()),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let planes = self.planes()?;

        let ref_feat = extract_features(reference, &self.params, cfg)?;
        let paired_feat = paired
            .iter()
            .map(|p| extract_features(&p.image, &self.params, cfg))
            .collect::<Result<Vec<_>>>()?;
        let grids = self.warp_grids(k, paired, ref_feat.width(), ref_feat.height())?;

        let raw = build_cost_volume(&ref_feat, &paired_feat, &grids, cfg.cost_variant)?;
        let initial = regularize_cost_volume(&raw, &self.params, cfg, mode)?;
        let (refined, residual) = if cfg.aggregation {
            let agg = aggregate_cost(&initial, &ref_feat, &self.params)?;
            (agg.refined, Some(agg.residual))
        } else {
            (initial.clone(), None)
        };

        let regress = |cost: &Tensor| -> Result<Regression> {
            let full = if cost.shape()[2] == h && cost.shape()[3] == w {
                cost.clone()
            } else {
                upsample_bilinear(cost, h, w)?
            };
            regress_depth(&full.softmax(1)?, &planes)
        };
        let initial_out = regress(&initial)?;
        let refined_out = if cfg.aggregation {
            regress(&refined)?
        } else {
            initial_out.clone()
        };

        Ok(ForwardOutput {
            initial: initial_out,
            refined: refined_out,
            volume: CostVolume {
                raw,
                initial,
                refined,
                residual,
            },
            planes,
        })
    }
}

/// Grayscale pixels in `[0, 1]` as a `[1, 1, H, W]` input tensor.
pub fn image_tensor(pixels: &[f64], width: usize, height: usize) -> Result<Tensor> {
    Tensor::new(&[1, 1, height, width], pixels.to_vec())
}
