//! Synthetic multi-view scenes with exact depth, plus the on-disk formats.

mod io;
mod render;

pub use io::{
    decode_pfm, encode_pfm, load_depth, load_image, read_scene, save_depth, save_image, write_scene,
    CAMERAS_FILE, DEPTH_FILE,
};
pub use render::{generate_dataset, generate_scene, Layout, SceneSpec, SyntheticScene, MAX_ATTEMPTS};

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraPose};
use crate::network::{DepthMap, PairedView};
use crate::tensor::Tensor;
use crate::trainer::TrainingSample;

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::shape(
                "Image",
                format!("{} pixels for {width}x{height}", pixels.len()),
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear lookup at a continuous pixel position; `None` outside
    /// `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let (wm, hm) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= wm && y <= hm) {
            return None;
        }
        let (x0, y0) = (x.floor().min(wm), y.floor().min(hm));
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as usize, y0 as usize);
        let (x1, y1) = ((xi + 1).min(self.width - 1), (yi + 1).min(self.height - 1));
        let top = self.get(xi, yi) * (1.0 - fx) + self.get(x1, yi) * fx;
        let bottom = self.get(xi, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// `[1, 1, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.pixels.clone()).expect("pixel count checked")
    }

    /// Round to the 8-bit levels an image file can hold.
    pub fn quantized(&self) -> Image {
        Image {
            pixels: self.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
            ..self.clone()
        }
    }
}

/// Reference view (index 0), paired views, reference depth and one camera per
/// view. Poses are world-to-camera; the world frame may be anything.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub images: Vec<Image>,
    pub depth: DepthMap,
    pub cameras: Vec<Camera>,
}

impl Scene {
    pub fn paired_count(&self) -> usize {
        self.images.len().saturating_sub(1)
    }

    /// Pose mapping reference camera coordinates into view `k`.
    pub fn relative_pose(&self, k: usize) -> CameraPose {
        CameraPose::relative(&self.cameras[0].pose, &self.cameras[k].pose)
    }

    /// Build a training/inference example using the listed paired views
    /// (1-based view indices).
    pub fn sample(&self, views: &[usize]) -> Result<TrainingSample> {
        if views.is_empty() {
            return Err(Error::invalid("select at least one paired view"));
        }
        let paired = views
            .iter()
            .map(|&k| {
                if k == 0 || k >= self.images.len() {
                    return Err(Error::invalid(format!(
                        "paired view {k} does not exist (scene has {} paired views)",
                        self.paired_count()
                    )));
                }
                Ok(PairedView {
                    image: self.images[k].to_tensor(),
                    pose: self.relative_pose(k),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSample {
            intrinsics: self.cameras[0].intrinsics,
            reference: self.images[0].to_tensor(),
            paired,
            gt: self.depth.clone(),
        })
    }

    /// All paired views.
    pub fn full_sample(&self) -> Result<TrainingSample> {
        let all: Vec<usize> = (1..self.images.len()).collect();
        self.sample(&all)
    }
}
