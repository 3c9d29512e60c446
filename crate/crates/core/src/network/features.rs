use super::config::NetworkConfig;
use super::layout::{encoder_layers, SPP_WINDOWS};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{avg_pool2d, conv2d, upsample_bilinear, Conv2dOptions, Tensor};

/// Per-image features, `[1, CH, H / stride, W / stride]`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }
}

pub(crate) fn conv_layer(
    x: &Tensor,
    params: &ParamStore,
    name: &str,
    opts: Conv2dOptions,
) -> Result<Tensor> {
    let w = params.get(&format!("{name}.weight"))?;
    conv2d(x, w, params.find(&format!("{name}.bias")), opts)
}

/// Image side length granularity required by `cfg`: the feature map must be
/// divisible by the largest pyramid window.
pub fn size_multiple(cfg: &NetworkConfig) -> usize {
    cfg.feature_stride * SPP_WINDOWS[0]
}

/// Encoder, spatial pyramid pooling and fusion. `image` is `[1, C, H, W]`.
pub fn extract_features(image: &Tensor, params: &ParamStore, cfg: &NetworkConfig) -> Result<FeatureMap> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != cfg.in_channels {
        return Err(Error::shape(
            "extract_features",
            format!("expected [1, {}, H, W], got {s:?}", cfg.in_channels),
        ));
    }
    let multiple = size_multiple(cfg);
    let (h, w) = (s[2], s[3]);
    if h % multiple != 0 || w % multiple != 0 {
        return Err(Error::invalid(format!(
            "image size {w}x{h} must be a multiple of {multiple}; pad by {}x{} pixels",
            (multiple - w % multiple) % multiple,
            (multiple - h % multiple) % multiple
        )));
    }

    let mut x = image.clone();
    for (i, layer) in encoder_layers(cfg).iter().enumerate() {
        let opts = Conv2dOptions {
            stride: layer.stride,
            dilation: 1,
            padding: layer.kernel / 2,
        };
        x = conv_layer(&x, params, &format!("feature.conv{i}"), opts)?.relu()?;
    }
    let (fh, fw) = (x.shape()[2], x.shape()[3]);

    let mut pyramid = vec![x.clone()];
    for window in SPP_WINDOWS {
        let pooled = avg_pool2d(&x, window)?;
        pyramid.push(upsample_bilinear(&pooled, fh, fw)?);
    }
    let stacked = Tensor::concat(&pyramid, 1)?;
    let fused = conv_layer(&stacked, params, "feature.fuse0", Conv2dOptions::same(3, 1))?.relu()?;
    let out = conv_layer(&fused, params, "feature.fuse1", Conv2dOptions::same(1, 1))?;
    Ok(FeatureMap { tensor: out })
}
