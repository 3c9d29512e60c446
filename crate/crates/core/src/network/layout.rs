//! Layer plan shared by parameter initialization and the forward pass.

use super::config::NetworkConfig;
use super::params::{Init, ParamSpec};

/// Average-pooling windows of the spatial pyramid, largest first.
pub const SPP_WINDOWS: [usize; 4] = [16, 8, 4, 2];

/// Dilation of each context-network layer.
pub const CONTEXT_DILATIONS: [usize; 7] = [1, 2, 4, 8, 16, 1, 1];

pub const RESIDUAL_BLOCKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Seven encoder convs: a 7x7 entry then 3x3, with channels
/// (CH/2, CH/2, CH/2, CH, CH, CH, CH). Downsampling happens at layers 0 and 3.
pub fn encoder_layers(cfg: &NetworkConfig) -> Vec<EncoderLayer> {
    let half = (cfg.channels / 2).max(1);
    let channels = [half, half, half, cfg.channels, cfg.channels, cfg.channels, cfg.channels];
    let strides = match cfg.feature_stride {
        1 => [1; 7],
        2 => [2, 1, 1, 1, 1, 1, 1],
        _ => [2, 1, 1, 2, 1, 1, 1],
    };
    let mut in_ch = cfg.in_channels;
    (0..7)
        .map(|i| {
            let layer = EncoderLayer {
                in_ch,
                out_ch: channels[i],
                kernel: if i == 0 { 7 } else { 3 },
                stride: strides[i],
            };
            in_ch = channels[i];
            layer
        })
        .collect()
}

pub(crate) fn param_specs(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut conv2d = |name: String, o: usize, c: usize, k: usize, init: Init| {
        specs.push(ParamSpec::new(format!("{name}.weight"), &[o, c, k, k], init));
        // A bias on the last context layer shifts every label equally, which
        // the softmax cancels, so that layer has none.
        if init == Init::He {
            specs.push(ParamSpec::new(format!("{name}.bias"), &[o], Init::Zeros));
        }
    };
    let ch = cfg.channels;
    for (i, l) in encoder_layers(cfg).iter().enumerate() {
        conv2d(format!("feature.conv{i}"), l.out_ch, l.in_ch, l.kernel, Init::He);
    }
    conv2d("feature.fuse0".into(), ch, ch * (1 + SPP_WINDOWS.len()), 3, Init::He);
    conv2d("feature.fuse1".into(), ch, ch, 1, Init::He);

    if cfg.aggregation {
        let mut in_ch = 1 + ch;
        for (i, _) in CONTEXT_DILATIONS.iter().enumerate() {
            let last = i + 1 == CONTEXT_DILATIONS.len();
            let out_ch = if last { 1 } else { ch };
            let init = if last { Init::Zeros } else { Init::He };
            conv2d(format!("agg.conv{i}"), out_ch, in_ch, 3, init);
            in_ch = out_ch;
        }
    }

    let r = cfg.reg_channels;
    let mut conv3d = |name: String, o: usize, c: usize, bias: bool| {
        specs.push(ParamSpec::new(format!("cost.{name}.weight"), &[o, c, 3, 3, 3], Init::He));
        if bias {
            specs.push(ParamSpec::new(format!("cost.{name}.bias"), &[o], Init::Zeros));
        }
    };
    conv3d("entry".into(), r, cfg.cost_channels(), true);
    for b in 0..RESIDUAL_BLOCKS {
        conv3d(format!("res{b}.a"), r, r, true);
        conv3d(format!("res{b}.b"), r, r, true);
    }
    // same softmax argument as the last context layer
    conv3d("head".into(), 1, r, false);
    specs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_encoder_plan() {
        let layers = encoder_layers(&NetworkConfig::full_size());
        let ch: Vec<usize> = layers.iter().map(|l| l.out_ch).collect();
        let st: Vec<usize> = layers.iter().map(|l| l.stride).collect();
        assert_eq!(ch, vec![16, 16, 16, 32, 32, 32, 32]);
        assert_eq!(st, vec![2, 1, 1, 2, 1, 1, 1]);
        assert_eq!(layers[0].kernel, 7);
        assert!(layers[1..].iter().all(|l| l.kernel == 3));
        assert_eq!(st.iter().product::<usize>(), 4);
    }

    #[test]
    fn aggregation_off_drops_context_params() {
        let mut cfg = NetworkConfig::toy();
        let with = param_specs(&cfg).len();
        cfg.aggregation = false;
        let without = param_specs(&cfg).len();
        assert_eq!(with - without, 2 * CONTEXT_DILATIONS.len() - 1);
        assert!(param_specs(&cfg).iter().all(|s| !s.name.starts_with("agg.")));
    }
}
