//! Network configuration and the flat `key = value` config format.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{SamplingMode, DEFAULT_MAX_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostVariant {
    /// Stack reference and warped features (2·CH channels).
    Concat,
    /// Absolute feature difference (CH channels).
    AbsDiff,
}

/// Where multi-view cost volumes are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewFusion {
    /// Regularize each view's volume with shared weights, then average.
    AfterRegularization,
    /// Average the raw volumes, then regularize once.
    BeforeRegularization,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    /// Input image channels (1 for the synthetic grayscale data).
    pub in_channels: usize,
    /// Feature channels `CH`.
    pub channels: usize,
    /// Number of depth labels `L`.
    pub labels: usize,
    pub d_min: f64,
    pub sampling: SamplingMode,
    /// Feature downsampling factor: 1, 2 or 4.
    pub feature_stride: usize,
    pub cost_variant: CostVariant,
    pub aggregation: bool,
    /// Channels inside the 3D regularizer.
    pub reg_channels: usize,
    pub view_fusion: ViewFusion,
}

impl NetworkConfig {
    /// Full-size layout: 32 feature channels, 64 inverse-depth labels from
    /// 0.5 m, quarter-resolution features.
    pub fn full_size() -> Self {
        Self {
            in_channels: 3,
            channels: 32,
            labels: 64,
            d_min: 0.5,
            sampling: SamplingMode::InverseDepth,
            feature_stride: 4,
            cost_variant: CostVariant::Concat,
            aggregation: true,
            reg_channels: 16,
            view_fusion: ViewFusion::AfterRegularization,
        }
    }

    /// Desk-scale layout used by the tests and the synthetic benchmark.
    pub fn toy() -> Self {
        Self {
            in_channels: 1,
            channels: 8,
            labels: 8,
            d_min: 0.5,
            sampling: SamplingMode::InverseDepth,
            feature_stride: 1,
            cost_variant: CostVariant::Concat,
            aggregation: true,
            reg_channels: 8,
            view_fusion: ViewFusion::AfterRegularization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels == 0 || self.labels == 0 || self.reg_channels == 0 {
            return Err(Error::invalid("channel and label counts must be at least 1"));
        }
        if ![1, 2, 4].contains(&self.feature_stride) {
            return Err(Error::invalid(format!(
                "feature_stride must be 1, 2 or 4, got {}",
                self.feature_stride
            )));
        }
        if !(self.d_min > 0.0 && self.d_min.is_finite()) {
            return Err(Error::invalid(format!("d_min must be positive, got {}", self.d_min)));
        }
        if let SamplingMode::UniformDepth { d_max } = self.sampling {
            if !(d_max > self.d_min) {
                return Err(Error::invalid("d_max must exceed d_min"));
            }
        }
        Ok(())
    }

    /// Depth interval representable by the label set.
    pub fn depth_range(&self) -> (f64, f64) {
        match self.sampling {
            SamplingMode::InverseDepth => (self.d_min, self.labels as f64 * self.d_min),
            SamplingMode::UniformDepth { d_max } => (self.d_min, d_max),
        }
    }

    /// Channel count of one raw cost volume.
    pub fn cost_channels(&self) -> usize {
        match self.cost_variant {
            CostVariant::Concat => 2 * self.channels,
            CostVariant::AbsDiff => self.channels,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (mode, d_max) = match self.sampling {
            SamplingMode::InverseDepth => ("inverse", None),
            SamplingMode::UniformDepth { d_max } => ("uniform", Some(d_max)),
        };
        let _ = writeln!(out, "in_channels = {}", self.in_channels);
        let _ = writeln!(out, "channels = {}", self.channels);
        let _ = writeln!(out, "labels = {}", self.labels);
        let _ = writeln!(out, "d_min = {:?}", self.d_min);
        let _ = writeln!(out, "sampling_mode = {mode}");
        if let Some(d_max) = d_max {
            let _ = writeln!(out, "d_max = {d_max:?}");
        }
        let _ = writeln!(out, "feature_stride = {}", self.feature_stride);
        let variant = match self.cost_variant {
            CostVariant::Concat => "concat",
            CostVariant::AbsDiff => "abs-diff",
        };
        let _ = writeln!(out, "cost_variant = {variant}");
        let _ = writeln!(out, "aggregation = {}", if self.aggregation { "on" } else { "off" });
        let _ = writeln!(out, "reg_channels = {}", self.reg_channels);
        let fusion = match self.view_fusion {
            ViewFusion::AfterRegularization => "after",
            ViewFusion::BeforeRegularization => "before",
        };
        let _ = writeln!(out, "view_fusion = {fusion}");
        out
    }

    /// Read network keys from `map`, removing the ones consumed. Missing keys
    /// keep their value from `self`.
    pub fn update_from(mut self, map: &mut KeyValues) -> Result<Self> {
        if let Some(v) = map.take_parsed("in_channels")? {
            self.in_channels = v;
        }
        if let Some(v) = map.take_parsed("channels")? {
            self.channels = v;
        }
        if let Some(v) = map.take_parsed("labels")? {
            self.labels = v;
        }
        if let Some(v) = map.take_parsed("d_min")? {
            self.d_min = v;
        }
        let d_max: Option<f64> = map.take_parsed("d_max")?;
        match map.take("sampling_mode").as_deref() {
            None => {}
            Some("inverse") => self.sampling = SamplingMode::InverseDepth,
            Some("uniform") => {
                self.sampling = SamplingMode::UniformDepth {
                    d_max: d_max.unwrap_or(DEFAULT_MAX_DEPTH),
                }
            }
            Some(other) => return Err(Error::invalid(format!("unknown sampling_mode `{other}`"))),
        }
        if let (Some(d), SamplingMode::UniformDepth { .. }) = (d_max, self.sampling) {
            self.sampling = SamplingMode::UniformDepth { d_max: d };
        }
        if let Some(v) = map.take_parsed("feature_stride")? {
            self.feature_stride = v;
        }
        match map.take("cost_variant").as_deref() {
            None => {}
            Some("concat") => self.cost_variant = CostVariant::Concat,
            Some("abs-diff") => self.cost_variant = CostVariant::AbsDiff,
            Some(other) => return Err(Error::invalid(format!("unknown cost_variant `{other}`"))),
        }
        if let Some(v) = map.take("aggregation") {
            self.aggregation = parse_switch("aggregation", &v)?;
        }
        if let Some(v) = map.take_parsed("reg_channels")? {
            self.reg_channels = v;
        }
        match map.take("view_fusion").as_deref() {
            None => {}
            Some("after") => self.view_fusion = ViewFusion::AfterRegularization,
            Some("before") => self.view_fusion = ViewFusion::BeforeRegularization,
            Some(other) => return Err(Error::invalid(format!("unknown view_fusion `{other}`"))),
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = KeyValues::parse(text)?;
        let cfg = Self::toy().update_from(&mut map)?;
        map.finish()?;
        Ok(cfg)
    }
}

fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("`{key}` must be on/off, got `{v}`"))),
    }
}

/// Parsed `key = value` lines. Consumers take the keys they understand;
/// [`KeyValues::finish`] rejects whatever is left.
#[derive(Debug, Default, Clone)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for raw in text.split_inclusive('\n') {
            let line = raw.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                let Some((k, v)) = line.split_once('=') else {
                    return Err(Error::Parse {
                        what: "config",
                        offset,
                        msg: format!("expected `key = value`, got `{line}`"),
                    });
                };
                let key = k.trim().to_string();
                if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                    return Err(Error::Parse {
                        what: "config",
                        offset,
                        msg: format!("duplicate key `{key}`"),
                    });
                }
            }
            offset += raw.len();
        }
        Ok(Self { entries })
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::invalid(format!("bad value `{v}` for `{key}`: {e}")))
            })
            .transpose()
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::invalid(format!("unknown config key `{k}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_layout() {
        let p = NetworkConfig::full_size();
        assert_eq!((p.channels, p.labels, p.d_min, p.feature_stride), (32, 64, 0.5, 4));
        assert_eq!(p.cost_channels(), 64);
        assert_eq!(p.depth_range(), (0.5, 32.0));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = NetworkConfig::full_size();
        cfg.sampling = SamplingMode::UniformDepth { d_max: 10.0 };
        cfg.cost_variant = CostVariant::AbsDiff;
        cfg.aggregation = false;
        cfg.view_fusion = ViewFusion::BeforeRegularization;
        assert_eq!(NetworkConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let toy = NetworkConfig::toy();
        assert_eq!(NetworkConfig::from_text(&toy.to_text()).unwrap(), toy);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(NetworkConfig::from_text("feature_stride = 3").is_err());
        assert!(NetworkConfig::from_text("colour = blue").is_err());
        assert!(NetworkConfig::from_text("labels 8").is_err());
        assert!(NetworkConfig::from_text("labels = 8\nlabels = 9").is_err());
        assert!(NetworkConfig::from_text("cost_variant = product").is_err());
        let cfg = NetworkConfig::from_text("# comment\nlabels = 16 # trailing\n").unwrap();
        assert_eq!(cfg.labels, 16);
    }
}
