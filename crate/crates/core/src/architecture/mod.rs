//! Clip-level tracklet model: a small CNN backbone, per-instance tracklet
//! queries and box tubes, and `M` rounds of attention, temporal dynamic
//! convolution and prediction heads.

pub mod boxes;
mod model;
mod params;

use serde::{Deserialize, Serialize};

pub use model::{
    adaptive_blend, backbone, factorised_attention, forward_clip, heads, init_tracklet_state, repeat_over_time,
    temporal_dynamic_conv, time_encoding, ClipOutputs, ClipPredictions, HeadOutputs, IterationOutputs,
};
pub use params::{
    backbone_widths, init_params, load_checkpoint, save_checkpoint, Bound, ParamStore, BACKBONE_STRIDES,
};

/// Which self-attention stages run over the queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionScheme {
    /// Across queries within each frame only.
    Spatial,
    /// Across frames within each query only.
    Temporal,
    /// Temporal stage, then spatial stage.
    Factorised,
}

/// Which neighbouring frames feed the dynamic convolution at frame `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicConvMode {
    /// Frames `t-1, t, t+1`, blended by adaptive weights.
    Temporal,
    /// Frame `t` only.
    Still,
}

/// Whether a query holds one embedding per frame or one shared embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    PerFrame,
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub queries: usize,
    pub iterations: usize,
    pub heads: usize,
    pub roi_size: usize,
    pub mask_size: usize,
    /// Foreground classes; the background class is index `num_classes`.
    pub num_classes: usize,
    pub attention: AttentionScheme,
    pub dynamic_conv: DynamicConvMode,
    pub query_mode: QueryMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            queries: 6,
            iterations: 3,
            heads: 4,
            roi_size: 7,
            mask_size: 14,
            num_classes: 3,
            attention: AttentionScheme::Factorised,
            dynamic_conv: DynamicConvMode::Temporal,
            query_mode: QueryMode::PerFrame,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::numerics::Result<()> {
        use crate::numerics::NumericsError::Config;
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Config(format!("{} channels not divisible into {} heads", self.channels, self.heads)));
        }
        if self.queries == 0 || self.iterations == 0 || self.num_classes == 0 {
            return Err(Config("queries, iterations and classes must be positive".into()));
        }
        if self.roi_size == 0 || self.mask_size != 2 * self.roi_size {
            return Err(Config("mask_size must be twice roi_size".into()));
        }
        Ok(())
    }

    pub fn background(&self) -> usize {
        self.num_classes
    }
}

/// A configuration plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> crate::numerics::Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &std::path::Path, extra: serde_json::Value) -> crate::numerics::Result<()> {
        let meta = serde_json::json!({ "model": self.config, "extra": extra });
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &std::path::Path) -> crate::numerics::Result<(Self, serde_json::Value)> {
        let (params, meta) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())?;
        config.validate()?;
        let fresh = init_params(&config, 0);
        for (name, t) in fresh.names().iter().zip(fresh.tensors()) {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(crate::numerics::NumericsError::Checkpoint(format!(
                        "missing or misshapen tensor {name}"
                    )))
                }
            }
        }
        Ok((Self { config, params }, meta["extra"].clone()))
    }
}
