use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{evaluate, handcrafted_link_baseline, infer_clips, infer_video, InferConfig, LinkConfig, Metrics, PipelineError, Result};
use crate::architecture::{AttentionScheme, DynamicConvMode, Model, QueryMode};
use crate::synthvideo::{generate_dataset, SceneConfig, VideoDataset};
use crate::training::{train, TrainConfig};

/// One model variant per switch setting, trained on `train_data` and
/// evaluated on `eval_data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub train_data: SceneConfig,
    pub eval_data: SceneConfig,
    pub infer: InferConfig,
    pub link: LinkConfig,
    /// Frame strides the base model is evaluated at.
    pub eval_strides: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            train_data: SceneConfig::default(),
            eval_data: SceneConfig { seed: 1_000_000, frames_per_video: 48, ..SceneConfig::default() },
            infer: InferConfig::default(),
            link: LinkConfig::default(),
            eval_strides: vec![1, 3],
        }
    }
}

/// Metrics per switch, then per setting.
pub type AblationReport = BTreeMap<String, BTreeMap<String, Metrics>>;

fn eval_handoff(model: &Model, data: &VideoDataset, infer: &InferConfig) -> Result<Metrics> {
    let preds = data.videos.iter().map(|v| infer_video(model, v, infer)).collect::<Result<Vec<_>>>()?;
    evaluate(&preds, &data.videos)
}

fn eval_linked(model: &Model, data: &VideoDataset, infer: &InferConfig, link: &LinkConfig) -> Result<Metrics> {
    let preds = data
        .videos
        .iter()
        .map(|v| handcrafted_link_baseline(v.index, &infer_clips(model, v, infer.clip_len)?, link))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&preds, &data.videos)
}

fn to_json_key<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|j| j.as_str().map(str::to_string)).unwrap_or_default()
}

/// Trains the base configuration and one variant per alternative setting of
/// the attention scheme, dynamic convolution and query sharing, then
/// evaluates query handoff against hand-crafted linking and each frame stride.
pub fn run_ablation(cfg: &AblationConfig, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    let train_data = generate_dataset(&cfg.train_data)?;
    let eval_data = generate_dataset(&cfg.eval_data)?;
    let fit = |tc: &TrainConfig| train(tc, &train_data, |_| {}).map_err(|e| PipelineError::Config(e.to_string()));

    let mut report = AblationReport::new();
    progress("base");
    let base = fit(&cfg.train)?;
    let base_metrics = eval_handoff(&base, &eval_data, &cfg.infer)?;
    let mut entry = |switch: &str, setting: String, m: Metrics| {
        report.entry(switch.to_string()).or_default().insert(setting, m);
    };

    for scheme in [AttentionScheme::Spatial, AttentionScheme::Temporal, AttentionScheme::Factorised] {
        let m = if scheme == cfg.train.attention {
            base_metrics
        } else {
            progress(&format!("attention {}", to_json_key(&scheme)));
            eval_handoff(&fit(&TrainConfig { attention: scheme, ..cfg.train.clone() })?, &eval_data, &cfg.infer)?
        };
        entry("attention", to_json_key(&scheme), m);
    }
    for mode in [DynamicConvMode::Still, DynamicConvMode::Temporal] {
        let m = if mode == cfg.train.dynamic_conv {
            base_metrics
        } else {
            progress(&format!("dynamic_conv {}", to_json_key(&mode)));
            eval_handoff(&fit(&TrainConfig { dynamic_conv: mode, ..cfg.train.clone() })?, &eval_data, &cfg.infer)?
        };
        entry("dynamic_conv", to_json_key(&mode), m);
    }
    for mode in [QueryMode::Shared, QueryMode::PerFrame] {
        let m = if mode == cfg.train.query_mode {
            base_metrics
        } else {
            progress(&format!("query_mode {}", to_json_key(&mode)));
            eval_handoff(&fit(&TrainConfig { query_mode: mode, ..cfg.train.clone() })?, &eval_data, &cfg.infer)?
        };
        entry("query_mode", to_json_key(&mode), m);
    }
    progress("linking");
    entry("linking", "query_handoff".into(), base_metrics);
    entry("linking", "handcrafted".into(), eval_linked(&base, &eval_data, &cfg.infer, &cfg.link)?);
    for &s in &cfg.eval_strides {
        progress(&format!("stride {s}"));
        entry("stride", s.to_string(), eval_handoff(&base, &eval_data.subsample(s), &cfg.infer)?);
    }
    Ok(report)
}
