//! Deterministic moving-shapes videos with exact per-frame instance masks.

mod io;
mod render;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{BoxCorners, Tensor};

pub use io::{load_dataset, read_pgm, read_ppm, save_dataset, write_pgm, write_ppm};
pub use render::{Scene, SceneObject};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("frame {h}x{w} is too small for shapes of radius {radius}")]
    FrameTooSmall { h: usize, w: usize, radius: f64 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
}

impl ShapeClass {
    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shape_classes: Vec<ShapeClass>,
    /// Speed range in pixels per frame.
    pub velocity_range: [f64; 2],
    /// Shape half-extent range in pixels.
    pub radius_range: [f64; 2],
    pub occlusion_allowed: bool,
    /// Probability that an object enters late or leaves early.
    pub appear_disappear_prob: f64,
    /// Standard deviation of the per-frame colour noise, in 0..255 units.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_videos: 8,
            frames_per_video: 16,
            frame_h: 64,
            frame_w: 64,
            min_objects: 2,
            max_objects: 4,
            shape_classes: vec![ShapeClass::Disk, ShapeClass::Square, ShapeClass::Triangle],
            velocity_range: [1.0, 3.0],
            radius_range: [5.0, 10.0],
            occlusion_allowed: true,
            appear_disappear_prob: 0.3,
            color_jitter: 8.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if self.max_objects < 1 || self.max_objects > 254 {
            return bad("max_objects must be in 1..=254");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if self.frames_per_video < 1 {
            return bad("frames_per_video must be at least 1");
        }
        if self.shape_classes.is_empty() {
            return bad("shape_classes is empty");
        }
        if !(0.0..=1.0).contains(&self.appear_disappear_prob) {
            return bad("appear_disappear_prob must be in [0, 1]");
        }
        let [v0, v1] = self.velocity_range;
        let [r0, r1] = self.radius_range;
        if !(v0 >= 0.0 && v0 <= v1) || !(r0 > 0.0 && r0 <= r1) || self.color_jitter < 0.0 {
            return bad("ranges must be ordered and nonnegative");
        }
        if 2.0 * r1 > self.frame_h.min(self.frame_w) as f64 {
            return Err(SynthError::FrameTooSmall { h: self.frame_h, w: self.frame_w, radius: r1 });
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.shape_classes.iter().map(|c| c.name().to_string()).collect()
    }
}

/// Annotation of one instance over a video. The mask of frame `t` is the set of
/// pixels whose id-map value is the tracklet's index + 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTracklet {
    pub instance_id: u32,
    /// `None` when the instance has no visible pixel.
    pub class_per_frame: Vec<Option<usize>>,
    /// Tight pixel-edge box `(x1, y1, x2, y2)` of the mask; `None` with the class.
    pub box_per_frame: Vec<Option<BoxCorners>>,
}

impl GroundTruthTracklet {
    pub fn is_visible(&self, t: usize) -> bool {
        self.class_per_frame[t].is_some()
    }

    pub fn visible_frames(&self) -> usize {
        self.class_per_frame.iter().filter(|c| c.is_some()).count()
    }

    /// Most frequent visible class.
    pub fn video_class(&self) -> Option<usize> {
        let mut counts = std::collections::BTreeMap::new();
        for c in self.class_per_frame.iter().flatten() {
            *counts.entry(*c).or_insert(0usize) += 1;
        }
        counts.into_iter().max_by_key(|&(c, n)| (n, std::cmp::Reverse(c))).map(|(c, _)| c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub index: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    /// RGB bytes per frame, row-major `H*W*3`.
    pub frames: Vec<Vec<u8>>,
    /// Instance id map per frame: 0 background, `k + 1` tracklet `k`.
    pub ids: Vec<Vec<u8>>,
    pub tracklets: Vec<GroundTruthTracklet>,
}

/// Class and tight box per frame for each id value `k + 1`.
pub fn extract_tracklets(
    ids: &[Vec<u8>],
    frame_w: usize,
    labels: &[usize],
    instance_ids: &[u32],
) -> Vec<GroundTruthTracklet> {
    let n = labels.len();
    let mut out: Vec<GroundTruthTracklet> = (0..n)
        .map(|k| GroundTruthTracklet {
            instance_id: instance_ids[k],
            class_per_frame: Vec::with_capacity(ids.len()),
            box_per_frame: Vec::with_capacity(ids.len()),
        })
        .collect();
    for map in ids {
        let mut bounds = vec![[usize::MAX, usize::MAX, 0, 0]; n];
        let mut seen = vec![false; n];
        for (p, &id) in map.iter().enumerate() {
            if id == 0 || id as usize > n {
                continue;
            }
            let k = id as usize - 1;
            let (x, y) = (p % frame_w, p / frame_w);
            let b = &mut bounds[k];
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x + 1);
            b[3] = b[3].max(y + 1);
            seen[k] = true;
        }
        for k in 0..n {
            let b = bounds[k];
            out[k].class_per_frame.push(seen[k].then_some(labels[k]));
            out[k].box_per_frame.push(
                seen[k].then(|| [b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64]),
            );
        }
    }
    out
}

impl Video {
    pub fn from_id_maps(
        index: usize,
        frame_h: usize,
        frame_w: usize,
        frames: Vec<Vec<u8>>,
        ids: Vec<Vec<u8>>,
        labels: &[usize],
        instance_ids: &[u32],
    ) -> Self {
        let tracklets = extract_tracklets(&ids, frame_w, labels, instance_ids);
        Self { index, frame_h, frame_w, frames, ids, tracklets }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Binary mask of tracklet `k` at frame `t`.
    pub fn mask(&self, k: usize, t: usize) -> Vec<bool> {
        let v = (k + 1) as u8;
        self.ids[t].iter().map(|&id| id == v).collect()
    }

    /// Frames `range` as `[T, H, W, 3]` values in `[0, 1]`.
    pub fn frames_tensor(&self, range: std::ops::Range<usize>) -> Tensor {
        self.frames_tensor_at(&range.collect::<Vec<_>>())
    }

    /// The listed frames as `[T, H, W, 3]` values in `[0, 1]`.
    pub fn frames_tensor_at(&self, frames: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(frames.len() * self.frame_h * self.frame_w * 3);
        for &t in frames {
            data.extend(self.frames[t].iter().map(|&b| b as f64 / 255.0));
        }
        Tensor::new(vec![frames.len(), self.frame_h, self.frame_w, 3], data)
            .expect("frame buffer matches its size")
    }

    /// Keeps the listed frames, in order. Tracklet indices and ids are unchanged.
    pub fn select_frames(&self, keep: &[usize]) -> Video {
        Video {
            index: self.index,
            frame_h: self.frame_h,
            frame_w: self.frame_w,
            frames: keep.iter().map(|&t| self.frames[t].clone()).collect(),
            ids: keep.iter().map(|&t| self.ids[t].clone()).collect(),
            tracklets: self
                .tracklets
                .iter()
                .map(|tr| GroundTruthTracklet {
                    instance_id: tr.instance_id,
                    class_per_frame: keep.iter().map(|&t| tr.class_per_frame[t]).collect(),
                    box_per_frame: keep.iter().map(|&t| tr.box_per_frame[t]).collect(),
                })
                .collect(),
        }
    }

    /// Keeps frames `0, s, 2s, ...`.
    pub fn subsample(&self, stride: usize) -> Video {
        assert!(stride >= 1, "stride must be at least 1");
        let keep: Vec<usize> = (0..self.num_frames()).step_by(stride).collect();
        self.select_frames(&keep)
    }

    /// Frames `start..end` as a standalone video.
    pub fn clip(&self, start: usize, end: usize) -> Video {
        let keep: Vec<usize> = (start..end).collect();
        self.select_frames(&keep)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoDataset {
    pub config: SceneConfig,
    pub class_names: Vec<String>,
    pub videos: Vec<Video>,
}

impl VideoDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn subsample(&self, stride: usize) -> VideoDataset {
        VideoDataset {
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            videos: self.videos.iter().map(|v| v.subsample(stride)).collect(),
        }
    }
}

const BACKGROUND: [f64; 3] = [24.0, 24.0, 24.0];

fn sample_object(cfg: &SceneConfig, rng: &mut ChaCha8Rng, id: u32) -> SceneObject {
    let label = rng.gen_range(0..cfg.shape_classes.len());
    let [r0, r1] = cfg.radius_range;
    let radius = if r1 > r0 { rng.gen_range(r0..=r1) } else { r0 };
    let (w, h) = (cfg.frame_w as f64, cfg.frame_h as f64);
    let start = [rng.gen_range(radius..=w - radius), rng.gen_range(radius..=h - radius)];
    let [v0, v1] = cfg.velocity_range;
    let speed = if v1 > v0 { rng.gen_range(v0..=v1) } else { v0 };
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let color = [(); 3].map(|_| rng.gen_range(70.0..=240.0));
    let f = cfg.frames_per_video;
    let mut visible = (0, f);
    if f >= 2 && rng.gen_bool(cfg.appear_disappear_prob) {
        if rng.gen_bool(0.5) {
            visible.0 = rng.gen_range(1..=f / 2);
        } else {
            visible.1 = rng.gen_range(f.div_ceil(2)..f);
        }
    }
    SceneObject {
        instance_id: id,
        class: cfg.shape_classes[label],
        label,
        radius,
        start,
        velocity: [speed * angle.cos(), speed * angle.sin()],
        color,
        visible,
    }
}

/// Conservative overlap test on bounding circles over all shared visible frames.
fn ever_overlap(a: &SceneObject, b: &SceneObject, cfg: &SceneConfig) -> bool {
    let reach = (a.radius + b.radius) * std::f64::consts::SQRT_2;
    (0..cfg.frames_per_video).any(|t| {
        if !(a.is_visible(t) && b.is_visible(t)) {
            return false;
        }
        let (ca, cb) = (a.center(t, cfg.frame_h, cfg.frame_w), b.center(t, cfg.frame_h, cfg.frame_w));
        (ca[0] - cb[0]).hypot(ca[1] - cb[1]) < reach
    })
}

/// Scene of video `index`, seeded by `seed + index`.
pub fn generate_scene(cfg: &SceneConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index as u64));
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for k in 0..n {
        let mut obj = sample_object(cfg, &mut rng, k as u32);
        if !cfg.occlusion_allowed {
            let mut tries = 0;
            while objects.iter().any(|o| ever_overlap(o, &obj, cfg)) {
                tries += 1;
                if tries > 1000 {
                    return Err(SynthError::Config(format!(
                        "cannot place {n} non-overlapping objects in video {index}"
                    )));
                }
                obj = sample_object(cfg, &mut rng, k as u32);
            }
        }
        objects.push(obj);
    }
    let jitter = if cfg.color_jitter > 0.0 {
        let noise = Normal::new(0.0, cfg.color_jitter).expect("jitter is finite");
        (0..cfg.frames_per_video)
            .map(|_| (0..n).map(|_| [(); 3].map(|_| noise.sample(&mut rng))).collect())
            .collect()
    } else {
        vec![vec![[0.0; 3]; n]; cfg.frames_per_video]
    };
    let mut scene = Scene {
        frame_h: cfg.frame_h,
        frame_w: cfg.frame_w,
        num_frames: cfg.frames_per_video,
        background: BACKGROUND,
        objects,
        jitter,
    };
    // objects hidden behind others in every frame carry no annotation
    let hidden: Vec<bool> = {
        let video = scene.render(index);
        video.tracklets.iter().map(|t| t.visible_frames() == 0).collect()
    };
    if hidden.iter().any(|&h| h) {
        let keep: Vec<usize> = (0..n).filter(|&k| !hidden[k]).collect();
        scene.objects = keep.iter().map(|&k| scene.objects[k].clone()).collect();
        scene.jitter = scene.jitter.iter().map(|row| keep.iter().map(|&k| row[k]).collect()).collect();
    }
    Ok(scene)
}

pub fn generate_video(cfg: &SceneConfig, index: usize) -> Result<Video> {
    Ok(generate_scene(cfg, index)?.render(index))
}

pub fn generate_dataset(cfg: &SceneConfig) -> Result<VideoDataset> {
    cfg.validate()?;
    let videos = (0..cfg.num_videos).map(|i| generate_video(cfg, i)).collect::<Result<_>>()?;
    Ok(VideoDataset { config: cfg.clone(), class_names: cfg.class_names(), videos })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        SceneConfig::default().validate().unwrap();
    }

    #[test]
    fn too_small_frame_is_rejected() {
        let cfg = SceneConfig { frame_h: 16, frame_w: 16, ..Default::default() };
        assert!(matches!(generate_dataset(&cfg), Err(SynthError::FrameTooSmall { .. })));
    }

    #[test]
    fn bad_probability_is_rejected() {
        let cfg = SceneConfig { appear_disappear_prob: 1.5, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(SynthError::Config(_))));
    }

    #[test]
    fn subsample_examples() {
        let cfg = SceneConfig { num_videos: 1, frames_per_video: 10, ..Default::default() };
        let v = generate_video(&cfg, 0).unwrap();
        assert_eq!(v.subsample(1), v);
        let s = v.subsample(2);
        assert_eq!(s.num_frames(), 5);
        for (i, t) in [0, 2, 4, 6, 8].into_iter().enumerate() {
            assert_eq!(s.frames[i], v.frames[t]);
        }
        let ids = |v: &Video| v.tracklets.iter().map(|t| t.instance_id).collect::<Vec<_>>();
        assert_eq!(ids(&s), ids(&v));
    }

    #[test]
    fn no_occlusion_keeps_masks_whole() {
        let cfg = SceneConfig {
            occlusion_allowed: false,
            appear_disappear_prob: 0.0,
            min_objects: 2,
            max_objects: 2,
            radius_range: [4.0, 4.0],
            shape_classes: vec![ShapeClass::Square],
            ..Default::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for v in &ds.videos {
            for k in 0..v.tracklets.len() {
                for t in 0..v.num_frames() {
                    let area = v.mask(k, t).iter().filter(|&&m| m).count();
                    assert!((49..=81).contains(&area), "area {area}");
                }
            }
        }
    }
}
