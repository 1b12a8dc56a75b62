use std::fs;
use std::path::{Path, PathBuf};

use super::{PipelineError, Result, VideoPredictions};
use crate::synthvideo::{write_ppm, Video};

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

const ALPHA: f64 = 0.5;

/// Fixed color of an identity.
pub fn identity_color(identity: usize) -> [u8; 3] {
    PALETTE[identity % PALETTE.len()]
}

fn outline(rgb: &mut [u8], w: usize, h: usize, b: [f64; 4], color: [u8; 3]) {
    let clamp = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi - 1);
    let (x1, y1, x2, y2) = (clamp(b[0], w), clamp(b[1], h), clamp(b[2] - 1.0, w), clamp(b[3] - 1.0, h));
    let mut put = |x: usize, y: usize| rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
    for x in x1..=x2.max(x1) {
        put(x, y1);
        put(x, y2.max(y1));
    }
    for y in y1..=y2.max(y1) {
        put(x1, y);
        put(x2.max(x1), y);
    }
}

/// Writes `frame_XXXX.ppm` per frame into `out_dir`: each identity's mask
/// blended in its color, plus its box outline where the mask is non-empty.
pub fn render_overlays(video: &Video, preds: &VideoPredictions, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if preds.num_frames != video.num_frames() || preds.frame_h != video.frame_h || preds.frame_w != video.frame_w {
        return Err(PipelineError::Shape("predictions do not match the video".into()));
    }
    fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io { path: out_dir.to_path_buf(), source })?;
    let (h, w) = (video.frame_h, video.frame_w);
    let mut paths = Vec::with_capacity(video.num_frames());
    for t in 0..video.num_frames() {
        let mut rgb = video.frames[t].clone();
        for inst in &preds.instances {
            let color = identity_color(inst.identity);
            let mask = &inst.masks[t];
            if !mask.iter().any(|&m| m) {
                continue;
            }
            for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                for ch in 0..3 {
                    let v = &mut rgb[p * 3 + ch];
                    *v = ((1.0 - ALPHA) * *v as f64 + ALPHA * color[ch] as f64).round() as u8;
                }
            }
            if let Some(b) = inst.boxes[t] {
                outline(&mut rgb, w, h, b, color);
            }
        }
        let path = out_dir.join(format!("frame_{t:04}.ppm"));
        write_ppm(&path, w, h, &rgb)?;
        paths.push(path);
    }
    Ok(paths)
}
