use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GroundTruthTracklet, Result, SceneConfig, SynthError, Video, VideoDataset};

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: SceneConfig,
    class_names: Vec<String>,
    videos: Vec<VideoEntry>,
}

#[derive(Serialize, Deserialize)]
struct VideoEntry {
    index: usize,
    frame_h: usize,
    frame_w: usize,
    num_frames: usize,
    frames: Vec<String>,
    ids: Vec<String>,
    tracklets: Vec<GroundTruthTracklet>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> SynthError {
    SynthError::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn netpbm_header(magic: &str, w: usize, h: usize) -> String {
    format!("{magic}\n{w} {h}\n255\n")
}

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, channels: usize, data: &[u8]) -> Result<()> {
    if data.len() != w * h * channels {
        return Err(format_err(path, format!("expected {} bytes of pixels, got {}", w * h * channels, data.len())));
    }
    let mut bytes = netpbm_header(magic, w, h).into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes a binary RGB PPM (P6).
pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    write_netpbm(path, "P6", w, h, 3, rgb)
}

/// Writes a binary greyscale PGM (P5).
pub fn write_pgm(path: &Path, w: usize, h: usize, grey: &[u8]) -> Result<()> {
    write_netpbm(path, "P5", w, h, 1, grey)
}

/// Parses `magic w h 255` followed by one whitespace byte and raw pixels.
fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != magic {
        return Err(format_err(path, format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format_err(path, format!("unsupported maxval {max}")));
    }
    let want = pos + w * h * channels;
    if bytes.len() != want {
        return Err(format_err(path, format!("expected {want} bytes, found {}", bytes.len())));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P6", 3)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P5", 1)
}

/// Writes `manifest.json`, `frames/v{i}_f{t}.ppm` and `ids/v{i}_f{t}.pgm` under `dir`.
pub fn save_dataset(dir: &Path, ds: &VideoDataset) -> Result<()> {
    for sub in ["frames", "ids"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut entries = Vec::with_capacity(ds.videos.len());
    for v in &ds.videos {
        let (mut frames, mut ids) = (Vec::new(), Vec::new());
        for t in 0..v.num_frames() {
            let f = format!("frames/v{}_f{t}.ppm", v.index);
            let i = format!("ids/v{}_f{t}.pgm", v.index);
            write_ppm(&dir.join(&f), v.frame_w, v.frame_h, &v.frames[t])?;
            write_pgm(&dir.join(&i), v.frame_w, v.frame_h, &v.ids[t])?;
            frames.push(f);
            ids.push(i);
        }
        entries.push(VideoEntry {
            index: v.index,
            frame_h: v.frame_h,
            frame_w: v.frame_w,
            num_frames: v.num_frames(),
            frames,
            ids,
            tracklets: v.tracklets.clone(),
        });
    }
    let manifest = Manifest { config: ds.config.clone(), class_names: ds.class_names.clone(), videos: entries };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))
}

fn check_size(path: &Path, got: (usize, usize), e: &VideoEntry) -> Result<()> {
    if got != (e.frame_w, e.frame_h) {
        return Err(format_err(path, format!("size {}x{} does not match manifest {}x{}", got.0, got.1, e.frame_w, e.frame_h)));
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<VideoDataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for e in manifest.videos {
        if e.frames.len() != e.num_frames || e.ids.len() != e.num_frames {
            return Err(format_err(&path, format!("video {} lists the wrong number of files", e.index)));
        }
        if e.tracklets.iter().any(|t| t.class_per_frame.len() != e.num_frames || t.box_per_frame.len() != e.num_frames) {
            return Err(format_err(&path, format!("video {} has tracklets of the wrong length", e.index)));
        }
        let (mut frames, mut ids) = (Vec::new(), Vec::new());
        for (f, i) in e.frames.iter().zip(&e.ids) {
            let (fp, ip): (PathBuf, PathBuf) = (dir.join(f), dir.join(i));
            let (w, h, rgb) = read_ppm(&fp)?;
            check_size(&fp, (w, h), &e)?;
            let (w, h, map) = read_pgm(&ip)?;
            check_size(&ip, (w, h), &e)?;
            frames.push(rgb);
            ids.push(map);
        }
        videos.push(Video {
            index: e.index,
            frame_h: e.frame_h,
            frame_w: e.frame_w,
            frames,
            ids,
            tracklets: e.tracklets,
        });
    }
    Ok(VideoDataset { config: manifest.config, class_names: manifest.class_names, videos })
}
