use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use trackletvis::architecture::Model;
use trackletvis::diagnostics::gradient_suite;
use trackletvis::pipeline::{
    evaluate, handcrafted_link_baseline, infer_clips, infer_video, render_overlays, run_ablation, AblationConfig,
    InferConfig, LinkConfig, VideoPredictions,
};
use trackletvis::synthvideo::{generate_dataset, load_dataset, save_dataset, write_pgm, SceneConfig, VideoDataset};
use trackletvis::training::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "trackletvis", version, about = "Clip-level video instance segmentation on synthetic video")]
struct Cli {
    /// Seed for every random choice; overrides the seed in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Frames per clip; defaults to the clip length the model was trained with.
    #[arg(long)]
    clip_len: Option<usize>,
    /// Keep every n-th frame of each video.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 2)]
    reinit_after: usize,
    /// Link independently inferred clips by box/mask affinity instead of query handoff.
    #[arg(long)]
    handcrafted: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset described by a scene config.
    GenData {
        config: PathBuf,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a model from a training config and save the checkpoint it names.
    Train { config: PathBuf },
    /// Print video-level metrics of a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[command(flatten)]
        opts: EvalArgs,
    },
    /// Write per-video predictions and identity maps.
    Infer {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: EvalArgs,
    },
    /// Render prediction overlays for every video.
    Viz {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: EvalArgs,
    },
    /// Finite-difference check of every op and of the training loss.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Train and evaluate the ablation variants of a config.
    Ablate { config: PathBuf },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_model(path: &Path) -> Result<(Model, usize)> {
    let (model, extra) = Model::load(path).with_context(|| format!("loading {}", path.display()))?;
    let clip_len = extra["train"]["clip_len"].as_u64().unwrap_or(8) as usize;
    Ok((model, clip_len))
}

fn predict(model: &Model, data: &VideoDataset, clip_len: usize, opts: &EvalArgs) -> Result<Vec<VideoPredictions>> {
    let infer = InferConfig { clip_len, reinit_after: opts.reinit_after };
    let preds = data
        .videos
        .iter()
        .map(|v| {
            if opts.handcrafted {
                handcrafted_link_baseline(v.index, &infer_clips(model, v, clip_len)?, &LinkConfig::default())
            } else {
                infer_video(model, v, &infer)
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(preds)
}

fn prepare(checkpoint: &Path, dataset: &Path, opts: &EvalArgs) -> Result<(Model, VideoDataset, Vec<VideoPredictions>)> {
    let (model, trained_len) = load_model(checkpoint)?;
    if opts.stride == 0 {
        bail!("stride must be positive");
    }
    let data = load_dataset(dataset)?.subsample(opts.stride);
    let preds = predict(&model, &data, opts.clip_len.unwrap_or(trained_len), opts)?;
    Ok((model, data, preds))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let mut cfg: SceneConfig = read_json(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let data = generate_dataset(&cfg)?;
            save_dataset(&out, &data)?;
            print_json(&json!({ "videos": data.videos.len(), "out": out }))
        }
        Command::Train { config } => {
            let mut cfg: TrainConfig = read_json(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let data = load_dataset(&cfg.dataset)?;
            let mut last = 0.0;
            let model = train(&cfg, &data, |s| {
                last = s.loss;
                if (s.step + 1) % 100 == 0 {
                    eprintln!("step {} epoch {} lr {:.2e} loss {:.4}", s.step + 1, s.epoch, s.lr, s.loss);
                }
            })?;
            model.save(&cfg.checkpoint, json!({ "train": cfg, "class_names": data.class_names }))?;
            print_json(&json!({ "checkpoint": cfg.checkpoint, "final_loss": last }))
        }
        Command::Eval { checkpoint, dataset, opts } => {
            let (_, data, preds) = prepare(&checkpoint, &dataset, &opts)?;
            print_json(&evaluate(&preds, &data.videos)?)
        }
        Command::Infer { checkpoint, dataset, out, opts } => {
            let (_, data, preds) = prepare(&checkpoint, &dataset, &opts)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (p, v) in preds.iter().zip(&data.videos) {
                let dir = out.join(format!("video_{:03}", v.index));
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                // identity map per frame: 0 background, identity + 1 where its mask wins by score
                let mut order: Vec<usize> = (0..p.instances.len()).collect();
                order.sort_by(|&a, &b| p.instances[a].score.total_cmp(&p.instances[b].score));
                for t in 0..p.num_frames {
                    let mut ids = vec![0u8; p.frame_h * p.frame_w];
                    for &k in &order {
                        let inst = &p.instances[k];
                        for (px, _) in inst.masks[t].iter().enumerate().filter(|(_, &m)| m) {
                            ids[px] = (inst.identity + 1).min(255) as u8;
                        }
                    }
                    write_pgm(&dir.join(format!("ids_{t:04}.pgm")), p.frame_w, p.frame_h, &ids)?;
                }
                fs::write(dir.join("predictions.json"), serde_json::to_string_pretty(p)?)?;
            }
            print_json(&json!({ "videos": preds.len(), "out": out }))
        }
        Command::Viz { checkpoint, dataset, out, opts } => {
            let (_, data, preds) = prepare(&checkpoint, &dataset, &opts)?;
            let mut frames = 0;
            for (p, v) in preds.iter().zip(&data.videos) {
                frames += render_overlays(v, p, &out.join(format!("video_{:03}", v.index)))?.len();
            }
            print_json(&json!({ "frames": frames, "out": out }))
        }
        Command::GradCheck { seeds } => {
            let start = cli.seed.unwrap_or(0);
            let cases = gradient_suite(start..start + seeds)?;
            let failed: Vec<_> = cases.iter().filter(|c| !c.passed).collect();
            print_json(&json!({ "cases": cases.len(), "failed": failed }))?;
            if !failed.is_empty() {
                bail!("{} gradient checks failed", failed.len());
            }
            Ok(())
        }
        Command::Ablate { config } => {
            let mut cfg: AblationConfig = read_json(&config)?;
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            let report = run_ablation(&cfg, |stage| eprintln!("ablate: {stage}"))?;
            print_json(&report)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
