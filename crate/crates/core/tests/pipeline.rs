use std::process::Command;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackletvis::architecture::{ClipPredictions, Model};
use trackletvis::diagnostics::tiny_model_config;
use trackletvis::numerics::Tensor;
use trackletvis::pipeline::{
    evaluate, handcrafted_link_baseline, handoff_queries, identity_color, identity_continuity, infer_clips,
    infer_video, infer_video_traced, link_affinity, render_overlays, video_iou, ClipResult, InferConfig, LinkConfig,
    PipelineError, VideoInstance, VideoPredictions,
};
use trackletvis::synthvideo::{generate_video, SceneConfig, Video};

/// A video of `frames` 4×4 frames whose tracklet `k` covers `pixels[k]` in every frame.
fn video(index: usize, frames: usize, pixels: &[&[usize]], labels: &[usize]) -> Video {
    let mut ids = vec![0u8; 16];
    for (k, px) in pixels.iter().enumerate() {
        for &p in *px {
            ids[p] = k as u8 + 1;
        }
    }
    let instance_ids: Vec<u32> = (0..labels.len() as u32).collect();
    Video::from_id_maps(index, 4, 4, vec![vec![0u8; 48]; frames], vec![ids; frames], labels, &instance_ids)
}

fn instance(identity: usize, class: usize, score: f64, frames: usize, pixels: &[usize]) -> VideoInstance {
    let mask: Vec<bool> = (0..16).map(|p| pixels.contains(&p)).collect();
    VideoInstance {
        identity,
        slot: identity,
        first_frame: 0,
        last_frame: frames,
        class,
        score,
        masks: vec![mask; frames],
        boxes: vec![Some([0.0, 0.0, 4.0, 4.0]); frames],
    }
}

fn preds(video: usize, frames: usize, instances: Vec<VideoInstance>) -> VideoPredictions {
    VideoPredictions { video, frame_h: 4, frame_w: 4, num_frames: frames, instances }
}

const GT: &[usize] = &[0, 1, 2, 3, 4];

#[test]
fn perfect_prediction_scores_one_everywhere() {
    let v = video(0, 2, &[GT], &[1]);
    let m = evaluate(&[preds(0, 2, vec![instance(0, 1, 0.9, 2, GT)])], &[v]).unwrap();
    assert_eq!((m.ap, m.ap50, m.ap75, m.ar1, m.ar10), (1.0, 1.0, 1.0, 1.0, 1.0));
    assert_eq!(m.identity_continuity, 1.0);
}

#[test]
fn tube_iou_of_three_fifths_passes_three_thresholds() {
    let v = video(0, 2, &[GT], &[1]);
    let p = instance(0, 1, 0.9, 2, &[0, 1, 2]);
    let tube = vec![v.mask(0, 0), v.mask(0, 1)];
    assert!((video_iou(&p.masks, &tube).unwrap() - 0.6).abs() < 1e-12);
    let m = evaluate(&[preds(0, 2, vec![p])], &[v]).unwrap();
    assert!((m.ap - 0.3).abs() < 1e-12);
    assert_eq!((m.ap50, m.ap75), (1.0, 0.0));
    assert!((m.ar1 - 0.3).abs() < 1e-12);
}

#[test]
fn duplicate_of_a_matched_ground_truth_is_a_false_positive() {
    let v0 = video(0, 1, &[GT], &[0]);
    let v1 = video(1, 1, &[&[8, 9]], &[0]);
    let p0 = preds(0, 1, vec![instance(0, 0, 0.9, 1, GT), instance(1, 0, 0.8, 1, GT)]);
    let p1 = preds(1, 1, vec![instance(0, 0, 0.7, 1, &[8, 9])]);
    let m = evaluate(&[p0.clone(), p1], &[v0.clone(), v1]).unwrap();
    // TP, FP, TP over two ground truths
    let want = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    assert!((m.ap50 - want).abs() < 1e-12);
    assert_eq!(m.ar10, 1.0);
    let alone = evaluate(&[p0], &[v0]).unwrap();
    assert_eq!((alone.ap, alone.ar1), (1.0, 1.0));
}

#[test]
fn wrong_class_never_matches() {
    let v = video(0, 2, &[GT], &[1]);
    let m = evaluate(&[preds(0, 2, vec![instance(0, 2, 0.9, 2, GT)])], &[v]).unwrap();
    assert_eq!((m.ap, m.ar10), (0.0, 0.0));
}

#[test]
fn evaluate_rejects_mismatched_inputs() {
    let v = video(0, 2, &[GT], &[1]);
    assert!(matches!(evaluate(&[], std::slice::from_ref(&v)), Err(PipelineError::Shape(_))));
    assert!(evaluate(&[preds(0, 3, vec![])], &[v]).is_err());
}

fn random_case(seed: u64) -> (Vec<VideoPredictions>, Vec<Video>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = Vec::new();
    let mut vs = Vec::new();
    for vi in 0..3 {
        let a: Vec<usize> = (0..16).filter(|_| r.gen_bool(0.3)).collect();
        let b: Vec<usize> = (0..16).filter(|p| !a.contains(p) && r.gen_bool(0.5)).collect();
        vs.push(video(vi, 2, &[&a, &b], &[r.gen_range(0..2), r.gen_range(0..2)]));
        let instances = (0..4)
            .map(|k| {
                let px: Vec<usize> = (0..16).filter(|_| r.gen_bool(0.4)).collect();
                instance(k, r.gen_range(0..2), r.gen_range(0.0..1.0), 2, &px)
            })
            .collect();
        ps.push(preds(vi, 2, instances));
    }
    (ps, vs)
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_order_invariant(seed in 0u64..300) {
        let (ps, vs) = random_case(seed);
        let m = evaluate(&ps, &vs).unwrap();
        for v in [m.ap, m.ap50, m.ap75, m.ar1, m.ar10, m.identity_continuity] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.ap <= m.ap50 + 1e-12);
        prop_assert!(m.ap75 <= m.ap50 + 1e-12);
        prop_assert!(m.ar1 <= m.ar10 + 1e-12);
        let mut shuffled = ps.clone();
        for p in &mut shuffled {
            p.instances.reverse();
        }
        shuffled.reverse();
        let mut vs_rev = vs.clone();
        vs_rev.reverse();
        prop_assert_eq!(evaluate(&shuffled, &vs_rev).unwrap(), m);
    }

    #[test]
    fn video_iou_is_symmetric(seed in 0u64..300) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Vec<bool>> = (0..3).map(|_| (0..9).map(|_| r.gen_bool(0.5)).collect()).collect();
        let b: Vec<Vec<bool>> = (0..3).map(|_| (0..9).map(|_| r.gen_bool(0.5)).collect()).collect();
        let (x, y) = (video_iou(&a, &b).unwrap(), video_iou(&b, &a).unwrap());
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
    }
}

#[test]
fn identity_continuity_counts_identity_switches_between_halves() {
    let v = video(0, 4, &[GT], &[1]);
    let mut split = preds(0, 4, vec![instance(0, 1, 0.9, 4, GT), instance(1, 1, 0.8, 4, GT)]);
    for t in 0..2 {
        split.instances[1].masks[t] = vec![false; 16];
    }
    for t in 2..4 {
        split.instances[0].masks[t] = vec![false; 16];
    }
    assert_eq!(identity_continuity(&[split], std::slice::from_ref(&v)).unwrap(), 0.0);
    let kept = preds(0, 4, vec![instance(0, 1, 0.9, 4, GT)]);
    assert_eq!(identity_continuity(&[kept], &[v]).unwrap(), 1.0);
}

fn small_model(seed: u64) -> Model {
    Model::new(tiny_model_config(), seed).unwrap()
}

fn synthetic(frames: usize, seed: u64) -> Video {
    let cfg = SceneConfig { frames_per_video: frames, frame_h: 16, frame_w: 16, radius_range: [2.0, 4.0], seed, ..SceneConfig::default() };
    generate_video(&cfg, 0).unwrap()
}

#[test]
fn short_video_runs_as_one_clip_at_its_true_length() {
    let model = small_model(1);
    let v = synthetic(3, 2);
    let run = infer_video_traced(&model, &v, &InferConfig { clip_len: 8, reinit_after: 2 }).unwrap();
    assert_eq!(run.clips.len(), 1);
    assert_eq!((run.clips[0].start, run.clips[0].len), (0, 3));
    assert_eq!(run.predictions.num_frames, 3);
    assert_eq!(run.predictions.instances.len(), model.config.queries);
    for inst in &run.predictions.instances {
        assert_eq!(inst.masks.len(), 3);
        assert!(inst.class < model.config.num_classes);
    }
}

#[test]
fn empty_video_is_an_error() {
    let model = small_model(3);
    let v = synthetic(4, 4).clip(0, 0);
    assert!(matches!(infer_video(&model, &v, &InferConfig::default()), Err(PipelineError::EmptyVideo)));
    assert!(matches!(infer_clips(&model, &v, 8), Err(PipelineError::EmptyVideo)));
}

#[test]
fn later_clips_start_from_the_time_mean_of_the_previous_clip() {
    let model = small_model(5);
    let v = synthetic(7, 6);
    let run = infer_video_traced(&model, &v, &InferConfig { clip_len: 3, reinit_after: 100 }).unwrap();
    let bounds: Vec<_> = run.clips.iter().map(|c| (c.start, c.len)).collect();
    assert_eq!(bounds, vec![(0, 3), (3, 3), (6, 1)]);
    // the first clip runs from the initial state, as every clip does in infer_clips
    let alone = infer_clips(&model, &v, 3).unwrap();
    let init = model.params.get("init.query").unwrap();
    let expect = handoff_queries(&alone[0].predictions.queries, init, &[false; 3], 3);
    assert_eq!(run.clips[1].input_queries, expect);
    assert_eq!(run.clips[2].input_queries.shape(), [3, 1, 8]);
    // one identity per slot over the whole video
    assert_eq!(run.predictions.instances.len(), 3);
    for inst in &run.predictions.instances {
        assert_eq!((inst.first_frame, inst.last_frame), (0, 7));
    }
}

#[test]
fn slot_predicting_background_twice_restarts_from_the_initial_query() {
    let mut model = small_model(7);
    let last = model.config.iterations - 1;
    let bias = model.params.get_mut(&format!("it{last}.cls.b")).unwrap();
    bias.data_mut()[3] = 100.0;
    let v = synthetic(10, 8);
    let run = infer_video_traced(&model, &v, &InferConfig { clip_len: 2, reinit_after: 2 }).unwrap();
    let init = model.params.get("init.query").unwrap();
    let fresh = handoff_queries(&Tensor::zeros(&[3, 1, 8]), init, &[true; 3], 2);
    assert_eq!(run.clips.len(), 5);
    assert!(run.clips.iter().all(|c| c.background.iter().all(|&b| b)));
    assert_eq!(run.clips[0].input_queries, fresh);
    assert_ne!(run.clips[1].input_queries, fresh);
    assert!(run.clips[1].reinitialised.iter().all(|&r| !r));
    assert_eq!(run.clips[2].input_queries, fresh);
    assert!(run.clips[2].reinitialised.iter().all(|&r| r));
    assert_ne!(run.clips[3].input_queries, fresh);
    assert_eq!(run.clips[4].input_queries, fresh);
    assert_eq!(run.clips[2].identities, vec![3, 4, 5]);
    assert_eq!(run.predictions.instances.len(), 9);
    let spans: Vec<_> = run.predictions.instances.iter().map(|i| (i.first_frame, i.last_frame)).collect();
    assert_eq!(&spans[..3], &[(0, 4); 3]);
    assert_eq!(&spans[6..], &[(8, 10); 3]);
}

/// One-frame clips of 4×4 frames with one slot per entry `(class, box, mask pixels)`.
fn clip(start: usize, slots: &[(usize, [f64; 4], &[usize])]) -> ClipResult {
    let n = slots.len();
    let mut probs = vec![0.0; n * 4];
    let mut boxes = Vec::new();
    let mut masks = vec![0.0; n * 16];
    for (i, (c, b, px)) in slots.iter().enumerate() {
        probs[i * 4 + c] = 1.0;
        boxes.extend_from_slice(b);
        for &p in *px {
            masks[i * 16 + p] = 1.0;
        }
    }
    ClipResult {
        start,
        predictions: ClipPredictions {
            class_probs: Tensor::new(vec![n, 1, 4], probs).unwrap(),
            boxes: Tensor::new(vec![n, 1, 4], boxes).unwrap(),
            masks: Tensor::new(vec![n, 1, 4, 4], masks).unwrap(),
            queries: Tensor::zeros(&[n, 1, 2]),
        },
    }
}

#[test]
fn identical_boundary_predictions_are_linked_across_slot_swaps() {
    let a = (0, [0.0, 0.0, 2.0, 2.0], &[0usize, 1, 4, 5][..]);
    let b = (1, [2.0, 2.0, 4.0, 4.0], &[10usize, 11, 14, 15][..]);
    let first = clip(0, &[a, b]);
    let second = clip(1, &[b, a]);
    let cfg = LinkConfig::default();
    assert!((link_affinity(&first, 0, &second, 1, &cfg) - 3.0).abs() < 1e-12);
    let out = handcrafted_link_baseline(0, &[first, second], &cfg).unwrap();
    assert_eq!(out.instances.len(), 2);
    assert_eq!(out.num_frames, 2);
    let first_id = &out.instances[0];
    assert_eq!(first_id.masks[0], first_id.masks[1]);
    assert_eq!((first_id.class, first_id.slot), (0, 1));
}

#[test]
fn disjoint_predictions_of_different_classes_start_new_identities() {
    let first = clip(0, &[(0, [0.0, 0.0, 1.0, 1.0], &[0])]);
    let second = clip(1, &[(2, [3.0, 3.0, 4.0, 4.0], &[15])]);
    let cfg = LinkConfig::default();
    assert!(link_affinity(&first, 0, &second, 0, &cfg) < cfg.threshold);
    let out = handcrafted_link_baseline(0, &[first, second], &cfg).unwrap();
    assert_eq!(out.instances.len(), 2);
    assert_eq!((out.instances[0].first_frame, out.instances[0].last_frame), (0, 1));
    assert_eq!((out.instances[1].first_frame, out.instances[1].last_frame), (1, 2));
    assert_eq!(out.instances[1].class, 2);
}

fn read_ppm(path: &std::path::Path) -> (usize, usize, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap();
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P6");
    assert_eq!(fields[3], "255");
    let (w, h) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    let data = bytes[pos + 1..].to_vec();
    assert_eq!(data.len(), w * h * 3);
    (w, h, data)
}

#[test]
fn overlays_are_one_ppm_per_frame_with_fixed_identity_colors() {
    let v = video(0, 3, &[GT], &[1]);
    let p = preds(0, 3, vec![instance(12, 1, 0.9, 3, &[5, 6])]);
    let dir = tempfile::tempdir().unwrap();
    let paths = render_overlays(&v, &p, dir.path()).unwrap();
    assert_eq!(paths.len(), 3);
    let color = identity_color(12);
    assert_eq!(color, identity_color(2));
    assert_ne!(identity_color(0), identity_color(1));
    for path in &paths {
        let (w, h, rgb) = read_ppm(path);
        assert_eq!((w, h), (4, 4));
        // pixel 5 is inside the mask and off the box outline: half frame (black), half color
        for ch in 0..3 {
            assert!((rgb[5 * 3 + ch] as f64 - color[ch] as f64 * 0.5).abs() <= 1.0);
        }
    }
    assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[2]).unwrap());
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(matches!(render_overlays(&v, &p, &blocker.join("sub")), Err(PipelineError::Io { .. })));
    assert!(render_overlays(&v, &preds(0, 2, vec![]), dir.path()).is_err());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trackletvis"))
}

#[test]
fn cli_exit_codes() {
    let status = cli().arg("no-such-command").output().unwrap().status;
    assert_eq!(status.code(), Some(2));
    let status = cli().args(["train", "/nonexistent/config.json"]).output().unwrap().status;
    assert_eq!(status.code(), Some(1));
}

#[test]
fn cli_gen_data_prints_json_and_writes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scene.json");
    std::fs::write(&cfg, r#"{"num_videos": 2, "frames_per_video": 3, "frame_h": 16, "frame_w": 16, "radius_range": [2, 4]}"#).unwrap();
    let out = dir.path().join("data");
    let run = cli().args(["--seed", "3", "gen-data"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let json: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(json["videos"], 2);
    let data = trackletvis::synthvideo::load_dataset(&out).unwrap();
    assert_eq!(data.videos.len(), 2);
    assert_eq!(data.config.seed, 3);
}
