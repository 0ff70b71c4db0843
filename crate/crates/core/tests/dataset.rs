use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stvad_core::data::synth::{self, SynthConfig};
use stvad_core::data::{self, FrameSpec, Split};
use stvad_core::{Error, Tensor};

fn write_video(dir: &Path, frames: usize, base: u8) {
    fs::create_dir_all(dir).unwrap();
    for f in 0..frames {
        let img = GrayImage::from_fn(8, 8, |x, y| Luma([base.wrapping_add((x + 2 * y + 3 * f as u32) as u8)]));
        img.save(dir.join(format!("{f:03}.png"))).unwrap();
    }
}

fn write_labels(root: &Path, id: &str, labels: &[u8]) {
    let dir = root.join(data::LABELS_DIR);
    fs::create_dir_all(&dir).unwrap();
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    fs::write(dir.join(format!("{id}.csv")), text).unwrap();
}

fn fixture(root: &Path) {
    for id in ["01", "02"] {
        write_video(&root.join("train").join(id), 8, 10);
        write_video(&root.join("test").join(id), 8, 40);
    }
    write_labels(root, "01", &[0, 0, 0, 0, 1, 1, 0, 0]);
    write_labels(root, "02", &[0; 8]);
}

#[test]
fn loads_both_splits_in_id_order() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let train = data::load_dataset(dir.path(), Split::Train).unwrap();
    let ids: Vec<_> = train.videos.iter().map(|v| v.id.as_str()).collect();
    assert_eq!(ids, ["01", "02"]);
    assert!(train.videos.iter().all(|v| v.frames.len() == 8 && v.labels.is_none()));
    assert_eq!(train.frame_count(), 16);

    let test = data::load_dataset(dir.path(), Split::Test).unwrap();
    assert_eq!(test.videos[0].labels.as_deref(), Some(&[0, 0, 0, 0, 1, 1, 0, 0][..]));
    assert_eq!(test.videos[1].labels.as_deref(), Some(&[0u8; 8][..]));
}

#[test]
fn label_count_mismatch_names_the_video() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    write_labels(dir.path(), "02", &[0; 7]);
    let err = data::load_dataset(dir.path(), Split::Test).unwrap_err();
    assert!(err.to_string().contains("`02`"), "{err}");
}

#[test]
fn malformed_label_line_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    write_labels(dir.path(), "01", &[0, 0, 2, 0, 0, 0, 0, 0]);
    assert!(matches!(data::load_dataset(dir.path(), Split::Test), Err(Error::Dataset(_))));
}

#[test]
fn frames_are_normalized_to_unit_interval() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.png");
    GrayImage::from_fn(4, 4, |x, _| Luma([if x < 2 { 0 } else { 255 }])).save(&path).unwrap();
    let spec = FrameSpec {
        height: 4,
        width: 4,
        channels: 1,
    };
    let t = data::load_frame(&path, spec).unwrap();
    assert_eq!(t.shape(), &[4, 4, 1]);
    assert_eq!(t.data()[0], -1.0);
    assert_eq!(t.data()[3], 1.0);
}

fn ramp_video(frames: usize) -> Vec<Tensor> {
    (0..frames)
        .map(|f| Tensor::from_fn(&[2, 3, 1], |i| (f * f) as f64 * 0.01 + i as f64 * 0.1))
        .collect()
}

#[test]
fn clips_match_direct_recomputation() {
    let frames = ramp_video(12);
    let t = 4;
    let clips = data::make_clips("v", &frames, t).unwrap();
    assert_eq!(clips.len(), 12 - t);
    for (j, clip) in clips.iter().enumerate() {
        assert_eq!(clip.end_frame_index, j + t);
        assert_eq!(clip.target_frame, frames[j + t]);
        for s in 0..t - 1 {
            let f = j + 1 + s;
            assert_eq!(clip.input_frames.index_outer(s), frames[f]);
            let diff: Vec<f64> = frames[f].data().iter().zip(frames[f - 1].data()).map(|(a, b)| a - b).collect();
            assert_eq!(clip.input_diffs.index_outer(s).data(), &diff[..]);
        }
        let target_diff: Vec<f64> = frames[j + t]
            .data()
            .iter()
            .zip(frames[j + t - 1].data())
            .map(|(a, b)| a - b)
            .collect();
        assert_eq!(clip.target_diff.data(), &target_diff[..]);
        assert_eq!(clip.last_frame(), frames[j + t - 1]);
    }
}

#[test]
fn short_video_yields_no_clips() {
    assert!(data::make_clips("short", &ramp_video(4), 4).unwrap().is_empty());
    assert_eq!(data::make_clips("exact", &ramp_video(5), 4).unwrap().len(), 1);
}

#[test]
fn stacked_batch_has_expected_shapes() {
    let clips = data::make_clips("v", &ramp_video(8), 3).unwrap();
    let batch = data::stack_clips(&[&clips[0], &clips[1], &clips[4]]).unwrap();
    assert_eq!(batch.frames.shape(), &[6, 2, 3, 1]);
    assert_eq!(batch.diffs.shape(), &[6, 2, 3, 1]);
    assert_eq!(batch.target_frames.shape(), &[3, 2, 3, 1]);
    assert_eq!(batch.last_frames.index_outer(2), clips[4].last_frame());
    assert!(data::stack_clips(&[]).is_err());
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        train_videos: 2,
        test_videos: 2,
        train_frames: 8,
        test_frames: 30,
        height: 24,
        width: 24,
        earliest_anomaly: 6,
        ..SynthConfig::default()
    }
}

#[test]
fn synthetic_dataset_is_deterministic_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth::synth_generate(a.path(), &small_synth(), 4).unwrap();
    synth::synth_generate(b.path(), &small_synth(), 4).unwrap();
    synth::synth_generate(c.path(), &small_synth(), 5).unwrap();
    let ta = tree_bytes(a.path());
    assert_eq!(ta.len(), 2 * 8 + 2 * 30 + 2);
    assert_eq!(ta, tree_bytes(b.path()));
    assert_ne!(ta, tree_bytes(c.path()));
}

#[test]
fn synthetic_labels_mark_the_injected_interval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth();
    let summary = synth::synth_generate(dir.path(), &cfg, 9).unwrap();
    let test = data::load_dataset(dir.path(), Split::Test).unwrap();
    assert_eq!(summary.test.len(), test.videos.len());
    for ((id, anomaly), video) in summary.test.iter().zip(&test.videos) {
        assert_eq!(id, &video.id);
        let labels = video.labels.as_ref().unwrap();
        let anomaly = anomaly.expect("every test video carries an anomaly");
        assert!(anomaly.start >= cfg.earliest_anomaly && anomaly.end < cfg.test_frames);
        for (f, &l) in labels.iter().enumerate() {
            assert_eq!(l == 1, anomaly.contains(f), "video {id} frame {f}");
        }
    }
}

#[test]
fn rendered_normal_video_has_no_positive_labels() {
    let cfg = small_synth();
    let video = synth::render_video("n", &cfg, 10, None, &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(video.frames.len(), 10);
    assert!(video.labels.iter().all(|&l| l == 0));
    assert!(video.frames.iter().all(|f| f.dimensions() == (24, 24)));
}
