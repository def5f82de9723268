use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pointpose_core::evaluation::{add_error, model_points};
use pointpose_core::geometry::Pose;
use pointpose_core::pipeline::{self, load_frame_input, PipelineConfig, PoseReport, Status, TrackTable, Tracker};
use pointpose_core::sequence::{self, Manifest};
use pointpose_core::simulator::{self, SceneSpec};
use pointpose_core::tsdf::TriangleMesh;

fn scene_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenes").join(name)
}

fn simulate(scene: &SceneSpec, dir: &Path) -> PathBuf {
    let seq = dir.join("seq");
    simulator::write_sequence(scene, &seq).unwrap();
    seq
}

/// Ground-truth poses keyed by (object, frame).
fn gt_poses(seq: &Path) -> BTreeMap<(usize, usize), Pose> {
    sequence::read_poses(&seq.join("gt_poses.csv"))
        .unwrap()
        .into_iter()
        .map(|r| ((r.object_id, r.frame), r.pose))
        .collect()
}

fn model(seq: &Path, object_id: usize) -> Vec<nalgebra::Vector3<f64>> {
    model_points(&TriangleMesh::read_obj(&sequence::gt_mesh_path(seq, object_id)).unwrap()).unwrap()
}

fn run_tracker(seq: &Path, ids: &[usize], frames: usize) -> Vec<Vec<PoseReport>> {
    let manifest = Manifest::read(seq).unwrap();
    let table = TrackTable::new(sequence::read_tracks(&seq.join("tracks.csv")).unwrap());
    let mut tracker = Tracker::new(manifest.camera, ids, PipelineConfig::default());
    let mut out = vec![Vec::new(); ids.len()];
    for t in 0..frames {
        let input = load_frame_input(seq, &manifest, &table, t).unwrap();
        for (k, r) in tracker.process_frame(&input).unwrap().into_iter().enumerate() {
            out[k].push(r);
        }
    }
    out
}

const STATIC_BOX: &str = r#"
frames = 50
[camera]
width = 160
height = 160
fx = 220.0
fy = 220.0
cx = 79.5
cy = 79.5
[[objects]]
id = 0
position = [0.0, 0.0, 0.45]
orientation = [0.4, 0.5, 0.1]
trajectory = { kind = "static" }
[objects.shape]
kind = "box"
half_extents = [0.05, 0.04, 0.03]
[noise]
track_sigma_px = 0.0
depth_sigma = 0.0
outlier_rate = 0.0
seed = 2
"#;

#[test]
fn static_noiseless_object_stays_at_identity() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SceneSpec::from_toml_str(STATIC_BOX).unwrap();
    let seq = simulate(&scene, dir.path());
    let summary = pipeline::run_sequence(&seq, &dir.path().join("out"), &PipelineConfig::default()).unwrap();
    let reports = &summary.reports[0];
    assert_eq!(reports.len(), 50);
    for r in reports {
        assert_eq!(r.status, Status::Tracking, "frame {}", r.frame);
        let err = r.pose.rotation_angle().max(r.pose.translation.norm());
        assert!(err < 1e-6, "frame {} error {err:e} rot {:e} trans {:?}", r.frame, r.pose.rotation_angle(), r.pose.translation);
    }
    assert_eq!(summary.lanes[0].keyframes, vec![0]);
}

#[test]
fn rotating_box_adds_keyframes_and_ends_within_a_centimeter() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SceneSpec::load(&scene_path("rotating_box.toml")).unwrap();
    let seq = simulate(&scene, dir.path());
    let summary = pipeline::run_sequence(&seq, &dir.path().join("out"), &PipelineConfig::default()).unwrap();
    assert!(summary.lanes[0].keyframes.len() >= 2, "keyframes {:?}", summary.lanes[0].keyframes);
    let gt = gt_poses(&seq);
    let last = summary.reports[0].last().unwrap();
    let add = add_error(&model(&seq, 0), &last.pose, &gt[&(0, last.frame)]).unwrap();
    assert!(add < 0.01, "final ADD {add}");
}

#[test]
fn sphere_run_writes_one_row_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = SceneSpec::load(&scene_path("sphere.toml")).unwrap();
    scene.frames = 10;
    let seq = simulate(&scene, dir.path());
    let out = dir.path().join("out");
    pipeline::run_sequence(&seq, &out, &PipelineConfig::default()).unwrap();
    for id in Manifest::read(&seq).unwrap().object_ids {
        assert_eq!(sequence::read_poses(&sequence::poses_path(&out, id)).unwrap().len(), 10);
        assert!(sequence::mesh_path(&out, id).exists());
    }
    assert!(out.join("summary.txt").exists());
}

#[test]
fn truncated_depth_names_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = SceneSpec::load(&scene_path("sphere.toml")).unwrap();
    scene.frames = 6;
    let seq = simulate(&scene, dir.path());
    let path = sequence::depth_path(&seq, 4);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = pipeline::run_sequence(&seq, &dir.path().join("out"), &PipelineConfig::default()).unwrap_err();
    assert!(err.to_string().contains("frame 4"), "{err}");
}

#[test]
fn crossing_scene_recovers_and_keeps_identities() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SceneSpec::load(&scene_path("crossing_occlusion.toml")).unwrap();
    let seq = simulate(&scene, dir.path());
    let summary = pipeline::run_sequence(&seq, &dir.path().join("out"), &PipelineConfig::default()).unwrap();
    let gt = gt_poses(&seq);
    let models = [model(&seq, 0), model(&seq, 1)];
    let add = |obj: usize, r: &PoseReport| add_error(&models[obj], &r.pose, &gt[&(obj, r.frame)]).unwrap();

    // Object 0 is hidden over frames 100..=149.
    let lane = &summary.reports[0];
    for r in &lane[100..150] {
        assert_eq!(r.status, Status::Lost, "frame {}", r.frame);
        // Frozen at the last good pose.
        assert_eq!(r.pose, lane[99].pose);
    }
    let back = lane[150..].iter().find(|r| r.status == Status::Tracking).unwrap().frame;
    assert!(back <= 155, "re-acquired at {back}");
    let mean = |rs: &[PoseReport]| rs.iter().map(|r| add(0, r)).sum::<f64>() / rs.len() as f64;
    let (pre, post) = (mean(&lane[90..100]), mean(&lane[back..back + 10]));
    assert!(post <= pre + 0.005, "pre {pre} post {post}");

    // Each trajectory follows its own object's motion, never the other one.
    // Poses are relative to each object's first frame, so the comparison is
    // only meaningful where the two motions have drifted apart.
    for obj in 0..2 {
        let other = 1 - obj;
        for r in summary.reports[obj].iter().filter(|r| r.status == Status::Tracking) {
            let own = add(obj, r);
            assert!(own < 0.02, "object {obj} frame {} ADD {own}", r.frame);
            let (g, h) = (&gt[&(obj, r.frame)], &gt[&(other, r.frame)]);
            if add_error(&models[obj], g, h).unwrap() > 0.02 {
                assert!(own < add_error(&models[obj], &r.pose, h).unwrap(), "object {obj} frame {}", r.frame);
            }
        }
    }
}

fn short_crossing(dir: &Path, frames: usize) -> PathBuf {
    let mut scene = SceneSpec::load(&scene_path("crossing_occlusion.toml")).unwrap();
    scene.frames = frames;
    simulate(&scene, dir)
}

#[test]
fn malformed_frame_leaves_state_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let seq = short_crossing(dir.path(), 12);
    let manifest = Manifest::read(&seq).unwrap();
    let table = TrackTable::new(sequence::read_tracks(&seq.join("tracks.csv")).unwrap());
    let mut tracker = Tracker::new(manifest.camera, &manifest.object_ids, PipelineConfig::default());
    let mut reports = Vec::new();
    for t in 0..12 {
        let input = load_frame_input(&seq, &manifest, &table, t).unwrap();
        if t == 6 {
            let mut bad = input.clone();
            bad.depth.pop();
            assert!(tracker.process_frame(&bad).is_err());
            let mut bad = input.clone();
            if let Some(r) = bad.records.first_mut() {
                r.uncertainty = f64::NAN;
            }
            assert!(tracker.process_frame(&bad).is_err());
        }
        reports.push(tracker.process_frame(&input).unwrap());
    }
    let clean = run_tracker(&seq, &manifest.object_ids, 12);
    for (t, frame) in reports.iter().enumerate() {
        for (k, r) in frame.iter().enumerate() {
            assert_eq!(*r, clean[k][t]);
        }
    }
}

#[test]
fn prefix_replay_reproduces_streaming_output() {
    let dir = tempfile::tempdir().unwrap();
    let seq = short_crossing(dir.path(), 25);
    let ids = Manifest::read(&seq).unwrap().object_ids;
    let full = run_tracker(&seq, &ids, 25);
    for t in [1, 7, 16, 24] {
        let prefix = run_tracker(&seq, &ids, t + 1);
        for k in 0..ids.len() {
            assert_eq!(prefix[k], full[k][..=t], "object {k} frame {t}");
        }
    }
}

#[test]
fn object_order_does_not_matter() {
    let dir = tempfile::tempdir().unwrap();
    let seq = short_crossing(dir.path(), 25);
    let forward = run_tracker(&seq, &[0, 1], 25);
    let reversed = run_tracker(&seq, &[1, 0], 25);
    assert_eq!(forward[0], reversed[1]);
    assert_eq!(forward[1], reversed[0]);
}

#[test]
fn identical_seeds_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let seq = short_crossing(dir.path(), 20);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline::run_sequence(&seq, &a, &PipelineConfig::default()).unwrap();
    pipeline::run_sequence(&seq, &b, &PipelineConfig::default()).unwrap();
    for id in [0, 1] {
        assert_eq!(fs::read(sequence::poses_path(&a, id)).unwrap(), fs::read(sequence::poses_path(&b, id)).unwrap());
        assert_eq!(fs::read(sequence::mesh_path(&a, id)).unwrap(), fs::read(sequence::mesh_path(&b, id)).unwrap());
    }
}

#[test]
fn summary_lost_lines_round_trip() {
    let text = "frames 5\nseconds 0.1\nobject 0\n  keyframes 1 [0]\n  keypoints 3\n  lost [2-3,7-7]\nobject 4\n  lost []\n";
    let parsed = pipeline::parse_lost_intervals(text).unwrap();
    assert_eq!(parsed, vec![(0, vec![(2, 3), (7, 7)]), (4, vec![])]);
    assert!(pipeline::parse_lost_intervals("lost [1-2]").is_err());
}
