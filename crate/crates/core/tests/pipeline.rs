use pose6d::app::{
    estimate_dataset, estimate_path, evaluate_dataset, format_estimates, synth_dataset,
};
use pose6d::config::{Mode, RunConfig};
use pose6d::dataset::{load_dataset, write_dataset};
use pose6d::formats::write_atomic;
use pose6d::rgbd::{self, RgbdObservation, RgbdPipelineParams};
use pose6d::scenes::{default_intrinsics, default_model_library, random_scene, RandomSceneConfig};

fn small_config(mode: Mode, scenes: usize) -> RunConfig {
    let mut cfg = RunConfig {
        mode,
        seed: 42,
        ..Default::default()
    };
    cfg.synth.scenes = scenes;
    cfg
}

#[test]
fn synthetic_dataset_survives_disk_round_trip() {
    let cfg = small_config(Mode::Rgbd, 3);
    let data = synth_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&data, dir.path()).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.frames.len(), 3);
    assert_eq!(back.models.len(), data.models.len());
    for (a, b) in data.frames.iter().zip(&back.frames) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.intrinsics, b.intrinsics);
        assert_eq!(a.objects.len(), b.objects.len());
        for (x, y) in a.objects.iter().zip(&b.objects) {
            assert_eq!(x.mask, y.mask);
            assert_eq!(
                x.gt_pose.unwrap().to_row_major(),
                y.gt_pose.unwrap().to_row_major()
            );
        }
        let (da, db) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
        for (za, zb) in da.data().iter().zip(db.data()) {
            assert!((za - zb).abs() <= 0.5);
        }
    }
    let again = tempfile::tempdir().unwrap();
    let m2 = write_dataset(&back, again.path()).unwrap();
    assert_eq!(
        std::fs::read(&manifest).unwrap(),
        std::fs::read(m2).unwrap()
    );
}

#[test]
fn estimates_written_and_evaluated_from_disk() {
    for mode in [Mode::Rgbd, Mode::Rgb] {
        let cfg = small_config(mode, 2);
        let data = synth_dataset(&cfg).unwrap();
        let results = estimate_dataset(&data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for fe in &results {
            write_atomic(
                &estimate_path(dir.path(), &fe.frame_id),
                format_estimates(fe).as_bytes(),
            )
            .unwrap();
        }
        let report = evaluate_dataset(&data, dir.path(), &cfg).unwrap();
        let n: usize = data.frames.iter().map(|f| f.objects.len()).sum();
        assert_eq!(report.objects.len(), n);
        assert_eq!(report.rate(), 1.0, "{mode:?}");
    }
}

#[test]
fn missing_estimates_count_as_misses() {
    let cfg = small_config(Mode::Rgbd, 2);
    let data = synth_dataset(&cfg).unwrap();
    let empty = tempfile::tempdir().unwrap();
    let report = evaluate_dataset(&data, empty.path(), &cfg).unwrap();
    assert!(!report.objects.is_empty());
    assert_eq!(report.rate(), 0.0);
}

#[test]
fn final_score_not_below_selected_hypothesis() {
    let lib = default_model_library();
    let intr = default_intrinsics();
    let cfg = RandomSceneConfig {
        max_objects: 1,
        ..Default::default()
    };
    for seed in 0..8 {
        let (spec, frame) = random_scene(&lib, &intr, &cfg, seed).unwrap();
        let o = &frame.objects[0];
        let obs = RgbdObservation {
            object_coords: &o.object_coords,
            depth: &frame.depth,
            mask: &o.mask,
        };
        let est = rgbd::estimate(
            &obs,
            &spec.models[0],
            &intr,
            &RgbdPipelineParams::default(),
            seed,
        )
        .unwrap();
        let best_hypothesis = est.stage_trace[1].value;
        assert!(
            est.score >= best_hypothesis,
            "seed {seed}: {} < {best_hypothesis}",
            est.score
        );
    }
}
