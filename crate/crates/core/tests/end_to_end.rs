use difftrack::denoiser::{DetectionSnapDenoiser, OracleConfig, OracleDenoiser};
use difftrack::harness::config::{DenoiserKind, RunConfig, SceneKind};
use difftrack::harness::experiments::track_scene;
use difftrack::harness::motchallenge as mot;
use difftrack::metrics::evaluate;
use difftrack::pipeline::{Pipeline, PipelineConfig};
use difftrack::simulator::{generate, SceneSpec};

fn small_cfg() -> PipelineConfig {
    PipelineConfig {
        n_test: 150,
        steps: 2,
        ..Default::default()
    }
}

#[test]
fn same_seed_same_tracks() {
    let gt = generate(&SceneSpec::crowded(10, 15, 3)).unwrap();
    let oracle = OracleDenoiser::new(OracleConfig::with_fidelity(0.8)).unwrap();
    let p = Pipeline::new(small_cfg(), &oracle).unwrap();
    let a = p.run_sequence(&gt, 9).unwrap();
    let b = p.run_sequence(&gt, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(mot::format_results(&a), mot::format_results(&b));
}

#[test]
fn scene_directory_round_trip_tracks_identically() {
    let gt = generate(&SceneSpec::linear(5, 12, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    mot::write_scene(&gt, dir.path()).unwrap();
    let back = mot::read_scene(dir.path()).unwrap();
    assert_eq!(back.num_frames(), gt.num_frames());
    assert_eq!(back.image_size, gt.image_size);

    let oracle = OracleDenoiser::new(OracleConfig::with_fidelity(0.9)).unwrap();
    let p = Pipeline::new(small_cfg(), &oracle).unwrap();
    let ma = evaluate(&gt, &p.run_sequence(&gt, 1).unwrap(), 0.5).unwrap();
    let mb = evaluate(&back, &p.run_sequence(&back, 1).unwrap(), 0.5).unwrap();
    assert!((ma.mota - mb.mota).abs() < 1e-9);
    assert_eq!(ma.idsw, mb.idsw);
}

#[test]
fn detection_snap_follows_clean_detections() {
    let gt = generate(&SceneSpec {
        separated: true,
        ..SceneSpec::linear(6, 20, 5)
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    mot::write_scene(&gt, dir.path()).unwrap();
    let stream = mot::read_scene_detections(dir.path()).unwrap();
    let snap = DetectionSnapDenoiser::default();
    let res = Pipeline::new(small_cfg(), &snap).unwrap().run_sequence(&stream, 0).unwrap();
    let m = evaluate(&gt, &res, 0.5).unwrap();
    assert!(m.mota > 0.9, "{m:?}");
    assert_eq!(m.idsw, 0);
}

#[test]
fn harness_matches_direct_pipeline() {
    let mut cfg = RunConfig::default();
    cfg.scene.kind = SceneKind::Linear;
    cfg.scene.objects = 5;
    cfg.scene.frames = 10;
    cfg.pipeline = small_cfg();
    cfg.denoiser = DenoiserKind::Oracle;
    let gt = generate(&cfg.scene.spec(2)).unwrap();
    let via_harness = track_scene(&cfg, &gt, 2).unwrap();
    let oracle = OracleDenoiser::new(cfg.oracle).unwrap();
    let direct = Pipeline::new(cfg.pipeline.clone(), &oracle).unwrap().run_sequence(&gt, 2).unwrap();
    assert_eq!(via_harness, direct);
}
