//! Dataset generation, export formats, evaluation paths and the CLI.

use std::fs;
use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tgforecast::datagen::{gen_dataset, gen_scene, micro_scene, DatasetSpec, Manifest, Preset};
use tgforecast::graph::build_temporal_graph;
use tgforecast::harness::eval::{
    evaluate_prepared, evaluate_records, load_model, read_predictions, save_model, write_predictions, Frame,
    PredictionRecord,
};
use tgforecast::metrics::{brier_min_fde, min_ade, min_fde, miss, MISS_THRESHOLD_M};
use tgforecast::scene::{normalize_scene, Point2, RawScene, Transform, LAST_OBS, T_FUT};
use tgforecast::{Model, ModelConfig, Toggles};

fn small_model(toggles: Toggles) -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        toggles,
        ..ModelConfig::default()
    }
}

fn mixed_scenes(n: usize) -> Vec<RawScene> {
    (0..n)
        .map(|i| {
            let p = Preset::ALL[i % Preset::ALL.len()];
            let t = p.sample(&mut ChaCha8Rng::seed_from_u64(i as u64));
            gen_scene(&t, i as u64, &format!("scene_{i}")).unwrap()
        })
        .collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_regeneration_is_byte_identical() {
    let spec = DatasetSpec {
        counts: [(Preset::Straight, 30), (Preset::FourWay, 40), (Preset::Yield, 30)].into_iter().collect(),
        val_fraction: 0.2,
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = gen_dataset(&spec, 42, a.path()).unwrap();
    gen_dataset(&spec, 42, b.path()).unwrap();
    let files = dir_bytes(a.path());
    assert_eq!(files.len(), 101);
    assert_eq!(files, dir_bytes(b.path()));
    assert_eq!(Manifest::load(a.path()).unwrap(), m);
    assert_eq!(m.scenes.len(), 100);
}

#[test]
fn predictions_round_trip_through_files() {
    let scenes = mixed_scenes(6);
    let (model, store) = Model::new(small_model(Toggles::FULL), 3).unwrap();
    let prepared: Vec<_> = scenes.iter().map(|s| model.prepare(s).unwrap()).collect();
    let direct = evaluate_prepared(&model, &store, &prepared, 6).unwrap();
    assert_eq!(direct.scenes.len(), scenes.len());
    let dir = tempfile::tempdir().unwrap();
    for frame in [Frame::Normalized, Frame::Raw] {
        let recs: Vec<PredictionRecord> = prepared
            .iter()
            .map(|p| PredictionRecord::from_forecast(&model.forecast(&store, p).unwrap(), frame))
            .collect();
        assert!(recs.iter().all(|r| r.modes.len() == 6 && r.k == 6));
        let path = dir.path().join("pred.jsonl");
        write_predictions(&recs, &path).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back, recs);
        let from_file = evaluate_records(&back, &scenes, 6).unwrap();
        for (a, b) in from_file.scenes.iter().zip(&direct.scenes) {
            assert!((a.min_ade - b.min_ade).abs() < 1e-9);
            assert!((a.min_fde - b.min_fde).abs() < 1e-9);
            assert!((a.b_min_fde - b.b_min_fde).abs() < 1e-9);
            assert_eq!(a.miss, b.miss);
        }
    }
}

#[test]
fn raw_export_applies_the_inverse_transform() {
    let scene = &mixed_scenes(3)[2];
    let (model, store) = Model::new(small_model(Toggles::FULL), 1).unwrap();
    let out = model.forecast(&store, &model.prepare(scene).unwrap()).unwrap();
    let norm = PredictionRecord::from_forecast(&out, Frame::Normalized);
    let raw = PredictionRecord::from_forecast(&out, Frame::Raw);
    let t: Transform = raw.transform.unwrap();
    assert!(norm.transform.is_none());
    for (n, r) in norm.modes.iter().zip(&raw.modes) {
        for (p, q) in n.trajectory.iter().zip(&r.trajectory) {
            assert_eq!(t.invert(*p), *q);
        }
        assert_eq!(r.endpoint, *r.trajectory.last().unwrap());
    }
    // Raw predictions of the raw scene sit near the last observed AoI position.
    let last = scene.aoi().position_at(LAST_OBS).unwrap();
    assert!(t.apply(last).dist(Point2::ORIGIN) < 1e-9);
}

#[test]
fn single_mode_evaluation_and_row_counts() {
    let scenes = mixed_scenes(4);
    for toggles in [Toggles::FULL, Toggles::NONE] {
        let (model, store) = Model::new(small_model(toggles), 2).unwrap();
        let prepared: Vec<_> = scenes.iter().map(|s| model.prepare(s).unwrap()).collect();
        let r = evaluate_prepared(&model, &store, &prepared, 1).unwrap();
        assert_eq!(r.k, 1);
        assert_eq!(r.scenes.len(), 4);
        for s in &r.scenes {
            // One mode with renormalized probability 1 adds no Brier penalty.
            assert_eq!(s.b_min_fde, s.min_fde);
        }
    }
}

#[test]
fn checkpoint_config_mismatch_is_rejected() {
    let (model, store) = Model::new(small_model(Toggles::FULL), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&model, &store, &path).unwrap();
    let (m2, s2) = load_model(&path, Some(&model.cfg)).unwrap();
    assert_eq!(s2.blocks(), store.blocks());
    assert_eq!(m2.cfg, model.cfg);
    let other = small_model(Toggles::TG_ONLY);
    assert!(load_model(&path, Some(&other)).is_err());
    let mut bytes = fs::read(&path).unwrap();
    let cfg_start = 8 + 4 + 32 + 4;
    bytes[cfg_start + 2] ^= 0x01;
    fs::write(&path, bytes).unwrap();
    assert!(load_model(&path, None).is_err());
}

#[test]
fn scene_records_reject_schema_violations() {
    let scene = micro_scene(1);
    let mut two = scene.clone();
    two.agents[1].is_aoi = true;
    assert!(two.validate().is_err());
    let mut short = scene.clone();
    short.gt_future.pop();
    let err = short.validate().unwrap_err().to_string();
    assert!(err.contains("gt_future"), "{err}");
    let text = scene.to_json().replace("\"dt\"", "\"delta\"");
    assert!(RawScene::from_json(&text, Path::new("x.json")).is_err());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tgforecast"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bin().args(["gen-data", "--out"]).arg(d.join("data")).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "gen-data without a seed");
    let out = bin().args(["--help"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let out = bin().args(["no-such-command"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let status = bin()
        .args(["gen-data", "--seed", "3", "--counts", "straight=3,yield=2", "--val-fraction", "0.4", "--out"])
        .arg(d.join("data"))
        .status()
        .unwrap();
    assert!(status.success());
    let out = bin().args(["train", "--data"]).arg(d.join("data")).arg("--out").arg(d.join("run")).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "train without a seed");

    fs::write(d.join("bad.toml"), "epochs = 2\nnot_a_key = 1\n").unwrap();
    let out = bin().args(["train", "--seed", "1", "--config"]).arg(d.join("bad.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown config key");

    fs::write(d.join("cfg.toml"), "epochs = 2\nbatch_size = 2\nlr_decay_epochs = [1]\n[model]\nfeature_dim = 4\n").unwrap();
    let status = bin()
        .args(["train", "--seed", "1", "--quiet", "--config"])
        .arg(d.join("cfg.toml"))
        .args(["--epochs", "3", "--data"])
        .arg(d.join("data"))
        .arg("--out")
        .arg(d.join("run"))
        .status()
        .unwrap();
    assert!(status.success());
    let ckpt = d.join("run/checkpoints/epoch_003.ckpt");
    assert!(ckpt.exists(), "--epochs overrides the config value");

    let status = bin()
        .args(["predict", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(d.join("data"))
        .arg("--out")
        .arg(d.join("pred.jsonl"))
        .status()
        .unwrap();
    assert!(status.success());
    let out = bin()
        .args(["eval", "--split", "all", "--predictions"])
        .arg(d.join("pred.jsonl"))
        .arg("--data")
        .arg(d.join("data"))
        .arg("--out")
        .arg(d.join("report.csv"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = fs::read_to_string(d.join("report.csv")).unwrap();
    assert_eq!(report.lines().filter(|l| l.starts_with("straight") || l.starts_with("yield")).count(), 5);
    assert!(report.lines().last().unwrap().starts_with("MEAN"));

    let status = bin()
        .args(["plot", "--scene"])
        .arg(d.join("data/scenes/yield_00000.json"))
        .arg("--predictions")
        .arg(d.join("pred.jsonl"))
        .arg("--out")
        .arg(d.join("plot.svg"))
        .status()
        .unwrap();
    assert!(status.success());
    let svg = fs::read_to_string(d.join("plot.svg")).unwrap();
    assert_eq!(svg.matches("class=\"prediction\"").count(), 6);

    // A model section that differs from the checkpoint is refused.
    fs::write(d.join("other.toml"), "[model]\nfeature_dim = 6\n").unwrap();
    let out = bin()
        .args(["eval", "--split", "all", "--checkpoint"])
        .arg(&ckpt)
        .arg("--config")
        .arg(d.join("other.toml"))
        .arg("--data")
        .arg(d.join("data"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

fn random_modes(k: usize, seed: u64) -> (Vec<Vec<Point2>>, Vec<Point2>, Vec<f64>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traj = || -> Vec<Point2> {
        (0..T_FUT)
            .map(|_| Point2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect()
    };
    let preds: Vec<_> = (0..k).map(|_| traj()).collect();
    let gt = traj();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = w.iter().sum();
    (preds, gt, w.iter().map(|v| v / s).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn metric_bounds(seed in any::<u64>(), k in 1usize..8) {
        let (preds, gt, probs) = random_modes(k, seed);
        let (fde, idx) = min_fde(&preds, &gt).unwrap();
        let b = brier_min_fde(&preds, &probs, &gt).unwrap();
        prop_assert!(b - fde >= 0.0 && b - fde <= 1.0);
        prop_assert!(preds.iter().all(|p| p[T_FUT - 1].dist(gt[T_FUT - 1]) >= fde));
        prop_assert!(idx < k);
        prop_assert!(min_ade(&preds, &gt).unwrap() >= 0.0);
        let m = miss(&preds, &gt, MISS_THRESHOLD_M).unwrap();
        prop_assert_eq!(m == 0, fde <= MISS_THRESHOLD_M);
    }

    #[test]
    fn normalization_anchors_the_aoi(seed in any::<u64>(), angle in -3.1f64..3.1, tx in -1e3f64..1e3) {
        let scene = micro_scene(seed);
        let g = Transform { angle, translation: Point2::new(tx, -tx / 2.0) };
        let moved = scene.map_points(|p| g.apply(p));
        let n = normalize_scene(&moved).unwrap();
        let aoi = n.aoi();
        let last = aoi.position_at(LAST_OBS).unwrap();
        prop_assert!(last.x.abs() < 1e-9 && last.y.abs() < 1e-9);
        let prev = aoi.position_at(LAST_OBS - 1).unwrap();
        prop_assert!(prev.x < 0.0 && prev.y.abs() < 1e-6);
    }

    #[test]
    fn graph_masks_follow_presence(seed in any::<u64>()) {
        let scene = normalize_scene(&micro_scene(seed)).unwrap();
        let g = build_temporal_graph(&scene, 2.0);
        for t in 0..=LAST_OBS {
            let m = g.mask_ref(t).unwrap();
            let present = g.present(t).unwrap();
            prop_assert!(m.validate().is_ok());
            for i in 0..g.num_nodes() {
                prop_assert_eq!(m.get(i, i), present[i]);
                for j in 0..g.num_nodes() {
                    if m.get(i, j) {
                        prop_assert!(present[i] && present[j]);
                    }
                    if i != j && i < g.num_lanes && j < g.num_lanes {
                        prop_assert!(!m.get(i, j));
                    }
                }
            }
        }
    }
}
