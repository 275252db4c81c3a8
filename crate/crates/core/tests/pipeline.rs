//! End-to-end pipeline behavior on a small synthetic dataset: artifact
//! formats, zero-step runs, determinism, and the compatibility guards.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use wtal_core::data::{generate_synthetic, load_manifest, SyntheticSpec};
use wtal_core::error::Error;
use wtal_core::model::{Model, ModelConfig};
use wtal_core::pipeline::{
    config_hash, localize_dump, meta_path, run_eval, run_train, LossLogLine, PathsConfig,
    RunConfig, TrainConfig,
};
use wtal_core::rng::Rng;

fn scratch(tag: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("pipeline")
        .join(tag);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_videos: 8,
        num_classes: 3,
        feature_dim: 12,
        t_range: (30, 50),
        actions_per_video: (1, 2),
        signal_channels: 2,
        redundant_channels: 6,
        noise_sigma: 0.6,
        seed,
    }
}

fn dataset() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = scratch("dataset");
        generate_synthetic(&small_spec(99), &dir).unwrap();
        dir
    })
}

fn small_config(tag: &str, steps: u64) -> RunConfig {
    let out = scratch(tag);
    RunConfig {
        model: ModelConfig {
            hidden: 8,
            ..ModelConfig::default()
        },
        loss: Default::default(),
        localize: Default::default(),
        train: TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-3,
            batch_videos: 4,
            pairs_per_batch: 1,
            snippets_per_video: 20,
            max_steps: steps,
            seed: 7,
            checkpoint_every: 0,
        },
        paths: PathsConfig {
            manifest: dataset().join("manifest.train.json"),
            checkpoint: out.join("model.ckpt"),
            report_dir: out,
        },
    }
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    let a = generate_synthetic(&small_spec(5), &scratch("synth_a")).unwrap();
    let b = generate_synthetic(&small_spec(5), &scratch("synth_b")).unwrap();
    let c = generate_synthetic(&small_spec(6), &scratch("synth_c")).unwrap();
    assert_eq!(a.manifest_hash, b.manifest_hash);
    assert_ne!(a.manifest_hash, c.manifest_hash);
    assert_eq!(a.videos, 8);
    assert_eq!(a.classes, 3);
    assert!(a.segments > 0);
}

#[test]
fn infeasible_spec_is_rejected() {
    let mut spec = small_spec(1);
    spec.signal_channels = 10;
    spec.redundant_channels = 10; // exceeds feature_dim 12
    match generate_synthetic(&spec, &scratch("synth_bad")) {
        Err(Error::Config(msg)) => assert!(msg.contains("exceed")),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn zero_step_run_checkpoints_the_initialization() {
    let cfg = small_config("zero_step", 0);
    let summary = run_train(&cfg).unwrap();
    assert_eq!(summary.steps, 0);
    assert!(summary.final_total.is_none());

    // the checkpoint must equal a freshly initialized model under the seed
    let manifest = load_manifest(&cfg.paths.manifest).unwrap();
    let mut rng = Rng::seed(cfg.train.seed);
    let model_cfg = ModelConfig {
        feature_dim: manifest.feature_dim,
        num_classes: manifest.num_classes(),
        ..cfg.model.clone()
    };
    let fresh = Model::init(model_cfg, &mut rng).unwrap();
    let reference = cfg.paths.report_dir.join("reference.ckpt");
    fresh.save_checkpoint(&reference).unwrap();
    assert_eq!(
        std::fs::read(&summary.checkpoint).unwrap(),
        std::fs::read(&reference).unwrap()
    );

    // loss log exists and is empty for a zero-step run
    let log = std::fs::read_to_string(&summary.loss_log).unwrap();
    assert!(log.is_empty());
}

#[test]
fn loss_log_is_json_lines_with_increasing_steps() {
    let cfg = small_config("log_format", 12);
    let summary = run_train(&cfg).unwrap();
    let log = std::fs::read_to_string(&summary.loss_log).unwrap();
    let mut last_step = 0;
    let mut lines = 0;
    for line in log.lines() {
        let parsed: LossLogLine = serde_json::from_str(line).unwrap();
        assert!(parsed.step > last_step, "steps must increase");
        last_step = parsed.step;
        assert!(parsed.breakdown.total.is_finite());
        assert!(parsed.breakdown.mil_org.is_some());
        lines += 1;
    }
    assert_eq!(lines, 12);
}

#[test]
fn eval_writes_all_report_artifacts() {
    let cfg = small_config("eval_artifacts", 5);
    let summary = run_train(&cfg).unwrap();
    let mut eval_cfg = cfg.clone();
    eval_cfg.paths.manifest = dataset().join("manifest.test.json");
    let report = run_eval(&eval_cfg, &summary.checkpoint).unwrap();

    assert_eq!(report.seed, cfg.train.seed);
    assert!(!report.config_hash.is_empty());
    assert_eq!(report.map_at.len(), 9);
    for range in ["0.1:0.5", "0.1:0.7", "0.1:0.9"] {
        assert!(report.avg_map.contains_key(range));
    }
    for values in report.per_class_ap.values() {
        for ap in values.values() {
            assert!((0.0..=1.0).contains(ap));
        }
    }
    let dir = &eval_cfg.paths.report_dir;
    for artifact in ["report.json", "map_table.csv", "proposals.json"] {
        assert!(dir.join(artifact).is_file(), "{artifact} missing");
    }
    // report round-trips through serde unchanged
    let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let parsed: wtal_core::eval::EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, report);
}

#[test]
fn eval_reruns_are_byte_identical() {
    let cfg = small_config("eval_determinism", 5);
    let summary = run_train(&cfg).unwrap();
    let mut eval_cfg = cfg.clone();
    eval_cfg.paths.manifest = dataset().join("manifest.test.json");
    run_eval(&eval_cfg, &summary.checkpoint).unwrap();
    let first = std::fs::read(eval_cfg.paths.report_dir.join("report.json")).unwrap();
    run_eval(&eval_cfg, &summary.checkpoint).unwrap();
    let second = std::fs::read(eval_cfg.paths.report_dir.join("report.json")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn train_requires_train_split_and_eval_requires_test_split() {
    let mut cfg = small_config("split_guard", 1);
    cfg.paths.manifest = dataset().join("manifest.test.json");
    assert!(matches!(run_train(&cfg), Err(Error::Config(_))));

    let cfg2 = small_config("split_guard2", 1);
    let summary = run_train(&cfg2).unwrap();
    // eval against the train manifest must be refused
    assert!(matches!(
        run_eval(&cfg2, &summary.checkpoint),
        Err(Error::Config(_))
    ));
}

#[test]
fn mismatched_config_hash_is_refused() {
    let cfg = small_config("hash_guard", 2);
    let summary = run_train(&cfg).unwrap();
    assert!(meta_path(&summary.checkpoint).is_file());

    let mut other = cfg.clone();
    other.paths.manifest = dataset().join("manifest.test.json");
    other.train.lr = 9e-3; // different behavior, different hash
    match run_eval(&other, &summary.checkpoint) {
        Err(Error::Compat(msg)) => assert!(msg.contains("hash")),
        other => panic!("expected compat error, got {other:?}"),
    }
}

#[test]
fn checkpoint_dimension_mismatch_is_refused() {
    let cfg = small_config("dim_guard", 1);
    let summary = run_train(&cfg).unwrap();

    // same config hash but a dataset with different dimensions
    let other_data = scratch("dim_guard_data");
    let mut spec = small_spec(123);
    spec.feature_dim = 16;
    generate_synthetic(&spec, &other_data).unwrap();
    let mut eval_cfg = cfg.clone();
    eval_cfg.paths.manifest = other_data.join("manifest.test.json");
    std::fs::remove_file(meta_path(&summary.checkpoint)).unwrap();
    assert!(matches!(
        run_eval(&eval_cfg, &summary.checkpoint),
        Err(Error::Compat(_))
    ));
}

#[test]
fn localize_dump_exposes_tracks_and_proposals() {
    let cfg = small_config("localize_dump", 3);
    let summary = run_train(&cfg).unwrap();
    let manifest = load_manifest(&cfg.paths.manifest).unwrap();
    let video_id = manifest.videos[0].id.clone();
    let dump = localize_dump(&cfg, &summary.checkpoint, &video_id, Some(25.0)).unwrap();
    assert_eq!(dump.video_id, video_id);
    let t = dump.a_fused.len();
    assert!(t >= 30);
    assert_eq!(dump.a_rgb.len(), t);
    assert_eq!(dump.a_flow.len(), t);
    for p in &dump.proposals {
        assert!(p.t_start < p.t_end && p.t_end <= t as f64);
        // seconds = snippets * 16 / fps
        let want = p.t_start * 16.0 / 25.0;
        assert!((p.t_start_seconds.unwrap() - want).abs() < 1e-12);
        assert!(manifest.class_names.contains(&p.class_name));
    }

    assert!(matches!(
        localize_dump(&cfg, &summary.checkpoint, "no-such-video", None),
        Err(Error::Manifest { .. })
    ));
}

#[test]
fn config_hash_is_stable_against_path_changes() {
    let a = small_config("hash_paths_a", 3);
    let mut b = small_config("hash_paths_b", 3);
    b.paths.checkpoint = PathBuf::from("/elsewhere/model.ckpt");
    let ha = config_hash(&a.model, &a.loss, &a.localize, &a.train);
    let hb = config_hash(&b.model, &b.loss, &b.localize, &b.train);
    assert_eq!(ha, hb);
}

#[test]
fn defaults_follow_the_training_recipe() {
    // a minimal config file falls back to the standard recipe everywhere
    let text = r#"{
        "train": { "seed": 1 },
        "paths": { "manifest": "m.json", "checkpoint": "c.bin", "report_dir": "r" }
    }"#;
    let cfg: RunConfig = serde_json::from_str(text).unwrap();
    assert_eq!(cfg.train.lr, 5e-5);
    assert_eq!(cfg.train.weight_decay, 1e-3);
    assert_eq!(cfg.train.batch_videos, 10);
    assert_eq!(cfg.train.pairs_per_batch, 3);
    assert_eq!(cfg.train.snippets_per_video, 500);
    assert_eq!(cfg.model.hidden, 512);
    assert_eq!(cfg.model.attn_kernels, vec![3, 3, 1]);
    assert_eq!(cfg.model.cls_kernels, vec![3, 3, 1]);
    assert_eq!(cfg.model.dropout, 0.7);
    assert_eq!(cfg.loss.alpha, 0.5);
    assert_eq!(cfg.loss.lambda_oppo, 0.8);
    assert_eq!(cfg.loss.lambda_norm, 0.8);
    assert_eq!(cfg.loss.topk_divisor, 8);
    assert_eq!(cfg.loss.cas_margin, 0.5);
    assert_eq!(cfg.localize.class_threshold, 0.2);
    assert_eq!(cfg.localize.attn_thresholds.len(), 17); // 0.10..=0.90 step 0.05
    assert_eq!(cfg.localize.oic_inflation, 0.25);
    assert_eq!(cfg.localize.nms_sigma, 0.3);
    assert_eq!(cfg.localize.min_proposal_len, 2);
}
