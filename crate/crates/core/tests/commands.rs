use std::fs;
use std::path::Path;

use protoego::checkpoint::save_checkpoint;
use protoego::commands::{
    cmd_eval, cmd_extract_attn, cmd_gen_synthetic, cmd_train, TrainOptions, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE,
    REPORT_FILE,
};
use protoego::config::{load_config, RunConfig};
use protoego::error::Error;
use protoego::ingest::open_sources;
use protoego::metrics::{read_metrics, METRICS_HEADER};
use protoego::trainer::TrainState;

const TINY: &str = r#"
seed = 5

[backbone]
embed_dim = 16
heads = 2
depth = 2
head_hidden = 16
bottleneck_dim = 8
out_dim = 12

[clip]
frames = 3
stride_s = 0.05
window = 64
crop_size = 32

[proto]
k = 2
tap_layer_mid = 1

[temporal]
lambda = 0.0

[optim]
batch_size = 1
epochs = 2
iters_per_epoch = 5
warmup_epochs = 1

[data]
synthetic_videos = 2
synthetic_frames = 24
frame_size = 64

[eval]
clips = 3
knn_per_class = 2
"#;

fn tiny(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml_str(TINY, &o).unwrap()
}

fn train(cfg: &RunConfig, out: &Path, opts: TrainOptions) -> String {
    cmd_train(cfg, out, &opts).unwrap();
    fs::read_to_string(out.join(METRICS_FILE)).unwrap()
}

#[test]
fn ten_iterations_give_ten_rows_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let text = train(&cfg, dir.path(), TrainOptions::default());
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 10);
    let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows.iter().map(|r| r.iter).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
    assert!(rows.iter().all(|r| r.losses().iter().all(|v| v.is_finite())));
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
    let resolved = load_config(&dir.path().join(CONFIG_FILE), &[]).unwrap();
    assert_eq!(resolved, cfg);
}

#[test]
fn disabled_temporal_term_writes_zero_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["ablation.enable_T=false"]);
    train(&cfg, dir.path(), TrainOptions { until: Some(4), ..Default::default() });
    let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.l_temp == 0.0));
}

#[test]
fn seeded_runs_are_identical_and_resume_matches() {
    let cfg = tiny(&[]);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = train(&cfg, a.path(), TrainOptions { until: Some(6), ..Default::default() });
    let second = train(&cfg, b.path(), TrainOptions { until: Some(6), ..Default::default() });
    assert_eq!(first, second);

    let split = tempfile::tempdir().unwrap();
    train(&cfg, split.path(), TrainOptions { until: Some(3), ..Default::default() });
    let resumed = train(
        &cfg,
        split.path(),
        TrainOptions {
            until: Some(6),
            resume: Some(split.path().join(CHECKPOINT_FILE)),
            ..Default::default()
        },
    );
    assert_eq!(resumed, first);
    assert_eq!(fs::read(split.path().join(CHECKPOINT_FILE)).unwrap(), fs::read(a.path().join(CHECKPOINT_FILE)).unwrap());
}

#[test]
fn resume_rejects_a_different_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    train(&cfg, dir.path(), TrainOptions { until: Some(1), ..Default::default() });
    let other = tiny(&["backbone.out_dim=10"]);
    let err = cmd_train(
        &other,
        &dir.path().join("other"),
        &TrainOptions {
            resume: Some(dir.path().join(CHECKPOINT_FILE)),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::FingerprintMismatch));
}

#[test]
fn untrained_eval_writes_report_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let train_dir = dir.path().join("train");
    train(&cfg, &train_dir, TrainOptions { until: Some(3), ..Default::default() });
    let out = dir.path().join("eval");
    let report = cmd_eval(&cfg, None, Some(&train_dir.join(METRICS_FILE)), &out).unwrap();
    assert!((0.0..=1.0).contains(&report.localization.mean_best_iou));
    assert!((0.0..=1.0).contains(&report.knn_accuracy));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    for key in ["mean_best_iou", "per_clip", "per_head_mean", "knn_accuracy"] {
        assert!(json.get(key).is_some(), "report lacks `{key}`");
    }
    assert_eq!(json["per_head_mean"].as_array().unwrap().len(), cfg.backbone.heads);
    assert!(out.join("attention/clip000_t0_head0_mask.png").exists());
    assert!(out.join("plots/loss_curves.png").exists());
    assert!(out.join(CONFIG_FILE).exists());

    let trained = cmd_eval(&cfg, Some(&train_dir.join(CHECKPOINT_FILE)), None, &dir.path().join("eval2")).unwrap();
    assert!((0.0..=1.0).contains(&trained.localization.mean_best_iou));
    let again = cmd_eval(&cfg, Some(&train_dir.join(CHECKPOINT_FILE)), None, &dir.path().join("eval3")).unwrap();
    assert_eq!(trained, again);
}

#[test]
fn eval_reports_embedding_width_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let narrow = tiny(&["backbone.embed_dim=192", "backbone.heads=6", "backbone.depth=1", "proto.tap_layer_mid=1"]);
    let path = dir.path().join("narrow.bin");
    save_checkpoint(&TrainState::new(&narrow), &narrow, &path).unwrap();
    let wide = tiny(&["backbone.embed_dim=384", "backbone.heads=6", "backbone.depth=1", "proto.tap_layer_mid=1"]);
    let err = cmd_eval(&wide, Some(&path), None, &dir.path().join("eval")).unwrap_err();
    match err {
        Error::ShapeMismatch { expected, found, .. } => assert_ne!(expected, found),
        other => panic!("expected a shape mismatch, got {other}"),
    }
}

#[test]
fn extract_attn_dumps_every_frame() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["eval.clips=1"]);
    let files = cmd_extract_attn(&cfg, None, dir.path()).unwrap();
    // Per frame: the input plus a soft map and a mask per head.
    assert_eq!(files.len(), cfg.clip.frames * (1 + 2 * cfg.backbone.heads));
    assert!(files.iter().all(|f| f.exists()));
}

#[test]
fn generated_dataset_is_reproducible_and_trainable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let h1 = cmd_gen_synthetic(&cfg, &dir.path().join("a")).unwrap();
    let h2 = cmd_gen_synthetic(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(h1.len(), 64);
    assert_eq!(fs::read_to_string(dir.path().join("a/dataset.sha256")).unwrap().trim(), h1);
    let other = cmd_gen_synthetic(&tiny(&["seed=6"]), &dir.path().join("c")).unwrap();
    assert_ne!(h1, other);

    let mut from_disk = cfg.clone();
    from_disk.data.source = dir.path().join("a").display().to_string();
    assert_eq!(open_sources(&from_disk.data, from_disk.seed).unwrap().len(), 2);
    let rows = train(&from_disk, &dir.path().join("run"), TrainOptions { until: Some(2), ..Default::default() });
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn invalid_overrides_fail_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let err = RunConfig::from_toml_str(TINY, &["temporal.lambda=1.5".into()]).unwrap_err();
    assert!(err.to_string().contains("lambda out of range"), "{err}");
    let mut cfg = tiny(&[]);
    cfg.data.source = dir.path().join("missing").display().to_string();
    assert!(cmd_train(&cfg, &dir.path().join("out"), &TrainOptions::default()).is_err());
}
