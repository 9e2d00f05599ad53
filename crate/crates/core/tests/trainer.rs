use pipetteloc::config::SMALL_SIGMA;
use pipetteloc::heatmap::HeatmapConfig;
use pipetteloc::localizer::{LocalizerConfig, LocalizerModel};
use pipetteloc::losses::LossConfig;
use pipetteloc::nn::Device;
use pipetteloc::synthdata::{generate_scenes, SceneConfig};
use pipetteloc::trainer::{run_stage, train, StageName, StageSpec, TrainConfig};
use pipetteloc::LabeledScene;

fn scenes(n: usize) -> Vec<LabeledScene> {
    generate_scenes(&SceneConfig::small(), n).unwrap()
}

fn heatmap() -> HeatmapConfig {
    HeatmapConfig {
        sigma: SMALL_SIGMA,
        ..HeatmapConfig::default()
    }
}

fn model() -> LocalizerModel {
    LocalizerModel::new(LocalizerConfig::small(), &Device::Cpu).unwrap()
}

fn quick(e: usize, d: usize, j: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        ..TrainConfig::with_epochs(e, d, j)
    }
}

#[test]
fn stages_freeze_the_other_component() {
    let data = scenes(24);
    let m = model();
    let cfg = quick(1, 1, 1);
    let sums = |m: &LocalizerModel| (m.params().checksum("encoder.").unwrap(), m.params().checksum("decoder.").unwrap());

    let (e0, d0) = sums(&m);
    run_stage(&m, &data, &StageSpec::new(StageName::DecoderOnly, 1, 1e-3), &cfg, &heatmap(), &LossConfig::default()).unwrap();
    let (e1, d1) = sums(&m);
    assert_eq!(e1, e0);
    assert_ne!(d1, d0);

    let history = run_stage(&m, &data, &StageSpec::new(StageName::EncoderOnly, 1, 1e-4), &cfg, &heatmap(), &LossConfig::default()).unwrap();
    let (e2, d2) = sums(&m);
    assert_ne!(e2, e1);
    assert_eq!(d2, d1);
    assert_eq!(history.len(), 1);
    assert_eq!(history[0].stage, "encoder_only");
    assert!(history[0].train_loss.is_finite() && history[0].val_loss.is_finite());

    run_stage(&m, &data, &StageSpec::new(StageName::Joint, 1, 1e-4), &cfg, &heatmap(), &LossConfig::default()).unwrap();
    let (e3, d3) = sums(&m);
    assert_ne!(e3, e2);
    assert_ne!(d3, d2);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let data = scenes(24);
    let cfg = quick(1, 1, 0);
    let a = model();
    let b = model();
    let ra = train(&a, &data, &cfg, &heatmap(), &LossConfig::default()).unwrap();
    let rb = train(&b, &data, &cfg, &heatmap(), &LossConfig::default()).unwrap();
    assert_eq!(a.params().checksum("").unwrap(), b.params().checksum("").unwrap());
    assert_eq!(ra.history, rb.history);
    assert_eq!(ra.history.len(), 2);
}

#[test]
fn zero_epoch_schedule_leaves_model_unchanged() {
    let data = scenes(12);
    let m = model();
    let before = m.params().checksum("").unwrap();
    let report = train(&m, &data, &quick(0, 0, 0), &heatmap(), &LossConfig::default()).unwrap();
    assert_eq!(m.params().checksum("").unwrap(), before);
    assert!(report.history.is_empty());
    assert_eq!(report.initial_val_loss, report.final_val_loss);
}

#[test]
fn stage_checkpoints_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(16);
    let m = model();
    let cfg = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..quick(1, 0, 1)
    };
    let report = train(&m, &data, &cfg, &heatmap(), &LossConfig::default()).unwrap();
    assert!(dir.path().join("stage_encoder_only.safetensors").exists());
    assert!(!dir.path().join("stage_decoder_only.safetensors").exists());
    let last = dir.path().join("stage_joint.safetensors");
    let loaded = LocalizerModel::load(&last, &Device::Cpu).unwrap();
    assert_eq!(loaded.params().checksum("").unwrap(), m.params().checksum("").unwrap());
    assert_eq!(report.train_scenes + report.val_scenes, 16);
    assert!(report.val_metrics.is_some());
    let json = dir.path().join("report.json");
    report.write_json(&json).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(parsed["history"].as_array().unwrap().len(), 2);
}
