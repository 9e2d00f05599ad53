//! Component ablation: enhancement, coarse heatmap learner and finer coordinate
//! learner toggled as in the four-row block study.
//!
//! Rows without one of the learners need a stand-in for the missing part:
//! the enhancement-only row regresses coordinates straight from mean-pooled
//! encoder tokens, and the finer-only row feeds the raw image to the decoder.

use std::sync::atomic::{AtomicBool, Ordering};

use candle_core::{Device, Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::config::{SMALL_BATCH_SIZE, SMALL_SIGMA};
use crate::enhancer::{enhance_scene, PatchTranslator};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, EvalReport, Prediction, Predictor};
use crate::heatmap::HeatmapConfig;
use crate::image::GrayImage;
use crate::localizer::{images_to_tensor, tensor_to_points, Decoder, Encoder, LocalizerConfig, LocalizerModel};
use crate::losses::{hungarian_loss_tensor, LossConfig};
use crate::nn::ParamStore;
use crate::synthdata::LabeledScene;
use crate::trainer::{fit, stage_loss, train, FitData, Phase, StageName, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    GanOnly,
    GanCoarse,
    GanFiner,
    GanCoarseFiner,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] = [
        AblationRow::GanOnly,
        AblationRow::GanCoarse,
        AblationRow::GanFiner,
        AblationRow::GanCoarseFiner,
    ];

    pub fn has_coarse(self) -> bool {
        matches!(self, AblationRow::GanCoarse | AblationRow::GanCoarseFiner)
    }

    pub fn has_finer(self) -> bool {
        matches!(self, AblationRow::GanFiner | AblationRow::GanCoarseFiner)
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::GanOnly => "GAN",
            AblationRow::GanCoarse => "GAN + coarse",
            AblationRow::GanFiner => "GAN + finer",
            AblationRow::GanCoarseFiner => "GAN + coarse + finer",
        }
    }

    fn interpretation(self) -> Option<&'static str> {
        match self {
            AblationRow::GanOnly => Some("stand-in: linear regression head on mean-pooled encoder tokens"),
            AblationRow::GanFiner => Some("stand-in: residual decoder fed the raw image"),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub row: AblationRow,
    pub label: String,
    pub gan: bool,
    pub coarse: bool,
    pub finer: bool,
    /// Absent for rows that predict no heatmap.
    pub heatmap_iou: Option<f64>,
    pub mean_matched_distance_px: f64,
    pub accuracy_at_10: f64,
    pub interpretation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationEntry>,
}

impl AblationTable {
    pub fn row(&self, row: AblationRow) -> Option<&AblationEntry> {
        self.rows.iter().find(|r| r.row == row)
    }

    /// Plain-text table, one line per row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<22} {:>8} {:>12} {:>9}\n", "configuration", "IoU", "distance px", "Acc@10");
        for r in &self.rows {
            let iou = r.heatmap_iou.map_or_else(|| "nan".to_string(), |v| format!("{v:.3}"));
            s.push_str(&format!(
                "{:<22} {:>8} {:>12.3} {:>8.2}%{}\n",
                r.label,
                iou,
                r.mean_matched_distance_px,
                r.accuracy_at_10,
                r.interpretation.as_ref().map_or(String::new(), |i| format!("  ({i})"))
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub localizer: LocalizerConfig,
    pub train: TrainConfig,
    pub heatmap: HeatmapConfig,
    pub loss: LossConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            localizer: LocalizerConfig::small(),
            train: TrainConfig {
                batch_size: SMALL_BATCH_SIZE,
                ..TrainConfig::with_epochs(5, 5, 10)
            },
            heatmap: HeatmapConfig {
                sigma: SMALL_SIGMA,
                ..HeatmapConfig::default()
            },
            loss: LossConfig::default(),
        }
    }
}

enum Body {
    Tokens { trunk: Encoder, head: Linear },
    Raw { decoder: Decoder },
}

/// Coordinate regressor without a heatmap stage.
pub struct Regressor {
    store: ParamStore,
    body: Body,
    image_size: usize,
    max_tips: usize,
    scale: f64,
    training: AtomicBool,
}

impl Regressor {
    /// Linear head on mean-pooled encoder tokens.
    pub fn tokens(config: &LocalizerConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.seed, device);
        let vb = store.var_builder();
        let trunk = Encoder::new(config.image_size, &config.encoder, vb.pp("trunk"))?;
        let head = candle_nn::linear(config.encoder.embed_dim, 2 * config.decoder.max_tips, vb.pp("head"))?;
        Ok(Self::wrap(config, store, Body::Tokens { trunk, head }))
    }

    /// Residual decoder applied directly to the image.
    pub fn raw(config: &LocalizerConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.seed, device);
        let decoder = Decoder::new(1, &config.decoder, &store, store.var_builder().pp("decoder"))?;
        Ok(Self::wrap(config, store, Body::Raw { decoder }))
    }

    fn wrap(config: &LocalizerConfig, store: ParamStore, body: Body) -> Self {
        Self {
            store,
            body,
            image_size: config.image_size,
            max_tips: config.decoder.max_tips,
            scale: config.decoder.output_scale,
            training: AtomicBool::new(false),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Trainable variables; the unused heatmap head of the token trunk is left out.
    fn trainable(&self) -> Vec<(String, candle_core::Var)> {
        self.store
            .trainable("")
            .into_iter()
            .filter(|(n, _)| !n.contains("heatmap_head"))
            .collect()
    }

    fn set_training(&self, t: bool) {
        self.training.store(t, Ordering::Relaxed);
    }

    /// `(B, 1, H, W)` → `(B, max_tips, 2)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        match &self.body {
            Body::Tokens { trunk, head } => {
                let b = images.dim(0)?;
                let pooled = trunk.features(images)?.mean(1)?;
                let raw = head.forward(&pooled)?;
                Ok((candle_nn::ops::sigmoid(&raw)? * self.scale)?.reshape((b, self.max_tips, 2))?)
            }
            Body::Raw { decoder } => Ok(decoder.forward_t(images, self.training.load(Ordering::Relaxed))?),
        }
    }
}

impl Predictor for Regressor {
    fn predict_batch(&self, images: &[&GrayImage]) -> Result<Vec<Prediction>> {
        let x = images_to_tensor(images, self.image_size, self.store.device())?;
        Ok(tensor_to_points(&self.forward(&x)?)?
            .into_iter()
            .map(|tips| Prediction { tips, heatmap: None })
            .collect())
    }
}

/// Reads tips as the strongest separated heatmap peaks of an encoder.
pub struct PeakPredictor<'a> {
    pub model: &'a LocalizerModel,
    pub min_separation: f64,
}

impl Predictor for PeakPredictor<'_> {
    fn predict_batch(&self, images: &[&GrayImage]) -> Result<Vec<Prediction>> {
        let k = self.model.config().decoder.max_tips;
        images
            .iter()
            .map(|im| {
                let h = self.model.encode(im)?;
                Ok(Prediction {
                    tips: h.peaks(k, self.min_separation),
                    heatmap: Some(h),
                })
            })
            .collect()
    }
}

/// Trains a single network through every stage budget of `config.train` in
/// turn, with all of its parameters free.
fn fit_all_stages(
    data: &FitData,
    config: &AblationConfig,
    tag: &str,
    params: &dyn Fn() -> Vec<(String, candle_core::Var)>,
    set_training: &dyn Fn(bool),
    loss: &dyn Fn(&crate::trainer::Batch) -> Result<Tensor>,
) -> Result<()> {
    for (i, stage) in config.train.stages.iter().enumerate() {
        fit(
            data,
            Phase {
                tag,
                index: 100 + i as u64,
                epochs: stage.epochs,
                learning_rate: stage.learning_rate,
                patience: stage.plateau_patience,
                factor: stage.plateau_factor,
                params: params(),
            },
            set_training,
            loss,
        )?;
    }
    Ok(())
}

fn entry(row: AblationRow, gan: bool, report: &EvalReport) -> AblationEntry {
    AblationEntry {
        row,
        label: row.label().to_string(),
        gan,
        coarse: row.has_coarse(),
        finer: row.has_finer(),
        heatmap_iou: if row.has_coarse() { report.heatmap_iou } else { None },
        mean_matched_distance_px: report.mean_matched_distance_px(),
        accuracy_at_10: report.accuracy(10.0).unwrap_or(f64::NAN),
        interpretation: row.interpretation().map(str::to_string),
    }
}

/// Trains and evaluates the four rows under one budget. `full` reuses an
/// already trained full model for the last row; `enhancer` preprocesses both
/// splits when given.
pub fn run_ablation(
    config: &AblationConfig,
    train_set: &[LabeledScene],
    test_set: &[LabeledScene],
    enhancer: Option<&dyn PatchTranslator>,
    full: Option<&LocalizerModel>,
    device: &Device,
) -> Result<AblationTable> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::EmptyInput("ablation dataset"));
    }
    config.localizer.validate()?;
    config.train.validate()?;
    let enhance = |scenes: &[LabeledScene]| -> Result<Vec<LabeledScene>> {
        match enhancer {
            Some(t) => scenes.iter().map(|s| enhance_scene(s, t)).collect(),
            None => Ok(scenes.to_vec()),
        }
    };
    let train_set = enhance(train_set)?;
    let test_set = enhance(test_set)?;
    let gan = enhancer.is_some();
    let eval = EvalConfig {
        thresholds_um: vec![10.0],
        um_per_pixel: 1.0,
        heatmap: config.heatmap.clone(),
        ..EvalConfig::default()
    };
    let data = FitData::new(&train_set, &config.train, &config.heatmap, device)?;
    let mut rows = Vec::with_capacity(4);

    let direct = Regressor::tokens(&config.localizer, device)?;
    fit_all_stages(
        &data,
        config,
        "ablation_gan_only",
        &|| direct.trainable(),
        &|t| direct.set_training(t),
        &|b| Ok(hungarian_loss_tensor(&direct.forward(&b.images)?, &b.tips)?.0),
    )?;
    direct.set_training(false);
    rows.push(entry(AblationRow::GanOnly, gan, &evaluate(&direct, &test_set, &eval)?));

    let coarse = LocalizerModel::new(config.localizer.clone(), device)?;
    fit_all_stages(
        &data,
        config,
        "ablation_gan_coarse",
        &|| coarse.params().trainable("encoder."),
        &|t| coarse.set_training(t),
        &|b| stage_loss(&coarse, StageName::EncoderOnly, &config.loss, b),
    )?;
    let peaks = PeakPredictor {
        model: &coarse,
        min_separation: config.heatmap.sigma,
    };
    rows.push(entry(AblationRow::GanCoarse, gan, &evaluate(&peaks, &test_set, &eval)?));

    let raw = Regressor::raw(&config.localizer, device)?;
    fit_all_stages(
        &data,
        config,
        "ablation_gan_finer",
        &|| raw.trainable(),
        &|t| raw.set_training(t),
        &|b| Ok(hungarian_loss_tensor(&raw.forward(&b.images)?, &b.tips)?.0),
    )?;
    raw.set_training(false);
    rows.push(entry(AblationRow::GanFiner, gan, &evaluate(&raw, &test_set, &eval)?));

    let trained;
    let full = match full {
        Some(m) => m,
        None => {
            trained = LocalizerModel::new(config.localizer.clone(), device)?;
            train(&trained, &train_set, &config.train, &config.heatmap, &config.loss)?;
            &trained
        }
    };
    full.set_training(false);
    rows.push(entry(AblationRow::GanCoarseFiner, gan, &evaluate(full, &test_set, &eval)?));
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regressors_emit_bounded_coordinates() {
        let cfg = LocalizerConfig::small();
        let x = Tensor::rand(0f32, 1f32, (2, 1, 64, 64), &Device::Cpu).unwrap();
        for r in [Regressor::tokens(&cfg, &Device::Cpu).unwrap(), Regressor::raw(&cfg, &Device::Cpu).unwrap()] {
            let y = r.forward(&x).unwrap();
            assert_eq!(y.dims(), &[2, 4, 2]);
            let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|c| (0.0..=64.0).contains(c)));
            assert!(r.trainable().iter().all(|(n, _)| !n.contains("heatmap_head")));
        }
    }

    #[test]
    fn table_text_marks_missing_iou() {
        let rows = AblationRow::ALL
            .iter()
            .map(|&row| AblationEntry {
                row,
                label: row.label().into(),
                gan: true,
                coarse: row.has_coarse(),
                finer: row.has_finer(),
                heatmap_iou: row.has_coarse().then_some(0.5),
                mean_matched_distance_px: 1.0,
                accuracy_at_10: 100.0,
                interpretation: row.interpretation().map(str::to_string),
            })
            .collect();
        let t = AblationTable { rows };
        let text = t.to_text();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.matches("nan").count(), 2);
    }
}
