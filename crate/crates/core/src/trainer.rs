//! Three-stage training: the encoder alone on the heatmap loss, the decoder alone
//! on the coordinate loss, then both jointly on the combined objective.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, EvalReport};
use crate::geometry::Point;
use crate::heatmap::{gaussian_heatmap, HeatmapConfig};
use crate::image::GrayImage;
use crate::localizer::LocalizerModel;
use crate::losses::{dice_loss_tensor, hungarian_loss_tensor, LossConfig};
use crate::nn::{Adam, AdamConfig};
use crate::synthdata::LabeledScene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    EncoderOnly,
    DecoderOnly,
    Joint,
}

impl StageName {
    pub const ORDER: [StageName; 3] = [StageName::EncoderOnly, StageName::DecoderOnly, StageName::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::EncoderOnly => "encoder_only",
            StageName::DecoderOnly => "decoder_only",
            StageName::Joint => "joint",
        }
    }

    /// Parameter-name prefixes held fixed during the stage.
    pub fn frozen_prefixes(self) -> &'static [&'static str] {
        match self {
            StageName::EncoderOnly => &["decoder."],
            StageName::DecoderOnly => &["encoder."],
            StageName::Joint => &[],
        }
    }

    fn trainable_prefix(self) -> &'static str {
        match self {
            StageName::EncoderOnly => "encoder.",
            StageName::DecoderOnly => "decoder.",
            StageName::Joint => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: StageName,
    /// Zero skips the stage.
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_patience")]
    pub plateau_patience: usize,
    #[serde(default = "default_factor")]
    pub plateau_factor: f64,
}

fn default_patience() -> usize {
    20
}

fn default_factor() -> f64 {
    0.5
}

impl StageSpec {
    pub fn new(name: StageName, epochs: usize, learning_rate: f64) -> Self {
        Self {
            name,
            epochs,
            learning_rate,
            plateau_patience: default_patience(),
            plateau_factor: default_factor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            horizontal_flip: true,
            vertical_flip: true,
            scale_range: [0.9, 1.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub stages: Vec<StageSpec>,
    pub augmentation: AugmentConfig,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Directory for a checkpoint after each stage.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_epochs(50, 50, 100)
    }
}

impl TrainConfig {
    /// Default hyperparameters with the given per-stage epoch counts.
    pub fn with_epochs(encoder: usize, decoder: usize, joint: usize) -> Self {
        Self {
            batch_size: 32,
            optimizer: AdamConfig::default(),
            stages: vec![
                StageSpec::new(StageName::EncoderOnly, encoder, 1e-4),
                StageSpec::new(StageName::DecoderOnly, decoder, 1e-3),
                StageSpec::new(StageName::Joint, joint, 1e-4),
            ],
            augmentation: AugmentConfig::default(),
            validation_fraction: 0.1,
            seed: 0,
            checkpoint_dir: None,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        let names: Vec<StageName> = self.stages.iter().map(|s| s.name).collect();
        if names != StageName::ORDER {
            return Err(Error::config(
                "train.stages",
                "must list encoder_only, decoder_only, joint in that order",
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.learning_rate.is_finite() && s.learning_rate > 0.0) {
                return Err(Error::config(format!("train.stages[{i}].learning_rate"), "must be positive"));
            }
            if !(s.plateau_factor > 0.0 && s.plateau_factor <= 1.0) {
                return Err(Error::config(format!("train.stages[{i}].plateau_factor"), "must lie in (0, 1]"));
            }
            if s.plateau_patience == 0 {
                return Err(Error::config(format!("train.stages[{i}].plateau_patience"), "must be positive"));
            }
        }
        let [lo, hi] = self.augmentation.scale_range;
        if !(lo > 0.0 && lo <= hi && hi < 2.0) {
            return Err(Error::config("train.augmentation.scale_range", "must satisfy 0 < lo <= hi < 2"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("train.validation_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        horizontal_flip: false,
        vertical_flip: false,
        scale: 1.0,
    };

    pub fn sample(config: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let h = rng.random_bool(0.5);
        let v = rng.random_bool(0.5);
        let [lo, hi] = config.scale_range;
        let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self {
            horizontal_flip: config.horizontal_flip && h,
            vertical_flip: config.vertical_flip && v,
            scale: s,
        }
    }

    /// Forward map of a point, before clamping.
    fn map(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let (w1, h1) = ((width - 1) as f64, (height - 1) as f64);
        let x = if self.horizontal_flip { w1 - x } else { x };
        let y = if self.vertical_flip { h1 - y } else { y };
        let (cx, cy) = (w1 / 2.0, h1 / 2.0);
        (cx + self.scale * (x - cx), cy + self.scale * (y - cy))
    }

    pub fn apply_tips(&self, tips: &[Point], width: usize, height: usize) -> Vec<Point> {
        tips.iter()
            .map(|t| {
                let (x, y) = self.map(t.x, t.y, width, height);
                Point::new(x.clamp(0.0, (width - 1) as f64), y.clamp(0.0, (height - 1) as f64))
            })
            .collect()
    }

    /// Resamples the image under the same transform; pixels mapped from outside are zero.
    pub fn apply_image(&self, image: &GrayImage) -> GrayImage {
        let (w, h) = (image.width(), image.height());
        if self.scale == 1.0 {
            return GrayImage::from_fn(w, h, |x, y| {
                let sx = if self.horizontal_flip { w - 1 - x } else { x };
                let sy = if self.vertical_flip { h - 1 - y } else { y };
                image.get(sx, sy)
            });
        }
        let (w1, h1) = ((w - 1) as f64, (h - 1) as f64);
        let (cx, cy) = (w1 / 2.0, h1 / 2.0);
        GrayImage::from_fn(w, h, |x, y| {
            let ux = cx + (x as f64 - cx) / self.scale;
            let uy = cy + (y as f64 - cy) / self.scale;
            let sx = if self.horizontal_flip { w1 - ux } else { ux };
            let sy = if self.vertical_flip { h1 - uy } else { uy };
            image.sample_bilinear(sx, sy)
        })
    }

    pub fn apply(&self, scene: &LabeledScene) -> LabeledScene {
        let (w, h) = (scene.image.width(), scene.image.height());
        LabeledScene {
            image: self.apply_image(&scene.image),
            tips: self.apply_tips(&scene.tips, w, h),
            domain: scene.domain,
            um_per_pixel: scene.um_per_pixel,
        }
    }
}

/// Random flips and scaling applied consistently to image and tips.
pub fn augment(scene: &LabeledScene, config: &AugmentConfig, rng: &mut impl Rng) -> LabeledScene {
    AugmentParams::sample(config, rng).apply(scene)
}

/// Halves (by `factor`) the learning rate once the monitored loss has gone
/// `patience` consecutive observations without strictly improving on the best.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    lr: f64,
    patience: usize,
    factor: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauSchedule {
    /// `baseline` is the loss before the first epoch, if measured.
    pub fn new(lr: f64, patience: usize, factor: f64, baseline: Option<f64>) -> Self {
        Self {
            lr,
            patience,
            factor,
            best: baseline,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's loss and returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(b) if loss >= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr *= self.factor;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Learning rate in effect during each epoch given the validation history.
pub fn lr_per_epoch(initial: f64, patience: usize, factor: f64, baseline: f64, losses: &[f64]) -> Vec<f64> {
    let mut s = PlateauSchedule::new(initial, patience, factor, Some(baseline));
    let mut out = Vec::with_capacity(losses.len());
    for &l in losses {
        out.push(s.lr());
        s.observe(l);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Combined objective on the validation split before any training.
    pub initial_val_loss: f64,
    /// Combined objective on the validation split after the last stage.
    pub final_val_loss: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub val_metrics: Option<EvalReport>,
}

impl TrainReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Deterministic `(train, val)` index split.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (n as f64 * validation_fraction).round() as usize;
    if validation_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    parts.hash(&mut h);
    h.finish()
}

pub(crate) struct Batch {
    pub images: Tensor,
    pub heatmaps: Tensor,
    pub tips: Vec<Vec<Point>>,
}

pub(crate) fn make_batch(scenes: &[LabeledScene], heatmap: &HeatmapConfig, device: &candle_core::Device) -> Result<Batch> {
    let (w, h) = (scenes[0].image.width(), scenes[0].image.height());
    let mut images = Vec::with_capacity(scenes.len() * w * h);
    let mut maps = Vec::with_capacity(scenes.len() * w * h);
    let mut tips = Vec::with_capacity(scenes.len());
    for s in scenes {
        if s.image.width() != w || s.image.height() != h {
            return Err(Error::ShapeMismatch {
                expected: format!("{w}x{h}"),
                actual: format!("{}x{}", s.image.width(), s.image.height()),
            });
        }
        images.extend_from_slice(s.image.data());
        let hm = gaussian_heatmap(&s.tips, h, w, heatmap)?;
        maps.extend(hm.data().iter().map(|&v| v as f32));
        tips.push(s.tips.clone());
    }
    let b = scenes.len();
    Ok(Batch {
        images: Tensor::from_vec(images, (b, 1, h, w), device)?,
        heatmaps: Tensor::from_vec(maps, (b, 1, h, w), device)?,
        tips,
    })
}

/// Everything a fitting run needs besides the model-specific loss.
pub(crate) struct FitData<'a> {
    pub train: Vec<&'a LabeledScene>,
    pub val: Vec<Batch>,
    pub val_count: usize,
    pub config: &'a TrainConfig,
    pub heatmap: &'a HeatmapConfig,
    pub device: candle_core::Device,
}

impl<'a> FitData<'a> {
    pub fn new(
        scenes: &'a [LabeledScene],
        config: &'a TrainConfig,
        heatmap: &'a HeatmapConfig,
        device: &candle_core::Device,
    ) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::EmptyInput("training dataset"));
        }
        let (train_idx, val_idx) = split_indices(scenes.len(), config.validation_fraction, config.seed);
        let val_scenes: Vec<LabeledScene> = val_idx.iter().map(|&i| scenes[i].clone()).collect();
        let val = val_scenes
            .chunks(config.batch_size)
            .map(|c| make_batch(c, heatmap, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train: train_idx.iter().map(|&i| &scenes[i]).collect(),
            val,
            val_count: val_scenes.len(),
            config,
            heatmap,
            device: device.clone(),
        })
    }

    pub fn val_scenes(&self, scenes: &'a [LabeledScene]) -> Vec<LabeledScene> {
        let (_, val_idx) = split_indices(scenes.len(), self.config.validation_fraction, self.config.seed);
        val_idx.iter().map(|&i| scenes[i].clone()).collect()
    }

    /// Sample-weighted mean of `loss` over the validation batches (training loss
    /// over unaugmented training scenes when there is no validation split).
    pub fn val_loss(&self, loss: &dyn Fn(&Batch) -> Result<Tensor>) -> Result<f64> {
        let owned;
        let batches: &[Batch] = if self.val.is_empty() {
            let scenes: Vec<LabeledScene> = self.train.iter().map(|s| (*s).clone()).collect();
            owned = scenes
                .chunks(self.config.batch_size)
                .map(|c| make_batch(c, self.heatmap, &self.device))
                .collect::<Result<Vec<_>>>()?;
            &owned
        } else {
            &self.val
        };
        let (mut total, mut n) = (0.0, 0usize);
        for b in batches {
            let k = b.tips.len();
            total += scalar(&loss(b)?)? * k as f64;
            n += k;
        }
        Ok(total / n as f64)
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(f64::from(t.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?))
}

/// One optimization phase over `params` with augmentation and plateau halving.
pub(crate) struct Phase<'a> {
    pub tag: &'a str,
    pub index: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub factor: f64,
    pub params: Vec<(String, Var)>,
}

pub(crate) fn fit(
    data: &FitData,
    phase: Phase,
    set_training: &dyn Fn(bool),
    loss: &dyn Fn(&Batch) -> Result<Tensor>,
) -> Result<Vec<EpochRecord>> {
    let cfg = data.config;
    let mut history = Vec::with_capacity(phase.epochs);
    if phase.epochs == 0 {
        return Ok(history);
    }
    if data.train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let mut opt = Adam::new(
        phase.params,
        AdamConfig {
            lr: phase.learning_rate,
            ..cfg.optimizer
        },
    )?;
    set_training(false);
    let baseline = data.val_loss(loss)?;
    let mut plateau = PlateauSchedule::new(phase.learning_rate, phase.patience, phase.factor, Some(baseline));
    for epoch in 1..=phase.epochs {
        let lr = plateau.lr();
        opt.set_learning_rate(lr);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, phase.index, epoch as u64])));
        set_training(true);
        let (mut total, mut seen) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let scenes: Vec<LabeledScene> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, phase.index, epoch as u64, i as u64]));
                    augment(data.train[i], &cfg.augmentation, &mut rng)
                })
                .collect();
            let batch = make_batch(&scenes, data.heatmap, &data.device)?;
            let l = loss(&batch)?;
            let v = scalar(&l)?;
            if !v.is_finite() {
                set_training(false);
                return Err(Error::NonFiniteLoss {
                    stage: phase.tag.to_string(),
                    epoch,
                    batch: bi,
                });
            }
            opt.backward_step(&l)?;
            total += v * chunk.len() as f64;
            seen += chunk.len();
        }
        set_training(false);
        let val_loss = data.val_loss(loss)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: phase.tag.to_string(),
                epoch,
                batch: usize::MAX,
            });
        }
        plateau.observe(val_loss);
        let rec = EpochRecord {
            stage: phase.tag.to_string(),
            epoch,
            lr,
            train_loss: total / seen as f64,
            val_loss,
        };
        log::info!(
            "{} epoch {epoch}: lr {lr:.2e} train {:.5} val {:.5}",
            rec.stage,
            rec.train_loss,
            rec.val_loss
        );
        history.push(rec);
    }
    Ok(history)
}

/// The loss a stage optimizes, evaluated on one batch.
pub(crate) fn stage_loss(model: &LocalizerModel, stage: StageName, loss: &LossConfig, batch: &Batch) -> Result<Tensor> {
    match stage {
        StageName::EncoderOnly => {
            let h = model.encode_batch(&batch.images)?;
            dice_loss_tensor(&h, &batch.heatmaps, loss.dice_smoothing)
        }
        StageName::DecoderOnly => {
            let h = model.encode_batch(&batch.images)?.detach();
            let tips = model.decode_batch(&h)?;
            Ok(hungarian_loss_tensor(&tips, &batch.tips)?.0)
        }
        StageName::Joint => {
            let h = model.encode_batch(&batch.images)?;
            let dice = dice_loss_tensor(&h, &batch.heatmaps, loss.dice_smoothing)?;
            let tips = model.decode_batch(&h)?;
            let (hung, _) = hungarian_loss_tensor(&tips, &batch.tips)?;
            Ok((dice + (hung * loss.alpha)?)?)
        }
    }
}

fn run_stage_on(
    model: &LocalizerModel,
    data: &FitData,
    stage: &StageSpec,
    index: u64,
    loss: &LossConfig,
) -> Result<Vec<EpochRecord>> {
    let params = model.params().trainable(stage.name.trainable_prefix());
    fit(
        data,
        Phase {
            tag: stage.name.as_str(),
            index,
            epochs: stage.epochs,
            learning_rate: stage.learning_rate,
            patience: stage.plateau_patience,
            factor: stage.plateau_factor,
            params,
        },
        &|t| model.set_training(t),
        &|b| stage_loss(model, stage.name, loss, b),
    )
}

/// Runs a single stage on `scenes` (split as in [`train`]).
pub fn run_stage(
    model: &LocalizerModel,
    scenes: &[LabeledScene],
    stage: &StageSpec,
    config: &TrainConfig,
    heatmap: &HeatmapConfig,
    loss: &LossConfig,
) -> Result<Vec<EpochRecord>> {
    let data = FitData::new(scenes, config, heatmap, model.device())?;
    let index = StageName::ORDER.iter().position(|&n| n == stage.name).unwrap_or(0) as u64;
    run_stage_on(model, &data, stage, index, loss)
}

/// Runs the three stages in order and reports loss curves and validation metrics.
pub fn train(
    model: &LocalizerModel,
    scenes: &[LabeledScene],
    config: &TrainConfig,
    heatmap: &HeatmapConfig,
    loss: &LossConfig,
) -> Result<TrainReport> {
    config.validate()?;
    heatmap.validate()?;
    loss.validate()?;
    let data = FitData::new(scenes, config, heatmap, model.device())?;
    let total = |m: &LocalizerModel| data.val_loss(&|b| stage_loss(m, StageName::Joint, loss, b));
    model.set_training(false);
    let initial_val_loss = total(model)?;
    let mut history = Vec::new();
    for (i, stage) in config.stages.iter().enumerate() {
        if stage.epochs == 0 {
            continue;
        }
        history.extend(run_stage_on(model, &data, stage, i as u64, loss)?);
        if let Some(dir) = &config.checkpoint_dir {
            let mut meta = HashMap::new();
            meta.insert("stage".into(), stage.name.as_str().into());
            model.save_with(&dir.join(format!("stage_{}.safetensors", stage.name.as_str())), meta)?;
        }
    }
    model.set_training(false);
    let final_val_loss = total(model)?;
    let val = data.val_scenes(scenes);
    let val_metrics = if val.is_empty() {
        None
    } else {
        let eval = EvalConfig {
            um_per_pixel: val[0].um_per_pixel,
            heatmap: heatmap.clone(),
            ..EvalConfig::default()
        };
        Some(evaluate(model, &val, &eval)?)
    };
    Ok(TrainReport {
        history,
        initial_val_loss,
        final_val_loss,
        train_scenes: data.train.len(),
        val_scenes: data.val_count,
        val_metrics,
    })
}
