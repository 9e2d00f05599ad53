//! Matched-distance error, accuracy within distance thresholds, heatmap IoU,
//! inference latency and Fig.-style overlays.

use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::assignment::{cost_matrix, hungarian};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::heatmap::{gaussian_heatmap, heatmap_iou, Heatmap, HeatmapConfig};
use crate::image::GrayImage;
use crate::localizer::LocalizerModel;
use crate::nn::device_label;
use crate::synthdata::LabeledScene;

/// Threshold, in µm, used to colour overlay markers.
pub const OVERLAY_THRESHOLD_UM: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub tips: Vec<Point>,
    /// Present only for models with a coarse (heatmap) stage.
    pub heatmap: Option<Heatmap>,
}

/// Anything that maps images to tip predictions.
pub trait Predictor {
    fn predict_batch(&self, images: &[&GrayImage]) -> Result<Vec<Prediction>>;
}

impl Predictor for LocalizerModel {
    fn predict_batch(&self, images: &[&GrayImage]) -> Result<Vec<Prediction>> {
        Ok(self
            .predict_images(images)?
            .into_iter()
            .map(|(h, tips)| Prediction {
                tips,
                heatmap: Some(h),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds_um: Vec<f64>,
    pub um_per_pixel: f64,
    /// Ground-truth heatmap parameters and the IoU binarization level.
    pub heatmap: HeatmapConfig,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds_um: vec![3.0, 5.0, 10.0],
            um_per_pixel: 1.0,
            heatmap: HeatmapConfig::default(),
            batch_size: 32,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds_um.is_empty() || self.thresholds_um.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::config("eval.thresholds_um", "must be a non-empty list of positive values"));
        }
        if !(self.um_per_pixel.is_finite() && self.um_per_pixel > 0.0) {
            return Err(Error::config("eval.um_per_pixel", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        self.heatmap.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedTip {
    pub prediction: usize,
    pub truth: usize,
    pub distance_px: f64,
    pub distance_um: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub truth: Vec<Point>,
    pub predicted: Vec<Point>,
    pub matches: Vec<MatchedTip>,
    pub heatmap_iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyAt {
    pub threshold_um: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean Euclidean distance over matched pairs, reported as "MSE" in the literature.
    pub mean_matched_distance_um: f64,
    /// Mean of squared matched distances.
    pub mean_squared_distance_um2: f64,
    pub accuracy_at: Vec<AccuracyAt>,
    /// Mean over scenes; absent when the predictor emits no heatmaps.
    pub heatmap_iou: Option<f64>,
    pub per_scene: Vec<SceneRecord>,
    pub um_per_pixel: f64,
    pub truth_tips: usize,
    pub matched_tips: usize,
}

impl EvalReport {
    pub fn accuracy(&self, threshold_um: f64) -> Option<f64> {
        self.accuracy_at
            .iter()
            .find(|a| a.threshold_um == threshold_um)
            .map(|a| a.percent)
    }

    pub fn mean_matched_distance_px(&self) -> f64 {
        self.mean_matched_distance_um / self.um_per_pixel
    }
}

/// Matches predictions to labels scene by scene and aggregates the metrics.
pub fn evaluate(predictor: &dyn Predictor, dataset: &[LabeledScene], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset"));
    }
    let mut per_scene = Vec::with_capacity(dataset.len());
    for (c, chunk) in dataset.chunks(config.batch_size).enumerate() {
        let images: Vec<&GrayImage> = chunk.iter().map(|s| &s.image).collect();
        let preds = predictor.predict_batch(&images)?;
        if preds.len() != chunk.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} predictions", chunk.len()),
                actual: preds.len().to_string(),
            });
        }
        for (k, (scene, pred)) in chunk.iter().zip(preds).enumerate() {
            per_scene.push(score_scene(c * config.batch_size + k, scene, &pred, config)?);
        }
    }
    Ok(aggregate(per_scene, config))
}

fn score_scene(index: usize, scene: &LabeledScene, pred: &Prediction, config: &EvalConfig) -> Result<SceneRecord> {
    if pred.tips.is_empty() {
        return Err(Error::EmptyInput("predicted tips"));
    }
    let assignment = hungarian(&cost_matrix(&pred.tips, &scene.tips)?)?;
    let matches = assignment
        .pairs
        .iter()
        .map(|&(p, t)| {
            let d = pred.tips[p].distance(&scene.tips[t]);
            MatchedTip {
                prediction: p,
                truth: t,
                distance_px: d,
                distance_um: d * config.um_per_pixel,
            }
        })
        .collect();
    let heatmap_iou = match &pred.heatmap {
        Some(h) => {
            let truth = gaussian_heatmap(&scene.tips, scene.image.height(), scene.image.width(), &config.heatmap)?;
            Some(heatmap_iou(h, &truth, config.heatmap.iou_threshold)?)
        }
        None => None,
    };
    Ok(SceneRecord {
        index,
        truth: scene.tips.clone(),
        predicted: pred.tips.clone(),
        matches,
        heatmap_iou,
    })
}

fn aggregate(per_scene: Vec<SceneRecord>, config: &EvalConfig) -> EvalReport {
    let truth_tips: usize = per_scene.iter().map(|s| s.truth.len()).sum();
    let distances: Vec<f64> = per_scene
        .iter()
        .flat_map(|s| s.matches.iter().map(|m| m.distance_um))
        .collect();
    let matched = distances.len();
    let mean = distances.iter().sum::<f64>() / matched as f64;
    let mean_sq = distances.iter().map(|d| d * d).sum::<f64>() / matched as f64;
    let accuracy_at = config
        .thresholds_um
        .iter()
        .map(|&e| AccuracyAt {
            threshold_um: e,
            percent: 100.0 * distances.iter().filter(|&&d| d <= e).count() as f64 / truth_tips as f64,
        })
        .collect();
    let ious: Vec<f64> = per_scene.iter().filter_map(|s| s.heatmap_iou).collect();
    let heatmap_iou = (ious.len() == per_scene.len()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    EvalReport {
        mean_matched_distance_um: mean,
        mean_squared_distance_um2: mean_sq,
        accuracy_at,
        heatmap_iou,
        per_scene,
        um_per_pixel: config.um_per_pixel,
        truth_tips,
        matched_tips: matched,
    }
}

/// A forward pass that can be timed.
pub trait InferenceTarget {
    fn device(&self) -> &Device;
    /// `(C, H, W)` of one input.
    fn input_dims(&self) -> (usize, usize, usize);
    fn run(&self, batch: &Tensor) -> Result<()>;
}

impl InferenceTarget for LocalizerModel {
    fn device(&self) -> &Device {
        LocalizerModel::device(self)
    }

    fn input_dims(&self) -> (usize, usize, usize) {
        let n = self.config().image_size;
        (1, n, n)
    }

    fn run(&self, batch: &Tensor) -> Result<()> {
        let h = self.encode_batch(batch)?;
        self.decode_batch(&h)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mean_seconds_per_image: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub device_label: String,
    /// Wall-clock seconds of each timed iteration (whole batch).
    pub samples_seconds: Vec<f64>,
}

impl LatencyReport {
    /// `mean(samples) / batch_size`, the same expression used to fill the report.
    pub fn mean_from_samples(samples: &[f64], batch_size: usize) -> f64 {
        samples.iter().sum::<f64>() / samples.len() as f64 / batch_size as f64
    }

    pub fn recomputed_mean(&self) -> f64 {
        Self::mean_from_samples(&self.samples_seconds, self.batch_size)
    }
}

/// Times `iterations` forward passes of a random batch after `warmup` untimed
/// passes; the device is synchronized before and after every timed pass.
pub fn benchmark_inference(
    target: &dyn InferenceTarget,
    batch_size: usize,
    iterations: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if iterations == 0 {
        return Err(Error::config("bench.iterations", "must be at least 1"));
    }
    if batch_size == 0 {
        return Err(Error::config("bench.batch_size", "must be positive"));
    }
    let (c, h, w) = target.input_dims();
    let device = target.device();
    let batch = Tensor::rand(0f32, 1f32, (batch_size, c, h, w), device)?;
    for _ in 0..warmup {
        target.run(&batch)?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        device.synchronize()?;
        let t0 = Instant::now();
        target.run(&batch)?;
        device.synchronize()?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    Ok(LatencyReport {
        mean_seconds_per_image: LatencyReport::mean_from_samples(&samples, batch_size),
        batch_size,
        iterations,
        warmup_iterations: warmup,
        device_label: device_label(device),
        samples_seconds: samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerKind {
    Truth,
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marker {
    pub kind: MarkerKind,
    pub at: Point,
}

pub struct Overlay {
    pub image: ::image::RgbImage,
    pub markers: Vec<Marker>,
}

impl Overlay {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.image.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

const GREEN: [u8; 3] = [0, 220, 0];
const BLUE: [u8; 3] = [40, 120, 255];
const RED: [u8; 3] = [230, 30, 30];

/// Scene with truth markers (green dots) and matched predictions (blue crosses
/// within the threshold, red beyond it) beside the predicted heatmap.
pub fn render_overlay(scene: &LabeledScene, prediction: &Prediction, record: &SceneRecord, um_per_pixel: f64) -> Overlay {
    let (w, h) = (scene.image.width() as u32, scene.image.height() as u32);
    let mut img = ::image::RgbImage::new(2 * w, h);
    for y in 0..h {
        for x in 0..w {
            let g = (scene.image.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x, y, ::image::Rgb([g, g, g]));
            let m = prediction
                .heatmap
                .as_ref()
                .map(|hm| (hm.get(x as usize, y as usize) * 255.0).round() as u8)
                .unwrap_or(0);
            img.put_pixel(w + x, y, ::image::Rgb([m, m, m]));
        }
    }
    let mut markers = Vec::new();
    let put = |img: &mut ::image::RgbImage, x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, ::image::Rgb(c));
        }
    };
    for t in &scene.tips {
        let (cx, cy) = (t.x.round() as i64, t.y.round() as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                put(&mut img, cx + dx, cy + dy, GREEN);
            }
        }
        markers.push(Marker {
            kind: MarkerKind::Truth,
            at: *t,
        });
    }
    for m in &record.matches {
        let p = prediction.tips[m.prediction];
        let ok = m.distance_px * um_per_pixel <= OVERLAY_THRESHOLD_UM;
        let (kind, color) = if ok { (MarkerKind::Correct, BLUE) } else { (MarkerKind::Incorrect, RED) };
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        for d in -3..=3i64 {
            put(&mut img, cx + d, cy + d, color);
            put(&mut img, cx + d, cy - d, color);
        }
        markers.push(Marker { kind, at: p });
    }
    Overlay { image: img, markers }
}
