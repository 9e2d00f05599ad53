//! Coarse-to-fine tip localizer: an attention encoder that predicts a
//! full-resolution heatmap, followed by a residual decoder that regresses a fixed
//! number of tip coordinates from it.

mod decoder;
mod encoder;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub(crate) use decoder::Decoder;
pub(crate) use encoder::Encoder;

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::heatmap::Heatmap;
use crate::image::GrayImage;
use crate::nn::{load_checkpoint, save_checkpoint, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "pipetteloc-localizer";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_channels: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            depth: 12,
            embed_dim: 768,
            heads: 12,
            head_channels: 256,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// 10, 18 or 34.
    pub residual_depth: usize,
    /// Channel width of the first residual stage; later stages double it.
    pub base_width: usize,
    pub max_tips: usize,
    pub output_scale: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            residual_depth: 18,
            base_width: 64,
            max_tips: 4,
            output_scale: 256.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizerConfig {
    pub image_size: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Parameter initialization seed.
    pub seed: u64,
    /// Optional safetensors file whose matching tensor names seed the weights.
    pub pretrained: Option<PathBuf>,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            seed: 0,
            pretrained: None,
        }
    }
}

impl LocalizerConfig {
    /// Desk-scale preset for 64×64 scenes.
    pub fn small() -> Self {
        Self {
            image_size: 64,
            encoder: EncoderConfig {
                patch_size: 8,
                depth: 2,
                embed_dim: 64,
                heads: 4,
                head_channels: 64,
                mlp_ratio: 4,
            },
            decoder: DecoderConfig {
                residual_depth: 18,
                base_width: 16,
                max_tips: 4,
                output_scale: 64.0,
            },
            seed: 0,
            pretrained: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        if e.patch_size == 0 || self.image_size == 0 || self.image_size % e.patch_size != 0 {
            return Err(Error::config(
                "localizer.image_size",
                format!("{} is not divisible by patch_size {}", self.image_size, e.patch_size),
            ));
        }
        for (key, v) in [
            ("localizer.encoder.depth", e.depth),
            ("localizer.encoder.embed_dim", e.embed_dim),
            ("localizer.encoder.heads", e.heads),
            ("localizer.encoder.head_channels", e.head_channels),
            ("localizer.encoder.mlp_ratio", e.mlp_ratio),
            ("localizer.decoder.base_width", d.base_width),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if e.embed_dim % e.heads != 0 {
            return Err(Error::config(
                "localizer.encoder.embed_dim",
                format!("{} is not divisible by heads {}", e.embed_dim, e.heads),
            ));
        }
        decoder::stage_layout(d.residual_depth)?;
        if d.max_tips == 0 {
            return Err(Error::config("localizer.decoder.max_tips", "must be at least 1"));
        }
        if d.output_scale != self.image_size as f64 {
            return Err(Error::config(
                "localizer.decoder.output_scale",
                format!("{} must equal image_size {}", d.output_scale, self.image_size),
            ));
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        let g = self.image_size / self.encoder.patch_size;
        g * g
    }
}

/// Encoder, heatmap head and decoder sharing one parameter store. Parameter names
/// start with `encoder.` (including `encoder.heatmap_head.`) or `decoder.`.
pub struct LocalizerModel {
    config: LocalizerConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    training: AtomicBool,
}

impl LocalizerModel {
    pub fn new(config: LocalizerConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.seed, device);
        let vb = store.var_builder();
        let encoder = Encoder::new(config.image_size, &config.encoder, vb.pp("encoder"))?;
        let decoder = Decoder::new(1, &config.decoder, &store, vb.pp("decoder"))?;
        if let Some(path) = &config.pretrained {
            let ckpt = load_checkpoint(path, device)?;
            let n = store.load_matching(&ckpt.tensors)?;
            log::info!("initialized {n} tensors from {}", path.display());
        }
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            training: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &LocalizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn is_training(&self) -> bool {
        self.training.load(Ordering::Relaxed)
    }

    /// Switches batch-norm between batch statistics (train) and running statistics.
    pub fn set_training(&self, training: bool) {
        self.training.store(training, Ordering::Relaxed);
    }

    /// Embedded patch tokens with positions added, `(B, N, d)`.
    pub fn tokens(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        Ok(self.encoder.tokens(images)?)
    }

    /// `(B, 1, H, W)` images → `(B, 1, H, W)` heatmaps in `[0, 1]`.
    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        Ok(self.encoder.forward(images)?)
    }

    /// `(B, 1, H, W)` heatmaps → `(B, max_tips, 2)` pixel coordinates.
    pub fn decode_batch(&self, heatmaps: &Tensor) -> Result<Tensor> {
        self.check_images(heatmaps)?;
        Ok(self.decoder.forward_t(heatmaps, self.is_training())?)
    }

    pub fn encode(&self, image: &GrayImage) -> Result<Heatmap> {
        let x = self.images_to_tensor(&[image])?;
        let h = self.encode_batch(&x)?;
        Ok(tensor_to_heatmaps(&h)?.remove(0))
    }

    pub fn decode(&self, heatmap: &Heatmap) -> Result<Vec<Point>> {
        let n = self.config.image_size;
        if heatmap.width() != n || heatmap.height() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{n} heatmap"),
                actual: format!("{}x{}", heatmap.width(), heatmap.height()),
            });
        }
        let values: Vec<f32> = heatmap.data().iter().map(|&v| v as f32).collect();
        let x = Tensor::from_vec(values, (1, 1, n, n), self.device())?;
        Ok(tensor_to_points(&self.decode_batch(&x)?)?.remove(0))
    }

    pub fn predict(&self, image: &GrayImage) -> Result<(Heatmap, Vec<Point>)> {
        let mut out = self.predict_images(&[image])?;
        Ok(out.remove(0))
    }

    pub fn predict_images(&self, images: &[&GrayImage]) -> Result<Vec<(Heatmap, Vec<Point>)>> {
        let x = self.images_to_tensor(images)?;
        let h = self.encode_batch(&x)?;
        let tips = tensor_to_points(&self.decode_batch(&h)?)?;
        Ok(tensor_to_heatmaps(&h)?.into_iter().zip(tips).collect())
    }

    /// Stacks images into a `(B, 1, H, W)` tensor, checking the configured size.
    pub fn images_to_tensor(&self, images: &[&GrayImage]) -> Result<Tensor> {
        images_to_tensor(images, self.config.image_size, self.device())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, HashMap::new())
    }

    /// Saves with extra metadata entries (for example the training epoch).
    pub fn save_with(&self, path: &Path, extra: HashMap<String, String>) -> Result<()> {
        let mut meta = extra;
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("version".into(), CHECKPOINT_VERSION.to_string());
        meta.insert("config".into(), serde_json::to_string(&self.config)?);
        save_checkpoint(path, &self.store.tensors(""), meta)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let ckpt = load_checkpoint(path, device)?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if ckpt.meta("format", path)? != CHECKPOINT_FORMAT {
            return Err(bad(format!("not a {CHECKPOINT_FORMAT} checkpoint")));
        }
        let version = ckpt.meta("version", path)?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut config: LocalizerConfig = serde_json::from_str(ckpt.meta("config", path)?)?;
        config.pretrained = None;
        let model = Self::new(config, device)?;
        model.store.load("", &ckpt.tensors).map_err(|e| bad(e.to_string()))?;
        Ok(model)
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let n = self.config.image_size;
        match x.dims() {
            &[_, 1, h, w] if h == n && w == n => Ok(()),
            &[_, 1, h, w] if h % self.config.encoder.patch_size != 0 || w % self.config.encoder.patch_size != 0 => {
                Err(Error::ShapeMismatch {
                    expected: format!("sides divisible by {}", self.config.encoder.patch_size),
                    actual: format!("{w}x{h}"),
                })
            }
            dims => Err(Error::ShapeMismatch {
                expected: format!("(B, 1, {n}, {n})"),
                actual: format!("{dims:?}"),
            }),
        }
    }
}

pub(crate) fn images_to_tensor(images: &[&GrayImage], size: usize, device: &Device) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::EmptyInput("image batch"));
    }
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.width() != size || img.height() != size {
            return Err(Error::ShapeMismatch {
                expected: format!("{size}x{size}"),
                actual: format!("{}x{}", img.width(), img.height()),
            });
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, size, size), device)?)
}

pub(crate) fn tensor_to_heatmaps(h: &Tensor) -> Result<Vec<Heatmap>> {
    let (b, _, hh, ww) = h.dims4()?;
    let flat: Vec<f32> = h.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    (0..b)
        .map(|i| {
            let s = &flat[i * hh * ww..(i + 1) * hh * ww];
            Heatmap::from_vec(ww, hh, s.iter().map(|&v| f64::from(v).clamp(0.0, 1.0)).collect())
        })
        .collect()
}

pub(crate) fn tensor_to_points(t: &Tensor) -> Result<Vec<Vec<Point>>> {
    let v: Vec<Vec<Vec<f32>>> = t.to_dtype(DType::F32)?.to_vec3()?;
    Ok(v.into_iter()
        .map(|row| row.into_iter().map(|p| Point::new(p[0].into(), p[1].into())).collect())
        .collect())
}
