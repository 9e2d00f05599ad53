//! Unpaired noisy→clean patch translation: two residual generators, two patch
//! discriminators, least-squares adversarial terms and an L1 cycle term.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Init, VarBuilder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PatchTranslator, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::{instance_norm, load_checkpoint, reflect_pad2d, save_checkpoint, Adam, AdamConfig, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "pipetteloc-cyclegan";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleGanConfig {
    pub generator_width: usize,
    pub residual_blocks: usize,
    pub discriminator_width: usize,
    pub cycle_weight: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CycleGanConfig {
    fn default() -> Self {
        Self {
            generator_width: 64,
            residual_blocks: 6,
            discriminator_width: 64,
            cycle_weight: 10.0,
            learning_rate: 2e-4,
            beta1: 0.5,
            batch_size: 1,
            seed: 0,
        }
    }
}

impl CycleGanConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("gan.generator_width", self.generator_width),
            ("gan.discriminator_width", self.discriminator_width),
            ("gan.batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("gan.learning_rate", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("gan.beta1", "must lie in [0, 1)"));
        }
        if !(self.cycle_weight.is_finite() && self.cycle_weight >= 0.0) {
            return Err(Error::config("gan.cycle_weight", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanSchedule {
    /// Epochs at the base learning rate.
    pub constant_epochs: usize,
    /// Epochs of linear decay to zero after the constant phase.
    pub decay_epochs: usize,
    /// Write a checkpoint every this many epochs (requires `checkpoint_path`).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for GanSchedule {
    fn default() -> Self {
        Self {
            constant_epochs: 100,
            decay_epochs: 100,
            checkpoint_every: None,
            checkpoint_path: None,
        }
    }
}

impl GanSchedule {
    pub fn total_epochs(&self) -> usize {
        self.constant_epochs + self.decay_epochs
    }

    /// A flat schedule of `epochs` epochs without decay.
    pub fn constant(epochs: usize) -> Self {
        Self {
            constant_epochs: epochs,
            decay_epochs: 0,
            ..Self::default()
        }
    }
}

/// Learning rate for 1-based `epoch`: `base` through the constant phase, then
/// `base · (C + D − epoch) / D`, reaching zero on the last epoch.
pub fn lr_at_epoch(base: f64, schedule: &GanSchedule, epoch: usize) -> f64 {
    let (c, d) = (schedule.constant_epochs, schedule.decay_epochs);
    if epoch <= c || d == 0 {
        base
    } else {
        base * (c + d).saturating_sub(epoch) as f64 / d as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub generator: f64,
    pub discriminator: f64,
    pub cycle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanEpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub generator_loss: f64,
    pub discriminator_loss: f64,
    /// Mean unweighted L1 cycle term over the epoch.
    pub cycle_loss: f64,
}

fn gan_init() -> Init {
    Init::Randn {
        mean: 0.0,
        stdev: 0.02,
    }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> Result<Conv2d> {
    let w = vb.get_with_hints((cout, cin, k, k), "weight", gan_init())?;
    let b = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
    Ok(Conv2d::new(
        w,
        Some(b),
        Conv2dConfig {
            stride,
            padding,
            ..Default::default()
        },
    ))
}

fn conv_up(cin: usize, cout: usize, vb: VarBuilder) -> Result<ConvTranspose2d> {
    let w = vb.get_with_hints((cin, cout, 3, 3), "weight", gan_init())?;
    let b = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
    Ok(ConvTranspose2d::new(
        w,
        Some(b),
        ConvTranspose2dConfig {
            padding: 1,
            output_padding: 1,
            stride: 2,
            dilation: 1,
        },
    ))
}

struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = instance_norm(&self.c1.forward(&reflect_pad2d(x, 1)?)?)?.relu()?;
        let h = instance_norm(&self.c2.forward(&reflect_pad2d(&h, 1)?)?)?;
        x + h
    }
}

/// c7s1 → two stride-2 downsamples → residual blocks → two stride-2 upsamples → c7s1 → tanh.
struct Generator {
    stem: Conv2d,
    down: [Conv2d; 2],
    blocks: Vec<ResBlock>,
    up: [ConvTranspose2d; 2],
    out: Conv2d,
}

impl Generator {
    fn new(width: usize, blocks: usize, vb: VarBuilder) -> Result<Self> {
        let w = width;
        Ok(Self {
            stem: conv(1, w, 7, 1, 0, vb.pp("stem"))?,
            down: [
                conv(w, 2 * w, 3, 2, 1, vb.pp("down.0"))?,
                conv(2 * w, 4 * w, 3, 2, 1, vb.pp("down.1"))?,
            ],
            blocks: (0..blocks)
                .map(|i| {
                    let v = vb.pp(format!("blocks.{i}"));
                    Ok(ResBlock {
                        c1: conv(4 * w, 4 * w, 3, 1, 0, v.pp("conv1"))?,
                        c2: conv(4 * w, 4 * w, 3, 1, 0, v.pp("conv2"))?,
                    })
                })
                .collect::<Result<_>>()?,
            up: [
                conv_up(4 * w, 2 * w, vb.pp("up.0"))?,
                conv_up(2 * w, w, vb.pp("up.1"))?,
            ],
            out: conv(w, 1, 7, 1, 0, vb.pp("out"))?,
        })
    }

    /// `(B, 1, 80, 80)` in `[-1, 1]` → same shape in `(-1, 1)`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = instance_norm(&self.stem.forward(&reflect_pad2d(x, 3)?)?)?.relu()?;
        for d in &self.down {
            h = instance_norm(&d.forward(&h)?)?.relu()?;
        }
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        for u in &self.up {
            h = instance_norm(&u.forward(&h)?)?.relu()?;
        }
        self.out.forward(&reflect_pad2d(&h, 3)?)?.tanh()
    }
}

/// 4×4 patch discriminator: 80 → 40 → 20 → 10 → 9 → 8 score map.
struct Discriminator {
    layers: Vec<(Conv2d, bool)>,
}

impl Discriminator {
    fn new(width: usize, vb: VarBuilder) -> Result<Self> {
        let w = width;
        Ok(Self {
            layers: vec![
                (conv(1, w, 4, 2, 1, vb.pp("0"))?, false),
                (conv(w, 2 * w, 4, 2, 1, vb.pp("1"))?, true),
                (conv(2 * w, 4 * w, 4, 2, 1, vb.pp("2"))?, true),
                (conv(4 * w, 8 * w, 4, 1, 1, vb.pp("3"))?, true),
                (conv(8 * w, 1, 4, 1, 1, vb.pp("4"))?, false),
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, (c, norm)) in self.layers.iter().enumerate() {
            h = c.forward(&h)?;
            if *norm {
                h = instance_norm(&h)?;
            }
            if i < last {
                h = candle_nn::ops::leaky_relu(&h, 0.2)?;
            }
        }
        Ok(h)
    }
}

fn lsgan(scores: &Tensor, target: f64) -> candle_core::Result<Tensor> {
    (scores - target)?.sqr()?.mean_all()
}

fn l1(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    (a - b)?.abs()?.mean_all()
}

/// Generators `gen_n2c` (noisy → clean) and `gen_c2n`, discriminators
/// `disc_clean` and `disc_noisy`, their optimizers and the epoch counter.
pub struct CycleGanBundle {
    config: CycleGanConfig,
    store: ParamStore,
    gen_n2c: Generator,
    gen_c2n: Generator,
    disc_clean: Discriminator,
    disc_noisy: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    epoch: usize,
    history: Vec<GanEpochStats>,
}

impl CycleGanBundle {
    pub fn new(config: CycleGanConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.seed, device);
        let vb = store.var_builder();
        let gen_n2c = Generator::new(config.generator_width, config.residual_blocks, vb.pp("gen_n2c"))?;
        let gen_c2n = Generator::new(config.generator_width, config.residual_blocks, vb.pp("gen_c2n"))?;
        let disc_clean = Discriminator::new(config.discriminator_width, vb.pp("disc_clean"))?;
        let disc_noisy = Discriminator::new(config.discriminator_width, vb.pp("disc_noisy"))?;
        let adam = AdamConfig {
            lr: config.learning_rate,
            beta1: config.beta1,
            ..AdamConfig::default()
        };
        let opt_g = Adam::new(store.trainable("gen_"), adam)?;
        let opt_d = Adam::new(store.trainable("disc_"), adam)?;
        Ok(Self {
            config,
            store,
            gen_n2c,
            gen_c2n,
            disc_clean,
            disc_noisy,
            opt_g,
            opt_d,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &CycleGanConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[GanEpochStats] {
        &self.history
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    /// Patches in `[0, 1]` → `(B, 1, 80, 80)` tensor in `[-1, 1]`.
    fn to_tensor(&self, patches: &[&GrayImage]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(patches.len() * PATCH_SIZE * PATCH_SIZE);
        for p in patches {
            if p.width() != PATCH_SIZE || p.height() != PATCH_SIZE {
                return Err(Error::ShapeMismatch {
                    expected: format!("{PATCH_SIZE}x{PATCH_SIZE} patch"),
                    actual: format!("{}x{}", p.width(), p.height()),
                });
            }
            data.extend(p.data().iter().map(|v| v * 2.0 - 1.0));
        }
        Ok(Tensor::from_vec(data, (patches.len(), 1, PATCH_SIZE, PATCH_SIZE), self.device())?)
    }

    /// One generator update followed by one discriminator update.
    pub fn train_step(&mut self, noisy: &Tensor, clean: &Tensor) -> Result<StepLosses> {
        let fake_clean = self.gen_n2c.forward(noisy)?;
        let fake_noisy = self.gen_c2n.forward(clean)?;
        let rec_noisy = self.gen_c2n.forward(&fake_clean)?;
        let rec_clean = self.gen_n2c.forward(&fake_noisy)?;
        let adv = (lsgan(&self.disc_clean.forward(&fake_clean)?, 1.0)?
            + lsgan(&self.disc_noisy.forward(&fake_noisy)?, 1.0)?)?;
        let cycle = (l1(&rec_noisy, noisy)? + l1(&rec_clean, clean)?)?;
        let loss_g = (&adv + (&cycle * self.config.cycle_weight)?)?;
        self.opt_g.backward_step(&loss_g)?;

        let fc = fake_clean.detach();
        let fnz = fake_noisy.detach();
        let d_clean = ((lsgan(&self.disc_clean.forward(clean)?, 1.0)? + lsgan(&self.disc_clean.forward(&fc)?, 0.0)?)? * 0.5)?;
        let d_noisy = ((lsgan(&self.disc_noisy.forward(noisy)?, 1.0)? + lsgan(&self.disc_noisy.forward(&fnz)?, 0.0)?)? * 0.5)?;
        let loss_d = (d_clean + d_noisy)?;
        self.opt_d.backward_step(&loss_d)?;

        let scalar = |t: &Tensor| -> Result<f64> { Ok(f64::from(t.to_dtype(DType::F32)?.to_scalar::<f32>()?)) };
        let out = StepLosses {
            generator: scalar(&loss_g)?,
            discriminator: scalar(&loss_d)?,
            cycle: scalar(&cycle)?,
        };
        if !(out.generator.is_finite() && out.discriminator.is_finite()) {
            return Err(Error::NonFiniteLoss {
                stage: "cyclegan".into(),
                epoch: self.epoch + 1,
                batch: self.opt_g.steps() as usize,
            });
        }
        Ok(out)
    }

    /// Runs the remaining epochs of `schedule`, resuming after [`Self::epoch`].
    pub fn train(&mut self, noisy: &[GrayImage], clean: &[GrayImage], schedule: &GanSchedule) -> Result<()> {
        if noisy.is_empty() || clean.is_empty() {
            return Err(Error::EmptyInput("cyclegan patches"));
        }
        let bs = self.config.batch_size;
        let steps = noisy.len().max(clean.len()).div_ceil(bs);
        for epoch in self.epoch + 1..=schedule.total_epochs() {
            let lr = lr_at_epoch(self.config.learning_rate, schedule, epoch);
            self.opt_g.set_learning_rate(lr);
            self.opt_d.set_learning_rate(lr);
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut pn: Vec<usize> = (0..noisy.len()).collect();
            let mut pc: Vec<usize> = (0..clean.len()).collect();
            pn.shuffle(&mut rng);
            pc.shuffle(&mut rng);
            let (mut g, mut d, mut c) = (0.0, 0.0, 0.0);
            for s in 0..steps {
                let nb: Vec<&GrayImage> = (0..bs).map(|j| &noisy[pn[(s * bs + j) % pn.len()]]).collect();
                let cb: Vec<&GrayImage> = (0..bs).map(|j| &clean[pc[(s * bs + j) % pc.len()]]).collect();
                let (nt, ct) = (self.to_tensor(&nb)?, self.to_tensor(&cb)?);
                let l = self.train_step(&nt, &ct)?;
                g += l.generator;
                d += l.discriminator;
                c += l.cycle;
            }
            let n = steps as f64;
            let stats = GanEpochStats {
                epoch,
                lr,
                generator_loss: g / n,
                discriminator_loss: d / n,
                cycle_loss: c / n,
            };
            log::info!(
                "gan epoch {epoch}: lr {lr:.2e} G {:.4} D {:.4} cycle {:.4}",
                stats.generator_loss,
                stats.discriminator_loss,
                stats.cycle_loss
            );
            self.history.push(stats);
            self.epoch = epoch;
            if let (Some(every), Some(path)) = (schedule.checkpoint_every, &schedule.checkpoint_path) {
                if every > 0 && epoch % every == 0 {
                    self.save(path)?;
                }
            }
        }
        Ok(())
    }

    /// Mean `|G′(G(x)) − x|` over patches, in `[0, 1]` units.
    pub fn reconstruction_error(&self, patches: &[GrayImage]) -> Result<f64> {
        if patches.is_empty() {
            return Err(Error::EmptyInput("patches"));
        }
        let refs: Vec<&GrayImage> = patches.iter().collect();
        let mut total = 0.0;
        for chunk in refs.chunks(16) {
            let x = self.to_tensor(chunk)?;
            let rec = self.gen_c2n.forward(&self.gen_n2c.forward(&x)?)?;
            let e = f64::from(((rec - &x)?.abs()?.sum_all()? * 0.5)?.to_scalar::<f32>()?);
            total += e;
        }
        Ok(total / (patches.len() * PATCH_SIZE * PATCH_SIZE) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.store.tensors("");
        tensors.extend(self.opt_g.state("opt_g"));
        tensors.extend(self.opt_d.state("opt_d"));
        let mut meta = HashMap::new();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("version".into(), CHECKPOINT_VERSION.to_string());
        meta.insert("config".into(), serde_json::to_string(&self.config)?);
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("opt_g_steps".into(), self.opt_g.steps().to_string());
        meta.insert("opt_d_steps".into(), self.opt_d.steps().to_string());
        meta.insert("history".into(), serde_json::to_string(&self.history)?);
        save_checkpoint(path, &tensors, meta)
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
        let parse = |key: &str| -> Result<u64> {
            ckpt.meta(key, path)?
                .parse()
                .map_err(|_| bad(format!("bad `{key}`")))
        };
        let config: CycleGanConfig = serde_json::from_str(ckpt.meta("config", path)?)?;
        let mut bundle = Self::new(config, device)?;
        bundle.store.load("", &ckpt.tensors).map_err(|e| bad(e.to_string()))?;
        bundle.opt_g.load_state("opt_g", &ckpt.tensors, parse("opt_g_steps")?)?;
        bundle.opt_d.load_state("opt_d", &ckpt.tensors, parse("opt_d_steps")?)?;
        bundle.epoch = parse("epoch")? as usize;
        bundle.history = serde_json::from_str(ckpt.meta("history", path)?)?;
        Ok(bundle)
    }
}

impl PatchTranslator for CycleGanBundle {
    fn translate(&self, patches: &[GrayImage]) -> Result<Vec<GrayImage>> {
        let refs: Vec<&GrayImage> = patches.iter().collect();
        let mut out = Vec::with_capacity(patches.len());
        for chunk in refs.chunks(16) {
            let y = self.gen_n2c.forward(&self.to_tensor(chunk)?)?;
            let y = ((y + 1.0)? * 0.5)?.clamp(0f32, 1f32)?;
            let flat: Vec<f32> = y.flatten_all()?.to_vec1()?;
            for p in flat.chunks(PATCH_SIZE * PATCH_SIZE) {
                out.push(GrayImage::from_vec(PATCH_SIZE, PATCH_SIZE, p.to_vec())?);
            }
        }
        Ok(out)
    }
}

/// Builds a bundle from `config` and trains it for the whole schedule.
pub fn train_cyclegan(
    noisy: &[GrayImage],
    clean: &[GrayImage],
    config: &CycleGanConfig,
    schedule: &GanSchedule,
    device: &Device,
) -> Result<CycleGanBundle> {
    let mut bundle = CycleGanBundle::new(config.clone(), device)?;
    bundle.train(noisy, clean, schedule)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CycleGanConfig {
        CycleGanConfig {
            generator_width: 4,
            residual_blocks: 1,
            discriminator_width: 4,
            ..CycleGanConfig::default()
        }
    }

    fn patch(v: f32) -> GrayImage {
        GrayImage::from_fn(PATCH_SIZE, PATCH_SIZE, |x, y| (v + ((x + y) % 7) as f32 * 0.05).min(1.0))
    }

    #[test]
    fn schedule_shape() {
        let s = GanSchedule::default();
        assert_eq!(lr_at_epoch(2e-4, &s, 1), 2e-4);
        assert_eq!(lr_at_epoch(2e-4, &s, 100), 2e-4);
        assert!((lr_at_epoch(2e-4, &s, 150) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at_epoch(2e-4, &s, 200), 0.0);
        for e in 101..200 {
            assert!(lr_at_epoch(2e-4, &s, e + 1) < lr_at_epoch(2e-4, &s, e));
        }
    }

    #[test]
    fn shapes_and_translation_range() {
        let b = CycleGanBundle::new(tiny(), &Device::Cpu).unwrap();
        let x = b.to_tensor(&[&patch(0.1), &patch(0.5)]).unwrap();
        assert_eq!(b.gen_n2c.forward(&x).unwrap().dims(), &[2, 1, 80, 80]);
        assert_eq!(b.disc_clean.forward(&x).unwrap().dims(), &[2, 1, 8, 8]);
        let out = b.translate(&[patch(0.3)]).unwrap();
        assert!(out[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(b.to_tensor(&[&GrayImage::zeros(64, 64)]).is_err());
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let fresh = CycleGanBundle::new(tiny(), &Device::Cpu).unwrap();
        let trained = train_cyclegan(&[patch(0.2)], &[patch(0.0)], &tiny(), &GanSchedule::constant(0), &Device::Cpu).unwrap();
        assert_eq!(fresh.store.checksum("").unwrap(), trained.store.checksum("").unwrap());
        assert!(train_cyclegan(&[], &[patch(0.0)], &tiny(), &GanSchedule::constant(1), &Device::Cpu).is_err());
    }

    #[test]
    fn one_step_moves_both_players() {
        let mut b = CycleGanBundle::new(tiny(), &Device::Cpu).unwrap();
        let g0 = b.store.checksum("gen_").unwrap();
        let d0 = b.store.checksum("disc_").unwrap();
        let n = b.to_tensor(&[&patch(0.4)]).unwrap();
        let c = b.to_tensor(&[&patch(0.0)]).unwrap();
        let l = b.train_step(&n, &c).unwrap();
        assert!(l.generator.is_finite() && l.discriminator.is_finite());
        assert_ne!(g0, b.store.checksum("gen_").unwrap());
        assert_ne!(d0, b.store.checksum("disc_").unwrap());
    }

    #[test]
    fn checkpoint_round_trip_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gan.safetensors");
        let noisy = vec![patch(0.3), patch(0.4)];
        let clean = vec![patch(0.0)];
        let mut b = train_cyclegan(&noisy, &clean, &tiny(), &GanSchedule::constant(1), &Device::Cpu).unwrap();
        b.save(&path).unwrap();
        let mut r = CycleGanBundle::load(&path, &Device::Cpu).unwrap();
        assert_eq!(r.epoch(), 1);
        assert_eq!(r.history(), b.history());
        assert_eq!(r.store.checksum("").unwrap(), b.store.checksum("").unwrap());
        b.train(&noisy, &clean, &GanSchedule::constant(2)).unwrap();
        r.train(&noisy, &clean, &GanSchedule::constant(2)).unwrap();
        assert_eq!(r.store.checksum("").unwrap(), b.store.checksum("").unwrap());
    }
}
