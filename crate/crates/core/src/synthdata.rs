//! Procedural two-photon-style scenes with exact tip labels, and their on-disk
//! dataset layout (`images/{id}.png` + `labels.json`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::image::GrayImage;

pub const MAX_PIPETTES: usize = 4;
pub const LABELS_FILE: &str = "labels.json";
pub const IMAGES_DIR: &str = "images";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Cluttered background, one to four pipettes.
    InvivoLike,
    /// Clean background, exactly one pipette.
    ExvivoLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseProfile {
    /// Cell-like blobs per thousand pixels.
    pub background_cell_blob_density: f64,
    pub speckle_std: f64,
    pub vignette_strength: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            background_cell_blob_density: 0.3,
            speckle_std: 0.05,
            vignette_strength: 0.3,
        }
    }
}

impl NoiseProfile {
    pub fn silent() -> Self {
        Self {
            background_cell_blob_density: 0.0,
            speckle_std: 0.0,
            vignette_strength: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Inclusive `[min, max]` pipette count for in-vivo-like scenes.
    pub pipette_count_range: [usize; 2],
    /// Cone half-angle range in degrees.
    pub taper_angle_range: [f64; 2],
    pub tip_brightness: f64,
    pub noise_profile: NoiseProfile,
    pub um_per_pixel: f64,
    pub rng_seed: u64,
    pub domain: Domain,
    /// Minimum pairwise distance between tips, in pixels.
    pub min_tip_separation: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            pipette_count_range: [1, MAX_PIPETTES],
            taper_angle_range: [3.0, 7.0],
            tip_brightness: 0.9,
            noise_profile: NoiseProfile::default(),
            um_per_pixel: 1.0,
            rng_seed: 0,
            domain: Domain::InvivoLike,
            min_tip_separation: 20.0,
        }
    }
}

impl SceneConfig {
    /// 64×64 desk-scale scenes.
    pub fn small() -> Self {
        Self {
            image_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 || self.image_size % 16 != 0 {
            return Err(Error::config(
                "scene.image_size",
                format!("{} must be >= 64 and divisible by 16", self.image_size),
            ));
        }
        let [lo, hi] = self.pipette_count_range;
        if lo < 1 || hi > MAX_PIPETTES || lo > hi {
            return Err(Error::config(
                "scene.pipette_count_range",
                format!("[{lo}, {hi}] is not an interval within [1, {MAX_PIPETTES}]"),
            ));
        }
        let [alo, ahi] = self.taper_angle_range;
        if !(alo > 0.0 && alo <= ahi && ahi < 45.0) {
            return Err(Error::config(
                "scene.taper_angle_range",
                format!("[{alo}, {ahi}] must satisfy 0 < min <= max < 45 degrees"),
            ));
        }
        if !(self.tip_brightness > 0.0 && self.tip_brightness <= 1.0) {
            return Err(Error::config(
                "scene.tip_brightness",
                "must lie in (0, 1]",
            ));
        }
        let n = &self.noise_profile;
        for (key, v) in [
            ("scene.noise_profile.background_cell_blob_density", n.background_cell_blob_density),
            ("scene.noise_profile.speckle_std", n.speckle_std),
            ("scene.noise_profile.vignette_strength", n.vignette_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        if n.vignette_strength > 1.0 {
            return Err(Error::config(
                "scene.noise_profile.vignette_strength",
                "must not exceed 1",
            ));
        }
        if !(self.um_per_pixel.is_finite() && self.um_per_pixel > 0.0) {
            return Err(Error::config("scene.um_per_pixel", "must be positive"));
        }
        if !(self.min_tip_separation.is_finite() && self.min_tip_separation >= 0.0) {
            return Err(Error::config(
                "scene.min_tip_separation",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub image: GrayImage,
    pub tips: Vec<Point>,
    pub domain: Domain,
    pub um_per_pixel: f64,
}

impl LabeledScene {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width(), self.image.height());
        if self.tips.is_empty() || self.tips.len() > MAX_PIPETTES {
            return Err(Error::InvalidScene(format!(
                "{} tips; expected 1..={MAX_PIPETTES}",
                self.tips.len()
            )));
        }
        if let Some(t) = self.tips.iter().find(|t| !t.within(w, h)) {
            return Err(Error::TipOutOfBounds {
                x: t.x,
                y: t.y,
                width: w,
                height: h,
            });
        }
        if self
            .image
            .data()
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidScene("intensity outside [0, 1]".into()));
        }
        if !(self.um_per_pixel.is_finite() && self.um_per_pixel > 0.0) {
            return Err(Error::InvalidScene("um_per_pixel must be positive".into()));
        }
        Ok(())
    }
}

/// Geometry of one rendered pipette: a wedge whose apex is the tip.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Pipette {
    pub tip: Point,
    /// Unit vector pointing from the tip towards the pipette body.
    pub axis: (f64, f64),
    pub half_angle: f64,
}

impl Pipette {
    /// Along-axis and perpendicular distance of `p` from the tip.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.tip.x, y - self.tip.y);
        let t = dx * self.axis.0 + dy * self.axis.1;
        let d = (dx * self.axis.1 - dy * self.axis.0).abs();
        (t, d)
    }

    fn half_width(&self, t: f64) -> f64 {
        TIP_HALF_WIDTH + t * self.half_angle.tan()
    }

    /// Fraction of the pixel covered by the wedge, with a one-pixel soft edge.
    pub fn coverage(&self, x: f64, y: f64) -> f64 {
        let (t, d) = self.local(x, y);
        if t < -0.5 {
            return 0.0;
        }
        let edge = (self.half_width(t.max(0.0)) - d + 0.5).clamp(0.0, 1.0);
        let cap = (t + 0.5).clamp(0.0, 1.0);
        edge * cap
    }

    /// Whether `p` is within `margin` px of the wedge body.
    fn shadows(&self, p: &Point, margin: f64) -> bool {
        let (t, d) = self.local(p.x, p.y);
        t > -margin && d <= self.half_width(t.max(0.0)) + margin
    }
}

const TIP_HALF_WIDTH: f64 = 0.5;

/// Renders one scene. Pure in `(config, seed)`.
pub fn render_scene(config: &SceneConfig, seed: u64) -> Result<LabeledScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let scale = size as f64 / 256.0;

    let count = match config.domain {
        Domain::ExvivoLike => 1,
        Domain::InvivoLike => {
            let [lo, hi] = config.pipette_count_range;
            rng.random_range(lo..=hi)
        }
    };
    let tips = place_tips(config, count, &mut rng)?;
    let pipettes = orient_pipettes(config, &tips, &mut rng);

    let glow_sigma = (2.5 * scale).max(1.2);
    let glow_cutoff = 4.0 * glow_sigma;
    let body_falloff = 0.25 * size as f64;
    let brightness = config.tip_brightness;
    let pipette_layer = GrayImage::from_fn(size, size, |px, py| {
        let (x, y) = (px as f64, py as f64);
        let mut v = 0.0f64;
        for p in &pipettes {
            let cov = p.coverage(x, y);
            if cov > 0.0 {
                let (t, _) = p.local(x, y);
                let ramp = 0.45 + 0.55 * (-t.max(0.0) / body_falloff).exp();
                v = v.max(brightness * ramp * cov);
            }
            let r = (x - p.tip.x).hypot(y - p.tip.y);
            if r <= glow_cutoff {
                v = v.max(brightness * (-(r * r) / (2.0 * glow_sigma * glow_sigma)).exp());
            }
        }
        v as f32
    });

    let noise = &config.noise_profile;
    let mut image = match config.domain {
        Domain::ExvivoLike => pipette_layer,
        Domain::InvivoLike => {
            let mut bg = background(config, &mut rng);
            for (b, p) in bg.data_mut().iter_mut().zip(pipette_layer.data()) {
                *b += *p;
            }
            apply_vignette(&mut bg, noise.vignette_strength);
            bg
        }
    };
    if noise.speckle_std > 0.0 {
        let normal = Normal::new(0.0, noise.speckle_std).expect("validated std");
        for v in image.data_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    image.clamp_unit();
    image.quantize_u8();

    let scene = LabeledScene {
        image,
        tips,
        domain: config.domain,
        um_per_pixel: config.um_per_pixel,
    };
    scene.validate()?;
    Ok(scene)
}

/// Renders `count` scenes with per-scene seeds drawn from `config.rng_seed`.
pub fn generate_scenes(config: &SceneConfig, count: usize) -> Result<Vec<LabeledScene>> {
    let mut seeder = ChaCha8Rng::seed_from_u64(config.rng_seed);
    (0..count)
        .map(|_| render_scene(config, seeder.random()))
        .collect()
}

fn place_tips(config: &SceneConfig, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    let size = config.image_size as f64;
    let margin = (size / 16.0).round().max(2.0);
    let hi = size - 1.0 - margin;
    for _ in 0..256 {
        let mut tips: Vec<Point> = Vec::with_capacity(count);
        for _ in 0..1024 {
            if tips.len() == count {
                break;
            }
            let p = Point::new(rng.random_range(margin..=hi), rng.random_range(margin..=hi));
            if tips
                .iter()
                .all(|q| q.distance(&p) >= config.min_tip_separation)
            {
                tips.push(p);
            }
        }
        if tips.len() == count {
            return Ok(tips);
        }
    }
    Err(Error::config(
        "scene.min_tip_separation",
        format!(
            "cannot place {count} tips {} px apart in a {} px image",
            config.min_tip_separation, config.image_size
        ),
    ))
}

fn orient_pipettes(config: &SceneConfig, tips: &[Point], rng: &mut ChaCha8Rng) -> Vec<Pipette> {
    let [alo, ahi] = config.taper_angle_range;
    let clearance = config.min_tip_separation / 4.0;
    let mut out = Vec::with_capacity(tips.len());
    for (i, &tip) in tips.iter().enumerate() {
        let half_angle = rng.random_range(alo..=ahi).to_radians();
        let mut candidate = None;
        for _ in 0..16 {
            // Body points towards one of the four image edges, with some tilt.
            let edge = rng.random_range(0..4) as f64 * std::f64::consts::FRAC_PI_2;
            let tilt = rng.random_range(-35.0f64..=35.0).to_radians();
            let angle = edge + tilt;
            let p = Pipette {
                tip,
                axis: (angle.cos(), angle.sin()),
                half_angle,
            };
            let clear = tips
                .iter()
                .enumerate()
                .all(|(j, q)| j == i || !p.shadows(q, clearance));
            candidate = Some(p);
            if clear {
                break;
            }
        }
        out.push(candidate.expect("at least one orientation drawn"));
    }
    out
}

fn background(config: &SceneConfig, rng: &mut ChaCha8Rng) -> GrayImage {
    let size = config.image_size;
    let scale = size as f64 / 256.0;
    let base = rng.random_range(0.05..0.12) as f32;
    let mut img = GrayImage::from_fn(size, size, |_, _| base);
    let expected = config.noise_profile.background_cell_blob_density * (size * size) as f64 / 1000.0;
    let count = if expected > 0.0 {
        (expected * rng.random_range(0.75..1.25)).round() as usize
    } else {
        0
    };
    for _ in 0..count {
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let radius = (rng.random_range(2.5..6.0) * scale).max(1.0);
        let amp = rng.random_range(0.15..0.45);
        let reach = (3.0 * radius).ceil() as i64;
        for y in (cy as i64 - reach).max(0)..=(cy as i64 + reach).min(size as i64 - 1) {
            for x in (cx as i64 - reach).max(0)..=(cx as i64 + reach).min(size as i64 - 1) {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = amp * (-d2 / (2.0 * radius * radius)).exp();
                let cur = img.get(x as usize, y as usize);
                img.set(x as usize, y as usize, cur + v as f32);
            }
        }
    }
    img
}

fn apply_vignette(img: &mut GrayImage, strength: f64) {
    if strength == 0.0 {
        return;
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let rmax2 = cx * cx + cy * cy;
    let width = img.width();
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        let (x, y) = ((i % width) as f64, (i / width) as f64);
        let r2 = (x - cx).powi(2) + (y - cy).powi(2);
        *v *= (1.0 - strength * r2 / rmax2) as f32;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub tips: Vec<Point>,
    pub domain: Domain,
    pub um_per_pixel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Writes one PNG per scene plus `labels.json`.
pub fn write_dataset(scenes: &[LabeledScene], dir: &Path) -> Result<Manifest> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let id = scene_id(i);
        scene.image.save_png(&images.join(format!("{id}.png")))?;
        entries.push(ManifestEntry {
            id,
            tips: scene.tips.clone(),
            domain: scene.domain,
            um_per_pixel: scene.um_per_pixel,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        entries,
    };
    let path = dir.join(LABELS_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(LABELS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Dataset {
        path: path.clone(),
        reason: format!("corrupt labels: {e}"),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset {
            path,
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    Ok(manifest)
}

/// Reads a dataset written by [`write_dataset`], in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledScene>> {
    let manifest = read_manifest(dir)?;
    let images = dir.join(IMAGES_DIR);
    if let Some(entry) = manifest
        .entries
        .iter()
        .find(|e| !images.join(format!("{}.png", e.id)).is_file())
    {
        return Err(Error::Dataset {
            path: images.join(format!("{}.png", entry.id)),
            reason: "missing image file".into(),
        });
    }
    let on_disk = count_pngs(&images)?;
    if on_disk != manifest.entries.len() {
        return Err(Error::Dataset {
            path: images,
            reason: format!(
                "{} labelled entries but {on_disk} images",
                manifest.entries.len()
            ),
        });
    }
    manifest
        .entries
        .iter()
        .map(|entry| {
            let path = images.join(format!("{}.png", entry.id));
            let scene = LabeledScene {
                image: GrayImage::load_png(&path)?,
                tips: entry.tips.clone(),
                domain: entry.domain,
                um_per_pixel: entry.um_per_pixel,
            };
            scene.validate().map_err(|e| Error::Dataset {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            Ok(scene)
        })
        .collect()
}

fn count_pngs(dir: &PathBuf) -> Result<usize> {
    if !dir.is_dir() {
        return Ok(0);
    }
    let mut n = 0;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().extension().is_some_and(|e| e == "png") {
            n += 1;
        }
    }
    Ok(n)
}
