//! Background elimination around pipette tips: crop an 80×80 patch per tip,
//! translate it towards the clean domain and paste it back in place.

mod cyclegan;

pub use cyclegan::{
    lr_at_epoch, train_cyclegan, CycleGanBundle, CycleGanConfig, GanEpochStats, GanSchedule,
    StepLosses,
};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::synthdata::{Domain, LabeledScene};

/// Side length of every translated patch.
pub const PATCH_SIZE: usize = 80;

/// Zero padding applied on each side where the window left the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub left: usize,
    pub top: usize,
    pub right: usize,
    pub bottom: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropRecord {
    pub patch: GrayImage,
    /// Scene coordinates of the patch's top-left pixel; negative near the border.
    pub origin: (i64, i64),
    pub pad: Padding,
}

impl CropRecord {
    /// Scene-pixel window covered by real (non-padding) patch pixels, as
    /// `(x0, y0, x1, y1)` with exclusive upper bounds.
    pub fn source_window(&self) -> (usize, usize, usize, usize) {
        let (ox, oy) = self.origin;
        let x0 = (ox + self.pad.left as i64) as usize;
        let y0 = (oy + self.pad.top as i64) as usize;
        let x1 = (ox + (PATCH_SIZE - self.pad.right) as i64) as usize;
        let y1 = (oy + (PATCH_SIZE - self.pad.bottom) as i64) as usize;
        (x0, y0, x1, y1)
    }
}

/// Maps 80×80 patches in `[0, 1]` to 80×80 patches in `[0, 1]`.
pub trait PatchTranslator {
    fn translate(&self, patches: &[GrayImage]) -> Result<Vec<GrayImage>>;
}

/// Returns patches unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

impl PatchTranslator for IdentityTranslator {
    fn translate(&self, patches: &[GrayImage]) -> Result<Vec<GrayImage>> {
        Ok(patches.to_vec())
    }
}

/// One zero-padded 80×80 crop per tip, centred on the rounded tip position.
pub fn crop_tips(scene: &LabeledScene) -> Result<Vec<CropRecord>> {
    if scene.tips.is_empty() {
        return Err(Error::EmptyInput("scene tips"));
    }
    let (w, h) = (scene.image.width() as i64, scene.image.height() as i64);
    let half = (PATCH_SIZE / 2) as i64;
    let side = PATCH_SIZE as i64;
    Ok(scene
        .tips
        .iter()
        .map(|tip| {
            let ox = tip.x.round() as i64 - half;
            let oy = tip.y.round() as i64 - half;
            let clip = |v: i64| v.clamp(0, side) as usize;
            let pad = Padding {
                left: clip(-ox),
                top: clip(-oy),
                right: clip(ox + side - w),
                bottom: clip(oy + side - h),
            };
            let patch = GrayImage::from_fn(PATCH_SIZE, PATCH_SIZE, |x, y| {
                scene.image.get_or_zero(ox + x as i64, oy + y as i64)
            });
            CropRecord {
                patch,
                origin: (ox, oy),
                pad,
            }
        })
        .collect())
}

/// Translates every tip patch and writes it back; overlapping windows are
/// averaged, tips are copied unchanged and the domain becomes clean-like.
pub fn enhance_scene(scene: &LabeledScene, translator: &dyn PatchTranslator) -> Result<LabeledScene> {
    let crops = crop_tips(scene)?;
    let patches: Vec<GrayImage> = crops.iter().map(|c| c.patch.clone()).collect();
    let translated = translator.translate(&patches)?;
    if translated.len() != crops.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} translated patches", crops.len()),
            actual: translated.len().to_string(),
        });
    }
    let (w, h) = (scene.image.width(), scene.image.height());
    let mut sum = vec![0.0f64; w * h];
    let mut count = vec![0u32; w * h];
    for (crop, patch) in crops.iter().zip(&translated) {
        if patch.width() != PATCH_SIZE || patch.height() != PATCH_SIZE {
            return Err(Error::ShapeMismatch {
                expected: format!("{PATCH_SIZE}x{PATCH_SIZE}"),
                actual: format!("{}x{}", patch.width(), patch.height()),
            });
        }
        let (x0, y0, x1, y1) = crop.source_window();
        for y in y0..y1 {
            for x in x0..x1 {
                let px = (x as i64 - crop.origin.0) as usize;
                let py = (y as i64 - crop.origin.1) as usize;
                sum[y * w + x] += f64::from(patch.get(px, py));
                count[y * w + x] += 1;
            }
        }
    }
    let mut image = scene.image.clone();
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        if count[i] > 0 {
            *v = (sum[i] / f64::from(count[i])) as f32;
        }
    }
    Ok(LabeledScene {
        image,
        tips: scene.tips.clone(),
        domain: Domain::ExvivoLike,
        um_per_pixel: scene.um_per_pixel,
    })
}

/// All tip patches of a set of scenes, in scene then tip order.
pub fn collect_patches(scenes: &[LabeledScene]) -> Result<Vec<GrayImage>> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend(crop_tips(s)?.into_iter().map(|c| c.patch));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use std::cell::Cell;

    fn scene(size: usize, tips: Vec<Point>) -> LabeledScene {
        LabeledScene {
            image: GrayImage::from_fn(size, size, |x, y| ((x * 7 + y * 13) % 251) as f32 / 255.0),
            tips,
            domain: Domain::InvivoLike,
            um_per_pixel: 1.0,
        }
    }

    #[test]
    fn interior_and_border_crops() {
        let s = scene(256, vec![Point::new(128.0, 128.0), Point::new(5.0, 5.0), Point::new(250.4, 3.6)]);
        let crops = crop_tips(&s).unwrap();
        assert_eq!(crops.len(), 3);
        assert_eq!(crops[0].origin, (88, 88));
        assert_eq!(crops[0].pad, Padding::default());
        assert_eq!(crops[0].patch.get(40, 40), s.image.get(128, 128));

        assert_eq!(crops[1].origin, (-35, -35));
        assert_eq!((crops[1].pad.left, crops[1].pad.top), (35, 35));
        assert_eq!(crops[1].patch.get(0, 0), 0.0);
        assert_eq!(crops[1].patch.get(40, 40), s.image.get(5, 5));

        // round(250.4) = 250 → window [210, 290) overruns 256 by 34.
        assert_eq!(crops[2].pad, Padding { left: 0, top: 36, right: 34, bottom: 0 });
        for c in &crops {
            assert_eq!((c.patch.width(), c.patch.height()), (PATCH_SIZE, PATCH_SIZE));
        }
    }

    #[test]
    fn window_reconstructs_from_origin_and_pad() {
        let s = scene(100, vec![Point::new(10.0, 90.0)]);
        let c = &crop_tips(&s).unwrap()[0];
        assert_eq!(c.origin, (-30, 50));
        assert_eq!(c.source_window(), (0, 50, 50, 100));
    }

    #[test]
    fn identity_round_trip_keeps_image_and_tips() {
        let s = scene(128, vec![Point::new(20.0, 30.0), Point::new(100.5, 64.2)]);
        let out = enhance_scene(&s, &IdentityTranslator).unwrap();
        assert_eq!(out.image, s.image);
        assert_eq!(out.tips, s.tips);
        assert_eq!(out.domain, Domain::ExvivoLike);
    }

    struct ConstantPerPatch {
        values: Vec<f32>,
        calls: Cell<usize>,
    }

    impl PatchTranslator for ConstantPerPatch {
        fn translate(&self, patches: &[GrayImage]) -> Result<Vec<GrayImage>> {
            self.calls.set(self.calls.get() + 1);
            Ok(patches
                .iter()
                .zip(&self.values)
                .map(|(_, &v)| GrayImage::from_fn(PATCH_SIZE, PATCH_SIZE, |_, _| v))
                .collect())
        }
    }

    #[test]
    fn overlap_is_averaged_and_outside_untouched() {
        let s = scene(256, vec![Point::new(100.0, 128.0), Point::new(140.0, 128.0)]);
        let t = ConstantPerPatch {
            values: vec![0.2, 0.6],
            calls: Cell::new(0),
        };
        let out = enhance_scene(&s, &t).unwrap();
        assert_eq!(t.calls.get(), 1);
        // Windows are x∈[60,140) and x∈[100,180), rows [88,168).
        assert!((out.image.get(120, 128) - 0.4).abs() < 1e-6);
        assert_eq!(out.image.get(70, 100), 0.2);
        assert_eq!(out.image.get(170, 100), 0.6);
        assert_eq!(out.image.get(30, 30), s.image.get(30, 30));
        assert_eq!(out.image.get(120, 170), s.image.get(120, 170));
        assert_eq!(out.tips, s.tips);
    }

    #[test]
    fn empty_scene_rejected() {
        let s = scene(64, vec![]);
        assert!(crop_tips(&s).is_err());
    }
}
