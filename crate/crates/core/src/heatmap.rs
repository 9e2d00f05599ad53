//! Ground-truth tip heatmaps and heatmap overlap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    ClampToOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
    pub clamp_mode: ClampMode,
    /// Binarization level used by [`heatmap_iou`] in reports.
    pub iou_threshold: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            clamp_mode: ClampMode::ClampToOne,
            iou_threshold: 0.5,
        }
    }
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::config("heatmap.sigma", "must be positive"));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::config("heatmap.iou_threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Dense per-pixel tip likelihood in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {width}x{height}", width * height),
                actual: data.len().to_string(),
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidScene("heatmap value outside [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// 8-bit export for inspection: `round(value * 255)`.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect()
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_vec(
            self.width,
            self.height,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("same shape")
    }

    /// Up to `k` local maxima, strongest first, at least `min_separation` px apart.
    pub fn peaks(&self, k: usize, min_separation: f64) -> Vec<Point> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.sort_by(|&a, &b| self.data[b].total_cmp(&self.data[a]).then(a.cmp(&b)));
        let mut out: Vec<Point> = Vec::with_capacity(k);
        for idx in order {
            if out.len() == k {
                break;
            }
            let p = Point::new((idx % self.width) as f64, (idx / self.width) as f64);
            if out.iter().all(|q| q.distance(&p) >= min_separation) {
                out.push(p);
            }
        }
        out
    }
}

/// `min(1, Σ_i exp(-((x - x_i)² + (y - y_i)²) / 2σ²))` sampled at pixel centres.
pub fn gaussian_heatmap(
    tips: &[Point],
    height: usize,
    width: usize,
    config: &HeatmapConfig,
) -> Result<Heatmap> {
    if tips.is_empty() {
        return Err(Error::EmptyInput("heatmap tips"));
    }
    if !(config.sigma.is_finite() && config.sigma > 0.0) {
        return Err(Error::config("heatmap.sigma", "must be positive"));
    }
    if let Some(t) = tips.iter().find(|t| !t.within(width, height)) {
        return Err(Error::TipOutOfBounds {
            x: t.x,
            y: t.y,
            width,
            height,
        });
    }
    let denom = 2.0 * config.sigma * config.sigma;
    let mut data = vec![0.0f64; width * height];
    for y in 0..height {
        let row = &mut data[y * width..(y + 1) * width];
        for (x, v) in row.iter_mut().enumerate() {
            let s: f64 = tips
                .iter()
                .map(|t| {
                    let (dx, dy) = (x as f64 - t.x, y as f64 - t.y);
                    (-(dx * dx + dy * dy) / denom).exp()
                })
                .sum();
            *v = match config.clamp_mode {
                ClampMode::ClampToOne => s.min(1.0),
            };
        }
    }
    Ok(Heatmap {
        width,
        height,
        data,
    })
}

/// IoU of `{pred >= t}` and `{truth >= t}`; two empty masks give 1.
pub fn heatmap_iou(pred: &Heatmap, truth: &Heatmap, threshold: f64) -> Result<f64> {
    if pred.width != truth.width || pred.height != truth.height {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", truth.width, truth.height),
            actual: format!("{}x{}", pred.width, pred.height),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in pred.data.iter().zip(&truth.data) {
        let (a, b) = (p >= threshold, q >= threshold);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> HeatmapConfig {
        HeatmapConfig::default()
    }

    #[test]
    fn peak_and_one_sigma_values() {
        let h = gaussian_heatmap(&[Point::new(128.0, 128.0)], 256, 256, &cfg()).unwrap();
        assert_eq!(h.get(128, 128), 1.0);
        // exp(-10² / (2·10²)) = exp(-1/2)
        assert!((h.get(138, 128) - 0.606_530_659_712_633_4).abs() < 1e-12);
    }

    #[test]
    fn coincident_tips_clamp_to_one() {
        let tips = [Point::new(50.0, 50.0), Point::new(50.0, 50.0)];
        let h = gaussian_heatmap(&tips, 100, 100, &cfg()).unwrap();
        assert_eq!(h.get(50, 50), 1.0);
        assert!(h.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn errors() {
        assert!(gaussian_heatmap(&[], 8, 8, &cfg()).is_err());
        assert!(matches!(
            gaussian_heatmap(&[Point::new(8.0, 0.0)], 8, 8, &cfg()),
            Err(Error::TipOutOfBounds { .. })
        ));
        let a = Heatmap::from_vec(2, 2, vec![0.0; 4]).unwrap();
        let b = Heatmap::from_vec(4, 1, vec![0.0; 4]).unwrap();
        assert!(heatmap_iou(&a, &b, 0.5).is_err());
    }

    #[test]
    fn iou_hand_counted() {
        // pred mask {(0,0),(1,0)}, truth mask {(1,0),(2,0)}: 1 / 3
        let mut p = vec![0.0; 16];
        let mut t = vec![0.0; 16];
        p[0] = 0.9;
        p[1] = 0.8;
        t[1] = 0.7;
        t[2] = 1.0;
        let pred = Heatmap::from_vec(4, 4, p).unwrap();
        let truth = Heatmap::from_vec(4, 4, t).unwrap();
        assert!((heatmap_iou(&pred, &truth, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(heatmap_iou(&pred, &pred, 0.5).unwrap(), 1.0);
        let zero = Heatmap::from_vec(4, 4, vec![0.0; 16]).unwrap();
        assert_eq!(heatmap_iou(&zero, &zero, 0.5).unwrap(), 1.0);
        let disjoint = Heatmap::from_vec(4, 4, {
            let mut d = vec![0.0; 16];
            d[15] = 1.0;
            d
        })
        .unwrap();
        assert_eq!(heatmap_iou(&pred, &disjoint, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn gray8_export() {
        let h = Heatmap::from_vec(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(h.to_gray8(), vec![0, 128, 255]);
    }

    #[test]
    fn peaks_respect_separation() {
        let tips = [Point::new(10.0, 10.0), Point::new(40.0, 30.0)];
        let h = gaussian_heatmap(&tips, 64, 64, &HeatmapConfig { sigma: 2.0, ..cfg() }).unwrap();
        let peaks = h.peaks(2, 5.0);
        assert_eq!(peaks.len(), 2);
        assert!(peaks.contains(&tips[0]) && peaks.contains(&tips[1]));
    }

    proptest! {
        #[test]
        fn radial_symmetry_and_monotone_decay(x0 in 20usize..236, y0 in 20usize..236, d in 1usize..20) {
            let h = gaussian_heatmap(&[Point::new(x0 as f64, y0 as f64)], 256, 256, &cfg()).unwrap();
            prop_assert_eq!(h.get(x0, y0 + d), h.get(x0 + d, y0));
            prop_assert!(h.get(x0 + d, y0) <= h.get(x0 + d - 1, y0));
            prop_assert!(h.get(x0, y0 - d) <= h.get(x0, y0 - d + 1));
        }

        #[test]
        fn iou_is_symmetric_and_bounded(
            a in proptest::collection::vec(0.0f64..=1.0, 36),
            b in proptest::collection::vec(0.0f64..=1.0, 36),
        ) {
            let a = Heatmap::from_vec(6, 6, a).unwrap();
            let b = Heatmap::from_vec(6, 6, b).unwrap();
            let ab = heatmap_iou(&a, &b, 0.5).unwrap();
            prop_assert_eq!(ab, heatmap_iou(&b, &a, 0.5).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(heatmap_iou(&a, &a, 0.5).unwrap(), 1.0);
        }
    }
}
