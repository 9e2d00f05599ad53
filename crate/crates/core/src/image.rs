//! Single-channel intensity grids and their 8-bit PNG encoding.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major single-channel image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {width}x{height}", width * height),
                actual: data.len().to_string(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Value at integer coordinates, or zero outside the grid.
    pub fn get_or_zero(&self, x: i64, y: i64) -> f32 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            self.get(x as usize, y as usize)
        }
    }

    /// Bilinear sample at continuous pixel coordinates; zero outside the grid.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let a = self.get_or_zero(x0, y0);
        let b = self.get_or_zero(x0 + 1, y0);
        let c = self.get_or_zero(x0, y0 + 1);
        let d = self.get_or_zero(x0 + 1, y0 + 1);
        (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Snaps every value onto the 8-bit lattice `k / 255`, so that a PNG
    /// round-trip reproduces the image bit for bit.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = f32::from(to_u8(*v)) / 255.0;
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(
            width,
            height,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    pub fn median(&self) -> f32 {
        let mut v = self.data.clone();
        v.sort_by(f32::total_cmp);
        if v.is_empty() {
            return 0.0;
        }
        v[v.len() / 2]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = ::image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = ::image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Self::from_u8(w as usize, h as usize, gray.as_raw())
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_values_survive_u8_round_trip() {
        let mut img = GrayImage::from_fn(7, 3, |x, y| (x as f32 * 0.13 + y as f32 * 0.31) % 1.0);
        img.quantize_u8();
        let back = GrayImage::from_u8(7, 3, &img.to_u8()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn bilinear_sample_hits_pixel_centres() {
        let img = GrayImage::from_fn(4, 4, |x, y| (x + 4 * y) as f32);
        assert_eq!(img.sample_bilinear(2.0, 1.0), 6.0);
        assert_eq!(img.sample_bilinear(2.5, 1.0), 6.5);
        assert_eq!(img.sample_bilinear(-1.0, 0.0), 0.0);
    }
}
