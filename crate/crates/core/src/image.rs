//! Float image grids shared by the renderers, rasterizer and encoders.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Single-channel image, row-major, nominally in `[0, 1]` with white = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn white(size: usize) -> Self {
        Self::filled(size, size, 1.0)
    }

    pub fn zeros_like(other: &GrayImage) -> Self {
        Self::filled(other.width, other.height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rounds every value to the nearest 8-bit level, matching what a PNG
    /// round trip would produce.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = ::image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .ok_or_else(|| Error::ShapeMismatch("pixel buffer size".into()))?;
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let img = ::image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        })
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer + 0.5). Samples outside the image return `fill`.
    pub fn sample_bilinear(&self, px: f64, py: f64, fill: f64) -> f64 {
        let mut acc = 0.0;
        for_bilinear_taps(self.width, self.height, px, py, |idx, w| match idx {
            Some(i) => acc += w * self.data[i],
            None => acc += w * fill,
        });
        acc
    }
}

/// Visits the four bilinear taps around `(px, py)` (pixel-center convention).
/// Taps falling outside the image are reported with `None`.
#[inline]
pub fn for_bilinear_taps(
    width: usize,
    height: usize,
    px: f64,
    py: f64,
    mut visit: impl FnMut(Option<usize>, f64),
) {
    let fx = px - 0.5;
    let fy = py - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let x0 = x0 as i64;
    let y0 = y0 as i64;
    let taps = [
        (x0, y0, (1.0 - tx) * (1.0 - ty)),
        (x0 + 1, y0, tx * (1.0 - ty)),
        (x0, y0 + 1, (1.0 - tx) * ty),
        (x0 + 1, y0 + 1, tx * ty),
    ];
    for (x, y, w) in taps {
        if w == 0.0 {
            continue;
        }
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            visit(Some(y as usize * width + x as usize), w);
        } else {
            visit(None, w);
        }
    }
}

/// Three-channel image used for mesh textures and colored surface renders.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let img = ::image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let raw: Vec<u8> = self
            .data
            .iter()
            .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::ShapeMismatch("pixel buffer size".into()))?;
        buf.save(path.as_ref())?;
        Ok(())
    }

    /// Bilinear lookup with wrap-around addressing at texture coordinates
    /// `(u, v)`, where `v = 0` is the bottom row (OBJ convention).
    pub fn sample_uv(&self, u: f64, v: f64) -> [f64; 3] {
        let px = u.rem_euclid(1.0) * self.width as f64 - 0.5;
        let py = (1.0 - v.rem_euclid(1.0)) * self.height as f64 - 0.5;
        let x0 = px.floor();
        let y0 = py.floor();
        let tx = px - x0;
        let ty = py - y0;
        let wrap = |i: f64, n: usize| (i as i64).rem_euclid(n as i64) as usize;
        let mut out = [0.0; 3];
        for (dx, dy, w) in [
            (0.0, 0.0, (1.0 - tx) * (1.0 - ty)),
            (1.0, 0.0, tx * (1.0 - ty)),
            (0.0, 1.0, (1.0 - tx) * ty),
            (1.0, 1.0, tx * ty),
        ] {
            let c = self.data[wrap(y0 + dy, self.height) * self.width + wrap(x0 + dx, self.width)];
            for k in 0..3 {
                out[k] += w * c[k];
            }
        }
        out
    }
}

/// Rec. 601 luma.
#[inline]
pub fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}
