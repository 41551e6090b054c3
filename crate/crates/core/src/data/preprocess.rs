use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::ops::bilinear_taps;

use super::SampleRecord;

/// Planar `C×H×W` image with values in `[0, 1]` (or standardized).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?)
    }
}

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        }
    }
}

/// Added to the standard deviation so constant channels map to zero.
pub const STD_EPSILON: f64 = 1e-6;

/// Read an 8-bit image as RGB in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageBuf> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    ImageBuf::new(3, h, w, data)
}

/// Union of the record's masks (pixels ≥ 128 are foreground); an all-zero
/// mask of the image size when there are none.
pub fn load_mask(record: &SampleRecord, height: usize, width: usize) -> Result<BinaryMask> {
    let mut out = BinaryMask::empty(height, width);
    for path in &record.masks {
        let m = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
        if (m.height() as usize, m.width() as usize) != (height, width) {
            return Err(Error::Data(format!(
                "mask {} is {}x{} but its image is {height}x{width}",
                path.display(),
                m.height(),
                m.width()
            )));
        }
        let part = BinaryMask::new(height, width, m.pixels().map(|p| p.0[0] >= 128).collect())?;
        out = out.union(&part)?;
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centres.
pub fn resize_image(img: &ImageBuf, height: usize, width: usize) -> ImageBuf {
    if (img.height, img.width) == (height, width) {
        return img.clone();
    }
    let ty = bilinear_taps(height, img.height);
    let tx = bilinear_taps(width, img.width);
    let mut data = vec![0f32; img.channels * height * width];
    for c in 0..img.channels {
        let src = img.plane(c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let at = |y: usize, x: usize| src[y * img.width + x] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data[(c * height + oy) * width + ox] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    ImageBuf {
        channels: img.channels,
        height,
        width,
        data,
    }
}

/// Nearest-neighbour resize; the result is binary by construction.
pub fn resize_mask(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let (h, w) = mask.shape();
    if (h, w) == (height, width) {
        return mask.clone();
    }
    let near = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut data = Vec::with_capacity(height * width);
    for oy in 0..height {
        let y = near(oy, height, h);
        for ox in 0..width {
            data.push(mask.get(y, near(ox, width, w)));
        }
    }
    BinaryMask::new(height, width, data).expect("sizes match")
}

/// `(x − mean) / (std + ε)` per channel.
pub fn normalize(img: &ImageBuf, norm: &Normalization) -> Result<ImageBuf> {
    if norm.mean.len() != img.channels || norm.std.len() != img.channels {
        return Err(Error::Config(format!(
            "normalization has {} means and {} stds for a {}-channel image",
            norm.mean.len(),
            norm.std.len(),
            img.channels
        )));
    }
    let n = img.height * img.width;
    let mut data = img.data.clone();
    for c in 0..img.channels {
        let (m, s) = (norm.mean[c], norm.std[c] + STD_EPSILON);
        for v in &mut data[c * n..(c + 1) * n] {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
    ImageBuf::new(img.channels, img.height, img.width, data)
}

/// Per-channel mean and population std over every pixel of `images`.
pub fn compute_normalization<'a>(images: impl IntoIterator<Item = &'a ImageBuf>) -> Result<Normalization> {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut count = 0usize;
    for img in images {
        if img.channels != 3 {
            return Err(Error::Data("normalization expects 3-channel images".into()));
        }
        for c in 0..3 {
            for v in img.plane(c) {
                let v = *v as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        count += img.height * img.width;
    }
    if count == 0 {
        return Err(Error::Data("cannot compute normalization over no images".into()));
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = (0..3).map(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt()).collect();
    Ok(Normalization { mean, std })
}

/// Image resized to the target size in `[0, 1]`, plus its binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageBuf,
    pub mask: BinaryMask,
}

pub fn check_target(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % INPUT_MULTIPLE != 0 || width % INPUT_MULTIPLE != 0 {
        return Err(Error::Config(format!(
            "target size {height}x{width} must be a positive multiple of {INPUT_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Load, resize and binarize one record without normalizing.
pub fn load_sample(record: &SampleRecord, height: usize, width: usize) -> Result<Sample> {
    check_target(height, width)?;
    let img = load_image(&record.image)?;
    let mask = load_mask(record, img.height, img.width)?;
    Ok(Sample {
        id: record.id.clone(),
        image: resize_image(&img, height, width),
        mask: resize_mask(&mask, height, width),
    })
}

/// Load, resize and standardize one record.
pub fn preprocess(
    record: &SampleRecord,
    height: usize,
    width: usize,
    norm: &Normalization,
) -> Result<(ImageBuf, BinaryMask)> {
    let s = load_sample(record, height, width)?;
    Ok((normalize(&s.image, norm)?, s.mask))
}
