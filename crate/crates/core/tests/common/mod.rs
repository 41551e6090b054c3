//! Brute-force references and fixtures shared by the integration suites.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use pbnet_core::metrics::{BinaryMask, ConfusionCounts};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TABLE_KERNELS: [usize; 5] = [3, 5, 7, 9, 13];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random::<f32>()).collect()
}

pub fn random_bits(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

pub fn map_tensor(v: &[f32], h: usize, w: usize) -> Tensor {
    Tensor::from_vec(v.to_vec(), (1, 1, h, w), &Device::Cpu).unwrap()
}

pub fn map_tensor_f64(v: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::from_vec(v.to_vec(), (1, 1, h, w), &Device::Cpu).unwrap()
}

pub fn values_f32(t: &Tensor) -> Vec<f32> {
    t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn values_f64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

/// In-image pixels of the `k×k` window centred at `(y, x)`, row-major,
/// and whether the window reaches outside the image.
fn window(y: usize, x: usize, h: usize, w: usize, k: usize) -> (Vec<(usize, usize)>, bool) {
    let r = (k / 2) as isize;
    let mut inside = Vec::new();
    let mut outside = false;
    for dy in -r..=r {
        for dx in -r..=r {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                outside = true;
            } else {
                inside.push((yy as usize, xx as usize));
            }
        }
    }
    (inside, outside)
}

/// Window maximum with pixels outside the image read as 0.
pub fn oracle_dilate(v: &[f32], h: usize, w: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (inside, outside) = window(y, x, h, w, k);
            let mut m = if outside { 0f32 } else { f32::NEG_INFINITY };
            for (yy, xx) in inside {
                m = m.max(v[yy * w + xx]);
            }
            out[y * w + x] = m;
        }
    }
    out
}

/// Window minimum with pixels outside the image read as 0.
pub fn oracle_erode(v: &[f32], h: usize, w: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (inside, outside) = window(y, x, h, w, k);
            let mut m = if outside { 0f32 } else { f32::INFINITY };
            for (yy, xx) in inside {
                m = m.min(v[yy * w + xx]);
            }
            out[y * w + x] = m;
        }
    }
    out
}

/// `|mean of in-image window pixels − centre|`, summed in row-major order.
pub fn oracle_band(v: &[f32], h: usize, w: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (inside, _) = window(y, x, h, w, k);
            let mut s = 0f32;
            for (yy, xx) in &inside {
                s += v[yy * w + xx];
            }
            out[y * w + x] = (s / inside.len() as f32 - v[y * w + x]).abs();
        }
    }
    out
}

pub fn oracle_band_f64(v: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (inside, _) = window(y, x, h, w, k);
            let s: f64 = inside.iter().map(|(yy, xx)| v[yy * w + xx]).sum();
            out[y * w + x] = (s / inside.len() as f64 - v[y * w + x]).abs();
        }
    }
    out
}

pub fn oracle_confusion(pred: &[bool], truth: &[bool]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (p, t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

fn points(m: &[bool], w: usize) -> Vec<(f64, f64)> {
    m.iter()
        .enumerate()
        .filter(|(_, v)| **v)
        .map(|(i, _)| ((i / w) as f64, (i % w) as f64))
        .collect()
}

/// Nearest-point distance from every point of `a` to the set `b`,
/// by exhaustive pairing.
fn directed(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<f64> {
    a.iter()
        .map(|(ay, ax)| {
            b.iter()
                .map(|(by, bx)| ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// 95th percentile by linear interpolation between order statistics.
fn p95(mut d: Vec<f64>) -> f64 {
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = 0.95 * (d.len() - 1) as f64;
    let below = rank.floor();
    let frac = rank - below;
    let i = below as usize;
    if i + 1 < d.len() {
        d[i] * (1.0 - frac) + d[i + 1] * frac
    } else {
        d[i]
    }
}

/// `(hd, hd95)` for two non-empty masks.
pub fn oracle_hausdorff(a: &[bool], b: &[bool], w: usize) -> (f64, f64) {
    let (pa, pb) = (points(a, w), points(b, w));
    let ab = directed(&pa, &pb);
    let ba = directed(&pb, &pa);
    let max = |d: &[f64]| d.iter().copied().fold(0.0, f64::max);
    (max(&ab).max(max(&ba)), p95(ab).max(p95(ba)))
}

/// Union of up to `blobs` random rectangles, capped at `max_pixels`.
pub fn random_blobs(rng: &mut ChaCha8Rng, h: usize, w: usize, blobs: usize, max_pixels: usize) -> Vec<bool> {
    loop {
        let mut m = vec![false; h * w];
        for _ in 0..rng.random_range(1..=blobs) {
            let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
            let (bh, bw) = (rng.random_range(1..=h / 3), rng.random_range(1..=w / 3));
            for y in y0..(y0 + bh).min(h) {
                for x in x0..(x0 + bw).min(w) {
                    m[y * w + x] = true;
                }
            }
        }
        let n = m.iter().filter(|v| **v).count();
        if n > 0 && n <= max_pixels {
            return m;
        }
    }
}

pub fn mask(h: usize, w: usize, data: Vec<bool>) -> BinaryMask {
    BinaryMask::new(h, w, data).unwrap()
}

/// Step edge: columns `< col` are 1.
pub fn step_edge(h: usize, w: usize, col: usize) -> Vec<f64> {
    (0..h * w).map(|i| if i % w < col { 1.0 } else { 0.0 }).collect()
}

/// Analytic trainable-parameter count of a convolution.
pub fn conv_params(i: usize, o: usize, k: usize, bias: bool) -> usize {
    o * i * k * k + if bias { o } else { 0 }
}

/// Convolution followed by batch norm (scale and shift per channel).
pub fn conv_bn(i: usize, o: usize, k: usize, bias: bool) -> usize {
    conv_params(i, o, k, bias) + 2 * o
}

/// Layer-by-layer parameter total of the tiny-test model.
pub fn tiny_param_count(mgpm: bool, bgm: bool) -> usize {
    let width = 8;
    let c = 64;
    let mut n = 0;
    // encoder: five stages of a stride-2 and a stride-1 3×3 conv, no bias
    let mut in_c = 3;
    for _ in 0..5 {
        n += conv_bn(in_c, width, 3, false) + conv_bn(width, width, 3, false);
        in_c = width;
    }
    // five skip projections and the top 1×1 projection
    n += 6 * conv_bn(width, c, 1, true);
    if mgpm {
        let (cells, r) = (4, 32);
        let stacked = 2 * cells * r;
        let per = 2 * conv_bn(c, r, 1, true)
            + (stacked * 9 + stacked) + 2 * stacked
            + conv_bn(stacked, cells * r, 1, true)
            + conv_bn(r, c, 3, true)
            + conv_bn(c, c, 3, true);
        n += 3 * per;
    }
    if bgm {
        let hidden = c / 16;
        let per = 2 * conv_bn(c, c, 3, true)
            + (c * hidden + hidden)
            + (hidden * c + c)
            + conv_params(c, 1, 1, true);
        n += 3 * per;
    }
    // four decoder blocks and the output head
    n += 4 * (conv_bn(2 * c, c, 3, true) + conv_bn(c, c, 3, true));
    n + conv_params(c, 1, 1, true)
}

/// Write a BUSI-style tree: `<category>/<category> (i).png` with
/// `_mask.png` files; every 25th tumour image also gets `_mask_1.png`.
/// Normal images get all-zero masks, as in the public release.
pub fn write_busi_tree(root: &std::path::Path, counts: &[(&str, usize)], side: u32) {
    use image::{GrayImage, Luma};
    for (cat, n) in counts {
        let dir = root.join(cat);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 1..=*n {
            let stem = format!("{cat} ({i})");
            GrayImage::from_fn(side, side, |x, y| Luma([((x * 31 + y * 17 + i as u32) % 256) as u8]))
                .save(dir.join(format!("{stem}.png")))
                .unwrap();
            let tumour = *cat != "normal";
            let rect = |x0: u32, x1: u32| {
                GrayImage::from_fn(side, side, move |x, y| {
                    Luma([if tumour && (x0..x1).contains(&x) && (2..side / 2).contains(&y) { 255 } else { 0 }])
                })
            };
            rect(1, side / 2).save(dir.join(format!("{stem}_mask.png"))).unwrap();
            if tumour && i % 25 == 0 {
                rect(side / 2 + 1, side - 1).save(dir.join(format!("{stem}_mask_1.png"))).unwrap();
            }
        }
    }
}
