//! Deterministic inputs shared by the benchmarks.

use pbnet_core::{BinaryMask, Device, Tensor};

/// Smooth map in `[0, 1]` of shape `(1, 1, h, w)`.
pub fn smooth_map(h: usize, w: usize) -> Tensor {
    let data: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32, (i % w) as f32);
            0.5 + 0.5 * (0.11 * y).sin() * (0.07 * x).cos()
        })
        .collect();
    Tensor::from_vec(data, (1, 1, h, w), &Device::Cpu).expect("sizes match")
}

/// Filled ellipse centred at `(cy, cx)` with semi-axes `(ry, rx)`.
pub fn ellipse(h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> BinaryMask {
    let data = (0..h * w)
        .map(|i| {
            let dy = ((i / w) as f64 - cy) / ry;
            let dx = ((i % w) as f64 - cx) / rx;
            dy * dy + dx * dx <= 1.0
        })
        .collect();
    BinaryMask::new(h, w, data).expect("sizes match")
}

/// Normalized-looking input batch `(b, 3, h, w)`.
pub fn image_batch(b: usize, h: usize, w: usize) -> Tensor {
    let n = b * 3 * h * w;
    let data: Vec<f32> = (0..n).map(|i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0).collect();
    Tensor::from_vec(data, (b, 3, h, w), &Device::Cpu).expect("sizes match")
}
