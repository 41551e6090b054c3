//! Differentiable tensor helpers built from candle primitives.
//!
//! candle only differentiates pooling when the window equals the stride and
//! has no bilinear backward, so the stride-1 window filters and the resize
//! used throughout the network are composed here from slicing, elementwise
//! maxima and matrix products, all of which carry gradients.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Promote a rank-2/3/4 map to `(B, C, H, W)` and return the original dims.
pub(crate) fn to_nchw(t: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let dims = t.dims().to_vec();
    let nchw = match dims.as_slice() {
        [h, w] => t.reshape((1, 1, *h, *w))?,
        [b, h, w] => t.reshape((*b, 1, *h, *w))?,
        [_, _, _, _] => t.clone(),
        _ => {
            return Err(Error::Shape(format!(
                "expected a map of rank 2, 3 or 4, got shape {dims:?}"
            )))
        }
    };
    if nchw.elem_count() == 0 {
        return Err(Error::Shape(format!("empty map with shape {dims:?}")));
    }
    Ok((nchw, dims))
}

pub(crate) fn from_nchw(t: Tensor, dims: &[usize]) -> Result<Tensor> {
    Ok(t.reshape(dims)?)
}

/// Two-tap linear resampling weights with half-pixel centres
/// (`align_corners = false`): output `o` reads `(1 - f)·in[i0] + f·in[i1]`.
pub fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Interpolation matrix of shape `(out, in)` built from [`bilinear_taps`].
pub fn interp_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0f64; out * inp];
    for (o, (i0, i1, frac)) in bilinear_taps(out, inp).into_iter().enumerate() {
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

fn interp_tensor(out: usize, inp: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let m = interp_matrix(out, inp);
    Ok(Tensor::from_vec(m, (out, inp), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of a `(B, C, H, W)` tensor to `(out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let (dtype, device) = (x.dtype(), x.device());
    // columns: (B*C*H, W) x (W, Wo)
    let aw_t = interp_tensor(out_w, w, dtype, device)?.t()?;
    let x = x.reshape((b * c * h, w))?.matmul(&aw_t)?;
    // rows: (B*C*Wo, H) x (H, Ho)
    let ah_t = interp_tensor(out_h, h, dtype, device)?.t()?;
    let x = x
        .reshape((b * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&ah_t)?;
    Ok(x
        .reshape((b * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, out_h, out_w))?)
}

/// Bilinear ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}

/// Sliding maximum over a centred `k×k` window, stride 1, with zeros outside
/// the image. Computed separably (rows then columns), which is exact for max.
pub(crate) fn window_max(x: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let r = k / 2;
    let padded = x.pad_with_zeros(3, r, r)?;
    let mut acc = padded.narrow(3, 0, w)?;
    for j in 1..k {
        acc = acc.maximum(&padded.narrow(3, j, w)?)?;
    }
    let padded = acc.pad_with_zeros(2, r, r)?;
    let mut acc = padded.narrow(2, 0, h)?;
    for i in 1..k {
        acc = acc.maximum(&padded.narrow(2, i, h)?)?;
    }
    Ok(acc)
}

/// Sliding sum over a centred `k×k` window with zeros outside the image.
///
/// Terms are accumulated in row-major window order, one shifted slice at a
/// time, so every output equals a left-to-right scalar sum over the window.
pub(crate) fn window_sum(x: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let r = k / 2;
    let padded = x.pad_with_zeros(2, r, r)?.pad_with_zeros(3, r, r)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..k {
        let rows = padded.narrow(2, dy, h)?;
        for dx in 0..k {
            let slice = rows.narrow(3, dx, w)?;
            acc = Some(match acc {
                None => slice.contiguous()?,
                Some(a) => (a + slice)?,
            });
        }
    }
    Ok(acc.expect("window has at least one element"))
}

/// Number of in-image pixels covered by each centred `k×k` window.
pub(crate) fn window_counts(h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = k / 2;
    let span = |i: usize, n: usize| (i + r).min(n - 1) + 1 - i.saturating_sub(r);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let cy = span(y, h);
        for x in 0..w {
            out.push((cy * span(x, w)) as f64);
        }
    }
    out
}

/// Depth-wise 2-D convolution: `weight` has shape `(C, 1, k, k)`.
///
/// Built as a weighted sum of shifted slices so it stays differentiable with
/// one kernel per channel; strided outputs are subsampled from the stride-1
/// result.
pub fn depthwise_conv2d(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (wc, one, kh, kw) = weight.dims4()?;
    if wc != c || one != 1 || kh != kw {
        return Err(Error::Shape(format!(
            "depth-wise kernel {:?} does not match input with {c} channels",
            weight.dims()
        )));
    }
    let k = kh;
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Shape(format!(
            "input {h}x{w} too small for a {k}x{k} kernel"
        )));
    }
    let full_h = h + 2 * padding - k + 1;
    let full_w = w + 2 * padding - k + 1;
    let padded = x
        .pad_with_zeros(2, padding, padding)?
        .pad_with_zeros(3, padding, padding)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..k {
        let rows = padded.narrow(2, dy, full_h)?;
        for dx in 0..k {
            let tap = weight.narrow(2, dy, 1)?.narrow(3, dx, 1)?.reshape((1, c, 1, 1))?;
            let term = rows.narrow(3, dx, full_w)?.broadcast_mul(&tap)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    let mut out = acc.expect("kernel has at least one tap");
    if stride > 1 {
        let device = x.device();
        let rows: Vec<u32> = (0..full_h as u32).step_by(stride).collect();
        let cols: Vec<u32> = (0..full_w as u32).step_by(stride).collect();
        let rows = Tensor::new(rows.as_slice(), device)?;
        let cols = Tensor::new(cols.as_slice(), device)?;
        out = out.index_select(&rows, 2)?.index_select(&cols, 3)?;
    }
    Ok(out)
}

/// Smallest distance a probability map keeps from 0 and 1.
pub const PROB_EPS: f64 = 1e-6;

/// Sigmoid clamped to `[PROB_EPS, 1 - PROB_EPS]`, so probabilities stay
/// strictly inside `(0, 1)` even where `f32` saturates.
pub fn probability(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(logits)?.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

/// Mean over the spatial axes, keeping `(B, C, 1, 1)`.
pub(crate) fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(3)?.mean_keepdim(2)?)
}

/// Max over the spatial axes, keeping `(B, C, 1, 1)`.
pub(crate) fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    Ok(x.flatten_from(2)?.max_keepdim(2)?.reshape((b, c, 1, 1))?)
}

/// Read a tensor of any rank into a flat `f64` vector.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Sum of every element as `f64`; used for cheap finiteness checks.
pub(crate) fn sum_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
}
