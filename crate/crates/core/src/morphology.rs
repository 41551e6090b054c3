//! Differentiable grey-level morphology over square windows.
//!
//! Maps are tensors of rank 2 `(H, W)`, 3 `(B, H, W)` or 4 `(B, C, H, W)`;
//! every channel is filtered independently and the output has the input's
//! shape. Windows are centred with stride 1. Pixels outside the image count
//! as background `0` for dilation and erosion; the box mean used by
//! [`boundary_band`] averages only the in-image pixels of each window.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;

/// Side length of a square, centred window. Always odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct MorphKernel(usize);

impl MorphKernel {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::Config(format!(
                "morphology kernel size must be odd and positive, got {size}"
            )));
        }
        Ok(Self(size))
    }

    pub fn size(self) -> usize {
        self.0
    }

    pub fn radius(self) -> usize {
        self.0 / 2
    }
}

impl TryFrom<usize> for MorphKernel {
    type Error = Error;

    fn try_from(size: usize) -> Result<Self> {
        Self::new(size)
    }
}

impl From<MorphKernel> for usize {
    fn from(k: MorphKernel) -> usize {
        k.0
    }
}

/// Grey-level dilation: maximum over each `k×k` window.
pub fn dilate(p: &Tensor, k: MorphKernel) -> Result<Tensor> {
    let (x, dims) = ops::to_nchw(p)?;
    ops::from_nchw(ops::window_max(&x, k.size())?, &dims)
}

/// Grey-level erosion: minimum over each `k×k` window, computed as
/// `-dilate(-p)` so that outside pixels contribute `0`.
pub fn erode(p: &Tensor, k: MorphKernel) -> Result<Tensor> {
    let (x, dims) = ops::to_nchw(p)?;
    let neg = ops::window_max(&x.neg()?, k.size())?.neg()?;
    ops::from_nchw(neg, &dims)
}

/// Ternary confidence map `(dilate(p, ke) + erode(p, kd)) / 2`.
///
/// For a binary map this is 1 inside the eroded region, 0 outside the
/// dilated region and exactly 0.5 on the band between them.
pub fn boundary_confidence(p: &Tensor, ke: MorphKernel, kd: MorphKernel) -> Result<Tensor> {
    let sum = (dilate(p, ke)? + erode(p, kd)?)?;
    Ok((sum * 0.5)?)
}

/// Box mean over each `k×k` window, divided by the number of in-image
/// pixels covered.
pub fn box_mean(a: &Tensor, k: MorphKernel) -> Result<Tensor> {
    let (x, dims) = ops::to_nchw(a)?;
    let (_, _, h, w) = x.dims4()?;
    let sums = ops::window_sum(&x, k.size())?;
    let counts = Tensor::from_vec(ops::window_counts(h, w, k.size()), (1, 1, h, w), x.device())?
        .to_dtype(x.dtype())?;
    ops::from_nchw(sums.broadcast_div(&counts)?, &dims)
}

/// Boundary response `|box_mean(a, k) - a|`; zero wherever `a` is locally
/// constant, including along the image border.
pub fn boundary_band(a: &Tensor, k: MorphKernel) -> Result<Tensor> {
    Ok((box_mean(a, k)? - a)?.abs()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn k(n: usize) -> MorphKernel {
        MorphKernel::new(n).unwrap()
    }

    fn map(v: Vec<f32>, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (h, w), &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn kernel_must_be_odd() {
        assert!(MorphKernel::new(4).is_err());
        assert!(MorphKernel::new(0).is_err());
        assert_eq!(MorphKernel::new(13).unwrap().radius(), 6);
    }

    #[test]
    fn empty_map_is_a_shape_error() {
        let t = Tensor::zeros((0, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(dilate(&t, k(3)), Err(Error::Shape(_))));
        assert!(matches!(erode(&t, k(3)), Err(Error::Shape(_))));
    }

    #[test]
    fn dilate_zeros_and_impulse() {
        let z = map(vec![0.0; 9], 3, 3);
        assert_eq!(values(&dilate(&z, k(3)).unwrap()), vec![0.0; 9]);
        let mut v = vec![0.0; 9];
        v[4] = 1.0;
        assert_eq!(values(&dilate(&map(v, 3, 3), k(3)).unwrap()), vec![1.0; 9]);
    }

    #[test]
    fn erode_ones_keeps_only_the_centre() {
        let out = values(&erode(&map(vec![1.0; 9], 3, 3), k(3)).unwrap());
        let mut expected = vec![0.0; 9];
        expected[4] = 1.0;
        assert_eq!(out, expected);
        assert_eq!(values(&erode(&map(vec![0.0; 9], 3, 3), k(3)).unwrap()), vec![0.0; 9]);
    }

    #[test]
    fn confidence_of_ones_has_half_ring() {
        let out = values(&boundary_confidence(&map(vec![1.0; 25], 5, 5), k(3), k(3)).unwrap());
        for y in 0..5 {
            for x in 0..5 {
                let interior = (1..4).contains(&y) && (1..4).contains(&x);
                assert_eq!(out[y * 5 + x], if interior { 1.0 } else { 0.5 });
            }
        }
        let zeros = boundary_confidence(&map(vec![0.0; 25], 5, 5), k(5), k(9)).unwrap();
        assert!(values(&zeros).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn band_of_constant_is_zero_everywhere() {
        for c in [0.0f32, 0.37, 1.0] {
            let out = boundary_band(&map(vec![c; 64], 8, 8), k(5)).unwrap();
            assert!(values(&out).iter().all(|v| v.abs() < 1e-6), "c={c}");
        }
    }

    #[test]
    fn band_of_step_edge_is_two_pixels_wide() {
        // columns 0..4 are 1, 4..8 are 0; 3-wide windows straddle the edge
        // only at columns 3 and 4.
        let (h, w) = (6, 8);
        let v: Vec<f32> = (0..h * w).map(|i| if i % w < 4 { 1.0 } else { 0.0 }).collect();
        let out = values(&boundary_band(&map(v, h, w), k(3)).unwrap());
        for y in 0..h {
            for x in 0..w {
                let nonzero = out[y * w + x] != 0.0;
                assert_eq!(nonzero, x == 3 || x == 4, "({y},{x})");
            }
        }
        // interior rows: window mean is 2/3 at column 3 and 1/3 at column 4
        assert!((out[2 * w + 3] - 1.0 / 3.0).abs() < 1e-6);
        assert!((out[2 * w + 4] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn batched_and_channelled_inputs_keep_shape() {
        let t = Tensor::rand(0f32, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(dilate(&t, k(3)).unwrap().dims(), &[2, 3, 8, 8]);
        let t = Tensor::rand(0f32, 1.0, (2, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(boundary_band(&t, k(5)).unwrap().dims(), &[2, 8, 8]);
    }

    #[test]
    fn gradients_flow_to_window_argmax() {
        let v: Vec<f64> = vec![0.1, 0.9, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let var = Var::from_vec(v, (3, 3), &Device::Cpu).unwrap();
        let out = dilate(var.as_tensor(), k(3)).unwrap();
        let g = out.sum_all().unwrap().backward().unwrap();
        let grad: Vec<f64> = g.get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        // 0.9 wins six windows, 0.8 two and 0.7 the bottom-left one
        assert_eq!(grad, vec![0.0, 6.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
    }
}
