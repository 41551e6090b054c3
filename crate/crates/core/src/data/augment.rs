use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

use super::preprocess::ImageBuf;

/// Random geometric transforms; each fires independently with its
/// probability, and image and mask always receive the same transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub rotate_p: f64,
    /// Maximum absolute rotation, degrees.
    pub rotate_degrees: f64,
    pub scale_p: f64,
    pub scale_range: [f64; 2],
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            vflip_p: 0.0,
            rotate_p: 0.5,
            rotate_degrees: 15.0,
            scale_p: 0.5,
            scale_range: [0.9, 1.1],
        }
    }
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        Self {
            hflip_p: 0.0,
            vflip_p: 0.0,
            rotate_p: 0.0,
            scale_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("rotate_p", self.rotate_p),
            ("scale_p", self.scale_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must lie in [0, 1], got {p}")));
            }
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("augment.scale_range [{lo}, {hi}] is invalid")));
        }
        if !(self.rotate_degrees >= 0.0 && self.rotate_degrees.is_finite()) {
            return Err(Error::Config("augment.rotate_degrees must be non-negative".into()));
        }
        Ok(())
    }
}

/// Alias kept for callers that work on unnormalized pairs.
pub type RawSample = (ImageBuf, BinaryMask);

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent per-sample stream from `(base_seed, epoch, index)`.
pub fn derive_seed(base: u64, epoch: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ epoch) ^ index)
}

fn flip(img: &mut ImageBuf, mask: &mut BinaryMask, horizontal: bool) {
    let (h, w) = (img.height, img.width);
    let src = |y: usize, x: usize| if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
    let old = img.data.clone();
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                img.data[(c * h + y) * w + x] = old[(c * h + sy) * w + sx];
            }
        }
    }
    let old = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            mask.set(y, x, old.get(sy, sx));
        }
    }
}

/// Rotate by `angle` radians and scale by `scale` about the image centre;
/// uncovered pixels are zero.
fn affine(img: &ImageBuf, mask: &BinaryMask, angle: f64, scale: f64) -> (ImageBuf, BinaryMask) {
    let (h, w) = (img.height, img.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = ImageBuf {
        data: vec![0.0; img.data.len()],
        ..img.clone()
    };
    let mut out_mask = BinaryMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = (cos * dx + sin * dy) / scale + cx;
            let sy = (-sin * dx + cos * dy) / scale + cy;
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                out_mask.set(y, x, mask.get(ny as usize, nx as usize));
            }
            if sy <= -1.0 || sx <= -1.0 || sy >= h as f64 || sx >= w as f64 {
                continue;
            }
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            for c in 0..img.channels {
                let plane = img.plane(c);
                let at = |yy: f64, xx: f64| {
                    if yy < 0.0 || xx < 0.0 || yy as usize >= h || xx as usize >= w {
                        0.0
                    } else {
                        plane[yy as usize * w + xx as usize]
                    }
                };
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
                let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
                out.data[(c * h + y) * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    (out, out_mask)
}

/// Apply the policy. Every call consumes the same number of draws, so the
/// stream position does not depend on which transforms fired.
pub fn augment<R: Rng + ?Sized>(
    image: &ImageBuf,
    mask: &BinaryMask,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> (ImageBuf, BinaryMask) {
    let u: [f64; 6] = std::array::from_fn(|_| rng.random::<f64>());
    let mut img = image.clone();
    let mut m = mask.clone();
    if u[0] < policy.hflip_p {
        flip(&mut img, &mut m, true);
    }
    if u[1] < policy.vflip_p {
        flip(&mut img, &mut m, false);
    }
    let angle = if u[2] < policy.rotate_p {
        (2.0 * u[3] - 1.0) * policy.rotate_degrees.to_radians()
    } else {
        0.0
    };
    let scale = if u[4] < policy.scale_p {
        let [lo, hi] = policy.scale_range;
        lo + (hi - lo) * u[5]
    } else {
        1.0
    };
    if angle != 0.0 || scale != 1.0 {
        (img, m) = affine(&img, &m, angle, scale);
    }
    (img, m)
}
