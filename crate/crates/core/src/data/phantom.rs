use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

use super::preprocess::{ImageBuf, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Multiplies every lesion's contrast; 0 makes lesions invisible.
    pub contrast_scale: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            count: 8,
            height: 64,
            width: 64,
            seed: 0,
            contrast_scale: 1.0,
        }
    }
}

/// Synthetic speckle image with hypoechoic elliptical lesions and their
/// exact mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub id: String,
    /// 8-bit grayscale, row-major.
    pub pixels: Vec<u8>,
    pub mask: BinaryMask,
}

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.40;
const BACKGROUND: f64 = 0.55;
const CONTRASTS: [f64; 2] = [0.35, 0.75];

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn random_ellipse(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Ellipse {
    let m = h.min(w) as f64;
    let radius = Uniform::new(0.08 * m, 0.3 * m).expect("valid range");
    let (ry, rx) = (radius.sample(rng), radius.sample(rng));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    Ellipse {
        cy: rng.random_range(0.25..0.75) * h as f64,
        cx: rng.random_range(0.25..0.75) * w as f64,
        ry,
        rx,
        cos: theta.cos(),
        sin: theta.sin(),
    }
}

fn render(rng: &mut ChaCha8Rng, id: String, cfg: &PhantomConfig) -> Phantom {
    let (h, w) = (cfg.height, cfg.width);
    let (ellipses, mask) = loop {
        let n = rng.random_range(1..=2);
        let ellipses: Vec<Ellipse> = (0..n).map(|_| random_ellipse(rng, h, w)).collect();
        let mut mask = BinaryMask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                if ellipses.iter().any(|e| e.contains(y as f64, x as f64)) {
                    mask.set(y, x, true);
                }
            }
        }
        let frac = mask.count() as f64 / (h * w) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break (ellipses, mask);
        }
    };
    let contrasts: Vec<f64> = ellipses
        .iter()
        .map(|_| CONTRASTS[rng.random_range(0..CONTRASTS.len())] * cfg.contrast_scale)
        .collect();
    // Rayleigh speckle (σ = 1/√2 gives unit second moment), lightly smoothed.
    let speckle: Vec<f64> = (0..h * w)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            (-u.ln()).sqrt()
        })
        .collect();
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += speckle[yy * w + xx];
                    n += 1.0;
                }
            }
            let mut base = BACKGROUND;
            for (e, c) in ellipses.iter().zip(&contrasts) {
                if e.contains(y as f64, x as f64) {
                    base = BACKGROUND * (1.0 - c);
                }
            }
            let v = base * s / n * 1.1;
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Phantom { id, pixels, mask }
}

pub fn generate_phantoms(cfg: &PhantomConfig) -> Result<Vec<Phantom>> {
    if cfg.count == 0 {
        return Err(Error::Config("phantom count must be at least 1".into()));
    }
    if cfg.height < 8 || cfg.width < 8 {
        return Err(Error::Config("phantoms must be at least 8x8".into()));
    }
    if !(cfg.contrast_scale >= 0.0 && cfg.contrast_scale <= 1.0) {
        return Err(Error::Config("phantom contrast_scale must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.count)
        .map(|i| render(&mut rng, format!("phantom_{i:03}"), cfg))
        .collect())
}

impl Phantom {
    /// Three identical channels in `[0, 1]`, as the PNG loader would produce.
    pub fn to_sample(&self) -> Sample {
        let (h, w) = self.mask.shape();
        let plane: Vec<f32> = self.pixels.iter().map(|p| *p as f32 / 255.0).collect();
        let data = [plane.as_slice(); 3].concat();
        Sample {
            id: self.id.clone(),
            image: ImageBuf::new(3, h, w, data).expect("sizes match"),
            mask: self.mask.clone(),
        }
    }
}

/// Write phantoms in the generic layout (`images/`, `masks/`).
pub fn write_phantoms(dir: &Path, phantoms: &[Phantom]) -> Result<()> {
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for p in phantoms {
        let (h, w) = p.mask.shape();
        let img = image::GrayImage::from_raw(w as u32, h as u32, p.pixels.clone())
            .expect("pixel buffer matches size");
        let path = img_dir.join(format!("{}.png", p.id));
        img.save(&path).map_err(|e| Error::image(&path, e))?;
        let m: Vec<u8> = p.mask.data().iter().map(|v| if *v { 255 } else { 0 }).collect();
        let m = image::GrayImage::from_raw(w as u32, h as u32, m).expect("mask matches size");
        let path = mask_dir.join(format!("{}.png", p.id));
        m.save(&path).map_err(|e| Error::image(&path, e))?;
    }
    Ok(())
}
