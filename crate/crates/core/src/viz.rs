//! Image exports: prediction overlays, probability maps, attention and
//! boundary maps, plus inference on images of any size.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::Serialize;

use crate::backbone::INPUT_MULTIPLE;
use crate::data::{normalize, resize_mask, ImageBuf, Normalization};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::morphology::{dilate, erode};
use crate::network::PBNet;
use crate::nn::Ctx;
use crate::ops;

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const FN_COLOR: [u8; 3] = [255, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];

/// Gray image with true-positive pixels green, missed lesion pixels yellow
/// and false alarms red.
pub fn overlay(gray: &[u8], pred: &BinaryMask, truth: &BinaryMask) -> Result<RgbImage> {
    let (h, w) = truth.shape();
    if pred.shape() != (h, w) || gray.len() != h * w {
        return Err(Error::Shape("overlay inputs must share one size".into()));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        match (pred.get(y, x), truth.get(y, x)) {
            (true, true) => Rgb(TP_COLOR),
            (false, true) => Rgb(FN_COLOR),
            (true, false) => Rgb(FP_COLOR),
            (false, false) => {
                let g = gray[y * w + x];
                Rgb([g, g, g])
            }
        }
    }))
}

/// `round(255·v)` for values in `[0, 1]`.
pub fn to_gray(values: &[f64], h: usize, w: usize) -> Result<GrayImage> {
    if values.len() != h * w {
        return Err(Error::Shape(format!("{} values for a {h}x{w} image", values.len())));
    }
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[y as usize * w + x as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    }))
}

pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    let (h, w) = mask.shape();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

/// Rescaled gray copy of an image's first channel.
pub fn gray_u8(img: &ImageBuf) -> Vec<u8> {
    img.plane(0).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn tensor_map(t: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let dims = t.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    Ok((ops::to_f64_vec(t)?, h, w))
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::image(path, e))
}

fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pad bottom and right up to the next multiple of `multiple`.
pub fn pad_reflect(img: &ImageBuf, multiple: usize) -> (ImageBuf, usize, usize) {
    let ph = img.height.div_ceil(multiple) * multiple - img.height;
    let pw = img.width.div_ceil(multiple) * multiple - img.width;
    if ph == 0 && pw == 0 {
        return (img.clone(), 0, 0);
    }
    let (h, w) = (img.height + ph, img.width + pw);
    let mut data = Vec::with_capacity(img.channels * h * w);
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in 0..h {
            let sy = mirror(y as isize, img.height);
            for x in 0..w {
                data.push(plane[sy * img.width + mirror(x as isize, img.width)]);
            }
        }
    }
    (ImageBuf::new(img.channels, h, w, data).expect("sizes match"), ph, pw)
}

#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub probability: Vec<f64>,
    /// Rows and columns added by reflection and cropped away again.
    pub padded: (usize, usize),
}

/// Run the network on a raw image of any size.
pub fn predict_any_size(net: &PBNet, img: &ImageBuf, norm: &Normalization) -> Result<Prediction> {
    let (padded, ph, pw) = pad_reflect(img, INPUT_MULTIPLE);
    let x = normalize(&padded, norm)?.to_tensor(net.device())?.to_dtype(net.dtype())?;
    let p0 = net
        .forward(&Ctx::eval(), &x)?
        .p0
        .narrow(2, 0, img.height)?
        .narrow(3, 0, img.width)?;
    Ok(Prediction {
        height: img.height,
        width: img.width,
        probability: ops::to_f64_vec(&p0)?,
        padded: (ph, pw),
    })
}

/// Write attention and boundary maps of every boundary-guided level:
/// `level{l}_ms.png`, `level{l}_p.png`, `level{l}_boundary.png`,
/// `level{l}_mc.csv`, plus `p0.png` and, with a mask, `tb.png`.
pub fn export_attention(
    net: &PBNet,
    img: &ImageBuf,
    truth: Option<&BinaryMask>,
    norm: &Normalization,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if !net.config().modules.bgm {
        return Err(Error::Config(
            "this model has no boundary-guided modules, so there are no attention maps; \
             use a checkpoint trained with model.modules.bgm = true"
                .into(),
        ));
    }
    crate::backbone::check_input_size(img.height, img.width)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let x = normalize(img, norm)?.to_tensor(net.device())?.to_dtype(net.dtype())?;
    let (out, _) = net.forward_full(&Ctx::eval(), &x, true)?;
    let aux = out.aux.expect("aux requested");
    let mut written = Vec::new();
    for a in &aux {
        let l = a.level;
        let bgm = net.bgm_level(l).expect("bgm present for every aux level");
        let k = bgm.kernels();
        let (ms, h, w) = tensor_map(&a.m_s)?;
        let path = out_dir.join(format!("level{l}_ms.png"));
        save_gray(&to_gray(&ms, h, w)?, &path)?;
        written.push(path);
        let (p, h, w) = tensor_map(&a.p)?;
        let path = out_dir.join(format!("level{l}_p.png"));
        save_gray(&to_gray(&p, h, w)?, &path)?;
        written.push(path);
        let band = (dilate(&a.p, k.kd)? - erode(&a.p, k.ke)?)?;
        let (b, h, w) = tensor_map(&band)?;
        let path = out_dir.join(format!("level{l}_boundary.png"));
        save_gray(&to_gray(&b, h, w)?, &path)?;
        written.push(path);
        let mc = ops::to_f64_vec(&a.m_c)?;
        let mut csv = String::from("channel,weight\n");
        for (c, v) in mc.iter().enumerate() {
            csv.push_str(&format!("{c},{v}\n"));
        }
        let path = out_dir.join(format!("level{l}_mc.csv"));
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let (p0, h, w) = tensor_map(&out.p0)?;
    let path = out_dir.join("p0.png");
    save_gray(&to_gray(&p0, h, w)?, &path)?;
    written.push(path);
    if let Some(t) = truth {
        let t = resize_mask(t, img.height, img.width);
        let k = net.bgm_level(1).expect("level 1 present").kernels();
        let g = Tensor::from_vec(t.to_f32(), (1, 1, img.height, img.width), net.device())?;
        let tb = (dilate(&g, k.kd)? - erode(&g, k.ke)?)?;
        let (v, h, w) = tensor_map(&tb)?;
        let path = out_dir.join("tb.png");
        save_gray(&to_gray(&v, h, w)?, &path)?;
        written.push(path);
    }
    Ok(written)
}
