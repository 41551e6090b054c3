//! Training objective: segmentation loss, boundary-enhanced loss and the
//! deeply supervised total.
//!
//! All losses take probability maps of shape `(B, 1, H, W)` and binary
//! ground truth of the same shape and return scalar tensors.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{self, MorphKernel};
use crate::network::PBNetOutputs;
use crate::ops;

/// Loss weight per decoder level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelWeights {
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl Default for LevelWeights {
    fn default() -> Self {
        Self {
            l0: 1.0,
            l1: 0.8,
            l2: 0.6,
            l3: 0.4,
        }
    }
}

impl LevelWeights {
    pub fn get(&self, level: usize) -> f64 {
        match level {
            0 => self.l0,
            1 => self.l1,
            2 => self.l2,
            3 => self.l3,
            _ => 0.0,
        }
    }
}

/// Boundary pooling kernel per supervised level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelKernels {
    pub l1: MorphKernel,
    pub l2: MorphKernel,
    pub l3: MorphKernel,
}

impl Default for LevelKernels {
    fn default() -> Self {
        let k = MorphKernel::new(5).expect("odd");
        Self { l1: k, l2: k, l3: k }
    }
}

impl LevelKernels {
    pub fn get(&self, level: usize) -> Result<MorphKernel> {
        match level {
            1 => Ok(self.l1),
            2 => Ok(self.l2),
            3 => Ok(self.l3),
            _ => Err(Error::Config(format!("no boundary kernel for level {level}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambdas: LevelWeights,
    pub alpha1: f64,
    pub alpha2: f64,
    pub k: LevelKernels,
    pub epsilon: f64,
    /// Boundary-emphasis pixel weights in the IoU and BCE terms.
    pub weighted_iou: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambdas: LevelWeights::default(),
            alpha1: 1.0,
            alpha2: 5.0,
            k: LevelKernels::default(),
            epsilon: 1e-6,
            weighted_iou: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "loss.epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        let l = &self.lambdas;
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("lambdas.l0", l.l0),
            ("lambdas.l1", l.l1),
            ("lambdas.l2", l.l2),
            ("lambdas.l3", l.l3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which supervision terms are active; follows the model's ablation flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Supervision {
    /// Deep maps `P_1..P_3` are supervised.
    pub deep: bool,
    /// Deep terms include the boundary-enhanced MSE.
    pub boundary: bool,
}

impl Supervision {
    pub const FULL: Supervision = Supervision {
        deep: true,
        boundary: true,
    };
    pub const FINAL_ONLY: Supervision = Supervision {
        deep: false,
        boundary: false,
    };
}

fn check_pair(p: &Tensor, g: &Tensor) -> Result<()> {
    if p.dims() != g.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and label {:?} differ in shape",
            p.dims(),
            g.dims()
        )));
    }
    if p.rank() != 4 {
        return Err(Error::Shape(format!(
            "losses take (B, 1, H, W) maps, got {:?}",
            p.dims()
        )));
    }
    let s = ops::sum_f64(p)?;
    if !s.is_finite() {
        return Err(Error::Numeric("prediction contains non-finite values".into()));
    }
    Ok(())
}

/// Seg-loss components, kept separate for logging.
#[derive(Debug, Clone)]
pub struct SegTerms {
    pub iou: Tensor,
    pub bce: Tensor,
}

impl SegTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.iou + &self.bce)?)
    }
}

/// Pixel weights `1 + 5·|box_mean_31(g) − g|` emphasising label boundaries.
fn boundary_weights(g: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = g.dims4()?;
    let vals = ops::to_f64_vec(g)?;
    let k = 31usize;
    let r = k / 2;
    let mut out = Vec::with_capacity(vals.len());
    for plane in vals.chunks(h * w) {
        // integral image with a zero border row/column
        let mut integral = vec![0f64; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                integral[(y + 1) * (w + 1) + x + 1] = plane[y * w + x]
                    + integral[y * (w + 1) + x + 1]
                    + integral[(y + 1) * (w + 1) + x]
                    - integral[y * (w + 1) + x];
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1]
                    - integral[y1 * (w + 1) + x0]
                    + integral[y0 * (w + 1) + x0];
                let mean = s / ((y1 - y0) * (x1 - x0)) as f64;
                out.push(1.0 + 5.0 * (mean - plane[y * w + x]).abs());
            }
        }
    }
    Ok(Tensor::from_vec(out, (b, c, h, w), g.device())?.to_dtype(g.dtype())?)
}

/// Soft-IoU and mean binary cross-entropy.
///
/// IoU is `1 − (Σp·g + ε) / (Σ(p + g − p·g) + ε)` per image, averaged over
/// the batch; BCE clamps `p` to `[ε, 1 − ε]`. With `weighted` set, both sums
/// use boundary-emphasis pixel weights.
pub fn seg_terms(p: &Tensor, g: &Tensor, eps: f64, weighted: bool) -> Result<SegTerms> {
    check_pair(p, g)?;
    let weights = if weighted { Some(boundary_weights(g)?) } else { None };
    let pg = (p * g)?;
    let union = ((p + g)? - &pg)?;
    let (inter, union) = match &weights {
        Some(wt) => ((&pg * wt)?, (&union * wt)?),
        None => (pg, union),
    };
    let inter = inter.flatten_from(1)?.sum(1)?;
    let union = union.flatten_from(1)?.sum(1)?;
    let ratio = ((inter + eps)? / (union + eps)?)?;
    let iou = ratio.affine(-1.0, 1.0)?.mean_all()?;

    let pc = p.clamp(eps, 1.0 - eps)?;
    let one_minus_g = g.affine(-1.0, 1.0)?;
    let bce = ((g * pc.log()?)? + (one_minus_g * pc.affine(-1.0, 1.0)?.log()?)?)?.neg()?;
    let bce = match &weights {
        Some(wt) => {
            let num = (&bce * wt)?.flatten_from(1)?.sum(1)?;
            let den = wt.flatten_from(1)?.sum(1)?;
            (num / den)?.mean_all()?
        }
        None => bce.mean_all()?,
    };
    Ok(SegTerms { iou, bce })
}

/// Segmentation loss `IoU + BCE`.
pub fn seg_loss(p: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    seg_terms(p, g, cfg.epsilon, cfg.weighted_iou)?.total()
}

/// MSE between the boundary bands of prediction and label.
pub fn boundary_loss(p: &Tensor, g: &Tensor, k: MorphKernel) -> Result<Tensor> {
    check_pair(p, g)?;
    let bp = morphology::boundary_band(p, k)?;
    let bg = morphology::boundary_band(g, k)?;
    Ok((bp - bg)?.sqr()?.mean_all()?)
}

/// Per-level boundary-enhanced segmentation loss
/// `α1·seg(p, g) + α2·boundary(p, g)`; `p` must already be at label size.
pub fn beseg_loss(p_up: &Tensor, g: &Tensor, cfg: &LossConfig, k: MorphKernel) -> Result<Tensor> {
    let seg = seg_loss(p_up, g, cfg)?;
    let bnd = boundary_loss(p_up, g, k)?;
    Ok(((seg * cfg.alpha1)? + (bnd * cfg.alpha2)?)?)
}

/// Total loss and a per-term breakdown for logging.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub total: Tensor,
    pub per_term: BTreeMap<String, f64>,
}

impl LossBundle {
    pub fn total_value(&self) -> Result<f64> {
        Ok(ops::sum_f64(&self.total)?)
    }
}

/// Weighted combination of already-evaluated per-level terms, summed from
/// the deepest level to the final output. `deep[i]` is level `3 - i`.
pub fn combine_terms(cfg: &LossConfig, seg0: f64, deep: [Option<f64>; 3]) -> f64 {
    let mut total = 0.0;
    for (i, term) in deep.iter().enumerate() {
        if let Some(v) = term {
            total += cfg.lambdas.get(3 - i) * v;
        }
    }
    total + cfg.lambdas.l0 * seg0
}

/// Deeply supervised objective over a network's outputs.
///
/// Each deep map is bilinearly resized to the label size. With
/// `sup.boundary` each deep term is the boundary-enhanced loss; otherwise it
/// is `α1·seg` alone. The final map contributes `λ0·seg(P0, G)`.
pub fn total_loss(
    outputs: &PBNetOutputs,
    g: &Tensor,
    cfg: &LossConfig,
    sup: Supervision,
) -> Result<LossBundle> {
    let (_, _, h, w) = g.dims4()?;
    let mut per_term = BTreeMap::new();
    let mut total: Option<Tensor> = None;
    if sup.deep {
        for level in [3usize, 2, 1] {
            let p = outputs
                .deep_level(level)
                .ok_or_else(|| Error::Config(format!("deep output for level {level} is missing")))?;
            let up = ops::resize_bilinear(p, h, w)?;
            let terms = seg_terms(&up, g, cfg.epsilon, cfg.weighted_iou)?;
            let seg = terms.total()?;
            per_term.insert(format!("iou_{level}"), ops::sum_f64(&terms.iou)?);
            per_term.insert(format!("bce_{level}"), ops::sum_f64(&terms.bce)?);
            let mut term = (seg * cfg.alpha1)?;
            if sup.boundary {
                let bnd = boundary_loss(&up, g, cfg.k.get(level)?)?;
                per_term.insert(format!("boundary_{level}"), ops::sum_f64(&bnd)?);
                term = (term + (bnd * cfg.alpha2)?)?;
            }
            per_term.insert(format!("beseg_{level}"), ops::sum_f64(&term)?);
            let weighted = (term * cfg.lambdas.get(level))?;
            total = Some(match total {
                None => weighted,
                Some(t) => (t + weighted)?,
            });
        }
    } else if sup.boundary {
        return Err(Error::Config(
            "boundary-enhanced supervision needs the deep maps of the boundary-guided modules"
                .into(),
        ));
    }
    let final_terms = seg_terms(&outputs.p0, g, cfg.epsilon, cfg.weighted_iou)?;
    let seg0 = final_terms.total()?;
    per_term.insert("iou_0".into(), ops::sum_f64(&final_terms.iou)?);
    per_term.insert("bce_0".into(), ops::sum_f64(&final_terms.bce)?);
    per_term.insert("seg_0".into(), ops::sum_f64(&seg0)?);
    let weighted = (seg0 * cfg.lambdas.l0)?;
    let total = match total {
        None => weighted,
        Some(t) => (t + weighted)?,
    };
    let value = ops::sum_f64(&total)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("total loss is {value}")));
    }
    per_term.insert("total".into(), value);
    Ok(LossBundle { total, per_term })
}
