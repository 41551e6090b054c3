//! Multilevel global perception.
//!
//! Same-level and next-level features are each reduced to a few channels,
//! cut into an `n×n` grid of cells stacked along the channel axis, fused by a
//! depth-wise separable 3×3 convolution (so every pixel mixes with the
//! co-located pixels of all other cells and of the other stream), folded back
//! to full resolution and expanded to the output width.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBnAct, ConvSpec, Ctx, Activation, Scope};
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MgpmConfig {
    /// Cells per axis.
    pub n: usize,
    /// Channels of each stream after the 1×1 reduction.
    pub reduced_channels: usize,
    #[serde(skip)]
    pub in_channels: usize,
    #[serde(skip)]
    pub out_channels: usize,
}

impl Default for MgpmConfig {
    fn default() -> Self {
        Self {
            n: 2,
            reduced_channels: 32,
            in_channels: 64,
            out_channels: 64,
        }
    }
}

impl MgpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("mgpm.n must be at least 1".into()));
        }
        if self.reduced_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("mgpm channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Rearrange `(B, C, H, W)` into `(B, n²·C, H/n, W/n)`.
///
/// Cell `(i, j)` (row-major, `t = i·n + j`) occupies channels
/// `t·C .. (t+1)·C`. The operation only moves elements.
pub fn cell_split(x: &Tensor, n: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if n == 0 || h % n != 0 || w % n != 0 {
        return Err(Error::Shape(format!(
            "cannot split a {h}x{w} map into {n}x{n} cells"
        )));
    }
    let (ch, cw) = (h / n, w / n);
    Ok(x.reshape(&[b, c, n, ch, n, cw][..])?
        .permute([0, 2, 4, 1, 3, 5])?
        .contiguous()?
        .reshape((b, n * n * c, ch, cw))?)
}

/// Inverse of [`cell_split`].
pub fn cell_merge(s: &Tensor, n: usize) -> Result<Tensor> {
    let (b, stacked, ch, cw) = s.dims4()?;
    if n == 0 || stacked % (n * n) != 0 {
        return Err(Error::Shape(format!(
            "{stacked} channels are not divisible into {n}x{n} cells"
        )));
    }
    let c = stacked / (n * n);
    Ok(s.reshape(&[b, n, n, c, ch, cw][..])?
        .permute([0, 3, 1, 4, 2, 5])?
        .contiguous()?
        .reshape((b, c, n * ch, n * cw))?)
}

pub struct Mgpm {
    cfg: MgpmConfig,
    reduce_low: ConvBnAct,
    reduce_high: ConvBnAct,
    fuse_depthwise: ConvBnAct,
    fuse_pointwise: ConvBnAct,
    expand: [ConvBnAct; 2],
}

impl Mgpm {
    pub fn new(cfg: MgpmConfig, scope: Scope<'_>) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.reduced_channels;
        let cells = cfg.n * cfg.n;
        let stacked = 2 * cells * r;
        Ok(Self {
            cfg,
            reduce_low: ConvBnAct::relu(cfg.in_channels, r, 1, scope.pp("reduce_low"))?,
            reduce_high: ConvBnAct::relu(cfg.in_channels, r, 1, scope.pp("reduce_high"))?,
            fuse_depthwise: ConvBnAct::new(
                ConvSpec::new(stacked, stacked, 3).depthwise(),
                Activation::Relu,
                scope.pp("fuse_dw"),
            )?,
            fuse_pointwise: ConvBnAct::relu(stacked, cells * r, 1, scope.pp("fuse_pw"))?,
            expand: [
                ConvBnAct::relu(r, cfg.out_channels, 3, scope.pp("expand1"))?,
                ConvBnAct::relu(cfg.out_channels, cfg.out_channels, 3, scope.pp("expand2"))?,
            ],
        })
    }

    pub fn config(&self) -> &MgpmConfig {
        &self.cfg
    }

    /// Fuse `e_l` (`C×H×W`) with the next level `s_above` (`C×H/2×W/2`).
    pub fn forward(&self, ctx: &Ctx, e_l: &Tensor, s_above: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = e_l.dims4()?;
        let (bb, _, ha, wa) = s_above.dims4()?;
        if bb != b || 2 * ha != h || 2 * wa != w {
            return Err(Error::Shape(format!(
                "next-level map {ha}x{wa} must be half of the {h}x{w} input"
            )));
        }
        let n = self.cfg.n;
        let low = self.reduce_low.forward(ctx, e_l)?;
        let high = self.reduce_high.forward(ctx, &ops::upsample2(s_above)?)?;
        let x = Tensor::cat(&[cell_split(&low, n)?, cell_split(&high, n)?], 1)?;
        let x = self.fuse_depthwise.forward(ctx, &x)?;
        let x = self.fuse_pointwise.forward(ctx, &x)?;
        let x = cell_merge(&x, n)?;
        let x = self.expand[0].forward(ctx, &x)?;
        self.expand[1].forward(ctx, &x)
    }
}
