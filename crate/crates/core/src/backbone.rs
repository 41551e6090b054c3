//! Encoder backbones producing a five-level feature pyramid.
//!
//! Level `l` has stride `2^(l+1)` relative to the input. Two families are
//! provided: EfficientNet b0..b5 (MBConv blocks with squeeze-excitation and
//! SiLU) and a five-stage `tiny-test` encoder sized for CPU tests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, ConvBnAct, ConvSpec, Ctx, ParamStore, Scope};
use crate::ops;

/// Number of pyramid levels.
pub const LEVELS: usize = 5;
/// Channel width of every skip connection after projection.
pub const SKIP_CHANNELS: usize = 64;
/// Input sides must be multiples of the deepest stride.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneVariant {
    #[serde(rename = "efficientnet-b0")]
    B0,
    #[serde(rename = "efficientnet-b1")]
    B1,
    #[serde(rename = "efficientnet-b2")]
    B2,
    #[serde(rename = "efficientnet-b3")]
    B3,
    #[serde(rename = "efficientnet-b4")]
    B4,
    #[serde(rename = "efficientnet-b5")]
    B5,
    #[serde(rename = "tiny-test")]
    TinyTest,
}

impl BackboneVariant {
    pub const ALL: [BackboneVariant; 7] = [
        Self::B0,
        Self::B1,
        Self::B2,
        Self::B3,
        Self::B4,
        Self::B5,
        Self::TinyTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::B0 => "efficientnet-b0",
            Self::B1 => "efficientnet-b1",
            Self::B2 => "efficientnet-b2",
            Self::B3 => "efficientnet-b3",
            Self::B4 => "efficientnet-b4",
            Self::B5 => "efficientnet-b5",
            Self::TinyTest => "tiny-test",
        }
    }

    /// (width, depth) multipliers of the EfficientNet family.
    fn scaling(self) -> Option<(f64, f64)> {
        match self {
            Self::B0 => Some((1.0, 1.0)),
            Self::B1 => Some((1.0, 1.1)),
            Self::B2 => Some((1.1, 1.2)),
            Self::B3 => Some((1.2, 1.4)),
            Self::B4 => Some((1.4, 1.8)),
            Self::B5 => Some((1.6, 2.2)),
            Self::TinyTest => None,
        }
    }
}

impl fmt::Display for BackboneVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown backbone `{s}`, expected one of {names:?}"))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Initialize the encoder from `weights` instead of randomly.
    pub pretrained: bool,
    /// Safetensors file whose `backbone.*` tensors match this encoder.
    pub weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::B0,
            pretrained: false,
            weights: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrained && self.weights.is_none() {
            return Err(Error::Config(
                "backbone.pretrained = true requires backbone.weights to name a safetensors file"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Encoder outputs `E_0..E_4`, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|t| t.dims()[1]).collect()
    }

    pub fn spatial(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|t| (t.dims()[2], t.dims()[3])).collect()
    }
}

/// Pyramid levels projected to [`SKIP_CHANNELS`] channels.
#[derive(Debug, Clone)]
pub struct SkipFeatures {
    pub levels: Vec<Tensor>,
}

/// Check that an `(H, W)` input can pass through the five-level encoder.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        let up = |n: usize| n.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE;
        return Err(Error::Shape(format!(
            "input {h}x{w} is not divisible by {INPUT_MULTIPLE}; resize or pad it, \
             e.g. to {}x{}",
            up(h),
            up(w)
        )));
    }
    Ok(())
}

pub enum Backbone {
    Efficient(EfficientNet),
    Tiny(TinyBackbone),
}

impl Backbone {
    pub fn new(variant: BackboneVariant, scope: Scope<'_>) -> Result<Self> {
        Ok(match variant.scaling() {
            Some((width, depth)) => Self::Efficient(EfficientNet::new(width, depth, scope)?),
            None => Self::Tiny(TinyBackbone::new(scope)?),
        })
    }

    /// Raw channel counts of `E_0..E_4`.
    pub fn channels(&self) -> [usize; LEVELS] {
        match self {
            Self::Efficient(e) => e.channels,
            Self::Tiny(_) => [TinyBackbone::WIDTH; LEVELS],
        }
    }

    pub fn extract_pyramid(&self, ctx: &Ctx, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected a 3-channel image, got {c} channels")));
        }
        check_input_size(h, w)?;
        let levels = match self {
            Self::Efficient(e) => e.forward(ctx, image)?,
            Self::Tiny(t) => t.forward(ctx, image)?,
        };
        Ok(FeaturePyramid { levels })
    }
}

/// Initialize `backbone.*` parameters from a safetensors file.
pub fn load_pretrained(store: &ParamStore, path: &std::path::Path) -> Result<usize> {
    let tensors = candle_core::safetensors::load(path, store.device())
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let tensors: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    store.load_from(&tensors, "backbone.")
}

/// Five stages, each a stride-2 3×3 conv followed by a stride-1 3×3 conv.
pub struct TinyBackbone {
    stages: Vec<[ConvBnAct; 2]>,
}

impl TinyBackbone {
    pub const WIDTH: usize = 8;

    fn new(scope: Scope<'_>) -> Result<Self> {
        let mut stages = Vec::with_capacity(LEVELS);
        let mut in_c = 3;
        for l in 0..LEVELS {
            let s = scope.pp(format!("stage{l}"));
            let down = ConvBnAct::new(
                ConvSpec::new(in_c, Self::WIDTH, 3).stride(2).no_bias(),
                Activation::Relu,
                s.pp("down"),
            )?;
            let refine = ConvBnAct::new(
                ConvSpec::new(Self::WIDTH, Self::WIDTH, 3).no_bias(),
                Activation::Relu,
                s.pp("refine"),
            )?;
            stages.push([down, refine]);
            in_c = Self::WIDTH;
        }
        Ok(Self { stages })
    }

    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = x.clone();
        let mut out = Vec::with_capacity(LEVELS);
        for [down, refine] in &self.stages {
            x = refine.forward(ctx, &down.forward(ctx, &x)?)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// (expand ratio, kernel, stride, in, out, repeats) of EfficientNet-b0.
const B0_STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 32, 16, 1),
    (6, 3, 2, 16, 24, 2),
    (6, 5, 2, 24, 40, 2),
    (6, 3, 2, 40, 80, 3),
    (6, 5, 1, 80, 112, 3),
    (6, 5, 2, 112, 192, 4),
    (6, 3, 1, 192, 320, 1),
];

/// Stage index whose output is each pyramid level.
const PYRAMID_TAPS: [usize; LEVELS] = [0, 1, 2, 4, 6];

fn round_filters(c: usize, width: f64) -> usize {
    let scaled = c as f64 * width;
    let divisor = 8.0;
    let mut rounded = ((scaled + divisor / 2.0) / divisor).floor() * divisor;
    rounded = rounded.max(divisor);
    if rounded < 0.9 * scaled {
        rounded += divisor;
    }
    rounded as usize
}

fn round_repeats(r: usize, depth: f64) -> usize {
    (r as f64 * depth).ceil() as usize
}

struct SqueezeExcite {
    reduce: Conv2d,
    expand: Conv2d,
}

impl SqueezeExcite {
    fn new(channels: usize, squeezed: usize, scope: Scope<'_>) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(ConvSpec::new(channels, squeezed, 1), scope.pp("reduce"))?,
            expand: Conv2d::new(ConvSpec::new(squeezed, channels, 1), scope.pp("expand"))?,
        })
    }

    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let s = ops::global_avg_pool(x)?;
        let s = self.reduce.forward(ctx, &s)?.silu()?;
        let s = candle_nn::ops::sigmoid(&self.expand.forward(ctx, &s)?)?;
        Ok(x.broadcast_mul(&s)?)
    }
}

struct MbConv {
    expand: Option<ConvBnAct>,
    depthwise: ConvBnAct,
    se: SqueezeExcite,
    project: ConvBnAct,
    residual: bool,
}

impl MbConv {
    fn new(
        expand_ratio: usize,
        kernel: usize,
        stride: usize,
        in_c: usize,
        out_c: usize,
        scope: Scope<'_>,
    ) -> Result<Self> {
        let mid = in_c * expand_ratio;
        let expand = if expand_ratio != 1 {
            Some(ConvBnAct::new(
                ConvSpec::new(in_c, mid, 1).no_bias(),
                Activation::Silu,
                scope.pp("expand"),
            )?)
        } else {
            None
        };
        let depthwise = ConvBnAct::new(
            ConvSpec::new(mid, mid, kernel).stride(stride).no_bias().depthwise(),
            Activation::Silu,
            scope.pp("depthwise"),
        )?;
        let squeezed = ((in_c as f64) * 0.25).max(1.0) as usize;
        let se = SqueezeExcite::new(mid, squeezed, scope.pp("se"))?;
        let project = ConvBnAct::new(
            ConvSpec::new(mid, out_c, 1).no_bias(),
            Activation::None,
            scope.pp("project"),
        )?;
        Ok(Self {
            expand,
            depthwise,
            se,
            project,
            residual: stride == 1 && in_c == out_c,
        })
    }

    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let mut y = match &self.expand {
            Some(e) => e.forward(ctx, x)?,
            None => x.clone(),
        };
        y = self.depthwise.forward(ctx, &y)?;
        y = self.se.forward(ctx, &y)?;
        y = self.project.forward(ctx, &y)?;
        if self.residual {
            y = (y + x)?;
        }
        Ok(y)
    }
}

pub struct EfficientNet {
    stem: ConvBnAct,
    stages: Vec<Vec<MbConv>>,
    channels: [usize; LEVELS],
}

impl EfficientNet {
    fn new(width: f64, depth: f64, scope: Scope<'_>) -> Result<Self> {
        let stem_c = round_filters(32, width);
        let stem = ConvBnAct::new(
            ConvSpec::new(3, stem_c, 3).stride(2).no_bias(),
            Activation::Silu,
            scope.pp("stem"),
        )?;
        let mut stages = Vec::with_capacity(B0_STAGES.len());
        let mut stage_out = Vec::with_capacity(B0_STAGES.len());
        for (si, &(expand, kernel, stride, in_c, out_c, repeats)) in B0_STAGES.iter().enumerate() {
            let in_c = round_filters(in_c, width);
            let out_c = round_filters(out_c, width);
            let mut blocks = Vec::new();
            for bi in 0..round_repeats(repeats, depth) {
                let (s, i) = if bi == 0 { (stride, in_c) } else { (1, out_c) };
                blocks.push(MbConv::new(
                    expand,
                    kernel,
                    s,
                    i,
                    out_c,
                    scope.pp(format!("blocks.{si}.{bi}")),
                )?);
            }
            stages.push(blocks);
            stage_out.push(out_c);
        }
        let channels = PYRAMID_TAPS.map(|s| stage_out[s]);
        Ok(Self {
            stem,
            stages,
            channels,
        })
    }

    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = self.stem.forward(ctx, x)?;
        let mut out = Vec::with_capacity(LEVELS);
        for (si, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(ctx, &x)?;
            }
            if PYRAMID_TAPS.contains(&si) {
                out.push(x.clone());
            }
        }
        Ok(out)
    }
}

/// 1×1 conv + BN + ReLU per level, mapping raw channels to 64.
pub struct SkipProjection {
    convs: Vec<ConvBnAct>,
}

impl SkipProjection {
    pub fn new(channels: [usize; LEVELS], scope: Scope<'_>) -> Result<Self> {
        let convs = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| ConvBnAct::relu(c, SKIP_CHANNELS, 1, scope.pp(format!("{l}"))))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    pub fn to_skip_features(&self, ctx: &Ctx, p: &FeaturePyramid) -> Result<SkipFeatures> {
        if p.levels.len() != LEVELS {
            return Err(Error::Shape(format!(
                "pyramid must have {LEVELS} levels, got {}",
                p.levels.len()
            )));
        }
        let levels = self
            .convs
            .iter()
            .zip(&p.levels)
            .map(|(c, e)| c.forward(ctx, e))
            .collect::<Result<_>>()?;
        Ok(SkipFeatures { levels })
    }

    pub fn level(&self, l: usize) -> &ConvBnAct {
        &self.convs[l]
    }
}
