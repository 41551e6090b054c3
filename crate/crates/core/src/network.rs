//! Full encoder–decoder assembly.
//!
//! ```text
//! image ─► backbone ─► E0..E4 ─► 1×1 skips S0..S4
//! D4 = Conv1×1(E4),  S^M_4 = S4
//! for l = 3, 2, 1:
//!     S^M_l = MGPM(S_l, S^M_{l+1})           (or S_l without MGPM)
//!     S^B_l, P_l = BGM(S^M_l, D_{l+1})        (or S^M_l ‖ ↑D_{l+1} without BGM)
//!     D_l = decoder(S^B_l)
//! D0 = decoder(↑D1 ‖ S0)
//! P0 = ↑ σ(Conv1×1(D0))
//! ```

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    self, Backbone, BackboneConfig, FeaturePyramid, SkipProjection, LEVELS, SKIP_CHANNELS,
};
use crate::bgm::{Bgm, BgmConfig};
use crate::error::{Error, Result};
use crate::losses::Supervision;
use crate::mgpm::{Mgpm, MgpmConfig};
use crate::nn::{Conv2d, ConvBnAct, ConvSpec, Ctx, ParamStore};
use crate::ops;

/// Which of the contributed components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleFlags {
    pub mgpm: bool,
    pub bgm: bool,
    /// Boundary-enhanced deep supervision.
    pub bs: bool,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl ModuleFlags {
    pub const BASELINE: Self = Self { mgpm: false, bgm: false, bs: false };
    pub const FULL: Self = Self { mgpm: true, bgm: true, bs: true };

    pub fn validate(&self) -> Result<()> {
        if self.bs && !self.bgm {
            return Err(Error::Config(
                "boundary-enhanced supervision (bs) requires the boundary-guided module (bgm)"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn supervision(&self) -> Supervision {
        Supervision {
            deep: self.bgm,
            boundary: self.bs,
        }
    }

    /// Short row label, e.g. `MGPM+BGM+BS`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.mgpm {
            parts.push("MGPM");
        }
        if self.bgm {
            parts.push("BGM");
        }
        if self.bs {
            parts.push("BS");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

impl std::str::FromStr for ModuleFlags {
    type Err = Error;

    /// `baseline`, or `+`-joined module names such as `mgpm+bgm+bs`.
    fn from_str(s: &str) -> Result<Self> {
        let mut f = Self::BASELINE;
        if s.trim().eq_ignore_ascii_case("baseline") {
            return Ok(f);
        }
        for part in s.split('+') {
            match part.trim().to_ascii_lowercase().as_str() {
                "mgpm" => f.mgpm = true,
                "bgm" => f.bgm = true,
                "bs" => f.bs = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown module '{other}' in '{s}' (expected mgpm, bgm, bs or baseline)"
                    )))
                }
            }
        }
        f.validate()?;
        Ok(f)
    }
}

/// Architecture settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mgpm: MgpmConfig,
    pub bgm: BgmConfig,
    pub modules: ModuleFlags,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.mgpm.validate()?;
        self.modules.validate()
    }
}

/// Intermediate maps kept for visualization.
#[derive(Debug, Clone)]
pub struct LevelAux {
    pub level: usize,
    pub p: Tensor,
    pub m_s: Tensor,
    pub m_c: Tensor,
}

#[derive(Debug, Clone)]
pub struct PBNetOutputs {
    /// Final probability map at input resolution, `(B, 1, H, W)`.
    pub p0: Tensor,
    /// `(level, P_level)` from the boundary-guided modules, deepest first.
    pub deep: Vec<(usize, Tensor)>,
    pub aux: Option<Vec<LevelAux>>,
}

impl PBNetOutputs {
    pub fn deep_level(&self, level: usize) -> Option<&Tensor> {
        self.deep.iter().find(|(l, _)| *l == level).map(|(_, t)| t)
    }
}

/// Decoder maps `D_0..D_4`, index = level.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub d: Vec<Tensor>,
}

/// Two 3×3 conv + BN + ReLU, 128 → 64 channels.
pub struct DecoderBlock {
    c1: ConvBnAct,
    c2: ConvBnAct,
}

impl DecoderBlock {
    pub const IN_CHANNELS: usize = 2 * SKIP_CHANNELS;

    pub fn new(scope: crate::nn::Scope<'_>) -> Result<Self> {
        Ok(Self {
            c1: ConvBnAct::relu(Self::IN_CHANNELS, SKIP_CHANNELS, 3, scope.pp("c1"))?,
            c2: ConvBnAct::relu(SKIP_CHANNELS, SKIP_CHANNELS, 3, scope.pp("c2"))?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != Self::IN_CHANNELS {
            return Err(Error::Shape(format!(
                "decoder block expects {} channels, got {c}",
                Self::IN_CHANNELS
            )));
        }
        let y = self.c1.forward(ctx, x)?;
        self.c2.forward(ctx, &y)
    }

    pub fn first_conv_pre_norm(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self.c1.pre_norm(ctx, x)
    }
}

pub struct PBNet {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    skips: SkipProjection,
    top: ConvBnAct,
    /// Index `l - 1` for levels 1..=3.
    mgpm: Vec<Mgpm>,
    bgm: Vec<Bgm>,
    /// Index = level 0..=3.
    decoders: Vec<DecoderBlock>,
    head: Conv2d,
}

fn at_level(level: usize, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("level {level}: {m}")),
        Error::Tensor(t) => Error::Shape(format!("level {level}: {t}")),
        other => other,
    }
}

impl PBNet {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType, device: Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, dtype, device);
        let root = store.root();
        let backbone = Backbone::new(cfg.backbone.variant, root.pp("backbone"))?;
        let raw = backbone.channels();
        let skips = SkipProjection::new(raw, root.pp("skip"))?;
        let top = ConvBnAct::relu(raw[LEVELS - 1], SKIP_CHANNELS, 1, root.pp("top"))?;
        let mut mgpm = Vec::new();
        let mut bgm = Vec::new();
        for l in 1..=3 {
            if cfg.modules.mgpm {
                let m_cfg = MgpmConfig {
                    in_channels: SKIP_CHANNELS,
                    out_channels: SKIP_CHANNELS,
                    ..cfg.mgpm
                };
                mgpm.push(Mgpm::new(m_cfg, root.pp(format!("mgpm{l}")))?);
            }
            if cfg.modules.bgm {
                let k = cfg.bgm.kernels.level(l)?;
                bgm.push(Bgm::new(SKIP_CHANNELS, k, &cfg.bgm, root.pp(format!("bgm{l}")))?);
            }
        }
        let decoders = (0..=3)
            .map(|l| DecoderBlock::new(root.pp(format!("decoder{l}"))))
            .collect::<Result<_>>()?;
        let head = Conv2d::new(ConvSpec::new(SKIP_CHANNELS, 1, 1), root.pp("head"))?;
        let net = Self {
            cfg,
            store,
            backbone,
            skips,
            top,
            mgpm,
            bgm,
            decoders,
            head,
        };
        if net.cfg.backbone.pretrained {
            let path = net.cfg.backbone.weights.clone().expect("validated");
            let n = backbone::load_pretrained(&net.store, &path)?;
            log::info!("loaded {n} backbone tensors from {}", path.display());
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn extract_pyramid(&self, ctx: &Ctx, image: &Tensor) -> Result<FeaturePyramid> {
        self.backbone.extract_pyramid(ctx, image)
    }

    pub fn forward(&self, ctx: &Ctx, image: &Tensor) -> Result<PBNetOutputs> {
        self.forward_full(ctx, image, false).map(|(o, _)| o)
    }

    /// Forward pass returning outputs and decoder maps; `aux` keeps the
    /// attention maps of every boundary-guided level.
    pub fn forward_full(
        &self,
        ctx: &Ctx,
        image: &Tensor,
        aux: bool,
    ) -> Result<(PBNetOutputs, DecoderState)> {
        let (_, _, h, w) = image.dims4()?;
        let pyramid = self.backbone.extract_pyramid(ctx, image)?;
        let skips = self.skips.to_skip_features(ctx, &pyramid)?;
        let mut d = vec![None; LEVELS];
        let mut d_above = self
            .top
            .forward(ctx, &pyramid.levels[LEVELS - 1])
            .map_err(|e| at_level(4, e))?;
        d[4] = Some(d_above.clone());
        let mut s_above = skips.levels[LEVELS - 1].clone();
        let mut deep = Vec::new();
        let mut aux_maps = aux.then(Vec::new);
        for l in (1..=3).rev() {
            let step = || -> Result<(Tensor, Tensor, Option<crate::bgm::BgmOutput>)> {
                let s_m = match self.mgpm.get(l - 1) {
                    Some(m) => m.forward(ctx, &skips.levels[l], &s_above)?,
                    None => skips.levels[l].clone(),
                };
                let (s_b, out) = match self.bgm.get(l - 1) {
                    Some(b) => {
                        let out = b.forward(ctx, &s_m, &d_above)?;
                        (out.features.clone(), Some(out))
                    }
                    None => (Tensor::cat(&[s_m.clone(), ops::upsample2(&d_above)?], 1)?, None),
                };
                let d_l = self.decoders[l].forward(ctx, &s_b)?;
                Ok((s_m, d_l, out))
            };
            let (s_m, d_l, out) = step().map_err(|e| at_level(l, e))?;
            if let Some(out) = out {
                deep.push((l, out.p.clone()));
                if let Some(a) = aux_maps.as_mut() {
                    a.push(LevelAux {
                        level: l,
                        p: out.p,
                        m_s: out.m_s,
                        m_c: out.m_c,
                    });
                }
            }
            s_above = s_m;
            d_above = d_l.clone();
            d[l] = Some(d_l);
        }
        let x0 = Tensor::cat(&[ops::upsample2(&d_above)?, skips.levels[0].clone()], 1)?;
        let d0 = self.decoders[0].forward(ctx, &x0).map_err(|e| at_level(0, e))?;
        let p = ops::probability(&self.head.forward(ctx, &d0)?)?;
        let p0 = ops::resize_bilinear(&p, h, w)?;
        d[0] = Some(d0);
        let state = DecoderState {
            d: d.into_iter().map(|t| t.expect("every level decoded")).collect(),
        };
        Ok((
            PBNetOutputs {
                p0,
                deep,
                aux: aux_maps,
            },
            state,
        ))
    }

    /// Number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.store.trainable_count()
    }

    /// Multiply-accumulates of convolutions and linear layers for one
    /// `3×h×w` image.
    pub fn count_macs(&self, h: usize, w: usize) -> Result<u64> {
        let ctx = Ctx::counting();
        let x = Tensor::zeros((1, 3, h, w), self.dtype(), self.device())?;
        self.forward(&ctx, &x)?;
        Ok(ctx.macs())
    }

    pub fn decoder(&self, level: usize) -> &DecoderBlock {
        &self.decoders[level]
    }

    pub fn bgm_level(&self, level: usize) -> Option<&Bgm> {
        self.bgm.get(level.checked_sub(1)?)
    }

    pub fn mgpm_level(&self, level: usize) -> Option<&Mgpm> {
        self.mgpm.get(level.checked_sub(1)?)
    }
}

/// Convenience: model on CPU in `f32`.
pub fn build_cpu(cfg: ModelConfig, seed: u64) -> Result<PBNet> {
    PBNet::new(cfg, seed, DType::F32, Device::Cpu)
}
