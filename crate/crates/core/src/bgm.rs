//! Boundary-guided refinement.
//!
//! A coarse probability map predicted from the next decoder level is turned
//! into a ternary spatial confidence map by dilation and erosion. Together
//! with a channel gate it modulates a 3×3 conv of the MGPM features; the
//! gated features are added back to the input, convolved once more and
//! concatenated with the upsampled decoder stream.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{self, MorphKernel};
use crate::nn::{Conv2d, ConvBnAct, ConvSpec, Ctx, Linear, Scope};
use crate::ops;

/// Hidden width divisor of the channel-attention MLP.
pub const REDUCTION: usize = 16;

/// Dilation and erosion kernels for one decoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BgmLevelConfig {
    pub ke: MorphKernel,
    pub kd: MorphKernel,
}

impl BgmLevelConfig {
    pub fn new(ke: usize, kd: usize) -> Result<Self> {
        Ok(Self {
            ke: MorphKernel::new(ke)?,
            kd: MorphKernel::new(kd)?,
        })
    }
}

/// Per-level kernels, indexed by level 1..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BgmKernels {
    pub l1: BgmLevelConfig,
    pub l2: BgmLevelConfig,
    pub l3: BgmLevelConfig,
}

impl Default for BgmKernels {
    fn default() -> Self {
        let k = |n| MorphKernel::new(n).expect("odd");
        Self {
            l3: BgmLevelConfig { ke: k(3), kd: k(5) },
            l2: BgmLevelConfig { ke: k(5), kd: k(9) },
            l1: BgmLevelConfig { ke: k(7), kd: k(13) },
        }
    }
}

impl BgmKernels {
    pub fn level(&self, l: usize) -> Result<BgmLevelConfig> {
        match l {
            1 => Ok(self.l1),
            2 => Ok(self.l2),
            3 => Ok(self.l3),
            _ => Err(Error::Config(format!("no boundary-guided module at level {l}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BgmConfig {
    pub kernels: BgmKernels,
    /// Stop gradients from the spatial attention into the coarse head.
    pub detach_attention: bool,
    /// Batch norm + ReLU after both 3×3 convs.
    pub conv_bn_relu: bool,
}

impl Default for BgmConfig {
    fn default() -> Self {
        Self {
            kernels: BgmKernels::default(),
            detach_attention: false,
            conv_bn_relu: true,
        }
    }
}

/// Shared-MLP channel gate `σ(MLP(avg(S)) + MLP(max(S)))`.
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
    channels: usize,
}

impl ChannelAttention {
    pub fn new(channels: usize, scope: Scope<'_>) -> Result<Self> {
        let hidden = (channels / REDUCTION).max(1);
        Ok(Self {
            fc1: Linear::new(channels, hidden, scope.pp("fc1"))?,
            fc2: Linear::new(hidden, channels, scope.pp("fc2"))?,
            channels,
        })
    }

    fn mlp(&self, ctx: &Ctx, v: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(ctx, v)?.relu()?;
        self.fc2.forward(ctx, &h)
    }

    /// Returns the gate with shape `(B, C, 1, 1)`.
    pub fn forward(&self, ctx: &Ctx, s: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = s.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "channel attention expects {} channels, got {c}",
                self.channels
            )));
        }
        let avg = ops::global_avg_pool(s)?.reshape((b, c))?;
        let max = ops::global_max_pool(s)?.reshape((b, c))?;
        let logits = (self.mlp(ctx, &avg)? + self.mlp(ctx, &max)?)?;
        Ok(candle_nn::ops::sigmoid(&logits)?.reshape((b, c, 1, 1))?)
    }

    pub fn layers(&self) -> (&Linear, &Linear) {
        (&self.fc1, &self.fc2)
    }
}

/// `σ(Conv1×1(↑2 D))`: single-channel coarse probability map.
pub struct CoarseHead {
    conv: Conv2d,
}

impl CoarseHead {
    pub fn new(channels: usize, scope: Scope<'_>) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ConvSpec::new(channels, 1, 1), scope)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, d_above: &Tensor) -> Result<Tensor> {
        let up = ops::upsample2(d_above)?;
        ops::probability(&self.conv.forward(ctx, &up)?)
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }
}

/// Everything a BGM level produces.
#[derive(Debug, Clone)]
pub struct BgmOutput {
    /// `core ‖ ↑D`, `2C` channels.
    pub features: Tensor,
    /// Coarse probability map `P_l`.
    pub p: Tensor,
    /// Spatial attention `M_s`.
    pub m_s: Tensor,
    /// Channel attention `M_c`, `(B, C, 1, 1)`.
    pub m_c: Tensor,
}

pub struct Bgm {
    level: BgmLevelConfig,
    detach: bool,
    conv_in: ConvBnAct,
    conv_out: ConvBnAct,
    attention: ChannelAttention,
    head: CoarseHead,
    plain_convs: bool,
    channels: usize,
}

impl Bgm {
    pub fn new(channels: usize, level: BgmLevelConfig, cfg: &BgmConfig, scope: Scope<'_>) -> Result<Self> {
        Ok(Self {
            level,
            detach: cfg.detach_attention,
            conv_in: ConvBnAct::relu(channels, channels, 3, scope.pp("conv_in"))?,
            conv_out: ConvBnAct::relu(channels, channels, 3, scope.pp("conv_out"))?,
            attention: ChannelAttention::new(channels, scope.pp("channel_attention"))?,
            head: CoarseHead::new(channels, scope.pp("coarse_head"))?,
            plain_convs: !cfg.conv_bn_relu,
            channels,
        })
    }

    fn conv(&self, ctx: &Ctx, layer: &ConvBnAct, x: &Tensor) -> Result<Tensor> {
        if self.plain_convs {
            layer.pre_norm(ctx, x)
        } else {
            layer.forward(ctx, x)
        }
    }

    /// `P_l` from the next decoder level.
    pub fn coarse_probability(&self, ctx: &Ctx, d_above: &Tensor) -> Result<Tensor> {
        self.head.forward(ctx, d_above)
    }

    pub fn channel_attention(&self, ctx: &Ctx, s_m: &Tensor) -> Result<Tensor> {
        self.attention.forward(ctx, s_m)
    }

    /// `Conv3×3(M_s ⊙ (M_c ⊙ Conv3×3(S)) ⊕ S)` for given attention maps.
    pub fn gated_core(&self, ctx: &Ctx, s_m: &Tensor, m_s: &Tensor, m_c: &Tensor) -> Result<Tensor> {
        self.gated_core_paths(ctx, s_m, s_m, m_s, m_c)
    }

    /// [`Bgm::gated_core`] with separate inputs for the attention branch
    /// and the residual term, so each path can be probed on its own.
    pub fn gated_core_paths(
        &self,
        ctx: &Ctx,
        attended: &Tensor,
        residual: &Tensor,
        m_s: &Tensor,
        m_c: &Tensor,
    ) -> Result<Tensor> {
        let inner = self.conv(ctx, &self.conv_in, attended)?;
        let gated = inner.broadcast_mul(m_c)?.broadcast_mul(m_s)?;
        self.conv(ctx, &self.conv_out, &(gated + residual)?)
    }

    pub fn forward(&self, ctx: &Ctx, s_m: &Tensor, d_above: &Tensor) -> Result<BgmOutput> {
        let (b, c, h, w) = s_m.dims4()?;
        let (bb, cd, ha, wa) = d_above.dims4()?;
        if c != self.channels || cd != self.channels {
            return Err(Error::Shape(format!(
                "boundary-guided module expects {} channels, got {c} and {cd}",
                self.channels
            )));
        }
        if bb != b || 2 * ha != h || 2 * wa != w {
            return Err(Error::Shape(format!(
                "decoder map {ha}x{wa} must be half of the {h}x{w} MGPM output"
            )));
        }
        let p = self.coarse_probability(ctx, d_above)?;
        let p_att = if self.detach { p.detach() } else { p.clone() };
        let m_s = morphology::boundary_confidence(&p_att, self.level.ke, self.level.kd)?;
        let m_c = self.channel_attention(ctx, s_m)?;
        let core = self.gated_core(ctx, s_m, &m_s, &m_c)?;
        let features = Tensor::cat(&[core, ops::upsample2(d_above)?], 1)?;
        Ok(BgmOutput { features, p, m_s, m_c })
    }

    pub fn kernels(&self) -> BgmLevelConfig {
        self.level
    }

    pub fn head(&self) -> &CoarseHead {
        &self.head
    }

    pub fn attention(&self) -> &ChannelAttention {
        &self.attention
    }
}
