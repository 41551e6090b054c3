//! Minimal layer toolkit on top of candle.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path. Batch-norm
//! running statistics are registered as buffers in the same store so they
//! are saved with the weights but never handed to the optimizer.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// Uniform in `±sqrt(6 / fan_in)`.
    He { fan_in: usize },
    Uniform { bound: f64 },
}

/// Owns every variable of a model, in deterministic (sorted) order.
pub struct ParamStore {
    entries: Mutex<BTreeMap<String, (Var, ParamKind)>>,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            entries: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&self, name: String, shape: &[usize], init: Init, kind: ParamKind) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::He { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                self.draw_uniform(n, bound)
            }
            Init::Uniform { bound } => self.draw_uniform(n, bound),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut entries = self.entries.lock().expect("param store poisoned");
        if entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        entries.insert(name, (var.clone(), kind));
        Ok(var)
    }

    fn draw_uniform(&self, n: usize, bound: f64) -> Vec<f64> {
        let mut rng = self.rng.lock().expect("param store poisoned");
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
    }

    /// Trainable variables in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.filtered(ParamKind::Trainable)
    }

    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.filtered(ParamKind::Buffer)
    }

    fn filtered(&self, kind: ParamKind) -> Vec<(String, Var)> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .filter(|(_, (_, k))| *k == kind)
            .map(|(n, (v, _))| (n.clone(), v.clone()))
            .collect()
    }

    /// Every variable (trainable and buffers) in name order.
    pub fn all(&self) -> Vec<(String, Var, ParamKind)> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .map(|(n, (v, k))| (n.clone(), v.clone(), *k))
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite variables from a name→tensor map. Every name under
    /// `prefix` must be present with a matching shape.
    pub fn load_from(&self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<usize> {
        let entries = self.entries.lock().expect("param store poisoned");
        let mut loaded = 0;
        for (name, (var, _)) in entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store
            .create(self.path(name), shape, init, ParamKind::Trainable)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        self.store
            .create(self.path(name), shape, Init::Const(value), ParamKind::Buffer)
    }
}

/// Per-forward settings shared by every layer.
#[derive(Debug, Default)]
pub struct Ctx {
    pub train: bool,
    counting: bool,
    macs: Cell<u64>,
}

impl Ctx {
    pub fn train() -> Self {
        Self {
            train: true,
            ..Self::default()
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }

    /// Evaluation-mode context that tallies multiply-accumulates.
    pub fn counting() -> Self {
        Self {
            counting: true,
            ..Self::default()
        }
    }

    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn add_macs(&self, n: u64) {
        if self.counting {
            self.macs.set(self.macs.get() + n);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::None => x.clone(),
            Activation::Relu => x.relu()?,
            Activation::Silu => x.silu()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    depthwise: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
    pub depthwise: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            bias: true,
            depthwise: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// One `k×k` filter per channel; requires `in == out`.
    pub fn depthwise(mut self) -> Self {
        self.depthwise = true;
        self
    }
}

impl Conv2d {
    pub fn new(spec: ConvSpec, scope: Scope<'_>) -> Result<Self> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            bias,
            depthwise,
        } = spec;
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::Config(format!("conv kernel must be odd, got {kernel}")));
        }
        if depthwise && in_channels != out_channels {
            return Err(Error::Config(format!(
                "depth-wise conv needs equal channels, got {in_channels}->{out_channels}"
            )));
        }
        let per_out_in = if depthwise { 1 } else { in_channels };
        let fan_in = per_out_in * kernel * kernel;
        let weight = scope.param(
            "weight",
            &[out_channels, per_out_in, kernel, kernel],
            Init::He { fan_in },
        )?;
        let bias = if bias {
            Some(scope.param("bias", &[out_channels], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            depthwise,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let y = if self.depthwise {
            ops::depthwise_conv2d(x, &self.weight, self.stride, self.padding)?
        } else if self.kernel == 1 && self.stride == 1 {
            // 1x1 conv as a channel matmul: (B, Cin, HW) -> (B, Cout, HW)
            let (b, _, h, w) = x.dims4()?;
            let wm = self.weight.reshape((self.out_channels, self.in_channels))?;
            wm.broadcast_left(b)?
                .contiguous()?
                .matmul(&x.reshape((b, c, h * w))?)?
                .reshape((b, self.out_channels, h, w))?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        let (_, _, oh, ow) = y.dims4()?;
        let per_out = if self.depthwise { 1 } else { self.in_channels };
        ctx.add_macs((self.out_channels * per_out * self.kernel * self.kernel * oh * ow) as u64);
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
}

/// 2-D batch normalization with running statistics stored as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize, scope: Scope<'_>) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[channels], Init::Const(1.0))?,
            bias: scope.param("bias", &[channels], Init::Const(0.0))?,
            running_mean: scope.buffer("running_mean", &[channels], 0.0)?,
            running_var: scope.buffer("running_var", &[channels], 1.0)?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let shape = (1, c, 1, 1);
        let (mean, var) = if ctx.train {
            // (C, B*H*W) view for per-channel statistics
            let flat = x.transpose(0, 1)?.contiguous()?.reshape((c, b * h * w))?;
            let mean = flat.mean_keepdim(1)?;
            let centred = flat.broadcast_sub(&mean)?;
            let var = centred.sqr()?.mean_keepdim(1)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 {
                (var.detach() * (n / (n - 1.0)))?
            } else {
                var.detach()
            };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))?
                + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean.reshape(shape)?, var.reshape(shape)?)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let scale = self.weight.as_tensor().reshape(shape)?.broadcast_mul(&inv)?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&scale)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape(shape)?)?)
    }
}

/// Convolution followed by batch norm and an activation.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    bn: BatchNorm2d,
    act: Activation,
}

impl ConvBnAct {
    pub fn new(spec: ConvSpec, act: Activation, scope: Scope<'_>) -> Result<Self> {
        let conv = Conv2d::new(spec, scope.pp("conv"))?;
        let bn = BatchNorm2d::new(spec.out_channels, scope.pp("bn"))?;
        Ok(Self { conv, bn, act })
    }

    pub fn relu(in_c: usize, out_c: usize, kernel: usize, scope: Scope<'_>) -> Result<Self> {
        Self::new(ConvSpec::new(in_c, out_c, kernel), Activation::Relu, scope)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, &y)?;
        self.act.apply(&y)
    }

    /// Convolution output before normalization.
    pub fn pre_norm(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(ctx, x)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, scope: Scope<'_>) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        Ok(Self {
            weight: scope.param("weight", &[out_features, in_features], Init::Uniform { bound })?,
            bias: scope.param("bias", &[out_features], Init::Const(0.0))?,
            in_features,
            out_features,
        })
    }

    /// `x` is `(B, in)`; returns `(B, out)`.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (b, _) = x.dims2()?;
        ctx.add_macs((b * self.in_features * self.out_features) as u64);
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }
}
