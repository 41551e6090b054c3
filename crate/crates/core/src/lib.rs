//! PBNet: an encoder–decoder network for lesion segmentation in breast
//! ultrasound, with multilevel global perception, boundary-guided attention
//! and a multi-level boundary-enhanced loss, plus the data, training,
//! evaluation and ablation harness around it.

pub mod backbone;
pub mod bgm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mgpm;
pub mod morphology;
pub mod network;
pub mod nn;
pub mod ops;
pub mod trainer;
pub mod viz;

pub use candle_core::{DType, Device, Tensor};
pub use error::{Error, ErrorKind, Result};
pub use morphology::MorphKernel;
pub use network::{ModelConfig, ModuleFlags, PBNet, PBNetOutputs};
pub use config::Config;
pub use metrics::{BinaryMask, MetricReport};
