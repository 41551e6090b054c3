//! Dataset ingestion, preprocessing, augmentation, fold splitting and
//! synthetic phantoms.

mod augment;
mod phantom;
mod preprocess;
mod scan;
mod split;

pub use augment::{augment, derive_seed, AugmentationPolicy, RawSample};
pub use phantom::{generate_phantoms, write_phantoms, Phantom, PhantomConfig};
pub use preprocess::{
    check_target, compute_normalization, load_image, load_mask, load_sample, normalize, preprocess,
    resize_image, resize_mask, ImageBuf, Normalization, Sample,
};
pub use scan::{scan_dataset, Layout, SampleRecord, ScanResult, ValidationIssue};
pub use split::{busi_star, kfold_split, ManifestRecord, SplitManifest};

/// Category label of BUSI's tumor-free images.
pub const NORMAL: &str = "normal";

/// Target geometry of the public dataset.
pub const BUSI_SIZE: (usize, usize) = (256, 256);
/// Target geometry of the in-house dataset.
pub const IN_HOUSE_SIZE: (usize, usize) = (256, 384);
