use std::path::{Path, PathBuf};

use pbnet_core::config::Config;
use pbnet_core::data::{
    compute_normalization, kfold_split, load_sample, scan_dataset, Normalization, Sample,
    SampleRecord, ScanResult, SplitManifest,
};
use pbnet_core::trainer::FoldSamples;
use pbnet_core::{Error, Result};

pub const CACHE_ENV: &str = "PBNET_CACHE";

pub fn root(cfg: &Config) -> Result<&Path> {
    cfg.data
        .root
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset root: pass --root or set data.root".into()))
}

pub fn scan(cfg: &Config) -> Result<ScanResult> {
    let mut scan = scan_dataset(root(cfg)?, cfg.data.layout)?;
    if cfg.data.exclude_normal {
        scan.records.retain(|r| !r.is_normal());
    }
    Ok(scan)
}

fn fnv(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn cache_path(cfg: &Config, records: &[SampleRecord]) -> Option<PathBuf> {
    let dir = std::env::var_os(CACHE_ENV)?;
    let mut key = format!(
        "{}|{}|{}x{}",
        root(cfg).ok()?.display(),
        cfg.data.layout,
        cfg.data.height,
        cfg.data.width
    );
    for r in records {
        key.push('|');
        key.push_str(&r.id);
    }
    Some(PathBuf::from(dir).join(format!("norm-{:016x}.json", fnv(&key))))
}

/// Dataset statistics, read from or written to `$PBNET_CACHE` when set.
pub fn normalization(cfg: &Config, records: &[SampleRecord], samples: &[Sample]) -> Result<Normalization> {
    let cached = cache_path(cfg, records);
    if let Some(path) = cached.as_ref().filter(|p| p.is_file()) {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        log::info!("normalization from cache {}", path.display());
        return Ok(serde_json::from_str(&text)?);
    }
    let norm = compute_normalization(samples.iter().map(|s| &s.image))?;
    if let Some(path) = cached {
        if let Some(dir) = path.parent() {
            let _ = std::fs::create_dir_all(dir);
        }
        if let Err(e) = std::fs::write(&path, serde_json::to_string(&norm)?) {
            log::warn!("could not write normalization cache {}: {e}", path.display());
        }
    }
    Ok(norm)
}

pub fn load_samples(cfg: &Config, records: &[SampleRecord]) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| load_sample(r, cfg.data.height, cfg.data.width))
        .collect()
}

pub struct Loaded {
    pub data: FoldSamples,
    pub norm: Normalization,
    pub manifest: SplitManifest,
}

/// Scan, assign folds (from the manifest when configured, otherwise a fresh
/// seeded split) and load every sample at the configured size.
pub fn load(cfg: &Config) -> Result<Loaded> {
    let mut records = scan(cfg)?.records;
    if records.is_empty() {
        return Err(Error::Data(format!("no samples under {}", root(cfg)?.display())));
    }
    let manifest = match cfg.data.manifest.as_deref() {
        Some(path) => {
            let m = SplitManifest::load(path)?;
            if m.k != cfg.data.k {
                return Err(Error::Config(format!(
                    "manifest {} has k = {} but data.k = {}",
                    path.display(),
                    m.k,
                    cfg.data.k
                )));
            }
            m.apply(&mut records)?;
            Some(m)
        }
        None => {
            kfold_split(&mut records, cfg.data.k, cfg.train.seed, cfg.data.stratify)?;
            None
        }
    };
    let samples = load_samples(cfg, &records)?;
    let manifest = match manifest {
        Some(m) => m,
        None => {
            let norm = normalization(cfg, &records, &samples)?;
            SplitManifest::from_records(&records, cfg.data.k, cfg.train.seed, norm)?
        }
    };
    let folds = records.iter().map(|r| r.fold.expect("assigned")).collect();
    Ok(Loaded {
        data: FoldSamples { samples, folds },
        norm: manifest.normalization.clone(),
        manifest,
    })
}
