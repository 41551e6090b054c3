use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::preprocess::Normalization;
use super::{SampleRecord, NORMAL};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub fold: usize,
    pub category: String,
    pub mask_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub k: usize,
    pub records: Vec<ManifestRecord>,
    pub normalization: Normalization,
}

/// Assign folds in place. Each stratum (category, or everything when
/// `stratify` is off) is shuffled and dealt round-robin, continuing where the
/// previous stratum stopped, so fold sizes differ by at most one overall and
/// within every stratum.
pub fn kfold_split(records: &mut [SampleRecord], k: usize, seed: u64, stratify: bool) -> Result<()> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if records.len() < k {
        return Err(Error::Data(format!(
            "cannot split {} records into {k} folds",
            records.len()
        )));
    }
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|a, b| records[*a].id.cmp(&records[*b].id));
    for i in order {
        let key = if stratify { records[i].category.as_str() } else { "" };
        strata.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = 0usize;
    let mut folds = vec![0usize; records.len()];
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[i] = next % k;
            next += 1;
        }
    }
    for (r, f) in records.iter_mut().zip(folds) {
        r.fold = Some(f);
    }
    Ok(())
}

impl SplitManifest {
    pub fn from_records(records: &[SampleRecord], k: usize, seed: u64, normalization: Normalization) -> Result<Self> {
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let fold = r
                .fold
                .ok_or_else(|| Error::Data(format!("record '{}' has no fold", r.id)))?;
            out.push(ManifestRecord {
                id: r.id.clone(),
                fold,
                category: r.category.clone(),
                mask_count: r.masks.len(),
            });
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self {
            seed,
            k,
            records: out,
            normalization,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.records.iter().find(|r| r.fold >= self.k) {
            return Err(Error::Data(format!(
                "record '{}' is in fold {} but k = {}",
                r.id, r.fold, self.k
            )));
        }
        Ok(())
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| self.records[i].fold)
    }

    /// Copy the manifest's folds onto `records`; records absent from the
    /// manifest are an error.
    pub fn apply(&self, records: &mut [SampleRecord]) -> Result<()> {
        for r in records {
            r.fold = Some(self.fold_of(&r.id).ok_or_else(|| {
                Error::Data(format!("sample '{}' is not in the split manifest", r.id))
            })?);
        }
        Ok(())
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for r in &self.records {
            sizes[r.fold] += 1;
        }
        sizes
    }

    /// `category → per-fold counts`.
    pub fn strata_counts(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.category.clone()).or_insert_with(|| vec![0; self.k])[r.fold] += 1;
        }
        out
    }
}

/// Tumor-only subset keeping every remaining sample's fold.
pub fn busi_star(manifest: &SplitManifest) -> SplitManifest {
    SplitManifest {
        records: manifest
            .records
            .iter()
            .filter(|r| r.category != NORMAL)
            .cloned()
            .collect(),
        ..manifest.clone()
    }
}
