use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use crate::config::Config;
use crate::data::{Normalization, Sample};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, MetricReport};

use super::train::{evaluate, restore, train_fold};

/// Samples with their fold assignment.
pub struct FoldSamples {
    pub samples: Vec<Sample>,
    pub folds: Vec<usize>,
}

impl FoldSamples {
    pub fn split(&self, fold: usize) -> (Vec<Sample>, Vec<Sample>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (s, f) in self.samples.iter().zip(&self.folds) {
            if *f == fold {
                val.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        (train, val)
    }
}

/// Fails when any id appears on both sides.
pub fn leakage_audit(train: &[Sample], val: &[Sample]) -> Result<()> {
    let train_ids: BTreeSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    let shared: Vec<&str> = val
        .iter()
        .map(|s| s.id.as_str())
        .filter(|id| train_ids.contains(id))
        .collect();
    if !shared.is_empty() {
        return Err(Error::Data(format!("validation ids also used for training: {shared:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub train: usize,
    pub val: usize,
    pub best_epoch: usize,
    pub steps: u64,
}

pub struct CvOutcome {
    /// Held-out metrics with best-validation weights.
    pub best: MetricReport,
    /// Held-out metrics with last-epoch weights.
    pub last: MetricReport,
    pub folds: Vec<FoldAudit>,
}

/// Train one model per fold and evaluate it on that fold.
pub fn run_cross_validation(
    cfg: &Config,
    data: &FoldSamples,
    norm: &Normalization,
    out_dir: Option<&Path>,
) -> Result<CvOutcome> {
    let k = cfg.data.k;
    if data.samples.len() != data.folds.len() {
        return Err(Error::Data("every sample needs a fold".into()));
    }
    if let Some(f) = data.folds.iter().find(|f| **f >= k) {
        return Err(Error::Data(format!("fold {f} is out of range for k = {k}")));
    }
    let mut best_rows = Vec::new();
    let mut last_rows = Vec::new();
    let mut audits = Vec::new();
    for fold in 0..k {
        let (train, val) = data.split(fold);
        if val.is_empty() {
            return Err(Error::Data(format!("fold {fold} has no samples")));
        }
        leakage_audit(&train, &val)?;
        ::log::info!("fold {fold}: {} train / {} val", train.len(), val.len());
        let dir = out_dir.map(|d| d.join(format!("fold{fold}")));
        let outcome = train_fold(cfg, &train, &val, norm, Some(fold), dir.as_deref())?;
        last_rows.extend(evaluate(&outcome.net, &val, norm, fold, cfg.data.threshold)?);
        restore(outcome.net.store(), &outcome.best_weights)?;
        best_rows.extend(evaluate(&outcome.net, &val, norm, fold, cfg.data.threshold)?);
        audits.push(FoldAudit {
            fold,
            train: train.len(),
            val: val.len(),
            best_epoch: outcome.best_epoch,
            steps: outcome.steps,
        });
    }
    let best = aggregate(best_rows)?;
    let last = aggregate(last_rows)?;
    if let Some(dir) = out_dir {
        best.write(&dir.join("best"))?;
        last.write(&dir.join("last"))?;
        let path = dir.join("folds.json");
        std::fs::write(&path, serde_json::to_string_pretty(&audits)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(CvOutcome {
        best,
        last,
        folds: audits,
    })
}
