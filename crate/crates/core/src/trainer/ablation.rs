use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::config::Config;
use crate::data::{Normalization, Sample};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, METRIC_NAMES};
use crate::network::ModuleFlags;

use super::train::{evaluate, train_fold};

/// Baseline, +MGPM, +BGM, +BGM+BS, full.
pub const TABLE_ROWS: [ModuleFlags; 5] = [
    ModuleFlags::BASELINE,
    ModuleFlags { mgpm: true, bgm: false, bs: false },
    ModuleFlags { mgpm: false, bgm: true, bs: false },
    ModuleFlags { mgpm: false, bgm: true, bs: true },
    ModuleFlags::FULL,
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: ModuleFlags,
    pub params: usize,
    pub macs: u64,
    pub steps: u64,
    pub first_loss: f64,
    /// Pooled validation means; empty without validation data.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<AblationRow>,
}

/// Train and evaluate every row under the same data, seed and schedule;
/// only the module flags differ.
pub fn run_ablation(
    cfg: &Config,
    rows: &[ModuleFlags],
    train: &[Sample],
    val: &[Sample],
    norm: &Normalization,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let mut out = Vec::with_capacity(rows.len());
    for flags in rows {
        flags.validate()?;
        let mut row_cfg = cfg.clone();
        row_cfg.model.modules = *flags;
        row_cfg.validate()?;
        let name = flags.label();
        ::log::info!("ablation row {name}");
        let dir = out_dir.map(|d| d.join(name.replace('+', "_")));
        let outcome = train_fold(&row_cfg, train, val, norm, None, dir.as_deref())?;
        let net = &outcome.net;
        let metrics = if val.is_empty() {
            BTreeMap::new()
        } else {
            aggregate(evaluate(net, val, norm, 0, cfg.data.threshold)?)?
                .pooled
                .metrics
                .iter()
                .map(|(k, s)| (k.clone(), s.mean))
                .collect()
        };
        out.push(AblationRow {
            name,
            flags: *flags,
            params: net.count_parameters(),
            macs: net.count_macs(cfg.data.height, cfg.data.width)?,
            steps: outcome.steps,
            first_loss: outcome.log.losses().first().copied().unwrap_or(f64::NAN),
            metrics,
        });
    }
    let table = AblationTable {
        height: cfg.data.height,
        width: cfg.data.width,
        rows: out,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("ablation.csv");
        std::fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("ablation.json");
        std::fs::write(&path, serde_json::to_string_pretty(&table)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(table)
}

impl AblationTable {
    /// `row,params,macs,dice,jac,sen,spe,hd,hd95`; empty metric fields when
    /// there was no validation data.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,params,macs");
        for m in METRIC_NAMES {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{}", r.name, r.params, r.macs));
            for m in METRIC_NAMES {
                s.push(',');
                if let Some(v) = r.metrics.get(m) {
                    s.push_str(&v.to_string());
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| configuration | Params (M) | MACs (G) @{}x{} | Dice | Jac | HD |\n|---|---|---|---|---|---|\n",
            self.height, self.width
        );
        let fmt = |v: Option<&f64>, scale: f64| v.map(|v| format!("{:.2}", v * scale)).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.4} | {:.4} | {} | {} | {} |\n",
                r.name,
                r.params as f64 / 1e6,
                r.macs as f64 / 1e9,
                fmt(r.metrics.get("dice"), 100.0),
                fmt(r.metrics.get("jac"), 100.0),
                fmt(r.metrics.get("hd"), 1.0),
            ));
        }
        s
    }
}
