use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use pbnet_core::checkpoint::{self, CheckpointMeta};
use pbnet_core::config::Config;
use pbnet_core::data::{
    generate_phantoms, kfold_split, load_image, load_mask, resize_image, write_phantoms,
    Normalization, PhantomConfig, SampleRecord, SplitManifest,
};
use pbnet_core::metrics::{aggregate, evaluate_masks, MetricReport};
use pbnet_core::network::PBNet;
use pbnet_core::trainer::{
    evaluate, leakage_audit, run_ablation, run_cross_validation, train_fold, TABLE_ROWS,
};
use pbnet_core::viz;
use pbnet_core::{BinaryMask, Error, ModuleFlags};
use serde_json::{json, Value};

use crate::dataset;
use crate::{Common, DataArgs, Preset};

type Out = anyhow::Result<Value>;

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn path_str(p: &Path) -> String {
    quoted(&p.to_string_lossy())
}

/// Resolve the run configuration: file or preset, then `--set`, then flags.
pub fn config(common: &Common, data: Option<&DataArgs>) -> pbnet_core::Result<Config> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(device) = &common.device {
        overrides.push(format!("train.device={}", quoted(device)));
    }
    if let Some(d) = data {
        if let Some(root) = &d.root {
            overrides.push(format!("data.root={}", path_str(root)));
        }
        if let Some(layout) = &d.layout {
            overrides.push(format!("data.layout={}", quoted(&layout.to_ascii_lowercase())));
        }
        if let Some(m) = &d.manifest {
            overrides.push(format!("data.manifest={}", path_str(m)));
        }
    }
    let cfg = match &common.config {
        Some(path) => Config::load(path, &overrides)?,
        None => {
            let preset = match common.preset {
                Preset::Default => Config::default(),
                Preset::Tiny => Config::tiny(),
            };
            Config::from_preset(&preset, &overrides)?
        }
    };
    cfg.train.device()?;
    Ok(cfg)
}

/// Output directory, refusing to mix results into a non-empty one.
fn out_dir(common: &Common, required: bool) -> pbnet_core::Result<Option<PathBuf>> {
    let Some(dir) = common.out.clone() else {
        if required {
            return Err(Error::Config("this command needs --out".into()));
        }
        return Ok(None);
    };
    let non_empty = dir
        .read_dir()
        .map(|mut it| it.next().is_some())
        .unwrap_or(false);
    if non_empty && !common.overwrite {
        return Err(Error::Config(format!(
            "output directory {} is not empty; pass --overwrite to reuse it",
            dir.display()
        )));
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(Some(dir))
}

fn write(path: &Path, text: &str) -> pbnet_core::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_run_files(dir: &Path, cfg: &Config, manifest: &SplitManifest) -> pbnet_core::Result<()> {
    write(&dir.join("config.toml"), &cfg.to_toml()?)?;
    manifest.save(&dir.join("manifest.json"))
}

fn check_fold(cfg: &Config, fold: usize) -> pbnet_core::Result<()> {
    if fold >= cfg.data.k {
        return Err(Error::Config(format!(
            "--fold {fold} is out of range for k = {}",
            cfg.data.k
        )));
    }
    Ok(())
}

fn report_json(report: &MetricReport) -> anyhow::Result<Value> {
    Ok(serde_json::from_str(&report.summary_json()?)?)
}

pub fn scan(common: &Common, data: &DataArgs) -> Out {
    let cfg = config(common, Some(data))?;
    let out = out_dir(common, false)?;
    let scan = dataset::scan(&cfg)?;
    let summary = json!({
        "root": dataset::root(&cfg)?,
        "layout": cfg.data.layout.to_string(),
        "samples": scan.records.len(),
        "categories": scan.category_counts(),
        "issues": scan.issues,
    });
    if let Some(dir) = out {
        write(&dir.join("scan.json"), &serde_json::to_string_pretty(&json!({
            "summary": summary,
            "records": scan.records,
        }))?)?;
    }
    Ok(summary)
}

pub fn split(common: &Common, data: &DataArgs) -> Out {
    let cfg = config(common, Some(data))?;
    let dir = out_dir(common, true)?.expect("required");
    let mut records = dataset::scan(&cfg)?.records;
    kfold_split(&mut records, cfg.data.k, cfg.train.seed, cfg.data.stratify)?;
    let samples = dataset::load_samples(&cfg, &records)?;
    let norm = dataset::normalization(&cfg, &records, &samples)?;
    let manifest = SplitManifest::from_records(&records, cfg.data.k, cfg.train.seed, norm)?;
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(json!({
        "manifest": path,
        "k": manifest.k,
        "seed": manifest.seed,
        "fold_sizes": manifest.fold_sizes(),
        "strata": manifest.strata_counts(),
    }))
}

pub fn train(common: &Common, data: &DataArgs, fold: usize) -> Out {
    let cfg = config(common, Some(data))?;
    check_fold(&cfg, fold)?;
    let dir = out_dir(common, true)?.expect("required");
    let loaded = dataset::load(&cfg)?;
    save_run_files(&dir, &cfg, &loaded.manifest)?;
    let (train, val) = loaded.data.split(fold);
    leakage_audit(&train, &val)?;
    let outcome = train_fold(&cfg, &train, &val, &loaded.norm, Some(fold), Some(&dir))?;
    Ok(json!({
        "fold": fold,
        "train": train.len(),
        "val": val.len(),
        "steps": outcome.steps,
        "best_epoch": outcome.best_epoch,
        "best_dice": outcome.best_dice,
        "checkpoint": dir.join("best.safetensors"),
    }))
}

pub fn cv(common: &Common, data: &DataArgs) -> Out {
    let cfg = config(common, Some(data))?;
    let dir = out_dir(common, true)?.expect("required");
    let loaded = dataset::load(&cfg)?;
    save_run_files(&dir, &cfg, &loaded.manifest)?;
    let outcome = run_cross_validation(&cfg, &loaded.data, &loaded.norm, Some(&dir))?;
    eprintln!("{}", outcome.best.format_table());
    Ok(json!({
        "best": report_json(&outcome.best)?,
        "last": report_json(&outcome.last)?,
        "folds": outcome.folds,
    }))
}

fn load_checkpoint(path: &Path, cfg: &Config) -> anyhow::Result<(PBNet, CheckpointMeta)> {
    checkpoint::load(path, &cfg.train.device()?)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn checkpoint_norm(meta: &CheckpointMeta) -> Normalization {
    meta.normalization.clone().unwrap_or_else(|| {
        log::warn!("checkpoint carries no normalization; using identity statistics");
        Normalization::default()
    })
}

/// Data settings the checkpoint was trained with, when recorded.
fn checkpoint_size(meta: &CheckpointMeta, cfg: &Config) -> (usize, usize) {
    serde_json::from_value::<Config>(meta.config.clone())
        .map(|c| (c.data.height, c.data.width))
        .unwrap_or((cfg.data.height, cfg.data.width))
}

pub fn eval(common: &Common, data: &DataArgs, ckpt: &Path, fold: Option<usize>) -> Out {
    let cfg = config(common, Some(data))?;
    if let Some(f) = fold {
        check_fold(&cfg, f)?;
    }
    let out = out_dir(common, false)?;
    let (net, meta) = load_checkpoint(ckpt, &cfg)?;
    let loaded = dataset::load(&cfg)?;
    let norm = meta.normalization.clone().unwrap_or(loaded.norm);
    let mut rows = Vec::new();
    for (s, f) in loaded.data.samples.iter().zip(&loaded.data.folds) {
        if fold.is_none_or(|want| want == *f) {
            rows.extend(evaluate(&net, std::slice::from_ref(s), &norm, *f, cfg.data.threshold)?);
        }
    }
    let report = aggregate(rows)?;
    if let Some(dir) = out {
        report.write(&dir)?;
    }
    eprintln!("{}", report.format_table());
    report_json(&report)
}

fn png_files(dir: &Path) -> pbnet_core::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn find_mask(masks: &Path, image: &Path, single: bool) -> Option<PathBuf> {
    if single {
        return Some(masks.to_path_buf());
    }
    let s = stem(image);
    [format!("{s}.png"), format!("{s}_mask.png")]
        .into_iter()
        .map(|n| masks.join(n))
        .find(|p| p.is_file())
}

fn read_mask(image: &Path, mask: &Path, height: usize, width: usize) -> pbnet_core::Result<BinaryMask> {
    let record = SampleRecord {
        id: stem(image),
        image: image.to_path_buf(),
        masks: vec![mask.to_path_buf()],
        category: "lesion".into(),
        fold: None,
    };
    load_mask(&record, height, width)
}

pub fn infer(common: &Common, ckpt: &Path, input: &Path, masks: Option<&Path>, threshold: f64) -> Out {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config("--threshold must lie in (0, 1)".into()).into());
    }
    let cfg = config(common, None)?;
    let dir = out_dir(common, true)?.expect("required");
    let (net, meta) = load_checkpoint(ckpt, &cfg)?;
    let norm = checkpoint_norm(&meta);
    let single = input.is_file();
    let images = if single { vec![input.to_path_buf()] } else { png_files(input)? };
    if images.is_empty() {
        return Err(Error::Data(format!("no png images in {}", input.display())).into());
    }
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for path in &images {
        let id = stem(path);
        let img = load_image(path)?;
        let pred = viz::predict_any_size(&net, &img, &norm)?;
        let mask = BinaryMask::from_values(pred.height, pred.width, &pred.probability, threshold)?;
        viz::save_gray(&viz::mask_to_gray(&mask), &dir.join(format!("{id}_pred.png")))?;
        viz::save_gray(
            &viz::to_gray(&pred.probability, pred.height, pred.width)?,
            &dir.join(format!("{id}_prob.png")),
        )?;
        let mut entry = json!({
            "id": id,
            "image": path,
            "height": pred.height,
            "width": pred.width,
            "padded": pred.padded,
            "foreground": mask.count(),
        });
        if let Some(m) = masks.and_then(|m| find_mask(m, path, single)) {
            let truth = read_mask(path, &m, img.height, img.width)?;
            viz::save_rgb(
                &viz::overlay(&viz::gray_u8(&img), &mask, &truth)?,
                &dir.join(format!("{id}_overlay.png")),
            )?;
            let row = evaluate_masks(&id, 0, &mask, &truth)?;
            entry["metrics"] = serde_json::to_value(&row)?;
            rows.push(row);
        }
        entries.push(entry);
    }
    let mut summary = json!({
        "checkpoint": ckpt,
        "threshold": threshold,
        "images": entries,
    });
    if !rows.is_empty() {
        summary["summary"] = report_json(&aggregate(rows)?)?;
    }
    write(&dir.join("infer.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn parse_rows(rows: Option<&str>) -> pbnet_core::Result<Vec<ModuleFlags>> {
    match rows {
        None => Ok(TABLE_ROWS.to_vec()),
        Some(text) => text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(ModuleFlags::from_str)
            .collect(),
    }
}

pub fn ablate(common: &Common, data: &DataArgs, fold: usize, rows: Option<&str>) -> Out {
    let cfg = config(common, Some(data))?;
    check_fold(&cfg, fold)?;
    let flags = parse_rows(rows)?;
    let dir = out_dir(common, true)?.expect("required");
    let loaded = dataset::load(&cfg)?;
    save_run_files(&dir, &cfg, &loaded.manifest)?;
    let (train, val) = loaded.data.split(fold);
    leakage_audit(&train, &val)?;
    let table = run_ablation(&cfg, &flags, &train, &val, &loaded.norm, Some(&dir))?;
    let md = table.to_markdown();
    write(&dir.join("ablation.md"), &md)?;
    eprintln!("{md}");
    Ok(serde_json::to_value(&table)?)
}

pub fn visualize(common: &Common, ckpt: &Path, image: &Path, mask: Option<&Path>) -> Out {
    let cfg = config(common, None)?;
    let dir = out_dir(common, true)?.expect("required");
    let (net, meta) = load_checkpoint(ckpt, &cfg)?;
    let norm = checkpoint_norm(&meta);
    let (h, w) = checkpoint_size(&meta, &cfg);
    let raw = load_image(image)?;
    let truth = mask
        .map(|m| read_mask(image, m, raw.height, raw.width))
        .transpose()?;
    let img = resize_image(&raw, h, w);
    let written = viz::export_attention(&net, &img, truth.as_ref(), &norm, &dir)?;
    Ok(json!({ "size": [h, w], "files": written }))
}

pub fn phantoms(common: &Common, count: usize, height: usize, width: usize, contrast: f64) -> Out {
    let dir = out_dir(common, true)?.expect("required");
    let cfg = PhantomConfig {
        count,
        height,
        width,
        seed: common.seed.unwrap_or(0),
        contrast_scale: contrast,
    };
    let phantoms = generate_phantoms(&cfg)?;
    write_phantoms(&dir, &phantoms)?;
    Ok(json!({
        "root": dir,
        "layout": "generic",
        "count": phantoms.len(),
        "config": cfg,
    }))
}

pub fn info(common: &Common, ckpt: Option<&Path>, height: Option<usize>, width: Option<usize>) -> Out {
    let cfg = config(common, None)?;
    let (net, source) = match ckpt {
        Some(path) => (load_checkpoint(path, &cfg)?.0, json!(path)),
        None => {
            let mut model = cfg.model.clone();
            model.backbone.pretrained = false;
            model.backbone.weights = None;
            (
                PBNet::new(model, cfg.train.seed, pbnet_core::DType::F32, cfg.train.device()?)?,
                json!("config"),
            )
        }
    };
    let h = height.unwrap_or(cfg.data.height);
    let w = width.unwrap_or(cfg.data.width);
    Ok(json!({
        "source": source,
        "modules": net.config().modules.label(),
        "backbone": net.config().backbone.variant,
        "params": net.count_parameters(),
        "input": [h, w],
        "macs": net.count_macs(h, w)?,
    }))
}
