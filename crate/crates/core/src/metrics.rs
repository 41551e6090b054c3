//! Segmentation quality metrics and their aggregation.
//!
//! Distances are in pixels. Hausdorff distances use the foreground pixel sets
//! of the two masks and an exact Euclidean distance transform.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Pixels with `value >= threshold` are foreground.
    pub fn from_values(height: usize, width: usize, values: &[f64], threshold: f64) -> Result<Self> {
        Self::new(height, width, values.iter().map(|v| *v >= threshold).collect())
    }

    /// Binarize a `(H, W)`, `(1, H, W)` or `(1, 1, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, threshold: f64) -> Result<Self> {
        let dims = t.dims();
        if dims.len() < 2 || dims[..dims.len() - 2].iter().any(|d| *d != 1) {
            return Err(Error::Shape(format!("expected a single map, got {dims:?}")));
        }
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        Self::from_values(h, w, &ops::to_f64_vec(t)?, threshold)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    /// Foreground coordinates as `(row, col)`.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect()
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot union masks of shape {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Self::new(self.height, self.width, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_same(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "prediction is {}x{} but the mask is {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Count a probability map binarized at `threshold` against `g`.
pub fn confusion(pred: &[f64], shape: (usize, usize), g: &BinaryMask, threshold: f64) -> Result<ConfusionCounts> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let p = BinaryMask::from_values(shape.0, shape.1, pred, threshold)?;
    confusion_masks(&p, g)
}

pub fn confusion_masks(pred: &BinaryMask, g: &BinaryMask) -> Result<ConfusionCounts> {
    check_same(pred.shape(), g.shape())?;
    let mut c = ConfusionCounts::default();
    for (p, t) in pred.data.iter().zip(&g.data) {
        match (*p, *t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

/// `TP / (TP + FP + FN)`; 1 when both masks are empty.
pub fn jaccard(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// `TP / (TP + FN)`; undefined without ground-truth foreground.
pub fn sensitivity(c: &ConfusionCounts) -> Option<f64> {
    let den = c.tp + c.fn_;
    (den > 0).then(|| c.tp as f64 / den as f64)
}

/// `TN / (TN + FP)`; undefined without ground-truth background.
pub fn specificity(c: &ConfusionCounts) -> Option<f64> {
    let den = c.tn + c.fp;
    (den > 0).then(|| c.tn as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdDegenerate {
    /// Both sets empty; distances reported as 0.
    BothEmpty,
    /// One set empty; distances reported as the image diagonal.
    OneEmpty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HausdorffResult {
    pub hd: f64,
    pub hd95: f64,
    pub degenerate: Option<HdDegenerate>,
}

const UNREACHED: f64 = f64::INFINITY;

/// 1-D squared distance transform of `f` (lower envelope of parabolas).
/// Entries equal to `UNREACHED` do not seed parabolas.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q] == UNREACHED {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + (p * p) as f64;
                    let s = (fq - fp) / (2.0 * (q as f64 - p as f64));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = UNREACHED);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = f[v[k]] + d * d;
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest
/// foreground pixel of `mask` (`inf` everywhere when the mask is empty).
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = mask.shape();
    let mut grid: Vec<f64> = mask
        .data
        .iter()
        .map(|v| if *v { 0.0 } else { UNREACHED })
        .collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        let row = &grid[y * w..(y + 1) * w];
        edt_1d(row, &mut row_out, &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn directed(from: &BinaryMask, to_dt: &[f64]) -> Vec<f64> {
    from.data
        .iter()
        .zip(to_dt)
        .filter(|(v, _)| **v)
        .map(|(_, d)| d.sqrt())
        .collect()
}

/// Symmetric Hausdorff distance and its 95th-percentile variant.
pub fn hausdorff(pred: &BinaryMask, g: &BinaryMask) -> Result<HausdorffResult> {
    check_same(pred.shape(), g.shape())?;
    match (pred.is_empty(), g.is_empty()) {
        (true, true) => {
            return Ok(HausdorffResult {
                hd: 0.0,
                hd95: 0.0,
                degenerate: Some(HdDegenerate::BothEmpty),
            })
        }
        (true, false) | (false, true) => {
            let (h, w) = pred.shape();
            let diag = ((h * h + w * w) as f64).sqrt();
            return Ok(HausdorffResult {
                hd: diag,
                hd95: diag,
                degenerate: Some(HdDegenerate::OneEmpty),
            });
        }
        _ => {}
    }
    let ab = directed(pred, &squared_distance_transform(g));
    let ba = directed(g, &squared_distance_transform(pred));
    let max = |d: &[f64]| d.iter().copied().fold(0.0, f64::max);
    Ok(HausdorffResult {
        hd: max(&ab).max(max(&ba)),
        hd95: percentile(&ab, 95.0).max(percentile(&ba, 95.0)),
        degenerate: None,
    })
}

/// Metrics of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub fold: usize,
    pub dice: f64,
    pub jac: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub hd: f64,
    pub hd95: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hd_degenerate: Option<HdDegenerate>,
}

pub fn evaluate_masks(id: &str, fold: usize, pred: &BinaryMask, g: &BinaryMask) -> Result<ImageMetrics> {
    let c = confusion_masks(pred, g)?;
    let hd = hausdorff(pred, g)?;
    Ok(ImageMetrics {
        id: id.to_string(),
        fold,
        dice: dice(&c),
        jac: jaccard(&c),
        sen: sensitivity(&c),
        spe: specificity(&c),
        hd: hd.hd,
        hd95: hd.hd95,
        hd_degenerate: hd.degenerate,
    })
}

/// Evaluate a probability map (any single-map tensor) against `g`.
pub fn evaluate_probability(
    id: &str,
    fold: usize,
    prob: &Tensor,
    g: &BinaryMask,
    threshold: f64,
) -> Result<ImageMetrics> {
    let pred = BinaryMask::from_tensor(prob, threshold)?;
    evaluate_masks(id, fold, &pred, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

pub const METRIC_NAMES: [&str; 6] = ["dice", "jac", "sen", "spe", "hd", "hd95"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Exclusions {
    pub sen: usize,
    pub spe: usize,
    pub hd: usize,
}

/// Mean and std of every metric over a group of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub images: usize,
    pub metrics: BTreeMap<String, Stat>,
    pub excluded: Exclusions,
}

fn summarize(rows: &[&ImageMetrics]) -> MetricSummary {
    let mut excluded = Exclusions::default();
    let mut cols: BTreeMap<&str, Vec<f64>> = METRIC_NAMES.iter().map(|m| (*m, Vec::new())).collect();
    for r in rows {
        cols.get_mut("dice").unwrap().push(r.dice);
        cols.get_mut("jac").unwrap().push(r.jac);
        match r.sen {
            Some(v) => cols.get_mut("sen").unwrap().push(v),
            None => excluded.sen += 1,
        }
        match r.spe {
            Some(v) => cols.get_mut("spe").unwrap().push(v),
            None => excluded.spe += 1,
        }
        if r.hd_degenerate.is_some() {
            excluded.hd += 1;
        } else {
            cols.get_mut("hd").unwrap().push(r.hd);
            cols.get_mut("hd95").unwrap().push(r.hd95);
        }
    }
    MetricSummary {
        images: rows.len(),
        metrics: cols
            .into_iter()
            .filter_map(|(k, v)| Stat::of(&v).map(|s| (k.to_string(), s)))
            .collect(),
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Sorted by `(id, fold)`.
    pub per_image: Vec<ImageMetrics>,
    pub per_fold: BTreeMap<usize, MetricSummary>,
    /// All images pooled together.
    pub pooled: MetricSummary,
    /// Mean and std of the per-fold means.
    pub across_folds: BTreeMap<String, Stat>,
}

pub fn aggregate(mut rows: Vec<ImageMetrics>) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::Data("cannot aggregate an empty set of metric rows".into()));
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id).then(a.fold.cmp(&b.fold)));
    let mut by_fold: BTreeMap<usize, Vec<&ImageMetrics>> = BTreeMap::new();
    for r in &rows {
        by_fold.entry(r.fold).or_default().push(r);
    }
    let per_fold: BTreeMap<usize, MetricSummary> =
        by_fold.iter().map(|(f, rs)| (*f, summarize(rs))).collect();
    let pooled = summarize(&rows.iter().collect::<Vec<_>>());
    let across_folds = METRIC_NAMES
        .iter()
        .filter_map(|m| {
            let means: Vec<f64> = per_fold
                .values()
                .filter_map(|s| s.metrics.get(*m).map(|st| st.mean))
                .collect();
            Stat::of(&means).map(|s| (m.to_string(), s))
        })
        .collect();
    Ok(MetricReport {
        per_image: rows,
        per_fold,
        pooled,
        across_folds,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: &'a str,
    fold: usize,
    dice: f64,
    jac: f64,
    sen: Option<f64>,
    spe: Option<f64>,
    hd: f64,
    hd95: f64,
}

impl MetricReport {
    /// Per-image table with columns `id,fold,dice,jac,sen,spe,hd,hd95`;
    /// undefined values are empty fields.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.per_image {
            w.serialize(CsvRow {
                id: &r.id,
                fold: r.fold,
                dice: r.dice,
                jac: r.jac,
                sen: r.sen,
                spe: r.spe,
                hd: r.hd,
                hd95: r.hd95,
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Summary without the per-image rows.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            images: usize,
            per_fold: &'a BTreeMap<usize, MetricSummary>,
            pooled: &'a MetricSummary,
            across_folds: &'a BTreeMap<String, Stat>,
        }
        Ok(serde_json::to_string_pretty(&Summary {
            images: self.per_image.len(),
            per_fold: &self.per_fold,
            pooled: &self.pooled,
            across_folds: &self.across_folds,
        })?)
    }

    /// Write `metrics.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("metrics.csv");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join("summary.json");
        std::fs::write(&json_path, self.summary_json()?).map_err(|e| Error::io(&json_path, e))?;
        Ok(())
    }

    /// `mean ± std` over folds, the way cross-validation tables report it.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        for m in METRIC_NAMES {
            if let Some(s) = self.across_folds.get(m) {
                let scale = if m.starts_with("hd") { 1.0 } else { 100.0 };
                out.push_str(&format!("{m:>5}: {:.2} ± {:.2}\n", s.mean * scale, s.std * scale));
            }
        }
        out
    }
}
