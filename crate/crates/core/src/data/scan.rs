use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::NORMAL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `<category>/<stem>.png` with `<stem>_mask.png` and `<stem>_mask_<i>.png`.
    #[default]
    Busi,
    /// `images/<name>` with `masks/<name>`.
    Generic,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "busi" => Ok(Layout::Busi),
            "generic" => Ok(Layout::Generic),
            _ => Err(Error::Config(format!(
                "unknown dataset layout '{s}' (expected busi or generic)"
            ))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Busi => "busi",
            Layout::Generic => "generic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: PathBuf,
    /// Unioned when there is more than one.
    pub masks: Vec<PathBuf>,
    pub category: String,
    pub fold: Option<usize>,
}

impl SampleRecord {
    pub fn is_normal(&self) -> bool {
        self.category == NORMAL
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub path: PathBuf,
    pub problem: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanResult {
    pub records: Vec<SampleRecord>,
    /// Excluded or suspicious files.
    pub issues: Vec<ValidationIssue>,
}

impl ScanResult {
    pub fn category_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.category.clone()).or_insert(0) += 1;
        }
        out
    }
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Split `<stem>_mask` / `<stem>_mask_<i>` into `stem`.
fn mask_owner(stem: &str) -> Option<&str> {
    if let Some(s) = stem.strip_suffix("_mask") {
        return Some(s);
    }
    let (head, idx) = stem.rsplit_once("_mask_")?;
    idx.chars().all(|c| c.is_ascii_digit()).then_some(head)
}

fn check_readable(p: &Path) -> Result<()> {
    image::image_dimensions(p).map_err(|e| Error::image(p, e))?;
    Ok(())
}

fn scan_busi(root: &Path, out: &mut ScanResult) -> Result<()> {
    for dir in list_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let category = dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut masks: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
        for file in list_dir(&dir)?.into_iter().filter(|p| is_image(p)) {
            let stem = file_stem(&file);
            match mask_owner(&stem) {
                Some(owner) => masks.entry(owner.to_string()).or_default().push(file),
                None => {
                    images.insert(stem, file);
                }
            }
        }
        for (owner, files) in &masks {
            if !images.contains_key(owner) {
                for f in files {
                    out.issues.push(ValidationIssue {
                        path: f.clone(),
                        problem: "mask without image".into(),
                    });
                }
            }
        }
        for (stem, image) in images {
            let mut mask_files = masks.remove(&stem).unwrap_or_default();
            mask_files.sort();
            if mask_files.is_empty() && category != NORMAL {
                out.issues.push(ValidationIssue {
                    path: image,
                    problem: format!("no mask for a '{category}' image; excluded"),
                });
                continue;
            }
            out.records.push(SampleRecord {
                id: stem,
                image,
                masks: mask_files,
                category: category.clone(),
                fold: None,
            });
        }
    }
    Ok(())
}

fn scan_generic(root: &Path, out: &mut ScanResult) -> Result<()> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    if !img_dir.is_dir() {
        return Err(Error::Data(format!(
            "generic layout expects an images/ directory under {}",
            root.display()
        )));
    }
    for image in list_dir(&img_dir)?.into_iter().filter(|p| is_image(p)) {
        let mask = mask_dir.join(image.file_name().expect("listed file has a name"));
        if !mask.is_file() {
            out.issues.push(ValidationIssue {
                path: image,
                problem: "no mask with the same file name; excluded".into(),
            });
            continue;
        }
        out.records.push(SampleRecord {
            id: file_stem(&image),
            image,
            masks: vec![mask],
            category: "lesion".into(),
            fold: None,
        });
    }
    Ok(())
}

/// List and pair the samples under `root`, sorted by id.
pub fn scan_dataset(root: &Path, layout: Layout) -> Result<ScanResult> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} does not exist", root.display())));
    }
    let mut out = ScanResult::default();
    match layout {
        Layout::Busi => scan_busi(root, &mut out)?,
        Layout::Generic => scan_generic(root, &mut out)?,
    }
    for r in &out.records {
        check_readable(&r.image)?;
        for m in &r.masks {
            check_readable(m)?;
        }
    }
    out.records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen = std::collections::BTreeSet::new();
    for r in &out.records {
        if !seen.insert(&r.id) {
            return Err(Error::Data(format!("duplicate sample id '{}'", r.id)));
        }
    }
    if out.records.is_empty() {
        log::warn!("no samples found under {}", root.display());
    }
    for issue in &out.issues {
        log::warn!("{}: {}", issue.path.display(), issue.problem);
    }
    Ok(out)
}
