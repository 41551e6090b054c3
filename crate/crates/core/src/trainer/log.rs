use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step {
        step: u64,
        epoch: usize,
        lr: f64,
        terms: BTreeMap<String, f64>,
    },
    Epoch {
        epoch: usize,
        train_loss: f64,
        val: Option<BTreeMap<String, f64>>,
        wall_clock_s: f64,
    },
}

/// In-memory run log, mirrored line by line to a JSON-lines file.
#[derive(Default)]
pub struct RunLog {
    pub entries: Vec<LogEntry>,
    sink: Option<(BufWriter<File>, std::path::PathBuf)>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            entries: Vec::new(),
            sink: Some((BufWriter::new(f), path.to_path_buf())),
        })
    }

    pub fn push(&mut self, entry: LogEntry) -> Result<()> {
        if let Some((w, path)) = self.sink.as_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((w, path)) = self.sink.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    pub fn steps(&self) -> impl Iterator<Item = (u64, usize, f64, &BTreeMap<String, f64>)> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Step { step, epoch, lr, terms } => Some((*step, *epoch, *lr, terms)),
            _ => None,
        })
    }

    /// Total loss of every step, in order.
    pub fn losses(&self) -> Vec<f64> {
        self.steps().map(|(_, _, _, t)| t["total"]).collect()
    }

    pub fn read(path: &Path) -> Result<Vec<LogEntry>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}
