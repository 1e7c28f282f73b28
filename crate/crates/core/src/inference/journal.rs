use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{sort_records, PredictionKey, PredictionRecord};
use crate::error::{Error, Result};

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

/// Append-only JSON Lines log of prediction records.
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    pub fn open(path: impl Into<PathBuf>) -> Result<Journal> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Journal { path, file })
    }

    pub fn append(&mut self, record: &PredictionRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads every record in journal order. A torn final line (an interrupted
/// append) is ignored; malformed lines elsewhere are errors.
pub fn read_journal(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PredictionRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Keeps the last record written for each key, sorted by key.
pub fn latest_by_key(records: Vec<PredictionRecord>) -> Vec<PredictionRecord> {
    let mut map: BTreeMap<PredictionKey, PredictionRecord> = BTreeMap::new();
    for r in records {
        map.insert(r.key(), r);
    }
    let mut out: Vec<PredictionRecord> = map.into_values().collect();
    sort_records(&mut out);
    out
}

/// Writes the canonical sorted prediction file. Wall-clock timestamps are
/// dropped so identical runs produce identical bytes.
pub fn write_sorted_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &sorted {
        let mut r = r.clone();
        r.timestamp_ms = None;
        let line = serde_json::to_string(&r)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
