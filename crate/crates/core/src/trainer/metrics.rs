use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Append-only JSON-lines event log. Keys are written in sorted order, so
/// identical runs produce identical files.
#[derive(Debug)]
pub struct MetricsLog {
    path: Option<PathBuf>,
    lines: Vec<String>,
}

impl MetricsLog {
    /// A log that keeps events in memory only.
    pub fn in_memory() -> Self {
        Self { path: None, lines: Vec::new() }
    }

    /// Opens `path`, keeping only its first `keep` lines (the rest belong to
    /// work after the checkpoint being resumed). A missing file starts empty.
    pub fn open(path: &Path, keep: usize) -> Result<Self> {
        let mut lines = Vec::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines().take(keep) {
                lines.push(line.map_err(|e| Error::io(path, e))?);
            }
        }
        if lines.len() < keep {
            return Err(Error::Checkpoint(format!(
                "{} has {} lines but the checkpoint expects {keep}",
                path.display(),
                lines.len()
            )));
        }
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        for l in &lines {
            writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            lines,
        })
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn log(&mut self, event: Map<String, Value>) -> Result<()> {
        let line = serde_json::to_string(&Value::Object(event))?;
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.lines.push(line);
        Ok(())
    }
}

/// Common fields of every event.
pub(crate) fn event(kind: &str, stage: &str, round: usize, iteration: usize) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("event".into(), kind.into());
    m.insert("stage".into(), stage.into());
    m.insert("round".into(), round.into());
    m.insert("iteration".into(), iteration.into());
    m
}

/// Inserts a float, writing non-finite values as `null`.
pub(crate) fn put(m: &mut Map<String, Value>, key: &str, v: f64) {
    m.insert(key.into(), serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number));
}
