//! JSON-lines session logs: a meta header, then every message in and out
//! with a server timestamp.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DuetError, Result};
use crate::session::EpisodeMeta;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Meta,
    In,
    Out,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Milliseconds since the server started.
    pub ts_ms: f64,
    pub dir: Direction,
    /// Connection the message came from or went to; `None` for broadcasts.
    pub conn: Option<u64>,
    pub msg: serde_json::Value,
}

pub struct EpisodeLog {
    path: PathBuf,
    w: BufWriter<File>,
}

impl EpisodeLog {
    pub fn create(dir: &Path, meta: &EpisodeMeta, ts_ms: f64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}-ep{:03}.jsonl", meta.session_id, meta.episode));
        let mut log = Self {
            w: BufWriter::new(File::create(&path)?),
            path,
        };
        log.write(&LogRecord {
            ts_ms,
            dir: Direction::Meta,
            conn: None,
            msg: serde_json::to_value(meta)?,
        })?;
        Ok(log)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, rec: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.w, rec)?;
        self.w.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Header and records of a log file.
pub fn read_log(path: &Path) -> Result<(EpisodeMeta, Vec<LogRecord>)> {
    let bad = |reason: String| DuetError::BadLog {
        path: path.to_path_buf(),
        reason,
    };
    let mut records = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    let Some(first) = records.first().filter(|r| r.dir == Direction::Meta) else {
        return Err(bad("missing meta header".into()));
    };
    let meta: EpisodeMeta = serde_json::from_value(first.msg.clone()).map_err(|e| bad(format!("meta: {e}")))?;
    records.remove(0);
    Ok((meta, records))
}
