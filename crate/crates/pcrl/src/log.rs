//! JSON-lines training log: one object per optimizer step and per epoch.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use pcrl_core::pretrain::{EpochSummary, StepRecord};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEntry {
    Step(StepRecord),
    Epoch(EpochSummary),
}

pub struct TrainingLog {
    path: PathBuf,
    file: File,
}

impl TrainingLog {
    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, entry: &LogEntry) -> Result<()> {
        let mut line = serde_json::to_string(entry).expect("log entry serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).at(&self.path)
    }

    pub fn read(path: &Path) -> Result<Vec<LogEntry>> {
        let f = File::open(path).at(path)?;
        BufReader::new(f)
            .lines()
            .map(|l| {
                let l = l.at(path)?;
                serde_json::from_str(&l).map_err(|e| Error::CorruptArchive {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
            })
            .collect()
    }
}
