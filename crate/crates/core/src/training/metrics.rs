//! Append-only metrics TSV: run-id, epoch, split, metric, value.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub fn metric_line(run_id: &str, epoch: usize, split: &str, metric: &str, value: f64) -> String {
    format!("{run_id}\t{epoch}\t{split}\t{metric}\t{value}\n")
}

#[derive(Debug)]
pub struct MetricsLog {
    run_id: String,
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    /// Opens `path` for appending, creating it if needed.
    pub fn open(path: &Path, run_id: impl Into<String>) -> Result<Self> {
        let run_id = run_id.into();
        if run_id.is_empty() || run_id.contains(['\t', '\n']) {
            return Err(Error::Config(format!("run id `{run_id}` must be non-empty without tabs or newlines")));
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            run_id,
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, epoch: usize, split: &str, metric: &str, value: f64) -> Result<()> {
        let line = metric_line(&self.run_id, epoch, split, metric, value);
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}
