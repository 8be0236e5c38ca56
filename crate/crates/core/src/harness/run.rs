//! File-backed run directory: append-only CSV metrics (flushed per row)
//! and named checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::metrics::{MetricsRow, RunSink, CSV_HEADER};
use crate::nn::VelocityModel;

pub struct RunDir {
    dir: PathBuf,
    csv: BufWriter<File>,
    schedule_id: String,
    config_digest: [u8; 32],
}

impl RunDir {
    /// Create (or truncate) `<dir>/metrics.csv` and remember the config
    /// identity for checkpoints.
    pub fn create(dir: &Path, schedule_id: &str, config_digest: [u8; 32]) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(dir.join("metrics.csv"))?;
        let mut csv = BufWriter::new(file);
        writeln!(csv, "{CSV_HEADER}")?;
        csv.flush()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            csv,
            schedule_id: schedule_id.to_string(),
            config_digest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.dnft"))
    }
}

impl RunSink for RunDir {
    fn emit(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.csv, "{}", row.to_csv())?;
        self.csv.flush()?;
        Ok(())
    }

    fn save_checkpoint(&mut self, name: &str, model: &VelocityModel) -> Result<()> {
        super::checkpoint::save_checkpoint(
            &self.checkpoint_path(name),
            model,
            &self.schedule_id,
            self.config_digest,
        )
    }
}
