use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{EpochRecord, Observer, PhaseResult, RunOutcome, StepRecord};
use crate::error::{ItlError, Result};
use crate::memory::MemoryStore;
use crate::metrics::metrics_csv;
use crate::model::{save_checkpoint, ModelBundle};

/// Persists a run under one directory:
///
/// ```text
/// train_log.jsonl              one StepRecord per optimizer step
/// epochs.jsonl                 one EpochRecord per epoch
/// checkpoints/phase<i>_<site>.safetensors
/// memory/phase<i>_<site>.json  memory manifest after the phase
/// results/phase<i>_<site>.json PhaseResult
/// outcome.json, metrics.csv    written by `finish`
/// ```
pub struct RunWriter {
    dir: PathBuf,
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| ItlError::io(path, e))?))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| ItlError::io(path, e))
}

fn write_line<T: serde::Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n").map_err(|e| ItlError::io(path, e))
}

impl RunWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        for sub in ["checkpoints", "memory", "results"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| ItlError::io(&d, e))?;
        }
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            steps: create(&dir.join("train_log.jsonl"))?,
            epochs: create(&dir.join("epochs.jsonl"))?,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn stem(result: &PhaseResult) -> String {
        format!("phase{}_{}", result.phase_index, result.trained_site)
    }

    /// Flushes the logs and writes the run summary and metrics CSV.
    pub fn finish(mut self, outcome: &RunOutcome) -> Result<()> {
        let log = self.dir.join("train_log.jsonl");
        self.steps.flush().map_err(|e| ItlError::io(&log, e))?;
        self.epochs.flush().map_err(|e| ItlError::io(&log, e))?;
        write_json(&self.dir.join("outcome.json"), outcome)?;
        let csv_path = self.dir.join("metrics.csv");
        fs::write(&csv_path, metrics_csv(&outcome.metrics_rows())?).map_err(|e| ItlError::io(&csv_path, e))
    }
}

impl Observer for RunWriter {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        write_line(&mut self.steps, &self.dir.join("train_log.jsonl"), record)
    }

    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        write_line(&mut self.epochs, &self.dir.join("epochs.jsonl"), record)
    }

    fn on_phase_end(&mut self, result: &PhaseResult, model: &ModelBundle, memory: &MemoryStore) -> Result<()> {
        let stem = Self::stem(result);
        save_checkpoint(model, &self.dir.join("checkpoints").join(format!("{stem}.safetensors")))?;
        write_json(&self.dir.join("memory").join(format!("{stem}.json")), &memory.manifest())?;
        write_json(&self.dir.join("results").join(format!("{stem}.json")), result)
    }
}
