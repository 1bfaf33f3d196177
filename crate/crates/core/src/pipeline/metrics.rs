use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Steps per second for this step alone.
    pub sps: f64,
    pub real: usize,
    pub synthetic: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub held_out_loss: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub ratio: f64,
    /// Component name to parameter content hash.
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub manifest: RunManifest,
    pub records: Vec<MetricsRecord>,
    pub evals: Vec<EvalRecord>,
}

impl MetricsLog {
    pub fn new(manifest: RunManifest) -> Self {
        MetricsLog {
            manifest,
            records: Vec::new(),
            evals: Vec::new(),
        }
    }

    /// Appends a record; steps must strictly increase.
    pub fn push(&mut self, r: MetricsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            ensure!(
                r.step > last.step,
                Contract,
                "step {} does not follow {}",
                r.step,
                last.step
            );
        }
        self.records.push(r);
        Ok(())
    }

    /// `step,loss,lr,sps` with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "step,loss,lr,sps").map_err(io)?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.step, r.loss, r.lr, r.sps).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}
