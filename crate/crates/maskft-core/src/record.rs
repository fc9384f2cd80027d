//! Persisted run outcomes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub val_loss: f64,
}

/// One training run's full outcome: config echo, metric curves, artifact
/// references. Serialized as `record.json` in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Short content hash of (stage, seed, plan echo).
    pub run_id: String,
    pub stage: String,
    pub seed: u64,
    /// Echo of the plan this run executed.
    pub plan: serde_json::Value,
    /// Mean batch loss per optimizer step.
    pub train_loss: Vec<f64>,
    /// Validation loss at step 0, every `eval_every` steps, and at the end.
    pub evals: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub final_val_loss: f64,
    pub failed: bool,
    pub fail_reason: Option<String>,
    /// Wall-clock seconds; informational only, never part of any
    /// byte-determinism contract.
    pub wall_clock_secs: f64,
    /// File references, filled by the pipeline once artifacts are written.
    pub checkpoint: Option<String>,
    pub mask_file: Option<String>,
    /// SHA-256 of the base checkpoint this run started from, when any.
    pub base_checkpoint_sha256: Option<String>,
}

impl RunRecord {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Identical metric curves and outcome, ignoring wall-clock time.
    pub fn same_metrics(&self, other: &RunRecord) -> bool {
        let key = |r: &RunRecord| {
            (
                r.train_loss.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                r.evals
                    .iter()
                    .map(|e| (e.step, e.val_loss.to_bits()))
                    .collect::<Vec<_>>(),
                r.best_step,
                r.best_val_loss.to_bits(),
                r.failed,
            )
        };
        key(self) == key(other)
    }
}
