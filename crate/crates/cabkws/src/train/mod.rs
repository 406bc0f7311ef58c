//! Training: the optimizer, the pretrain and fine-tune loops, evaluation,
//! gradient checking, and the pretrain-step sweep.

mod adam;
mod eval;
mod gradcheck;
mod loops;
mod sweep;

pub use adam::{clip_global_norm, Adam};
pub use eval::{evaluate, evaluate_features, EvalReport};
pub use gradcheck::{grad_check, GradCheckReport, ObjectiveReport, TensorCoverage, FD_STEP, REL_TOLERANCE};
pub use loops::{
    finetune, pretrain, step_checkpoint_name, FinetuneOutcome, PretrainOutcome, BEST_CHECKPOINT,
    FINAL_CHECKPOINT, METRICS_FILE, SUMMARY_FILE,
};
pub use sweep::{step_sweep, SweepRow, SWEEP_FILE};

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossBreakdown;

/// Optimization hyperparameters shared by both training phases.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub grad_clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fine-tune only the bottleneck and projection heads.
    pub freeze_backbone: bool,
    /// Add the weighted dual contrastive term to the fine-tuning objective.
    pub finetune_use_dual: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            pretrain_steps: 1000,
            finetune_steps: 2000,
            seed: 0,
            eval_every: 200,
            grad_clip_norm: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            freeze_backbone: false,
            finetune_use_dual: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config(format!("adam_eps must be positive, got {}", self.adam_eps)));
        }
        Ok(())
    }
}

/// One metrics line per training step. Wall-clock timing is reported on
/// stderr instead of here so that reruns with the same seed produce
/// byte-identical metrics files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_acc: Option<f64>,
}

/// Buffered JSON-lines writer for step metrics.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let out = BufWriter::new(File::create(path)?);
        Ok(MetricsWriter { out, path: path.to_path_buf() })
    }

    pub fn write(&mut self, metrics: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(metrics)
            .map_err(|e| Error::Parse(format!("metrics serialization: {e}")))?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.out.flush()?;
        Ok(self.path)
    }
}
