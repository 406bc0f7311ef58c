//! Pretraining-budget sweep: pretrain for each step count, fine-tune with
//! an identical budget and seed, and tabulate eval-split accuracy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BatchBuilder, Split};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, ModelConfig};
use crate::train::eval::evaluate;
use crate::train::loops::{finetune, pretrain};
use crate::train::TrainConfig;

pub const SWEEP_FILE: &str = "sweep.json";

/// One sweep arm: eval accuracy per seed after `pretrain_steps` of
/// pretraining followed by the shared fine-tuning budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub pretrain_steps: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

/// Runs every (pretraining step count, seed) arm and writes the accuracy
/// table to `sweep.json` in `out_dir`. A count of zero fine-tunes from
/// random init. Fine-tuning always selects its best-dev checkpoint, which
/// is what gets scored on the eval split.
pub fn step_sweep(
    builder: &BatchBuilder,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    counts: &[usize],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if counts.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one step count and one seed".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let arm = out_dir.join(format!("pre{count}_seed{seed}"));
            let tc = TrainConfig { pretrain_steps: count, seed, ..train_cfg.clone() };
            let init = if count > 0 {
                Some(pretrain(builder, model_cfg, &tc, &arm.join("pretrain"))?.final_checkpoint)
            } else {
                None
            };
            let outcome =
                finetune(builder, model_cfg, &tc, init.as_deref(), &arm.join("finetune"))?;
            let best = load_checkpoint(&outcome.best_checkpoint)?;
            let report = evaluate(&best, builder, Split::Eval)?;
            eprintln!(
                "sweep arm pretrain={count} seed={seed}: dev {:.4}, eval {:.4}",
                outcome.best_dev_acc, report.accuracy
            );
            accuracies.push(report.accuracy);
        }
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        rows.push(SweepRow {
            pretrain_steps: count,
            seeds: seeds.to_vec(),
            accuracies,
            mean_accuracy: mean,
        });
    }
    let json = serde_json::to_string_pretty(&rows)
        .map_err(|e| Error::Parse(format!("sweep serialization: {e}")))?;
    std::fs::write(out_dir.join(SWEEP_FILE), json + "\n")?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::loops::tests::fixture_builder;

    #[test]
    fn sweep_runs_every_arm_and_writes_the_table() {
        let dir = tempfile::tempdir().unwrap();
        let builder = fixture_builder(3, 4, 31, &dir.path().join("corpus"));
        let cfg = ModelConfig { n_classes: 3, ..ModelConfig::reduced() };
        let tc = TrainConfig {
            batch_size: 3,
            finetune_steps: 2,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let rows =
            step_sweep(&builder, &cfg, &tc, &[0, 2], &[1, 2], dir.path().join("sweep").as_path())
                .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].pretrain_steps, 0);
        assert_eq!(rows[1].pretrain_steps, 2);
        for row in &rows {
            assert_eq!(row.accuracies.len(), 2);
            let mean = row.accuracies.iter().sum::<f64>() / 2.0;
            assert!((row.mean_accuracy - mean).abs() < 1e-15);
            assert!(row.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
        }
        let table = dir.path().join("sweep").join(SWEEP_FILE);
        let parsed: Vec<SweepRow> =
            serde_json::from_str(&std::fs::read_to_string(table).unwrap()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert!(dir
            .path()
            .join("sweep")
            .join("pre2_seed1")
            .join("pretrain")
            .join(crate::train::FINAL_CHECKPOINT)
            .exists());
    }

    #[test]
    fn empty_sweep_axes_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let builder = fixture_builder(2, 2, 32, &dir.path().join("corpus"));
        let cfg = ModelConfig { n_classes: 2, ..ModelConfig::reduced() };
        let tc = TrainConfig::default();
        assert!(matches!(
            step_sweep(&builder, &cfg, &tc, &[], &[1], dir.path()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            step_sweep(&builder, &cfg, &tc, &[100], &[], dir.path()),
            Err(Error::Config(_))
        ));
    }
}
