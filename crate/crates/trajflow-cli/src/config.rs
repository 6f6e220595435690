//! Run configuration: one JSON document naming the task, model, loss weights,
//! training schedule, and inference solver.
//!
//! The `loss` and `seed` entries at the top level are conveniences that
//! override the corresponding fields inside `train`; `resolved()` folds them
//! in and materializes every default so the copy written next to a run's
//! outputs reproduces it exactly.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use trajflow::losses::LossConfig;
use trajflow::solvers::SolverConfig;
use trajflow::tasks::Task;
use trajflow::train::TrainConfig;
use trajflow::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelConfig,
    /// Loss weights; takes precedence over `train.loss_config` when present.
    #[serde(default)]
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Solver used for periodic and final evaluation.
    #[serde(default)]
    pub solver: SolverConfig,
    /// Where run outputs land; flags and `TRAJFLOW_OUT_ROOT` can override.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Master seed; takes precedence over `train.seed` when present.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Reads and validates a run config, reporting the offending field or
    /// line on failure.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.task.validate().context("task section")?;
        config.model.validate().context("model section")?;
        if let Some(loss) = &config.loss {
            loss.validate().context("loss section")?;
        }
        config.train_config().validate().context("train section")?;
        config.solver.validate().context("solver section")?;
        if config.model.action_dim != config.task.action_dim()
            || config.model.cond_dim != config.task.cond_dim()
        {
            anyhow::bail!(
                "model dims (action {}, cond {}) do not match the task's (action {}, cond {})",
                config.model.action_dim,
                config.model.cond_dim,
                config.task.action_dim(),
                config.task.cond_dim()
            );
        }
        Ok(config)
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    /// The train section with the top-level seed and loss overrides applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut train = self.train.clone();
        train.seed = self.effective_seed();
        if let Some(loss) = &self.loss {
            train.loss_config = loss.clone();
        }
        train
    }

    /// A copy with every override folded in and every default materialized,
    /// suitable for writing next to the run outputs.
    pub fn resolved(&self, output_dir: &Path) -> RunConfig {
        let train = self.train_config();
        RunConfig {
            task: self.task.clone(),
            model: self.model.clone(),
            loss: Some(train.loss_config.clone()),
            train,
            solver: self.solver,
            output_dir: Some(output_dir.to_path_buf()),
            seed: Some(self.effective_seed()),
        }
    }
}

/// Output directory precedence: explicit flag, then the config's `output_dir`,
/// then `$TRAJFLOW_OUT_ROOT/<config stem>`, then `./runs/<config stem>`.
pub fn resolve_output_dir(flag: Option<&Path>, config: &RunConfig, config_path: &Path) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Some(dir) = &config.output_dir {
        return dir.clone();
    }
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    match std::env::var_os("TRAJFLOW_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(stem),
        None => PathBuf::from("runs").join(stem),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunConfig {
        serde_json::from_str(
            r#"{
                "task": {"name": "toy1d"},
                "model": {"action_dim": 1, "cond_dim": 0}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn top_level_seed_wins_over_train_seed() {
        let mut config = minimal();
        config.train.seed = 7;
        assert_eq!(config.effective_seed(), 7);
        config.seed = Some(42);
        assert_eq!(config.effective_seed(), 42);
        assert_eq!(config.train_config().seed, 42);
    }

    #[test]
    fn top_level_loss_overrides_train_loss() {
        let mut config = minimal();
        config.train.loss_config.lambda_vel = 0.5;
        assert_eq!(config.train_config().loss_config.lambda_vel, 0.5);
        let mut loss = LossConfig::default();
        loss.lambda_vel = 0.25;
        config.loss = Some(loss);
        assert_eq!(config.train_config().loss_config.lambda_vel, 0.25);
    }

    #[test]
    fn resolved_copy_materializes_every_override() {
        let mut config = minimal();
        config.seed = Some(9);
        let resolved = config.resolved(Path::new("out"));
        assert_eq!(resolved.seed, Some(9));
        assert_eq!(resolved.train.seed, 9);
        assert!(resolved.loss.is_some());
        assert_eq!(resolved.output_dir.as_deref(), Some(Path::new("out")));
        // A resolved copy loads back to the same effective settings.
        let text = serde_json::to_string(&resolved).unwrap();
        let reread: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(reread.effective_seed(), 9);
    }

    #[test]
    fn output_dir_precedence() {
        let mut config = minimal();
        let path = Path::new("configs/demo.json");
        assert_eq!(
            resolve_output_dir(Some(Path::new("explicit")), &config, path),
            PathBuf::from("explicit")
        );
        config.output_dir = Some(PathBuf::from("from-config"));
        assert_eq!(
            resolve_output_dir(None, &config, path),
            PathBuf::from("from-config")
        );
        config.output_dir = None;
        // The environment fallback is exercised in the end-to-end CLI tests;
        // here only the last resort.
        if std::env::var_os("TRAJFLOW_OUT_ROOT").is_none() {
            assert_eq!(
                resolve_output_dir(None, &config, path),
                PathBuf::from("runs").join("demo")
            );
        }
    }

    #[test]
    fn mismatched_model_and_task_dims_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(
            &path,
            r#"{"task": {"name": "toy1d"}, "model": {"action_dim": 2, "cond_dim": 0}}"#,
        )
        .unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("do not match"));
    }
}
