//! Experiment configuration files.

use std::path::{Path, PathBuf};

use l2d_core::base_lm::{BaseLmConfig, PositionEncoding, PretrainConfig};
use l2d_core::diffusion_path::PathConfig;
use l2d_core::inference::{PredictionMode, SolverKind, SolverSpec};
use l2d_core::training::{BaselineConfig, TrainConfig};
use l2d_core::{L2dError, Result};
use serde::{Deserialize, Serialize};

use crate::tasks::{TaskKind, TaskSizes};

/// Environment variable naming the directory experiments write under.
pub const ARTIFACT_ROOT_ENV: &str = "L2D_ARTIFACT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Path evaluations per token for the step sweep.
    pub budgets: Vec<usize>,
    /// Final token temperature; 0 is greedy.
    pub temperature: f64,
    pub mode: PredictionMode,
    /// Caps the number of test examples scored per arm.
    #[serde(default)]
    pub max_examples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Guidance strengths; empty skips the guidance sweep.
    #[serde(default)]
    pub guidance: Vec<f64>,
    pub guidance_budget: usize,
    /// Noise scales to retrain and compare; empty skips the sweep.
    #[serde(default)]
    pub sigma: Vec<f64>,
    pub sigma_budget: usize,
    /// Solvers compared at matched settings; empty skips the bench.
    #[serde(default)]
    pub solvers: Vec<SolverSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineArm {
    pub tasks: Vec<TaskKind>,
    /// Runs on the first `n_seeds` experiment seeds.
    pub n_seeds: usize,
    pub lora: BaselineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seeds of the trained arms; data and the main path use `data_seed`.
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub tasks: Vec<TaskKind>,
    pub sizes: TaskSizes,
    pub base: BaseLmConfig,
    pub pretrain: PretrainConfig,
    pub path: PathConfig,
    pub l2d: TrainConfig,
    /// Plain LoRA finetuning of the main path; absent skips the arm.
    #[serde(default)]
    pub baseline: Option<BaselineArm>,
    pub eval: EvalConfig,
    pub sweeps: SweepConfig,
}

impl ExperimentConfig {
    /// A desk-scale configuration that trains in minutes on one core.
    pub fn toy() -> Self {
        let sizes = TaskSizes {
            n_train: 20_000,
            n_val: 256,
            n_test: 500,
            n_symbols: 16,
            payload_len: 4,
            n_operands: 2,
            n_pairs: 6,
            prime: 7,
        };
        Self {
            name: "toy".into(),
            seeds: vec![1, 2, 3, 4, 5],
            data_seed: 0,
            tasks: vec![TaskKind::KeyedRecall, TaskKind::ModularSum],
            base: BaseLmConfig {
                vocab_size: sizes.vocab_size(),
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                max_seq_len: 24,
                position_encoding: PositionEncoding::Rotary,
                mlp_ratio: 4,
                rope_base: 10_000.0,
            },
            sizes,
            pretrain: PretrainConfig {
                steps: 1000,
                seed: 0,
                eval_every: 250,
                ..PretrainConfig::default()
            },
            path: PathConfig {
                diffusion_dim: 32,
                time_dim: 32,
                cond_hidden: 64,
                lora_rank: 8,
                lora_alpha: 16.0,
                n_classes: 4,
                ..PathConfig::default()
            },
            l2d: TrainConfig {
                lr_peak: 2e-3,
                lr_floor: 2e-5,
                warmup: 30,
                max_steps: Some(2000),
                eval_every: 500,
                ..TrainConfig::default()
            },
            baseline: Some(BaselineArm {
                tasks: TaskKind::ALL.to_vec(),
                n_seeds: 1,
                lora: BaselineConfig {
                    train: TrainConfig {
                        lr_peak: 1e-3,
                        lr_floor: 1e-5,
                        warmup: 30,
                        max_steps: Some(600),
                        class_dropout: 0.0,
                        eval_every: 200,
                        ..TrainConfig::default()
                    },
                    ..BaselineConfig::default()
                },
            }),
            eval: EvalConfig {
                budgets: vec![1, 2, 4, 8, 15, 31],
                temperature: 0.0,
                mode: PredictionMode::default(),
                max_examples: None,
            },
            sweeps: SweepConfig {
                guidance: vec![0.0, 1.0, 1.5, 2.0],
                guidance_budget: 15,
                sigma: vec![],
                sigma_budget: 15,
                solvers: vec![
                    SolverSpec::fixed(SolverKind::Euler, 8),
                    SolverSpec::fixed(SolverKind::Midpoint, 8),
                    SolverSpec::fixed(SolverKind::Rk4, 8),
                    SolverSpec::adaptive(3e-4, 3e-4),
                ],
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| L2dError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            L2dError::Config(m) => L2dError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment configs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(L2dError::Config(format!(
                "name '{}' must be a plain directory name",
                self.name
            )));
        }
        if self.seeds.is_empty() {
            return Err(L2dError::Config("seeds must not be empty".into()));
        }
        if self.tasks.is_empty() {
            return Err(L2dError::Config("tasks must not be empty".into()));
        }
        for &k in &TaskKind::ALL {
            self.sizes.validate(k)?;
        }
        self.base.validate()?;
        if self.base.vocab_size != self.sizes.vocab_size() {
            return Err(L2dError::Config(format!(
                "base.vocab_size {} does not match the task vocabulary {}",
                self.base.vocab_size,
                self.sizes.vocab_size()
            )));
        }
        if self.base.max_seq_len < self.sizes.max_len() {
            return Err(L2dError::Config(format!(
                "base.max_seq_len {} is shorter than the longest example {}",
                self.base.max_seq_len,
                self.sizes.max_len()
            )));
        }
        self.path.validate()?;
        if self.path.n_classes < TaskKind::ALL.len() {
            return Err(L2dError::Config(format!(
                "path.n_classes must cover the {} task classes",
                TaskKind::ALL.len()
            )));
        }
        self.l2d.validate()?;
        if let Some(b) = &self.baseline {
            b.lora.train.validate()?;
            if b.n_seeds == 0 || b.n_seeds > self.seeds.len() {
                return Err(L2dError::Config(format!(
                    "baseline.n_seeds must be in 1..={}",
                    self.seeds.len()
                )));
            }
        }
        if self.eval.budgets.is_empty() || self.eval.budgets.contains(&0) {
            return Err(L2dError::Config("eval.budgets must be non-empty and positive".into()));
        }
        for s in &self.sweeps.solvers {
            s.validate()?;
        }
        for &w in &self.sweeps.guidance {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(L2dError::Config(format!("guidance strength {w} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// `$L2D_ARTIFACT_ROOT/<name>`, or `artifacts/<name>` when unset.
pub fn artifact_dir(name: &str) -> PathBuf {
    let root = std::env::var_os(ARTIFACT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("artifacts"));
    root.join(name)
}
