use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ctxdiff::bench::{BenchConfig, NeuralAnswererConfig};
use ctxdiff::diffusion::pretrain::DiffusionTrainConfig;
use ctxdiff::evaluator::EvaluatorTrainConfig;
use ctxdiff::rewardft::FinetuneConfig;
use ctxdiff::sceneworld::{DescriptionMode, SceneConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<ctxdiff::Error> for ConfigError {
    fn from(e: ctxdiff::Error) -> Self {
        match e {
            ctxdiff::Error::Config(msg) => ConfigError::Invalid(msg),
            other => ConfigError::Invalid(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: usize,
    pub heldout: usize,
    pub eval: usize,
    pub description_mode: DescriptionMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 20_000,
            heldout: 2_000,
            eval: 500,
            description_mode: DescriptionMode::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswererKind {
    RasterOracle,
    #[default]
    Neural,
}

/// Answerer used for TTA accuracy; consistency always uses the raster
/// oracle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnswererConfig {
    pub kind: AnswererKind,
    pub neural: NeuralAnswererConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Training seeds per reward setting.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub evaluator: EvaluatorTrainConfig,
    pub diffusion: DiffusionTrainConfig,
    pub finetune: FinetuneConfig,
    pub bench: BenchConfig,
    pub answerer: AnswererConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scene.validate()?;
        self.evaluator.validate()?;
        self.diffusion.validate()?;
        self.finetune.validate()?;
        self.bench.validate()?;
        let d = &self.data;
        if d.train == 0 || d.heldout < 2 || d.eval == 0 {
            return Err(ConfigError::Invalid(
                "data needs train > 0, heldout >= 2 and eval > 0 contexts".into(),
            ));
        }
        let needs = [
            ("evaluator.train_pairs", self.evaluator.train_pairs, d.train, "data.train"),
            ("evaluator.heldout_pairs", self.evaluator.heldout_pairs, d.heldout, "data.heldout"),
            ("diffusion.train_items", self.diffusion.train_items, d.train, "data.train"),
            ("diffusion.val_items", self.diffusion.val_items, d.heldout, "data.heldout"),
            ("finetune.heldout_contexts", self.finetune.heldout_contexts, d.heldout, "data.heldout"),
            ("bench.eval_contexts", self.bench.eval_contexts, d.eval, "data.eval"),
            ("bench.sweep_contexts", self.bench.sweep_contexts, d.eval, "data.eval"),
        ];
        for (what, n, have, split) in needs {
            if n > have {
                return Err(ConfigError::Invalid(format!("{what} = {n} exceeds {split} = {have}")));
            }
        }
        let a = &self.answerer.neural;
        if a.batch_size == 0 || !(0.0..=0.5).contains(&a.label_noise) || !(a.lr > 0.0) {
            return Err(ConfigError::Invalid(
                "answerer.neural needs batch_size > 0, lr > 0 and label_noise in [0, 0.5]".into(),
            ));
        }
        if self.ablation.seeds.is_empty() {
            return Err(ConfigError::Invalid("ablation.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Parses and validates a strict JSON config. Absent keys take defaults;
/// unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}
