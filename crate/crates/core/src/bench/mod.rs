//! Fidelity and diversity benchmark: test-time augmentation accuracy,
//! answer consistency, feature-space diversity and a seed-count study.

pub mod ablation;
pub mod answerer;
pub mod generators;
pub mod metrics;
pub mod study;

pub use ablation::{ablation_harness, AblationReport, AblationRow, RewardSetting, FIDELITY_TASKS};
pub use answerer::{Answerer, NeuralAnswerer, NeuralAnswererConfig, RasterOracle};
pub use generators::{
    generate_set, ConstantGray, DiffusionGenerator, IdentityGenerator, ImageGenerator, PixelJitter,
};
pub use metrics::{
    acc_metrics, consistency_fidelity, diversity, frechet_distance, tta_eval, Consistency, Diversity,
    ScoreAveraging, TtaResult,
};
pub use study::{evaluate, seed_sweep, BenchConfig, EvalReport, Featurizer, SeedSweep};
