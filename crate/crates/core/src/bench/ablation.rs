use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use numcore::StreamKey;

use super::answerer::Answerer;
use super::generators::DiffusionGenerator;
use super::study::{generator_metrics, quantile, BenchConfig, Featurizer, GeneratorMetrics};
use crate::diffusion::attach_adapters;
use crate::error::Result;
use crate::models::Models;
use crate::rewardft::{finetune, FinetuneConfig, FinetuneOutcome};
use crate::sceneworld::{ContextPair, Task};

/// Tasks whose answer consistency is the headline fidelity measure.
pub const FIDELITY_TASKS: [Task; 2] = [Task::Count, Task::Color];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSetting {
    pub name: String,
    /// `None` for the base model without fine-tuning.
    pub weights: Option<(f64, f64)>,
}

pub fn standard_settings() -> Vec<RewardSetting> {
    let s = |name: &str, weights| RewardSetting {
        name: name.to_string(),
        weights,
    };
    vec![
        s("both_rewards", Some((1.0, 1.0))),
        s("fine_only", Some((0.0, 1.0))),
        s("global_only", Some((1.0, 0.0))),
        s("no_finetune", None),
    ]
}

/// One trained (or base) generator evaluated on the shared contexts.
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub seed: Option<u64>,
    pub metrics: GeneratorMetrics,
    /// Held-out objective gain from fine-tuning.
    pub reward_gain: Option<f64>,
}

/// Attaches fresh adapters to a copy of `base` and fine-tunes them with
/// keys derived from `seed`.
pub fn finetune_variant(
    base: &Models,
    train: &[ContextPair],
    heldout: &[ContextPair],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(Models, FinetuneOutcome)> {
    let mut models = base.clone();
    models.lora_scale = cfg.adapter.scale;
    let root = StreamKey::root(seed);
    if !models.denoiser.iter().any(|p| crate::nn::is_adapter(&p.name)) {
        attach_adapters(&mut models.denoiser, &cfg.adapter, root.child("adapters"))?;
    }
    let outcome = finetune(&mut models, train, heldout, cfg, root.child("finetune"))?;
    Ok((models, outcome))
}

pub fn evaluate_variant(
    models: &Models,
    eval_contexts: &[ContextPair],
    answerer: &dyn Answerer,
    bench: &BenchConfig,
    key: StreamKey,
) -> Result<GeneratorMetrics> {
    let generator = DiffusionGenerator {
        models,
        steps: bench.ddim_steps,
    };
    generator_metrics(eval_contexts, &generator, answerer, models as &dyn Featurizer, bench.n_seeds, key)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub seeds: usize,
    /// Consistency on the count and color tasks, median over seeds.
    pub fidelity: f64,
    pub consistency: f64,
    pub per_task: BTreeMap<Task, f64>,
    pub ref_vs_gen: f64,
    pub pairwise_gen: Option<f64>,
    pub frechet: f64,
    pub reward_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub both_rewards: f64,
    pub no_finetune: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub directional: Option<DirectionalCheck>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

fn median_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    median(&v)
}

impl AblationRow {
    pub fn from_runs(setting: &RewardSetting, runs: &[VariantRun], contexts: &[ContextPair]) -> Self {
        let med = |f: &dyn Fn(&VariantRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>()).unwrap_or(0.0);
        let mut per_task = BTreeMap::new();
        for t in Task::ALL {
            let v: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.metrics.consistency.per_task.get(&t).copied())
                .collect();
            if let Some(m) = median(&v) {
                per_task.insert(t, m);
            }
        }
        AblationRow {
            setting: setting.name.clone(),
            lambda1: setting.weights.map(|w| w.0),
            lambda2: setting.weights.map(|w| w.1),
            seeds: runs.len(),
            fidelity: med(&|r| r.metrics.consistency.rate_over(contexts, &FIDELITY_TASKS)),
            consistency: med(&|r| r.metrics.consistency.rate),
            per_task,
            ref_vs_gen: med(&|r| r.metrics.diversity.ref_vs_gen),
            pairwise_gen: median_opt(runs.iter().map(|r| r.metrics.diversity.pairwise_gen)),
            frechet: med(&|r| r.metrics.frechet),
            reward_gain: median_opt(runs.iter().map(|r| r.reward_gain)),
        }
    }
}

impl AblationReport {
    pub fn from_rows(rows: Vec<AblationRow>) -> Self {
        let find = |name: &str| rows.iter().find(|r| r.setting == name).map(|r| r.fidelity);
        let directional = match (find("both_rewards"), find("no_finetune")) {
            (Some(both_rewards), Some(no_finetune)) => Some(DirectionalCheck {
                both_rewards,
                no_finetune,
                holds: both_rewards >= no_finetune,
            }),
            _ => None,
        };
        Self { rows, directional }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "setting,lambda1,lambda2,seeds,fidelity,consistency,existence,count,position,color,scene,ref_vs_gen,pairwise_gen,frechet,reward_gain\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let tasks: Vec<String> = Task::ALL.iter().map(|t| opt(r.per_task.get(t).copied())).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.setting,
                opt(r.lambda1),
                opt(r.lambda2),
                r.seeds,
                r.fidelity,
                r.consistency,
                tasks.join(","),
                r.ref_vs_gen,
                opt(r.pairwise_gen),
                r.frechet,
                opt(r.reward_gain),
            );
        }
        out
    }
}

/// Fine-tunes every reward setting for each seed, evaluates the results and
/// the untouched base model on `eval_contexts`, and tabulates medians.
#[allow(clippy::too_many_arguments)]
pub fn ablation_harness(
    base: &Models,
    train: &[ContextPair],
    heldout: &[ContextPair],
    eval_contexts: &[ContextPair],
    ft: &FinetuneConfig,
    bench: &BenchConfig,
    answerer: &dyn Answerer,
    seeds: &[u64],
    key: StreamKey,
) -> Result<AblationReport> {
    let eval_key = key.child("eval");
    let mut rows = Vec::new();
    for setting in standard_settings() {
        let runs = match setting.weights {
            None => vec![VariantRun {
                seed: None,
                metrics: evaluate_variant(base, eval_contexts, answerer, bench, eval_key)?,
                reward_gain: None,
            }],
            Some((lambda1, lambda2)) => {
                let cfg = FinetuneConfig {
                    lambda1,
                    lambda2,
                    ..ft.clone()
                };
                let mut runs = Vec::new();
                for &seed in seeds {
                    let (models, outcome) = finetune_variant(base, train, heldout, &cfg, seed)?;
                    runs.push(VariantRun {
                        seed: Some(seed),
                        metrics: evaluate_variant(&models, eval_contexts, answerer, bench, eval_key)?,
                        reward_gain: Some(outcome.gain()),
                    });
                }
                runs
            }
        };
        rows.push(AblationRow::from_runs(&setting, &runs, eval_contexts));
    }
    Ok(AblationReport::from_rows(rows))
}
