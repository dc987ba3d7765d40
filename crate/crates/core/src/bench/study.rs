use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use numcore::StreamKey;

use super::answerer::Answerer;
use super::generators::ImageGenerator;
use super::metrics::{
    consistency_from_images, diversity, frechet_distance, generate_all, mean_pairwise, tta_from_images, Consistency,
    Diversity, ScoreAveraging,
};
use crate::error::{Error, Result};
use crate::models::Models;
use crate::sceneworld::{ContextPair, Image, Task};

/// Maps images to feature vectors for diversity and Frechet metrics.
pub trait Featurizer: Sync {
    fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>>;
}

/// Pooled Z of the evaluator image branch.
impl Featurizer for Models {
    fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        self.image_features(images)
    }
}

/// Raw pixels as features.
pub struct PixelFeatures;

impl Featurizer for PixelFeatures {
    fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        Ok(images.iter().map(|i| i.pixels().to_vec()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_seeds: usize,
    pub context_id: u64,
    pub pairwise_gen: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub n_seeds: usize,
    /// Contexts with a defined statistic.
    pub count: usize,
    pub mean: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<SweepSummary>,
}

impl SeedSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_seeds,context_id,pairwise_gen\n");
        for r in &self.rows {
            let v = r.pairwise_gen.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", r.n_seeds, r.context_id, v);
        }
        out
    }

    pub fn summary(&self, n_seeds: usize) -> Option<&SweepSummary> {
        self.summaries.iter().find(|s| s.n_seeds == n_seeds)
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Per-context pairwise diversity of the first `n` seeds for every `n` in
/// `seed_counts`, from one set of `max(seed_counts)` generations.
pub fn seed_sweep(
    contexts: &[ContextPair],
    generator: &dyn ImageGenerator,
    featurizer: &dyn Featurizer,
    seed_counts: &[usize],
    key: StreamKey,
) -> Result<SeedSweep> {
    let max = seed_counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::Config("seed_counts must contain a positive count".into()));
    }
    let generated = generate_all(contexts, generator, max, key)?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut features = Vec::with_capacity(contexts.len());
    for imgs in &generated {
        let refs: Vec<&Image> = imgs.iter().collect();
        features.push(featurizer.features(&refs)?);
    }
    for &n in seed_counts {
        let mut values = Vec::new();
        for (c, f) in contexts.iter().zip(&features) {
            let p = if n == 0 { None } else { mean_pairwise(&f[..n])? };
            if let Some(v) = p {
                values.push(v);
            }
            rows.push(SweepRow {
                n_seeds: n,
                context_id: c.id,
                pairwise_gen: p,
            });
        }
        values.sort_by(f64::total_cmp);
        summaries.push(SweepSummary {
            n_seeds: n,
            count: values.len(),
            mean: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
            q1: quantile(&values, 0.25),
            median: quantile(&values, 0.5),
            q3: quantile(&values, 0.75),
        });
    }
    Ok(SeedSweep { rows, summaries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub eval_contexts: usize,
    /// Generated images per context for consistency and diversity.
    pub n_seeds: usize,
    /// Generated images added to the reference for test-time augmentation.
    pub k_generated: usize,
    pub averaging: ScoreAveraging,
    pub ddim_steps: usize,
    pub seed_counts: Vec<usize>,
    pub sweep_contexts: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            eval_contexts: 500,
            n_seeds: 3,
            k_generated: 3,
            averaging: ScoreAveraging::Raw,
            ddim_steps: 10,
            seed_counts: vec![10, 20, 50],
            sweep_contexts: 20,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_contexts == 0 || self.n_seeds == 0 || self.ddim_steps == 0 || self.sweep_contexts == 0 {
            return Err(Error::Config("bench counts and ddim_steps must be positive".into()));
        }
        if self.seed_counts.is_empty() || self.seed_counts.contains(&0) {
            return Err(Error::Config("seed_counts must be non-empty and positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub acc: f64,
    pub acc_plus: f64,
    pub consistency: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub generator: String,
    /// Answerer used for TTA accuracy.
    pub answerer: String,
    /// Answerer used for consistency.
    pub fidelity_answerer: String,
    pub overall: TaskRow,
    pub tasks: BTreeMap<Task, TaskRow>,
    pub diversity: Diversity,
    pub frechet: f64,
    pub seeds: usize,
    pub k_generated: usize,
    pub contexts: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,acc,acc_plus,consistency,pairs\n");
        let mut line = |name: &str, r: &TaskRow| {
            let _ = writeln!(out, "{},{},{},{},{}", name, r.acc, r.acc_plus, r.consistency, r.pairs);
        };
        for (t, r) in &self.tasks {
            line(t.name(), r);
        }
        line("overall", &self.overall);
        out
    }
}

/// Metrics of one generator over a fixed evaluation set, computed from a
/// single batch of generations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMetrics {
    pub consistency: Consistency,
    pub diversity: Diversity,
    pub frechet: f64,
}

pub struct Evaluation {
    pub report: EvalReport,
    pub metrics: GeneratorMetrics,
}

fn generated_features(featurizer: &dyn Featurizer, generated: &[Vec<Image>]) -> Result<Vec<Vec<Vec<f64>>>> {
    generated
        .iter()
        .map(|imgs| featurizer.features(&imgs.iter().collect::<Vec<_>>()))
        .collect()
}

/// Consistency, diversity and Frechet distance from `n_seeds` generations.
pub fn generator_metrics(
    contexts: &[ContextPair],
    generator: &dyn ImageGenerator,
    answerer: &dyn Answerer,
    featurizer: &dyn Featurizer,
    n_seeds: usize,
    key: StreamKey,
) -> Result<GeneratorMetrics> {
    let generated = generate_all(contexts, generator, n_seeds, key)?;
    metrics_from_images(contexts, &generated, answerer, featurizer)
}

fn metrics_from_images(
    contexts: &[ContextPair],
    generated: &[Vec<Image>],
    answerer: &dyn Answerer,
    featurizer: &dyn Featurizer,
) -> Result<GeneratorMetrics> {
    let consistency = consistency_from_images(contexts, generated, answerer)?;
    let references: Vec<Image> = contexts.iter().map(|c| c.image()).collect();
    let ref_features = featurizer.features(&references.iter().collect::<Vec<_>>())?;
    let gen_features = generated_features(featurizer, generated)?;
    let pooled: Vec<Vec<f64>> = gen_features.iter().flatten().cloned().collect();
    Ok(GeneratorMetrics {
        consistency,
        diversity: diversity(&ref_features, &gen_features)?,
        frechet: frechet_distance(&ref_features, &pooled)?,
    })
}

/// Full benchmark of one generator: TTA accuracy of `answerer` with the
/// first `k_generated` images, consistency of `fidelity_answerer` and
/// diversity over `n_seeds`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    contexts: &[ContextPair],
    generator: &dyn ImageGenerator,
    answerer: &dyn Answerer,
    fidelity_answerer: &dyn Answerer,
    featurizer: &dyn Featurizer,
    cfg: &BenchConfig,
    config_hash: &str,
    key: StreamKey,
) -> Result<Evaluation> {
    cfg.validate()?;
    let n = cfg.n_seeds.max(cfg.k_generated);
    let generated = generate_all(contexts, generator, n, key)?;
    let tta_sets: Vec<Vec<Image>> = generated.iter().map(|g| g[..cfg.k_generated].to_vec()).collect();
    let tta = tta_from_images(contexts, &tta_sets, answerer, cfg.averaging)?;
    let metric_sets: Vec<Vec<Image>> = generated.iter().map(|g| g[..cfg.n_seeds].to_vec()).collect();
    let metrics = metrics_from_images(contexts, &metric_sets, fidelity_answerer, featurizer)?;
    let mut tasks = BTreeMap::new();
    for (t, a) in &tta.per_task {
        tasks.insert(
            *t,
            TaskRow {
                acc: a.acc,
                acc_plus: a.acc_plus,
                consistency: metrics.consistency.per_task.get(t).copied().unwrap_or(0.0),
                pairs: a.pairs,
            },
        );
    }
    let report = EvalReport {
        generator: generator.name().to_string(),
        answerer: answerer.name().to_string(),
        fidelity_answerer: fidelity_answerer.name().to_string(),
        overall: TaskRow {
            acc: tta.overall.acc,
            acc_plus: tta.overall.acc_plus,
            consistency: metrics.consistency.rate,
            pairs: tta.overall.pairs,
        },
        tasks,
        diversity: metrics.diversity,
        frechet: metrics.frechet,
        seeds: cfg.n_seeds,
        k_generated: cfg.k_generated,
        contexts: contexts.len(),
        config_hash: config_hash.to_string(),
    };
    Ok(Evaluation { report, metrics })
}
