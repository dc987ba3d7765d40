use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use numcore::StreamKey;

use super::answerer::Answerer;
use super::generators::{generate_set, ImageGenerator};
use crate::error::{Error, Result};
use crate::sceneworld::{ContextPair, Image, Task};

/// ACC and ACC+ percentages from per-pair correctness.
pub fn acc_metrics(pairs: &[(bool, bool)]) -> (f64, f64) {
    if pairs.is_empty() {
        return (0.0, 0.0);
    }
    let correct: usize = pairs.iter().map(|&(a, b)| usize::from(a) + usize::from(b)).sum();
    let both = pairs.iter().filter(|&&(a, b)| a && b).count();
    (
        100.0 * correct as f64 / (2 * pairs.len()) as f64,
        100.0 * both as f64 / pairs.len() as f64,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAveraging {
    /// Mean of raw answerer scores.
    #[default]
    Raw,
    /// Mean of logistic probabilities, thresholded at 0.5.
    Probability,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccPair {
    pub acc: f64,
    pub acc_plus: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaResult {
    pub overall: AccPair,
    pub per_task: BTreeMap<Task, AccPair>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Images per context, in context order: `n_seeds` generated images each.
pub fn generate_all(
    contexts: &[ContextPair],
    generator: &dyn ImageGenerator,
    n_seeds: usize,
    key: StreamKey,
) -> Result<Vec<Vec<Image>>> {
    contexts
        .par_iter()
        .map(|c| generate_set(c, generator, n_seeds, key))
        .collect()
}

fn question_tokens(c: &ContextPair) -> [&[crate::vocab::Token]; 2] {
    [&c.positive.question, &c.negative.question]
}

/// Whether each of the context's two questions is answered correctly when
/// scores are averaged over `images`.
pub fn pair_correctness(
    context: &ContextPair,
    images: &[&Image],
    answerer: &dyn Answerer,
    averaging: ScoreAveraging,
) -> Result<(bool, bool)> {
    if images.is_empty() {
        return Err(Error::Eval("no images to score".into()));
    }
    let qs = question_tokens(context);
    let mut sums = [0.0; 2];
    for img in images {
        let s = answerer.scores(img, &qs)?;
        for k in 0..2 {
            sums[k] += match averaging {
                ScoreAveraging::Raw => s[k],
                ScoreAveraging::Probability => sigmoid(s[k]),
            };
        }
    }
    let n = images.len() as f64;
    let mut correct = [false; 2];
    for (k, g) in context.questions().iter().enumerate() {
        let mean = sums[k] / n;
        let yes = match averaging {
            ScoreAveraging::Raw => mean > 0.0,
            ScoreAveraging::Probability => mean > 0.5,
        };
        correct[k] = yes == g.parsed()?.answer_for(&context.scene).is_yes();
    }
    Ok((correct[0], correct[1]))
}

fn summarize(contexts: &[ContextPair], outcomes: &[(bool, bool)]) -> TtaResult {
    let mut by_task: BTreeMap<Task, Vec<(bool, bool)>> = BTreeMap::new();
    for (c, &o) in contexts.iter().zip(outcomes) {
        by_task.entry(c.task).or_default().push(o);
    }
    let pack = |p: &[(bool, bool)]| {
        let (acc, acc_plus) = acc_metrics(p);
        AccPair {
            acc,
            acc_plus,
            pairs: p.len(),
        }
    };
    TtaResult {
        overall: pack(outcomes),
        per_task: by_task.iter().map(|(t, p)| (*t, pack(p))).collect(),
    }
}

/// Test-time augmentation: each question is answered from the averaged
/// score over the reference and `k_generated` generated images.
pub fn tta_eval(
    contexts: &[ContextPair],
    answerer: &dyn Answerer,
    generator: &dyn ImageGenerator,
    k_generated: usize,
    averaging: ScoreAveraging,
    key: StreamKey,
) -> Result<TtaResult> {
    let generated = if k_generated == 0 {
        vec![Vec::new(); contexts.len()]
    } else {
        generate_all(contexts, generator, k_generated, key)?
    };
    tta_from_images(contexts, &generated, answerer, averaging)
}

/// As [`tta_eval`] with the generated images supplied.
pub fn tta_from_images(
    contexts: &[ContextPair],
    generated: &[Vec<Image>],
    answerer: &dyn Answerer,
    averaging: ScoreAveraging,
) -> Result<TtaResult> {
    let outcomes: Vec<(bool, bool)> = contexts
        .par_iter()
        .zip(generated)
        .map(|(c, gen)| {
            let reference = c.image();
            let mut images = vec![&reference];
            images.extend(gen.iter());
            pair_correctness(c, &images, answerer, averaging)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(contexts, &outcomes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    /// Percentage of (context, generated image, question) triples where the
    /// answer on the generated image matches the answer on the reference.
    pub rate: f64,
    pub per_task: BTreeMap<Task, f64>,
    pub comparisons: usize,
}

/// Answer agreement between reference and generated images.
pub fn consistency_fidelity(
    contexts: &[ContextPair],
    answerer: &dyn Answerer,
    generator: &dyn ImageGenerator,
    n_seeds: usize,
    key: StreamKey,
) -> Result<Consistency> {
    let generated = generate_all(contexts, generator, n_seeds, key)?;
    consistency_from_images(contexts, &generated, answerer)
}

pub fn consistency_from_images(
    contexts: &[ContextPair],
    generated: &[Vec<Image>],
    answerer: &dyn Answerer,
) -> Result<Consistency> {
    if contexts.len() != generated.len() {
        return Err(Error::Eval("one generated set per context is required".into()));
    }
    let counts: Vec<(Task, usize, usize)> = contexts
        .par_iter()
        .zip(generated)
        .map(|(c, gen)| {
            let qs = question_tokens(c);
            let reference: Vec<bool> = answerer.scores(&c.image(), &qs)?.iter().map(|&s| s > 0.0).collect();
            let mut agree = 0;
            for img in gen {
                let s = answerer.scores(img, &qs)?;
                agree += s.iter().zip(&reference).filter(|(&g, &r)| (g > 0.0) == r).count();
            }
            Ok((c.task, agree, gen.len() * qs.len()))
        })
        .collect::<Result<_>>()?;
    let mut by_task: BTreeMap<Task, (usize, usize)> = BTreeMap::new();
    let (mut agree, mut total) = (0, 0);
    for (t, a, n) in counts {
        let e = by_task.entry(t).or_default();
        e.0 += a;
        e.1 += n;
        agree += a;
        total += n;
    }
    let pct = |a: usize, n: usize| if n == 0 { 0.0 } else { 100.0 * a as f64 / n as f64 };
    Ok(Consistency {
        rate: pct(agree, total),
        per_task: by_task.into_iter().map(|(t, (a, n))| (t, pct(a, n))).collect(),
        comparisons: total,
    })
}

impl Consistency {
    /// Agreement rate restricted to `tasks`, weighting every comparison
    /// equally.
    pub fn rate_over(&self, contexts: &[ContextPair], tasks: &[Task]) -> f64 {
        let (mut w, mut s) = (0.0, 0.0);
        for t in tasks {
            if let Some(r) = self.per_task.get(t) {
                let n = contexts.iter().filter(|c| c.task == *t).count() as f64;
                w += n;
                s += n * r;
            }
        }
        if w == 0.0 {
            0.0
        } else {
            s / w
        }
    }
}

pub fn l2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Eval(format!("feature dimensions differ: {} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub ref_vs_gen: f64,
    /// Absent when no reference has at least two generated images.
    pub pairwise_gen: Option<f64>,
}

/// Mean pairwise L2 distance over unordered pairs, `None` below two items.
pub fn mean_pairwise(features: &[Vec<f64>]) -> Result<Option<f64>> {
    if features.len() < 2 {
        return Ok(None);
    }
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            s += l2(&features[i], &features[j])?;
            n += 1;
        }
    }
    Ok(Some(s / n as f64))
}

pub fn diversity(ref_features: &[Vec<f64>], gen_features: &[Vec<Vec<f64>>]) -> Result<Diversity> {
    if ref_features.len() != gen_features.len() {
        return Err(Error::Eval("one generated feature list per reference is required".into()));
    }
    let (mut rg, mut n_rg) = (0.0, 0usize);
    let (mut pw, mut n_pw) = (0.0, 0usize);
    for (r, gens) in ref_features.iter().zip(gen_features) {
        for g in gens {
            rg += l2(r, g)?;
            n_rg += 1;
        }
        if let Some(p) = mean_pairwise(gens)? {
            pw += p;
            n_pw += 1;
        }
    }
    Ok(Diversity {
        ref_vs_gen: if n_rg == 0 { 0.0 } else { rg / n_rg as f64 },
        pairwise_gen: (n_pw > 0).then(|| pw / n_pw as f64),
    })
}

fn mean_std(features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Eval("feature dimensions differ within a set".into()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for f in features {
        for ((v, x), m) in var.iter_mut().zip(f).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    Ok((mean, var.into_iter().map(|v| (v / n).sqrt()).collect()))
}

/// Diagonal-covariance Frechet distance:
/// `|mu_a - mu_b|^2 + sum_d (sigma_a,d - sigma_b,d)^2` with population
/// standard deviations.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Eval("Frechet distance needs at least two vectors per set".into()));
    }
    let (ma, sa) = mean_std(a)?;
    let (mb, sb) = mean_std(b)?;
    if ma.len() != mb.len() {
        return Err(Error::Eval("feature dimensions differ between sets".into()));
    }
    let mut d = 0.0;
    for i in 0..ma.len() {
        d += (ma[i] - mb[i]).powi(2) + (sa[i] - sb[i]).powi(2);
    }
    Ok(d)
}
