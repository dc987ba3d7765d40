use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use numcore::{AdamWConfig, NumError, OptimState, ParamStore, Stream, StreamKey, Tape, Tensor};

use super::model::{qformer_forward, reward_global_var, EvalVars};
use crate::encoders::{encode_image, encode_text, ImageVars, TextVars, TokenIds};
use crate::error::{Error, Result};
use crate::nn::Net;
use crate::sceneworld::image::{Image, IMAGE_LEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorTrainConfig {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub temperature: f64,
    pub eval_every: usize,
    /// Held-out pairs scored for the training-curve AUC column.
    pub curve_eval_pairs: usize,
}

impl Default for EvaluatorTrainConfig {
    fn default() -> Self {
        Self {
            train_pairs: 10_000,
            heldout_pairs: 2_000,
            batch_size: 32,
            steps: 1_200,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 50,
            temperature: 0.07,
            eval_every: 200,
            curve_eval_pairs: 256,
        }
    }
}

impl EvaluatorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("evaluator batch_size must be at least 2".into()));
        }
        if !(self.temperature > 0.0) || !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("evaluator temperature and lr must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// One (image, description) pair.
#[derive(Clone, Debug)]
pub struct Pair {
    pub image: Image,
    pub ids: TokenIds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub itc_loss: f64,
    pub itm_loss: f64,
    pub val_auc: Option<f64>,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("step,itc_loss,itm_loss,val_auc\n");
    for r in rows {
        let auc = r.val_auc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.step, r.itc_loss, r.itm_loss, auc);
    }
    out
}

/// Area under the ROC curve of `pos` vs `neg` scores (ties count half).
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // average 1-based rank of the tie group
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let np = pos.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * neg.len() as f64)
}

/// In-batch symmetric contrastive loss between row-aligned `a` and `b`.
fn contrastive(tape: &mut Tape, a: numcore::Var, b: numcore::Var, temperature: f64) -> Result<numcore::Var> {
    let (n, _) = tape.value(a).dims2()?;
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let sim = tape.matmul_nt(an, bn)?;
    let sim = tape.scale(sim, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..n).collect();
    let l1 = tape.cross_entropy_rows(sim, &targets)?;
    let simt = tape.transpose(sim)?;
    let l2 = tape.cross_entropy_rows(simt, &targets)?;
    let l = tape.add(l1, l2)?;
    Ok(tape.scale(l, 0.5)?)
}

/// Index of an in-batch negative for item `i`: another item whose
/// description differs, when one exists.
fn negative_index(batch: &[&Pair], i: usize, stream: &mut Stream) -> usize {
    let n = batch.len();
    let start = stream.below(n - 1);
    for k in 0..n - 1 {
        let j = (i + 1 + (start + k) % (n - 1)) % n;
        if batch[j].ids != batch[i].ids {
            return j;
        }
    }
    (i + 1 + start) % n
}

pub struct Forward {
    pub image: ImageVars,
    pub text: TextVars,
    pub eval: EvalVars,
}

/// Encodes `images[i]` with `texts[i]` and runs the evaluator on each pair.
pub fn forward_pairs(net: &mut Net, images: &[&Image], texts: &[&TokenIds]) -> Result<Forward> {
    let data: Vec<f64> = images.iter().flat_map(|i| i.pixels().iter().copied()).collect();
    let x = net.tape.constant(Tensor::new([images.len(), IMAGE_LEN], data)?);
    let image = encode_image(net, x)?;
    let owned: Vec<TokenIds> = texts.iter().map(|t| (*t).clone()).collect();
    let text = encode_text(net, &owned)?;
    let eval = qformer_forward(net, image.tokens, text.tokens)?;
    Ok(Forward { image, text, eval })
}

struct StepLosses {
    itc: f64,
    itm: f64,
}

fn train_step(
    params: &mut ParamStore,
    opt: &mut OptimState,
    batch: &[&Pair],
    cfg: &EvaluatorTrainConfig,
    stream: &mut Stream,
) -> Result<StepLosses> {
    let b = batch.len();
    let negs: Vec<usize> = (0..b).map(|i| negative_index(batch, i, stream)).collect();
    let mut tape = Tape::new();
    let mut net = Net::new(&mut tape, params);
    let images: Vec<&Image> = batch.iter().chain(batch.iter()).map(|p| &p.image).collect();
    let texts: Vec<&TokenIds> = batch
        .iter()
        .map(|p| &p.ids)
        .chain(negs.iter().map(|&j| &batch[j].ids))
        .collect();
    let fw = forward_pairs(&mut net, &images, &texts)?;
    let tape = net.tape;

    // positives are the first b rows of every batched output
    let first: Vec<usize> = (0..b).collect();
    let z_pos_rows: Vec<usize> = (0..b * super::model::N_QUERIES).collect();
    let z = tape.select_rows(fw.eval.z, &z_pos_rows)?;
    let z_pool = tape.block_mean_rows(z, super::model::N_QUERIES)?;
    let t_cls = tape.select_rows(fw.text.cls, &first)?;
    let itc = contrastive(tape, z_pool, t_cls, cfg.temperature)?;

    let i_e = tape.select_rows(fw.image.e, &first)?;
    let t_e = tape.select_rows(fw.text.e, &first)?;
    let cond = contrastive(tape, i_e, t_e, cfg.temperature)?;

    let targets: Vec<usize> = (0..2 * b).map(|i| usize::from(i < b)).collect();
    let itm = tape.cross_entropy_rows(fw.eval.logits, &targets)?;

    let loss = tape.add(itc, itm)?;
    let loss = tape.add(loss, cond)?;
    let (itc_v, itm_v) = (tape.value(itc).item(), tape.value(itm).item());
    let grads = tape.backward(loss)?.params(tape);
    opt.step(params, &grads)?;
    Ok(StepLosses { itc: itc_v, itm: itm_v })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutStats {
    pub auc: f64,
    pub r_global_matched: f64,
    pub r_global_shuffled: f64,
    pub r_fine_matched: f64,
    pub r_fine_shuffled: f64,
}

impl HeldoutStats {
    pub fn global_gap(&self) -> f64 {
        self.r_global_matched - self.r_global_shuffled
    }
}

/// Scores every held-out pair against its own description and against the
/// description of a different item.
pub fn evaluate_heldout(params: &ParamStore, pairs: &[Pair], key: StreamKey) -> Result<HeldoutStats> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Eval("need at least two held-out pairs".into()));
    }
    let offset = 1 + key.child("shuffle").stream().below(n - 1);
    let shuffled: Vec<usize> = (0..n)
        .map(|i| {
            (0..n - 1)
                .map(|k| (i + offset + k) % n)
                .find(|&j| j != i && pairs[j].ids != pairs[i].ids)
                .unwrap_or((i + offset) % n)
        })
        .collect();
    let mut score_pos = Vec::with_capacity(n);
    let mut score_neg = Vec::with_capacity(n);
    let (mut gm, mut gs, mut fm, mut fs) = (0.0, 0.0, 0.0, 0.0);
    const CHUNK: usize = 64;
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let images: Vec<&Image> = idx.iter().chain(&idx).map(|&i| &pairs[i].image).collect();
        let texts: Vec<&TokenIds> = idx
            .iter()
            .map(|&i| &pairs[i].ids)
            .chain(idx.iter().map(|&i| &pairs[shuffled[i]].ids))
            .collect();
        let mut tape = Tape::no_grad();
        let mut net = Net::new(&mut tape, params);
        let fw = forward_pairs(&mut net, &images, &texts)?;
        let rg = reward_global_var(&mut tape, fw.eval.z, fw.text.cls)?;
        let logits = tape.value(fw.eval.logits).clone();
        let rg = tape.value(rg).clone();
        let m = idx.len();
        for k in 0..2 * m {
            let score = logits.get2(k, 1) - logits.get2(k, 0);
            if k < m {
                score_pos.push(score);
                gm += rg.get2(k, 0);
                fm += logits.get2(k, 1);
            } else {
                score_neg.push(score);
                gs += rg.get2(k, 0);
                fs += logits.get2(k, 1);
            }
        }
    }
    let nf = n as f64;
    Ok(HeldoutStats {
        auc: auc(&score_pos, &score_neg),
        r_global_matched: gm / nf,
        r_global_shuffled: gs / nf,
        r_fine_matched: fm / nf,
        r_fine_shuffled: fs / nf,
    })
}

pub struct EvaluatorTraining {
    pub curve: Vec<CurveRow>,
}

/// Jointly trains the encoders and the evaluator in `params` (a merged
/// store) on `train`, logging held-out AUC on `curve_pairs`.
pub fn pretrain_evaluator(
    params: &mut ParamStore,
    train: &[Pair],
    curve_pairs: &[Pair],
    cfg: &EvaluatorTrainConfig,
    key: StreamKey,
) -> Result<EvaluatorTraining> {
    cfg.validate()?;
    if train.len() < cfg.batch_size {
        return Err(Error::Config("fewer training pairs than one batch".into()));
    }
    let mut opt = OptimState::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        opt.config.lr = lr_at(cfg.lr, step, cfg.warmup_steps, cfg.steps);
        let mut stream = key.child("step").index(step as u64).stream();
        let batch: Vec<&Pair> = (0..cfg.batch_size)
            .map(|_| &train[stream.below(train.len())])
            .collect();
        let losses = train_step(params, &mut opt, &batch, cfg, &mut stream).map_err(|e| match e {
            Error::Num(NumError::NonFinite { op }) => Error::Divergence {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        let done = step + 1;
        let val_auc = if done % cfg.eval_every == 0 || done == cfg.steps {
            if curve_pairs.len() >= 2 {
                Some(evaluate_heldout(params, curve_pairs, key.child("curve"))?.auc)
            } else {
                None
            }
        } else {
            None
        };
        curve.push(CurveRow {
            step: done,
            itc_loss: losses.itc,
            itm_loss: losses.itm,
            val_auc,
        });
    }
    params.round_to_f32();
    Ok(EvaluatorTraining { curve })
}

/// Linear warmup then cosine decay to 10% of the base rate.
pub fn lr_at(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let p = ((step - warmup) as f64 / span).min(1.0);
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(auc(&[0.0, 1.0], &[2.0, 3.0]), 0.0);
        assert_eq!(auc(&[1.0], &[1.0]), 0.5);
        // brute-force pair counting
        let pos = [0.3, 0.9, 0.5, 0.5];
        let neg = [0.1, 0.5, 0.7];
        let mut wins = 0.0;
        for p in pos {
            for q in neg {
                wins += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
            }
        }
        assert!((auc(&pos, &neg) - wins / 12.0).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_shape() {
        assert!((lr_at(1.0, 0, 10, 100) - 0.1).abs() < 1e-12);
        assert!((lr_at(1.0, 10, 10, 100) - 1.0).abs() < 1e-12);
        assert!((lr_at(1.0, 100, 10, 100) - 0.1).abs() < 1e-12);
    }
}
