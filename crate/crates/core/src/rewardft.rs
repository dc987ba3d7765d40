//! Reward fine-tuning of denoiser adapters by backpropagating evaluator
//! rewards through the last steps of a DDIM rollout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use numcore::{hbt, AdamWConfig, NumError, OptimState, ParamStore, Stream, StreamKey, Tape, Tensor};

use crate::diffusion::denoiser::adapted_layers;
use crate::diffusion::sample::initial_noise;
use crate::diffusion::AdapterConfig;
use crate::encoders::encode_image;
use crate::error::{Error, Result};
use crate::evaluator::{qformer_forward, reward_fine_var, reward_global_var};
use crate::models::{Conditioning, Models};
use crate::nn::{is_adapter, Net};
use crate::sceneworld::ContextPair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub ddim_steps: usize,
    #[serde(rename = "grad_last_K", alias = "grad_last_k")]
    pub grad_last_k: usize,
    pub lr: f64,
    pub accumulation: usize,
    /// Optimizer steps.
    pub max_steps: usize,
    pub eval_every: usize,
    pub heldout_contexts: usize,
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub adapter: AdapterConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            ddim_steps: 10,
            grad_last_k: 3,
            lr: 1e-4,
            accumulation: 8,
            max_steps: 200,
            eval_every: 10,
            heldout_contexts: 200,
            plateau_window: 5,
            plateau_tolerance: 1e-3,
            adapter: AdapterConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) || !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad(format!("reward weights must be non-negative, got ({}, {})", self.lambda1, self.lambda2));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return bad("lambda1 and lambda2 cannot both be zero".into());
        }
        if self.ddim_steps == 0 {
            return bad("ddim_steps must be positive".into());
        }
        if self.grad_last_k == 0 || self.grad_last_k > self.ddim_steps {
            return bad(format!(
                "grad_last_K must be in 1..={}, got {}",
                self.ddim_steps, self.grad_last_k
            ));
        }
        if self.accumulation == 0 || self.eval_every == 0 || self.plateau_window == 0 {
            return bad("accumulation, eval_every and plateau_window must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.plateau_tolerance >= 0.0) {
            return bad("lr must be positive and plateau_tolerance non-negative".into());
        }
        if self.adapter.rank == 0 || !self.adapter.scale.is_finite() {
            return bad("adapter rank must be positive".into());
        }
        Ok(())
    }

    /// The fine-tuning objective `l1 * r_global + l2 * r_fine`.
    pub fn objective(&self, r_global: f64, r_fine: f64) -> f64 {
        self.lambda1 * r_global + self.lambda2 * r_fine
    }
}

/// One micro-step: rewards on the generated image, the loss and the
/// adapter gradients (zeros for adapters outside the tracked steps).
#[derive(Clone, Debug)]
pub struct StepResult {
    pub loss: f64,
    pub r_global: f64,
    pub r_fine: f64,
    pub grads: BTreeMap<String, Tensor>,
}

pub struct RewardVars {
    /// Mean of `-(lambda1 * r_global + lambda2 * r_fine)` over the batch.
    pub loss: numcore::Var,
    /// `B x 1`.
    pub r_global: numcore::Var,
    /// `B x 1`.
    pub r_fine: numcore::Var,
}

/// Rolls out DDIM for every row of `cond` from `z_init` and scores the
/// decoded images against the descriptions.
pub fn rewards_on_tape(
    tape: &mut Tape,
    models: &Models,
    cond: &Conditioning,
    z_init: Tensor,
    cfg: &FinetuneConfig,
) -> Result<RewardVars> {
    let rollout = models
        .generator()
        .ddim_sample(tape, z_init, &cond.i_e, &cond.t_e, cfg.ddim_steps, cfg.grad_last_k)?;
    let t_tokens = tape.constant(cond.t_tokens.clone());
    let t_cls = tape.constant(cond.t_cls.clone());
    let mut net = Net::new(tape, &models.evaluator);
    let iv = encode_image(&mut net, rollout.images)?;
    let ev = qformer_forward(&mut net, iv.tokens, t_tokens)?;
    let r_global = reward_global_var(tape, ev.z, t_cls)?;
    let r_fine = reward_fine_var(tape, ev.logits)?;
    let a = tape.scale(r_global, cfg.lambda1)?;
    let b = tape.scale(r_fine, cfg.lambda2)?;
    let total = tape.add(a, b)?;
    let neg = tape.scale(total, -1.0)?;
    let loss = tape.mean_all(neg)?;
    Ok(RewardVars { loss, r_global, r_fine })
}

/// A single reward fine-tuning micro-step on one context.
///
/// Conditioning uses the reference image and the stored context
/// description. Fails with a non-finite error if the loss is NaN/Inf.
pub fn finetune_step(
    models: &Models,
    context: &ContextPair,
    cfg: &FinetuneConfig,
    stream: &mut Stream,
) -> Result<StepResult> {
    let cond = models.condition_contexts(&[context])?;
    step_on(models, &cond, cfg, stream)
}

fn step_on(models: &Models, cond: &Conditioning, cfg: &FinetuneConfig, stream: &mut Stream) -> Result<StepResult> {
    let z = initial_noise(1, stream);
    let mut tape = Tape::new();
    let vars = rewards_on_tape(&mut tape, models, cond, z, cfg)?;
    let loss = tape.value(vars.loss).item();
    let r_global = tape.value(vars.r_global).item();
    let r_fine = tape.value(vars.r_fine).item();
    if !loss.is_finite() {
        return Err(Error::Num(NumError::NonFinite { op: "reward_loss" }));
    }
    let tracked = tape.backward(vars.loss)?.params(&tape);
    if let Some(name) = tracked.keys().find(|n| !is_adapter(n)) {
        return Err(Error::Eval(format!("gradient reached non-adapter parameter {name}")));
    }
    let mut grads = BTreeMap::new();
    for p in models.denoiser.iter().filter(|p| is_adapter(&p.name)) {
        let g = tracked
            .get(&p.name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
        grads.insert(p.name.clone(), g);
    }
    Ok(StepResult {
        loss,
        r_global,
        r_fine,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub r_global: f64,
    pub r_fine: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

/// Append-only per-optimizer-step record of rewards, loss and gradient norm.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    rows: Vec<LogRow>,
}

impl ConvergenceLog {
    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Eval(format!(
                    "log steps must increase: {} after {}",
                    row.step, last.step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,r_global,r_fine,loss,grad_norm,wall_ms\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.r_global, r.r_fine, r.loss, r.grad_norm, r.wall_ms
            );
        }
        out
    }

    /// Mean `r_fine` over the first and last `window` rows.
    pub fn fine_windows(&self, window: usize) -> Option<(f64, f64)> {
        if self.rows.is_empty() || window == 0 {
            return None;
        }
        let w = window.min(self.rows.len());
        let mean = |rows: &[LogRow]| rows.iter().map(|r| r.r_fine).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.rows[..w]), mean(&self.rows[self.rows.len() - w..])))
    }
}

/// Held-out reward means at one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutPoint {
    pub step: usize,
    pub r_global: f64,
    pub r_fine: f64,
    pub objective: f64,
}

/// Mean rewards of fresh rollouts (one fixed noise draw per context from
/// `key`) on the held-out conditioning.
pub fn heldout_rewards(
    models: &Models,
    cond: &Conditioning,
    cfg: &FinetuneConfig,
    key: StreamKey,
) -> Result<(f64, f64)> {
    const CHUNK: usize = 25;
    let n = cond.len();
    if n == 0 {
        return Err(Error::Eval("held-out set is empty".into()));
    }
    let eval_cfg = FinetuneConfig {
        grad_last_k: 0,
        ..cfg.clone()
    };
    let (mut sum_g, mut sum_f) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let part = cond.slice(start, end)?;
        let mut noise = Vec::new();
        for i in start..end {
            noise.extend_from_slice(initial_noise(1, &mut key.index(i as u64).stream()).data());
        }
        let (rows, c) = initial_noise(1, &mut key.stream()).dims2()?;
        let z = Tensor::new([rows * (end - start), c], noise)?;
        let mut tape = Tape::no_grad();
        let vars = rewards_on_tape(&mut tape, models, &part, z, &eval_cfg)?;
        sum_g += tape.value(vars.r_global).data().iter().sum::<f64>();
        sum_f += tape.value(vars.r_fine).data().iter().sum::<f64>();
        start = end;
    }
    Ok((sum_g / n as f64, sum_f / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Plateau,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub log: ConvergenceLog,
    /// Held-out evaluations, starting with the pre-finetune value at step 0.
    pub heldout: Vec<HeldoutPoint>,
    pub stop: StopReason,
    /// Micro-steps whose loss was non-finite, as `(optimizer step, index)`.
    pub skipped: Vec<(usize, usize)>,
}

impl FinetuneOutcome {
    pub fn initial(&self) -> &HeldoutPoint {
        &self.heldout[0]
    }

    pub fn last(&self) -> &HeldoutPoint {
        self.heldout.last().unwrap_or(&self.heldout[0])
    }

    pub fn gain(&self) -> f64 {
        self.last().objective - self.initial().objective
    }
}

/// SHA-256 over the names and HBT1 payloads of every non-adapter tensor.
pub fn frozen_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for p in store.iter().filter(|p| !is_adapter(&p.name)) {
        h.update(p.name.as_bytes());
        h.update(hbt::to_bytes(&p.value));
    }
    hex::encode(h.finalize())
}

/// Fine-tunes the adapters of `models.denoiser` on `train` contexts,
/// evaluating on `heldout` every `eval_every` optimizer steps.
pub fn finetune(
    models: &mut Models,
    train: &[ContextPair],
    heldout: &[ContextPair],
    cfg: &FinetuneConfig,
    key: StreamKey,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Config("fine-tuning needs train and held-out contexts".into()));
    }
    for name in adapted_layers() {
        if !models.denoiser.contains(&format!("{name}.lora_a")) {
            return Err(Error::Checkpoint(format!("denoiser has no adapter for {name}")));
        }
    }
    models.freeze_base();
    let started = Instant::now();
    let held_refs: Vec<&ContextPair> = heldout.iter().collect();
    let held_cond = models.condition_contexts(&held_refs)?;
    let held_key = key.child("heldout");
    let point = |models: &Models, step: usize| -> Result<HeldoutPoint> {
        let (g, f) = heldout_rewards(models, &held_cond, cfg, held_key)?;
        Ok(HeldoutPoint {
            step,
            r_global: g,
            r_fine: f,
            objective: cfg.objective(g, f),
        })
    };
    let mut heldout_log = vec![point(models, 0)?];
    let mut log = ConvergenceLog::default();
    let mut skipped = Vec::new();
    let mut stop = StopReason::MaxSteps;
    let mut opt = OptimState::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut pick = key.child("pick").stream();
    for step in 0..cfg.max_steps {
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let (mut sum_g, mut sum_f, mut n_ok) = (0.0, 0.0, 0usize);
        for m in 0..cfg.accumulation {
            let ctx = &train[pick.below(train.len())];
            let mut s = key.child("rollout").index((step * cfg.accumulation + m) as u64).stream();
            match finetune_step(models, ctx, cfg, &mut s) {
                Ok(r) => {
                    for (name, g) in r.grads {
                        match acc.get_mut(&name) {
                            Some(a) => a.axpy(1.0, &g)?,
                            None => {
                                acc.insert(name, g);
                            }
                        }
                    }
                    sum_g += r.r_global;
                    sum_f += r.r_fine;
                    n_ok += 1;
                }
                Err(Error::Num(NumError::NonFinite { .. })) => skipped.push((step, m)),
                Err(e) => return Err(e),
            }
        }
        if n_ok == 0 {
            return Err(Error::Divergence {
                step,
                detail: "every micro-step produced a non-finite loss".into(),
            });
        }
        let inv = 1.0 / n_ok as f64;
        let mut sq = 0.0;
        for g in acc.values_mut() {
            *g = g.map(|x| x * inv);
            sq += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        opt.step(&mut models.denoiser, &acc).map_err(|e| match e {
            NumError::NonFinite { op } => Error::Divergence {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => Error::Num(other),
        })?;
        for p in models.denoiser.iter_mut().filter(|p| is_adapter(&p.name)) {
            p.value.round_to_f32();
        }
        let (r_global, r_fine) = (sum_g * inv, sum_f * inv);
        log.push(LogRow {
            step: step + 1,
            r_global,
            r_fine,
            loss: -(cfg.lambda1 * r_global + cfg.lambda2 * r_fine),
            grad_norm: sq.sqrt(),
            wall_ms: started.elapsed().as_millis() as u64,
        })?;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps {
            heldout_log.push(point(models, step + 1)?);
            let n = heldout_log.len();
            if n > cfg.plateau_window {
                let gain = heldout_log[n - 1].objective - heldout_log[n - 1 - cfg.plateau_window].objective;
                if gain < cfg.plateau_tolerance && step + 1 < cfg.max_steps {
                    stop = StopReason::Plateau;
                    break;
                }
            }
        }
    }
    Ok(FinetuneOutcome {
        log,
        heldout: heldout_log,
        stop,
        skipped,
    })
}
