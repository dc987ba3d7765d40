use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use numcore::{AdamWConfig, NumError, OptimState, ParamStore, StreamKey, Tape, Tensor};

use super::codec::{LATENT_CELLS, LATENT_CHANNELS};
use super::denoiser::denoiser_forward;
use super::schedule::{add_noise, NoiseSchedule};
use crate::encoders::DIM;
use crate::error::{Error, Result};
use crate::evaluator::pretrain::lr_at;
use crate::nn::Net;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainConfig {
    pub train_items: usize,
    pub val_items: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Fraction of steps trained with zeroed conditioning.
    pub cond_dropout: f64,
    pub eval_every: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            train_items: 20_000,
            val_items: 256,
            batch_size: 32,
            steps: 3_000,
            lr: 1e-3,
            weight_decay: 0.0,
            warmup_steps: 100,
            cond_dropout: 0.1,
            eval_every: 250,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("diffusion batch_size and eval_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("cond_dropout must be in [0, 1]".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("diffusion lr must be positive".into()));
        }
        Ok(())
    }
}

/// Encoded training example: clean latent plus its conditioning vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionItem {
    pub z0: Tensor,
    pub i_e: Vec<f64>,
    pub t_e: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,train_loss,val_loss\n");
    for r in rows {
        let v = r.val_loss.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.step, r.train_loss, v);
    }
    out
}

struct Batch {
    z_t: Tensor,
    eps: Tensor,
    t: Vec<usize>,
    i_e: Tensor,
    t_e: Tensor,
}

fn assemble(
    items: &[&DiffusionItem],
    schedule: &NoiseSchedule,
    key: StreamKey,
    drop_cond: bool,
) -> Result<Batch> {
    let mut stream = key.stream();
    let b = items.len();
    let mut z_t = Vec::with_capacity(b * LATENT_CELLS * LATENT_CHANNELS);
    let mut eps_all = Vec::with_capacity(z_t.capacity());
    let mut t = Vec::with_capacity(b);
    let (mut ie, mut te) = (Vec::with_capacity(b * DIM), Vec::with_capacity(b * DIM));
    for item in items {
        let ti = 1 + stream.below(schedule.t_max);
        let eps = Tensor::randn([LATENT_CELLS, LATENT_CHANNELS], 1.0, &mut stream);
        let noisy = add_noise(&item.z0, &eps, schedule.alpha_bar(ti)?)?;
        z_t.extend_from_slice(noisy.data());
        eps_all.extend_from_slice(eps.data());
        t.push(ti);
        if drop_cond {
            ie.extend(std::iter::repeat(0.0).take(DIM));
            te.extend(std::iter::repeat(0.0).take(DIM));
        } else {
            ie.extend_from_slice(&item.i_e);
            te.extend_from_slice(&item.t_e);
        }
    }
    Ok(Batch {
        z_t: Tensor::new([b * LATENT_CELLS, LATENT_CHANNELS], z_t)?,
        eps: Tensor::new([b * LATENT_CELLS, LATENT_CHANNELS], eps_all)?,
        t,
        i_e: Tensor::new([b, DIM], ie)?,
        t_e: Tensor::new([b, DIM], te)?,
    })
}

fn batch_loss(
    tape: &mut Tape,
    params: &ParamStore,
    schedule: &NoiseSchedule,
    batch: &Batch,
) -> Result<numcore::Var> {
    let z = tape.constant(batch.z_t.clone());
    let eps = tape.constant(batch.eps.clone());
    let ie = tape.constant(batch.i_e.clone());
    let te = tape.constant(batch.t_e.clone());
    let mut net = Net::new(tape, params);
    let pred = denoiser_forward(&mut net, schedule, z, &batch.t, ie, te)?;
    Ok(tape.mse(pred, eps)?)
}

/// Mean per-element noise-prediction error on `val`, with timesteps and
/// noise drawn from `key` (identical across calls).
pub fn validation_loss(
    params: &ParamStore,
    val: &[DiffusionItem],
    schedule: &NoiseSchedule,
    key: StreamKey,
) -> Result<f64> {
    const CHUNK: usize = 64;
    let mut total = 0.0;
    for (ci, chunk) in val.chunks(CHUNK).enumerate() {
        let refs: Vec<&DiffusionItem> = chunk.iter().collect();
        let batch = assemble(&refs, schedule, key.index(ci as u64), false)?;
        let mut tape = Tape::no_grad();
        let l = batch_loss(&mut tape, params, schedule, &batch)?;
        total += tape.value(l).item() * chunk.len() as f64;
    }
    Ok(total / val.len().max(1) as f64)
}

pub struct DiffusionTraining {
    pub curve: Vec<LossRow>,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

/// Trains the denoiser on noise prediction with uniformly drawn timesteps.
pub fn pretrain_diffusion(
    params: &mut ParamStore,
    train: &[DiffusionItem],
    val: &[DiffusionItem],
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    key: StreamKey,
) -> Result<DiffusionTraining> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("diffusion training needs train and validation items".into()));
    }
    let val_key = key.child("val");
    let initial_val_loss = validation_loss(params, val, schedule, val_key)?;
    let mut curve = vec![LossRow {
        step: 0,
        train_loss: f64::NAN,
        val_loss: Some(initial_val_loss),
    }];
    let mut opt = OptimState::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut final_val_loss = initial_val_loss;
    for step in 0..cfg.steps {
        opt.config.lr = lr_at(cfg.lr, step, cfg.warmup_steps, cfg.steps);
        let skey = key.child("step").index(step as u64);
        let mut pick = skey.child("pick").stream();
        let items: Vec<&DiffusionItem> = (0..cfg.batch_size)
            .map(|_| &train[pick.below(train.len())])
            .collect();
        let drop_cond = pick.uniform() < cfg.cond_dropout;
        let batch = assemble(&items, schedule, skey.child("noise"), drop_cond)?;
        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, params, schedule, &batch).map_err(|e| match e {
            Error::Num(NumError::NonFinite { op }) => Error::Divergence {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        let train_loss = tape.value(loss).item();
        let grads = tape.backward(loss)?.params(&tape);
        opt.step(params, &grads)?;
        let done = step + 1;
        let val_loss = if done % cfg.eval_every == 0 || done == cfg.steps {
            let v = validation_loss(params, val, schedule, val_key)?;
            final_val_loss = v;
            Some(v)
        } else {
            None
        };
        curve.push(LossRow {
            step: done,
            train_loss,
            val_loss,
        });
    }
    params.round_to_f32();
    if cfg.steps > 0 {
        final_val_loss = validation_loss(params, val, schedule, val_key)?;
    }
    Ok(DiffusionTraining {
        curve,
        initial_val_loss,
        final_val_loss,
    })
}
