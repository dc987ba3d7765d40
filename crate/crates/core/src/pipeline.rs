//! Training stages wired together: data splits, evaluator and diffusion
//! pre-training, and model assembly.

use numcore::{ParamStore, StreamKey, Tape};

use crate::diffusion::pretrain::{pretrain_diffusion, DiffusionItem, DiffusionTrainConfig, DiffusionTraining};
use crate::diffusion::{init_denoiser, make_schedule, Codec, ScheduleKind};
use crate::encoders::{encode_image, encode_text, images_tensor, init_encoders, tokenize, TokenIds};
use crate::error::{Error, Result};
use crate::evaluator::{
    evaluate_heldout, init_evaluator, pretrain_evaluator, EvaluatorTrainConfig, EvaluatorTraining, HeldoutStats,
    Pair,
};
use crate::models::Models;
use crate::nn::Net;
use crate::sceneworld::{generate_split, ContextPair, DescriptionMode, Image, SceneConfig, Task};

pub const SCHEDULE_STEPS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    /// Answers present; shared by every training stage.
    pub train: Vec<ContextPair>,
    /// Answers present; evaluator held-out pairs, diffusion validation and
    /// fine-tuning held-out contexts.
    pub heldout: Vec<ContextPair>,
    /// Answers withheld; benchmark contexts.
    pub eval: Vec<ContextPair>,
}

pub fn make_splits(
    key: StreamKey,
    sizes: [usize; 3],
    scene: &SceneConfig,
    mode: DescriptionMode,
) -> Result<Splits> {
    let [train, heldout, eval] = sizes;
    Ok(Splits {
        train: generate_split(key.child("train"), train, scene, mode, true, &Task::ALL)?,
        heldout: generate_split(key.child("heldout"), heldout, scene, mode, true, &Task::ALL)?,
        eval: generate_split(key.child("eval"), eval, scene, mode, false, &Task::ALL)?,
    })
}

pub fn pairs(contexts: &[ContextPair]) -> Vec<Pair> {
    contexts
        .iter()
        .map(|c| Pair {
            image: c.image(),
            ids: tokenize(&c.description.tokens),
        })
        .collect()
}

fn take<'a, T>(items: &'a [T], n: usize, what: &str) -> Result<&'a [T]> {
    items
        .get(..n)
        .ok_or_else(|| Error::Config(format!("{what} needs {n} items, only {} available", items.len())))
}

pub struct EvaluatorStage {
    pub params: ParamStore,
    pub training: EvaluatorTraining,
    pub heldout: HeldoutStats,
}

/// Initializes and jointly trains the encoders and evaluator, then scores
/// `heldout_pairs` held-out contexts.
pub fn train_evaluator(
    splits: &Splits,
    cfg: &EvaluatorTrainConfig,
    key: StreamKey,
) -> Result<EvaluatorStage> {
    let train = pairs(take(&splits.train, cfg.train_pairs, "evaluator training")?);
    let held = pairs(take(&splits.heldout, cfg.heldout_pairs, "evaluator held-out set")?);
    let mut params = init_encoders(key.child("init"))?;
    params.merge(init_evaluator(key.child("init"))?)?;
    let curve = &held[..cfg.curve_eval_pairs.min(held.len())];
    let training = pretrain_evaluator(&mut params, &train, curve, cfg, key.child("train"))?;
    let heldout = evaluate_heldout(&params, &held, key.child("heldout"))?;
    Ok(EvaluatorStage {
        params,
        training,
        heldout,
    })
}

/// Clean latents with the reference image and description embeddings.
pub fn diffusion_items(evaluator: &ParamStore, codec: &Codec, contexts: &[ContextPair]) -> Result<Vec<DiffusionItem>> {
    let mut out = Vec::with_capacity(contexts.len());
    for chunk in contexts.chunks(64) {
        let images: Vec<Image> = chunk.iter().map(|c| c.image()).collect();
        let refs: Vec<&Image> = images.iter().collect();
        let ids: Vec<TokenIds> = chunk.iter().map(|c| tokenize(&c.description.tokens)).collect();
        let mut tape = Tape::no_grad();
        let x = tape.constant(images_tensor(&refs)?);
        let mut net = Net::new(&mut tape, evaluator);
        let iv = encode_image(&mut net, x)?;
        let tv = encode_text(&mut net, &ids)?;
        for (k, img) in images.iter().enumerate() {
            out.push(DiffusionItem {
                z0: codec.encode(img)?,
                i_e: tape.value(iv.e).row(k).to_vec(),
                t_e: tape.value(tv.e).row(k).to_vec(),
            });
        }
    }
    Ok(out)
}

pub struct DiffusionStage {
    pub params: ParamStore,
    pub training: DiffusionTraining,
}

/// Trains a fresh denoiser conditioned on the frozen encoders in
/// `evaluator`.
pub fn train_diffusion(
    evaluator: &ParamStore,
    splits: &Splits,
    cfg: &DiffusionTrainConfig,
    key: StreamKey,
) -> Result<DiffusionStage> {
    let codec = Codec::standard()?;
    let schedule = make_schedule(SCHEDULE_STEPS, ScheduleKind::Cosine)?;
    let train = diffusion_items(evaluator, &codec, take(&splits.train, cfg.train_items, "diffusion training")?)?;
    let val = diffusion_items(evaluator, &codec, take(&splits.heldout, cfg.val_items, "diffusion validation")?)?;
    let mut params = init_denoiser(key.child("init"))?;
    let training = pretrain_diffusion(&mut params, &train, &val, &schedule, cfg, key.child("train"))?;
    Ok(DiffusionStage { params, training })
}

pub fn assemble(evaluator: ParamStore, denoiser: ParamStore) -> Result<Models> {
    Ok(Models {
        evaluator,
        denoiser,
        codec: Codec::standard()?,
        schedule: make_schedule(SCHEDULE_STEPS, ScheduleKind::Cosine)?,
        lora_scale: 1.0,
    })
}
