use numcore::{ParamStore, Tape, Tensor};

use crate::diffusion::sample::Generator;
use crate::diffusion::{Codec, NoiseSchedule};
use crate::encoders::{encode_image, encode_text, images_tensor, tokenize, TokenIds};
use crate::error::Result;
use crate::evaluator::visual_queries;
use crate::nn::Net;
use crate::sceneworld::{ContextPair, Image};

/// Every trained component needed to generate and score images.
#[derive(Clone, Debug)]
pub struct Models {
    /// Text and image encoders plus the evaluator ("text.*", "image.*",
    /// "qformer.*").
    pub evaluator: ParamStore,
    /// Denoiser weights, optionally with adapters attached.
    pub denoiser: ParamStore,
    pub codec: Codec,
    pub schedule: NoiseSchedule,
    pub lora_scale: f64,
}

/// Frozen per-context inputs: generator conditioning and the description's
/// text features for the evaluator.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// `B x 64` image embeddings of the references.
    pub i_e: Tensor,
    /// `B x 64` description embeddings.
    pub t_e: Tensor,
    /// `(B*32) x 64`.
    pub t_tokens: Tensor,
    /// `B x 64`.
    pub t_cls: Tensor,
}

impl Conditioning {
    pub fn len(&self) -> usize {
        self.i_e.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `[start, end)` of every field.
    pub fn slice(&self, start: usize, end: usize) -> Result<Conditioning> {
        let rows = |t: &Tensor, per: usize| -> Result<Tensor> {
            let (_, c) = t.dims2()?;
            let data = t.data()[start * per * c..end * per * c].to_vec();
            Ok(Tensor::new([(end - start) * per, c], data)?)
        };
        Ok(Conditioning {
            i_e: rows(&self.i_e, 1)?,
            t_e: rows(&self.t_e, 1)?,
            t_tokens: rows(&self.t_tokens, crate::encoders::SEQ_LEN)?,
            t_cls: rows(&self.t_cls, 1)?,
        })
    }
}

impl Models {
    pub fn generator(&self) -> Generator<'_> {
        Generator {
            params: &self.denoiser,
            codec: &self.codec,
            schedule: &self.schedule,
            lora_scale: self.lora_scale,
        }
    }

    /// Stops gradients into everything except denoiser adapters.
    pub fn freeze_base(&mut self) {
        self.evaluator.set_trainable(false);
        for p in self.denoiser.iter_mut() {
            p.trainable = crate::nn::is_adapter(&p.name);
        }
    }

    pub fn condition(&self, references: &[&Image], descriptions: &[TokenIds]) -> Result<Conditioning> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(images_tensor(references)?);
        let mut net = Net::new(&mut tape, &self.evaluator);
        let iv = encode_image(&mut net, x)?;
        let tv = encode_text(&mut net, descriptions)?;
        Ok(Conditioning {
            i_e: tape.value(iv.e).clone(),
            t_e: tape.value(tv.e).clone(),
            t_tokens: tape.value(tv.tokens).clone(),
            t_cls: tape.value(tv.cls).clone(),
        })
    }

    /// Conditioning from each context's reference image and description.
    pub fn condition_contexts(&self, contexts: &[&ContextPair]) -> Result<Conditioning> {
        let images: Vec<Image> = contexts.iter().map(|c| c.image()).collect();
        let refs: Vec<&Image> = images.iter().collect();
        let ids: Vec<TokenIds> = contexts.iter().map(|c| tokenize(&c.description.tokens)).collect();
        self.condition(&refs, &ids)
    }

    /// Mean-pooled Z rows of the evaluator image branch, one per image.
    pub fn image_features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut tape = Tape::no_grad();
            let x = tape.constant(images_tensor(chunk)?);
            let mut net = Net::new(&mut tape, &self.evaluator);
            let iv = encode_image(&mut net, x)?;
            let z = visual_queries(&mut net, iv.tokens)?;
            let pooled = tape.block_mean_rows(z, crate::evaluator::N_QUERIES)?;
            let v = tape.value(pooled);
            for r in 0..chunk.len() {
                out.push(v.row(r).to_vec());
            }
        }
        Ok(out)
    }
}
