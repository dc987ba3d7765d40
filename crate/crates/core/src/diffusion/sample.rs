use numcore::{ParamStore, Stream, Tape, Tensor, Var};

use super::codec::{Codec, LATENT_CELLS, LATENT_CHANNELS};
use super::denoiser::denoiser_forward;
use super::schedule::{ddim_step_var, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Net;
use crate::sceneworld::image::Image;

/// Latents visited by one rollout, with whether each step's output was on
/// the gradient tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub timesteps: Vec<usize>,
    pub latents: Vec<Tensor>,
    pub tracked: Vec<bool>,
}

pub struct Rollout {
    pub trajectory: LatentTrajectory,
    /// Decoded, unclamped `B x 3072` images on the caller's tape.
    pub images: Var,
}

/// The frozen generator: denoiser parameters (with or without adapters),
/// codec and schedule.
pub struct Generator<'a> {
    pub params: &'a ParamStore,
    pub codec: &'a Codec,
    pub schedule: &'a NoiseSchedule,
    pub lora_scale: f64,
}

impl Generator<'_> {
    fn eps(&self, tape: &mut Tape, z: Var, t: usize, b: usize, i_e: &Tensor, t_e: &Tensor) -> Result<Var> {
        let iv = tape.constant(i_e.clone());
        let tv = tape.constant(t_e.clone());
        let mut net = Net::new(tape, self.params);
        net.lora_scale = self.lora_scale;
        denoiser_forward(&mut net, self.schedule, z, &vec![t; b], iv, tv)
    }

    /// Deterministic DDIM from `z_t_max` over `steps` evenly spaced
    /// timesteps. Only the last `grad_last_k` updates (and the decode) are
    /// recorded on `tape`; earlier ones run on scratch tapes and enter
    /// `tape` as constants.
    pub fn ddim_sample(
        &self,
        tape: &mut Tape,
        z_init: Tensor,
        i_e: &Tensor,
        t_e: &Tensor,
        steps: usize,
        grad_last_k: usize,
    ) -> Result<Rollout> {
        if grad_last_k > steps {
            return Err(Error::Config(format!("grad_last_k {grad_last_k} exceeds {steps} steps")));
        }
        let (rows, c) = z_init.dims2()?;
        if c != LATENT_CHANNELS || rows % LATENT_CELLS != 0 {
            return Err(Error::Eval(format!("initial latent must be (B*64)x48, got {rows}x{c}")));
        }
        let b = rows / LATENT_CELLS;
        let ts = self.schedule.timesteps(steps)?;
        let mut trajectory = LatentTrajectory {
            timesteps: ts.clone(),
            latents: vec![z_init.clone()],
            tracked: vec![false],
        };
        let mut z_val = z_init;
        let first_tracked = steps - grad_last_k;
        for i in 0..first_tracked {
            let mut scratch = Tape::no_grad();
            let z = scratch.constant(z_val);
            let eps = self.eps(&mut scratch, z, ts[i], b, i_e, t_e)?;
            let a_from = self.schedule.alpha_bar(ts[i])?;
            let a_to = self.schedule.alpha_bar(ts[i + 1])?;
            let next = ddim_step_var(&mut scratch, z, eps, a_from, a_to)?;
            z_val = scratch.value(next).clone();
            trajectory.latents.push(z_val.clone());
            trajectory.tracked.push(false);
        }
        let mut z = tape.constant(z_val);
        for i in first_tracked..steps {
            let eps = self.eps(tape, z, ts[i], b, i_e, t_e)?;
            let a_from = self.schedule.alpha_bar(ts[i])?;
            let a_to = self.schedule.alpha_bar(ts[i + 1])?;
            z = ddim_step_var(tape, z, eps, a_from, a_to)?;
            trajectory.latents.push(tape.value(z).clone());
            trajectory.tracked.push(tape.requires_grad(z));
        }
        let images = self.codec.decode_var(tape, z)?;
        Ok(Rollout { trajectory, images })
    }

    /// Samples `z_T ~ N(0, I)` from `stream` and returns the clamped image.
    pub fn generate(
        &self,
        stream: &mut Stream,
        i_e: &Tensor,
        t_e: &Tensor,
        steps: usize,
    ) -> Result<Image> {
        let z = initial_noise(1, stream);
        let mut tape = Tape::no_grad();
        let r = self.ddim_sample(&mut tape, z, i_e, t_e, steps, 0)?;
        Ok(Image::from_tensor(tape.value(r.images))?.clamped())
    }
}

pub fn initial_noise(b: usize, stream: &mut Stream) -> Tensor {
    Tensor::randn([b * LATENT_CELLS, LATENT_CHANNELS], 1.0, stream)
}
