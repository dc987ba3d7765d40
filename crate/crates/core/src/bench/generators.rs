use numcore::StreamKey;

use crate::diffusion::sample::initial_noise;
use crate::error::{Error, Result};
use crate::models::Models;
use crate::sceneworld::{ContextPair, Image};

/// Produces images for a context, one per seed stream.
pub trait ImageGenerator: Sync {
    fn name(&self) -> &str;

    fn generate(&self, context: &ContextPair, reference: &Image, seed: StreamKey) -> Result<Image>;

    /// Images for seeds `0..n` of `key`, sharing the context's conditioning.
    fn generate_n(&self, context: &ContextPair, reference: &Image, n: usize, key: StreamKey) -> Result<Vec<Image>> {
        (0..n).map(|s| self.generate(context, reference, key.index(s as u64))).collect()
    }
}

/// Seed key for `context` under a run key; independent of context order.
pub fn context_key(key: StreamKey, context: &ContextPair) -> StreamKey {
    key.child("context").index(context.id)
}

/// `n_seeds` images for one context from independent seed streams.
pub fn generate_set(
    context: &ContextPair,
    generator: &dyn ImageGenerator,
    n_seeds: usize,
    key: StreamKey,
) -> Result<Vec<Image>> {
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    let reference = context.image();
    generator.generate_n(context, &reference, n_seeds, context_key(key, context))
}

/// DDIM samples conditioned on the reference image and the description.
pub struct DiffusionGenerator<'a> {
    pub models: &'a Models,
    pub steps: usize,
}

impl ImageGenerator for DiffusionGenerator<'_> {
    fn name(&self) -> &str {
        "diffusion"
    }

    fn generate(&self, context: &ContextPair, reference: &Image, seed: StreamKey) -> Result<Image> {
        Ok(self.generate_n(context, reference, 1, seed)?.remove(0))
    }

    fn generate_n(&self, context: &ContextPair, reference: &Image, n: usize, key: StreamKey) -> Result<Vec<Image>> {
        let ids = crate::encoders::tokenize(&context.description.tokens);
        let cond = self.models.condition(&[reference], &[ids])?;
        let generator = self.models.generator();
        (0..n)
            .map(|s| {
                let mut stream = key.index(s as u64).stream();
                let z = initial_noise(1, &mut stream);
                let mut tape = numcore::Tape::no_grad();
                let r = generator.ddim_sample(&mut tape, z, &cond.i_e, &cond.t_e, self.steps, 0)?;
                Ok(Image::from_tensor(tape.value(r.images))?.clamped())
            })
            .collect()
    }
}

/// Reference plus uniform noise in `[-amplitude, amplitude]`, clamped.
pub struct PixelJitter {
    pub amplitude: f64,
}

impl Default for PixelJitter {
    fn default() -> Self {
        Self { amplitude: 0.05 }
    }
}

impl ImageGenerator for PixelJitter {
    fn name(&self) -> &str {
        "pixel_jitter"
    }

    fn generate(&self, _: &ContextPair, reference: &Image, seed: StreamKey) -> Result<Image> {
        let mut stream = seed.stream();
        let pixels = reference
            .pixels()
            .iter()
            .map(|&p| (p + stream.uniform_range(-self.amplitude, self.amplitude)).clamp(0.0, 1.0))
            .collect();
        Image::new(pixels)
    }
}

/// Returns the reference unchanged.
pub struct IdentityGenerator;

impl ImageGenerator for IdentityGenerator {
    fn name(&self) -> &str {
        "identity"
    }

    fn generate(&self, _: &ContextPair, reference: &Image, _: StreamKey) -> Result<Image> {
        Ok(reference.clone())
    }
}

/// A uniform gray image regardless of context.
pub struct ConstantGray {
    pub level: f64,
}

impl Default for ConstantGray {
    fn default() -> Self {
        Self { level: 0.5 }
    }
}

impl ImageGenerator for ConstantGray {
    fn name(&self) -> &str {
        "constant_gray"
    }

    fn generate(&self, _: &ContextPair, _: &Image, _: StreamKey) -> Result<Image> {
        Ok(Image::filled([self.level; 3]))
    }
}
