//! Finite-difference checks of the model stack: both encoders, the
//! evaluator, both rewards and the reward loss through a three-step DDIM
//! rollout. Large inputs are checked on a sampled subset of coordinates.

use numcore::gradcheck::{op_suite, SuiteCase, OP_EPS, OP_TOL};
use numcore::{grad_check_coords, ParamStore, Stream, StreamKey, Tape, Tensor, Var};

use crate::diffusion::sample::initial_noise;
use crate::diffusion::{attach_adapters, init_denoiser, AdapterConfig};
use crate::encoders::{encode_image, encode_text, images_tensor, init_encoders, tokenize};
use crate::error::Result;
use crate::evaluator::{init_evaluator, qformer_forward, reward_fine_var, reward_global_var, N_QUERIES};
use crate::models::Models;
use crate::nn::Net;
use crate::pipeline::assemble;
use crate::rewardft::{rewards_on_tape, FinetuneConfig};
use crate::sceneworld::{generate_split, DescriptionMode, SceneConfig, Task};

/// Tolerance for the reward loss through the sampler.
pub const CHAIN_TOL: f64 = 1e-3;
const COORDS: usize = 24;

fn project(t: &mut Tape, y: Var, salt: u64) -> numcore::Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let w = t.constant(Tensor::randn(shape, 1.0, &mut Stream::from_seed(salt)));
    let p = t.mul(y, w)?;
    t.sum_all(p)
}

fn sample_coords(n: usize, stream: &mut Stream) -> Vec<usize> {
    if n <= COORDS {
        return (0..n).collect();
    }
    let mut c: Vec<usize> = (0..COORDS).map(|_| stream.below(n)).collect();
    c.sort_unstable();
    c.dedup();
    c
}

fn to_num(e: crate::Error) -> numcore::NumError {
    match e {
        crate::Error::Num(n) => n,
        other => numcore::NumError::Invalid(other.to_string()),
    }
}

/// Checks `f` against the parameter `name` of `store` at sampled entries.
fn param_case<F>(
    name: &str,
    store: &ParamStore,
    param: &str,
    eps: f64,
    tol: f64,
    stream: &mut Stream,
    f: F,
) -> Result<SuiteCase>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let x = store.get(param)?.value.clone();
    let coords = sample_coords(x.numel(), stream);
    let report = grad_check_coords(
        |t, xv| {
            t.override_param(param, xv);
            f(t, store).map_err(to_num)
        },
        &x,
        eps,
        &coords,
    )?;
    Ok(SuiteCase {
        name: name.to_string(),
        report,
        tol,
    })
}

fn input_case<F>(name: &str, x: &Tensor, eps: f64, tol: f64, stream: &mut Stream, f: F) -> Result<SuiteCase>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords = sample_coords(x.numel(), stream);
    let report = grad_check_coords(|t, xv| f(t, xv).map_err(to_num), x, eps, &coords)?;
    Ok(SuiteCase {
        name: name.to_string(),
        report,
        tol,
    })
}

/// Randomly initialized models with adapters. Every zero-initialized
/// denoiser tensor (adapter `B` factors, gates, output projections) is
/// perturbed so that every adapter path carries gradient.
fn random_models(key: StreamKey) -> Result<Models> {
    let mut evaluator = init_encoders(key.child("encoders"))?;
    evaluator.merge(init_evaluator(key.child("evaluator"))?)?;
    let mut denoiser = init_denoiser(key.child("denoiser"))?;
    attach_adapters(&mut denoiser, &AdapterConfig::default(), key.child("adapters"))?;
    let mut s = key.child("lora_b").stream();
    for p in denoiser.iter_mut().filter(|p| p.value.data().iter().all(|&v| v == 0.0)) {
        p.value = Tensor::randn(p.value.shape().to_vec(), 0.05, &mut s);
    }
    let mut models = assemble(evaluator, denoiser)?;
    models.freeze_base();
    Ok(models)
}

/// Model-level checks. Module checks use the single-op tolerance; the
/// reward loss through the sampler uses [`CHAIN_TOL`].
pub fn model_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let key = StreamKey::root(seed).child("gradsuite");
    let mut pick = key.child("coords").stream();
    let models = random_models(key.child("models"))?;
    let contexts = generate_split(key.child("data"), 2, &SceneConfig::default(), DescriptionMode::Focused, true, &Task::ALL)?;
    let images: Vec<_> = contexts.iter().map(|c| c.image()).collect();
    let refs: Vec<_> = images.iter().collect();
    let ids: Vec<_> = contexts.iter().map(|c| tokenize(&c.description.tokens)).collect();
    let x = images_tensor(&refs)?;
    let mut cases = Vec::new();

    for param in ["text.embed", "text.attn.q.w", "text.cond_head.w"] {
        cases.push(param_case(
            &format!("text encoder wrt {param}"),
            &models.evaluator,
            param,
            OP_EPS,
            OP_TOL,
            &mut pick,
            |t, store| {
                let mut net = Net::new(t, store);
                let tv = encode_text(&mut net, &ids)?;
                let a = project(t, tv.tokens, 1)?;
                let b = project(t, tv.e, 2)?;
                Ok(t.add(a, b)?)
            },
        )?);
    }
    cases.push(input_case("image encoder wrt pixels", &x, OP_EPS, OP_TOL, &mut pick, |t, xv| {
        let mut net = Net::new(t, &models.evaluator);
        let iv = encode_image(&mut net, xv)?;
        let a = project(t, iv.tokens, 3)?;
        let b = project(t, iv.e, 4)?;
        Ok(t.add(a, b)?)
    })?);
    cases.push(param_case(
        "image encoder wrt image.patch.w",
        &models.evaluator,
        "image.patch.w",
        OP_EPS,
        OP_TOL,
        &mut pick,
        |t, store| {
            let xv = t.constant(x.clone());
            let mut net = Net::new(t, store);
            let iv = encode_image(&mut net, xv)?;
            Ok(project(t, iv.e, 5)?)
        },
    )?);

    let (i_tokens, t_tokens, t_cls) = {
        let mut t = Tape::no_grad();
        let xv = t.constant(x.clone());
        let mut net = Net::new(&mut t, &models.evaluator);
        let iv = encode_image(&mut net, xv)?;
        let tv = encode_text(&mut net, &ids)?;
        (t.value(iv.tokens).clone(), t.value(tv.tokens).clone(), t.value(tv.cls).clone())
    };
    let qformer = |t: &mut Tape, i: Var, tt: Var| -> Result<Var> {
        let mut net = Net::new(t, &models.evaluator);
        let ev = qformer_forward(&mut net, i, tt)?;
        let a = project(t, ev.z, 6)?;
        let b = project(t, ev.logits, 7)?;
        let c = project(t, ev.f, 8)?;
        let ab = t.add(a, b)?;
        Ok(t.add(ab, c)?)
    };
    cases.push(input_case("qformer wrt image tokens", &i_tokens, OP_EPS, OP_TOL, &mut pick, |t, iv| {
        let tt = t.constant(t_tokens.clone());
        qformer(t, iv, tt)
    })?);
    cases.push(input_case("qformer wrt text tokens", &t_tokens, OP_EPS, OP_TOL, &mut pick, |t, tt| {
        let iv = t.constant(i_tokens.clone());
        qformer(t, iv, tt)
    })?);
    cases.push(param_case(
        "qformer wrt qformer.queries",
        &models.evaluator,
        "qformer.queries",
        OP_EPS,
        OP_TOL,
        &mut pick,
        |t, store| {
            let iv = t.constant(i_tokens.clone());
            let tt = t.constant(t_tokens.clone());
            let mut net = Net::new(t, store);
            let ev = qformer_forward(&mut net, iv, tt)?;
            Ok(project(t, ev.logits, 9)?)
        },
    )?);

    let z = Tensor::randn([2 * N_QUERIES, t_cls.shape()[1]], 1.0, &mut key.child("z").stream());
    cases.push(input_case("global reward wrt Z", &z, OP_EPS, OP_TOL, &mut pick, |t, zv| {
        let c = t.constant(t_cls.clone());
        let r = reward_global_var(t, zv, c)?;
        Ok(project(t, r, 10)?)
    })?);
    cases.push(input_case("global reward wrt T_cls", &t_cls, OP_EPS, OP_TOL, &mut pick, |t, c| {
        let zv = t.constant(z.clone());
        let r = reward_global_var(t, zv, c)?;
        Ok(project(t, r, 11)?)
    })?);
    let logits = Tensor::randn([2, 2], 1.0, &mut key.child("logits").stream());
    cases.push(input_case("fine reward wrt ITM logits", &logits, OP_EPS, OP_TOL, &mut pick, |t, l| {
        let r = reward_fine_var(t, l)?;
        Ok(project(t, r, 12)?)
    })?);

    let cfg = FinetuneConfig {
        ddim_steps: 3,
        grad_last_k: 3,
        ..FinetuneConfig::default()
    };
    let cond = models.condition_contexts(&[&contexts[0]])?;
    let z_init = initial_noise(1, &mut key.child("noise").stream());
    let layers = crate::diffusion::denoiser::adapted_layers();
    for layer in [layers.first(), layers.last()].into_iter().flatten() {
        for part in ["lora_a", "lora_b"] {
            let param = format!("{layer}.{part}");
            cases.push(param_case(
                &format!("reward loss through 3-step DDIM wrt {param}"),
                &models.denoiser,
                &param,
                OP_EPS,
                CHAIN_TOL,
                &mut pick,
                |t, _| Ok(rewards_on_tape(t, &models, &cond, z_init.clone(), &cfg)?.loss),
            )?);
        }
    }
    Ok(cases)
}

/// Every tape op followed by the model-level checks.
pub fn full_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut cases = op_suite(seed)?;
    cases.extend(model_suite(seed)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_suite_passes() {
        let cases = model_suite(3).unwrap();
        for c in &cases {
            eprintln!("{:<60} rel {:.3e} tol {:.0e}", c.name, c.report.max_rel_err, c.tol);
        }
        assert!(cases.iter().all(SuiteCase::passed));
        for c in &cases {
            assert!(c.report.analytic.iter().any(|&g| g != 0.0), "{} has an all-zero gradient", c.name);
        }
    }
}
