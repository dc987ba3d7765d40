use ctxdiff::diffusion::pretrain::{pretrain_diffusion, validation_loss, DiffusionItem, DiffusionTrainConfig};
use ctxdiff::diffusion::sample::initial_noise;
use ctxdiff::diffusion::{
    add_noise, attach_adapters, ddim_step, denoiser_forward, init_denoiser, make_schedule, AdapterConfig, Codec,
    ScheduleKind,
};
use ctxdiff::encoders::{init_encoders, DIM};
use ctxdiff::evaluator::init_evaluator;
use ctxdiff::models::Models;
use ctxdiff::nn::Net;
use ctxdiff::pipeline::{assemble, diffusion_items, SCHEDULE_STEPS};
use ctxdiff::sceneworld::image::IMAGE_LEN;
use ctxdiff::sceneworld::{generate_split, ContextPair, DescriptionMode, Image, SceneConfig, Task};
use numcore::{ParamStore, Stream, StreamKey, Tape, Tensor};
use proptest::prelude::*;

fn contexts(n: usize, label: &str) -> Vec<ContextPair> {
    generate_split(
        StreamKey::root(21).child(label),
        n,
        &SceneConfig::default(),
        DescriptionMode::Focused,
        true,
        &Task::ALL,
    )
    .unwrap()
}

fn evaluator() -> ParamStore {
    let mut p = init_encoders(StreamKey::root(4).child("enc")).unwrap();
    p.merge(init_evaluator(StreamKey::root(4).child("eval")).unwrap()).unwrap();
    p
}

/// A denoiser whose zero-initialized heads are randomized so that every
/// layer influences the output.
fn live_denoiser(seed: u64) -> ParamStore {
    let mut d = init_denoiser(StreamKey::root(seed)).unwrap();
    let mut s = Stream::from_seed(seed);
    for p in d.iter_mut().filter(|p| p.value.data().iter().all(|&v| v == 0.0)) {
        p.value = Tensor::randn(p.value.shape().to_vec(), 0.05, &mut s);
    }
    d
}

fn sample(models: &Models, ctx: &ContextPair, seed: u64, steps: usize) -> (Vec<Tensor>, Image) {
    let cond = models.condition_contexts(&[ctx]).unwrap();
    let z = initial_noise(1, &mut Stream::from_seed(seed));
    let mut tape = Tape::no_grad();
    let r = models
        .generator()
        .ddim_sample(&mut tape, z, &cond.i_e, &cond.t_e, steps, 0)
        .unwrap();
    let img = Image::from_tensor(tape.value(r.images)).unwrap();
    (r.trajectory.latents, img)
}

#[test]
fn codec_roundtrip_and_isometry_on_random_images() {
    let codec = Codec::standard().unwrap();
    let mut s = Stream::from_seed(100);
    for _ in 0..100 {
        let img = Image::new((0..IMAGE_LEN).map(|_| s.uniform()).collect()).unwrap();
        let z = codec.encode(&img).unwrap();
        let back = codec.decode(&z).unwrap();
        assert!(img.max_abs_diff(&back) < 1e-6);
        let nx = img.pixels().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nz = z.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nx - nz).abs() < 1e-6);
    }
    codec.self_check(10, StreamKey::root(1)).unwrap();
}

#[test]
fn four_step_cosine_ratio() {
    let s = make_schedule(4, ScheduleKind::Cosine).unwrap();
    let f = |t: f64| (((t / 4.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let want = f(2.0) / f(0.0);
    assert!((s.alpha_bar[2] / s.alpha_bar[0] - want).abs() < 1e-12);
    assert_eq!(s.alpha_bar[0], 1.0);
}

#[test]
fn forward_noising_examples() {
    let z0 = Tensor::new([1, 1], vec![2.0]).unwrap();
    let one = Tensor::new([1, 1], vec![1.0]).unwrap();
    let zero = Tensor::new([1, 1], vec![0.0]).unwrap();
    let v = add_noise(&z0, &one, 0.25).unwrap().item();
    assert!((v - (0.5 * 2.0 + 0.75f64.sqrt())).abs() < 1e-12);
    assert!((v - 1.8660).abs() < 1e-4);
    assert_eq!(add_noise(&z0, &one, 1.0).unwrap().item(), 2.0);
    assert_eq!(add_noise(&z0, &zero, 0.36).unwrap().item(), 0.6 * 2.0);
}

#[test]
fn ddim_update_examples() {
    let got = ddim_step(1.0, 0.5, 0.25, 0.64);
    let want = 0.64f64.sqrt() * (1.0 - 0.75f64.sqrt() * 0.5) / 0.25f64.sqrt() + 0.36f64.sqrt() * 0.5;
    assert!((got - want).abs() < 1e-12);
    assert_eq!(ddim_step(0.37, 0.9, 1.0, 1.0), 0.37);
}

proptest! {
    #[test]
    fn ddim_without_noise_rescales(z in -5.0f64..5.0, a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let got = ddim_step(z, 0.0, a, b);
        prop_assert!((got - z * (b / a).sqrt()).abs() < 1e-12 * (1.0 + z.abs()));
    }

    #[test]
    fn codec_is_isometric(seed in 0u64..1000) {
        let codec = Codec::standard().unwrap();
        let mut s = Stream::from_seed(seed);
        let img = Image::new((0..IMAGE_LEN).map(|_| s.uniform()).collect()).unwrap();
        let z = codec.encode(&img).unwrap();
        let nx: f64 = img.pixels().iter().map(|v| v * v).sum();
        let nz: f64 = z.data().iter().map(|v| v * v).sum();
        prop_assert!((nx.sqrt() - nz.sqrt()).abs() < 1e-9);
    }
}

#[test]
fn zero_adapters_leave_generation_bit_identical() {
    let base = assemble(evaluator(), live_denoiser(7)).unwrap();
    let mut adapted = base.clone();
    attach_adapters(&mut adapted.denoiser, &AdapterConfig::default(), StreamKey::root(9)).unwrap();
    let ctx = &contexts(2, "zero")[1];
    let (za, ia) = sample(&base, ctx, 3, 5);
    let (zb, ib) = sample(&adapted, ctx, 3, 5);
    assert_eq!(za, zb);
    assert_eq!(ia, ib);
    let changed = {
        let mut m = adapted.clone();
        let name = "denoiser.b0.cross.v.lora_b";
        let shape = m.denoiser.get(name).unwrap().value.shape().to_vec();
        m.denoiser.get_mut(name).unwrap().value = Tensor::randn(shape, 0.1, &mut Stream::from_seed(1));
        sample(&m, ctx, 3, 5).1
    };
    assert_ne!(changed, ia);
}

#[test]
fn sampling_is_deterministic() {
    let models = assemble(evaluator(), live_denoiser(8)).unwrap();
    let ctx = &contexts(1, "det")[0];
    assert_eq!(sample(&models, ctx, 4, 6), sample(&models, ctx, 4, 6));
    assert_ne!(sample(&models, ctx, 4, 6).1, sample(&models, ctx, 5, 6).1);
}

fn items(n: usize, label: &str) -> Vec<DiffusionItem> {
    diffusion_items(&evaluator(), &Codec::standard().unwrap(), &contexts(n, label)).unwrap()
}

#[test]
fn initial_loss_matches_closed_form() {
    let schedule = make_schedule(SCHEDULE_STEPS, ScheduleKind::Cosine).unwrap();
    let val = items(256, "val");
    let params = init_denoiser(StreamKey::root(2)).unwrap();
    let key = StreamKey::root(6);
    let got = validation_loss(&params, &val, &schedule, key).unwrap();

    // At initialization the predicted v is zero, so eps_hat = sqrt(1 - a) z_t.
    let mut exact = 0.0;
    for (ci, chunk) in val.chunks(64).enumerate() {
        let mut s = key.index(ci as u64).stream();
        for item in chunk {
            let t = 1 + s.below(SCHEDULE_STEPS);
            let eps = Tensor::randn(item.z0.shape().to_vec(), 1.0, &mut s);
            let a = schedule.alpha_bar[t];
            let err: f64 = item
                .z0
                .data()
                .iter()
                .zip(eps.data())
                .map(|(&z, &e)| {
                    let z_t = a.sqrt() * z + (1.0 - a).sqrt() * e;
                    (e - (1.0 - a).sqrt() * z_t).powi(2)
                })
                .sum();
            exact += err / item.z0.numel() as f64;
        }
    }
    exact /= val.len() as f64;
    assert!((got - exact).abs() < 1e-9 * exact, "{got} vs {exact}");

    // Expectation over t and eps: a^2 + a (1 - a) E[z0^2].
    let m2 = val.iter().flat_map(|i| i.z0.data().iter()).map(|v| v * v).sum::<f64>()
        / (val.len() * val[0].z0.numel()) as f64;
    let expected = (1..=SCHEDULE_STEPS)
        .map(|t| {
            let a = schedule.alpha_bar[t];
            a * a + a * (1.0 - a) * m2
        })
        .sum::<f64>()
        / SCHEDULE_STEPS as f64;
    assert!((got - expected).abs() < 0.15 * expected, "{got} vs {expected}");
}

#[test]
fn zero_training_steps_keep_parameters() {
    let schedule = make_schedule(SCHEDULE_STEPS, ScheduleKind::Cosine).unwrap();
    let train = items(16, "t0");
    let mut params = init_denoiser(StreamKey::root(3)).unwrap();
    let init = params.clone();
    let cfg = DiffusionTrainConfig {
        steps: 0,
        batch_size: 4,
        ..DiffusionTrainConfig::default()
    };
    pretrain_diffusion(&mut params, &train, &train[..4], &schedule, &cfg, StreamKey::root(1)).unwrap();
    assert_eq!(params, init);
}

#[test]
fn conditioning_is_live_after_training() {
    let schedule = make_schedule(SCHEDULE_STEPS, ScheduleKind::Cosine).unwrap();
    let train = items(128, "live");
    let mut params = init_denoiser(StreamKey::root(5)).unwrap();
    let cfg = DiffusionTrainConfig {
        steps: 40,
        batch_size: 8,
        warmup_steps: 5,
        cond_dropout: 0.0,
        eval_every: 20,
        ..DiffusionTrainConfig::default()
    };
    pretrain_diffusion(&mut params, &train, &train[..8], &schedule, &cfg, StreamKey::root(2)).unwrap();

    let eps_hat = |t_e: &[f64]| {
        let mut tape = Tape::no_grad();
        let z = tape.constant(initial_noise(1, &mut Stream::from_seed(12)));
        let ie = tape.constant(Tensor::new([1, DIM], train[0].i_e.clone()).unwrap());
        let te = tape.constant(Tensor::new([1, DIM], t_e.to_vec()).unwrap());
        let mut net = Net::new(&mut tape, &params);
        let out = denoiser_forward(&mut net, &schedule, z, &[500], ie, te).unwrap();
        tape.value(out).clone()
    };
    let a = eps_hat(&train[0].t_e);
    let b = eps_hat(&train[1].t_e);
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(diff > 0.0);
}
