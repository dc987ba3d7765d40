use ctxdiff::bench::ablation::{ablation_harness, evaluate_variant, median, standard_settings, AblationRow};
use ctxdiff::bench::answerer::{Answerer, RasterOracle};
use ctxdiff::bench::generators::{generate_set, ConstantGray, IdentityGenerator, ImageGenerator, PixelJitter};
use ctxdiff::bench::metrics::{
    acc_metrics, consistency_from_images, diversity, frechet_distance, generate_all, mean_pairwise, tta_eval,
    ScoreAveraging,
};
use ctxdiff::bench::study::{quantile, seed_sweep, BenchConfig, PixelFeatures};
use ctxdiff::diffusion::init_denoiser;
use ctxdiff::encoders::init_encoders;
use ctxdiff::evaluator::init_evaluator;
use ctxdiff::pipeline::assemble;
use ctxdiff::rewardft::FinetuneConfig;
use ctxdiff::sceneworld::{generate_split, ContextPair, DescriptionMode, Image, SceneConfig, Task};
use numcore::{Stream, StreamKey, Tensor};
use proptest::prelude::*;

fn contexts(n: usize, label: &str) -> Vec<ContextPair> {
    generate_split(
        StreamKey::root(41).child(label),
        n,
        &SceneConfig::default(),
        DescriptionMode::Focused,
        true,
        &Task::ALL,
    )
    .unwrap()
}

fn truth(c: &ContextPair) -> [bool; 2] {
    let q = c.questions();
    [0, 1].map(|k| q[k].parsed().unwrap().answer_for(&c.scene).is_yes())
}

fn answers(img: &Image, c: &ContextPair) -> Vec<bool> {
    let q = c.questions();
    RasterOracle
        .scores(img, &[&q[0].question, &q[1].question])
        .unwrap()
        .iter()
        .map(|&s| s > 0.0)
        .collect()
}

#[test]
fn acc_fixture() {
    let pairs = [(true, true), (true, false), (false, true), (true, true)];
    assert_eq!(acc_metrics(&pairs), (75.0, 50.0));
    assert_eq!(acc_metrics(&[(true, true); 5]), (100.0, 100.0));
    assert_eq!(acc_metrics(&[(false, false); 2]), (0.0, 0.0));
}

proptest! {
    #[test]
    fn acc_plus_never_exceeds_acc(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..50)) {
        let (acc, plus) = acc_metrics(&pairs);
        prop_assert!(plus <= acc + 1e-12);
    }

    #[test]
    fn frechet_is_translation_invariant(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..8),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let d0 = frechet_distance(&rows, &rows).unwrap();
        prop_assert!(d0.abs() < 1e-12);
        let d = frechet_distance(&rows, &moved).unwrap();
        let want: f64 = shift.iter().map(|s| s * s).sum();
        prop_assert!((d - want).abs() < 1e-9 * (1.0 + want));
        let d2 = frechet_distance(&moved, &moved.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect::<Vec<_>>()).unwrap();
        prop_assert!((d2 - d).abs() < 1e-9 * (1.0 + want));
    }
}

#[test]
fn frechet_unit_mean_shift() {
    let a = vec![vec![-1.0], vec![1.0]];
    let b = vec![vec![0.0], vec![2.0]];
    assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    assert!(frechet_distance(&a[..1], &b).is_err());
}

#[test]
fn diversity_examples() {
    let same = vec![vec![1.0, 2.0]; 3];
    let d = diversity(&[vec![1.0, 2.0]], &[same]).unwrap();
    assert_eq!(d.ref_vs_gen, 0.0);
    assert_eq!(d.pairwise_gen, Some(0.0));

    let d = diversity(&[vec![0.0, 0.0]], &[vec![vec![3.0, 4.0]]]).unwrap();
    assert_eq!(d.ref_vs_gen, 5.0);
    assert_eq!(d.pairwise_gen, None);
    assert_eq!(mean_pairwise(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap(), Some(5.0));
}

#[test]
fn identity_generator_is_fully_consistent() {
    let ctx = contexts(40, "identity");
    let gen = generate_all(&ctx, &IdentityGenerator, 2, StreamKey::root(1)).unwrap();
    let c = consistency_from_images(&ctx, &gen, &RasterOracle).unwrap();
    assert_eq!(c.rate, 100.0);
    assert_eq!(c.comparisons, 40 * 2 * 2);
}

#[test]
fn gray_consistency_matches_enumeration() {
    let ctx = contexts(60, "gray");
    let gen = generate_all(&ctx, &ConstantGray::default(), 2, StreamKey::root(2)).unwrap();
    let c = consistency_from_images(&ctx, &gen, &RasterOracle).unwrap();
    let (mut agree, mut total) = (0usize, 0usize);
    let gray = Image::filled([0.5; 3]);
    for x in &ctx {
        let r = answers(&x.image(), x);
        let g = answers(&gray, x);
        agree += 2 * r.iter().zip(&g).filter(|(a, b)| a == b).count();
        total += 4;
    }
    assert_eq!(c.comparisons, total);
    assert!((c.rate - 100.0 * agree as f64 / total as f64).abs() < 1e-12);
    assert!(c.rate < 100.0);
}

#[test]
fn consistency_ignores_context_order() {
    let ctx = contexts(30, "perm");
    let jitter = PixelJitter::default();
    let gen = generate_all(&ctx, &jitter, 2, StreamKey::root(3)).unwrap();
    let a = consistency_from_images(&ctx, &gen, &RasterOracle).unwrap();
    let mut order: Vec<usize> = (0..ctx.len()).collect();
    Stream::from_seed(4).shuffle(&mut order);
    let ctx2: Vec<_> = order.iter().map(|&i| ctx[i].clone()).collect();
    let gen2 = generate_all(&ctx2, &jitter, 2, StreamKey::root(3)).unwrap();
    for (i, &o) in order.iter().enumerate() {
        assert_eq!(gen2[i], gen[o]);
    }
    let b = consistency_from_images(&ctx2, &gen2, &RasterOracle).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_generated_images_is_reference_only() {
    let ctx = contexts(50, "k0");
    let got = tta_eval(&ctx, &RasterOracle, &ConstantGray::default(), 0, ScoreAveraging::Raw, StreamKey::root(5)).unwrap();
    let outcomes: Vec<(bool, bool)> = ctx
        .iter()
        .map(|c| {
            let a = answers(&c.image(), c);
            let t = truth(c);
            (a[0] == t[0], a[1] == t[1])
        })
        .collect();
    let (acc, plus) = acc_metrics(&outcomes);
    assert_eq!(got.overall.acc, acc);
    assert_eq!(got.overall.acc_plus, plus);
    assert_eq!(got.overall.pairs, 50);
}

#[test]
fn seed_prefixes_match_independent_runs() {
    let ctx = contexts(3, "prefix");
    let jitter = PixelJitter::default();
    let key = StreamKey::root(6);
    for c in &ctx {
        let long = generate_set(c, &jitter, 12, key).unwrap();
        let short = generate_set(c, &jitter, 10, key).unwrap();
        assert_eq!(&long[..10], short.as_slice());
    }
    let sweep = seed_sweep(&ctx, &jitter, &PixelFeatures, &[1, 2, 10], key).unwrap();
    assert_eq!(sweep.summary(1).unwrap().count, 0);
    assert!(sweep.rows.iter().filter(|r| r.n_seeds == 1).all(|r| r.pairwise_gen.is_none()));
    for c in &ctx {
        let imgs = generate_set(c, &jitter, 10, key).unwrap();
        let feats: Vec<Vec<f64>> = imgs.iter().map(|i| i.pixels().to_vec()).collect();
        let want = mean_pairwise(&feats).unwrap();
        let row = sweep.rows.iter().find(|r| r.n_seeds == 10 && r.context_id == c.id).unwrap();
        assert_eq!(row.pairwise_gen, want);
    }
}

#[test]
fn jitter_stays_within_amplitude() {
    let ctx = &contexts(1, "jitter")[0];
    let jitter = PixelJitter::default();
    let a = generate_set(ctx, &jitter, 4, StreamKey::root(7)).unwrap();
    let b = generate_set(ctx, &jitter, 4, StreamKey::root(7)).unwrap();
    assert_eq!(a, b);
    let reference = ctx.image();
    for img in &a {
        assert!(img.max_abs_diff(&reference) <= 0.05 + 1e-15);
        assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }
    assert_ne!(a[0], a[1]);
    assert!(generate_set(ctx, &jitter, 0, StreamKey::root(7)).is_err());
}

#[test]
fn quantiles_and_medians() {
    assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), Some(2.5));
    assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.25), Some(1.75));
    assert_eq!(quantile(&[], 0.5), None);
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
}

#[test]
fn ablation_reports_every_setting() {
    let key = StreamKey::root(8);
    let mut ev = init_encoders(key.child("enc")).unwrap();
    ev.merge(init_evaluator(key.child("eval")).unwrap()).unwrap();
    let mut den = init_denoiser(key.child("den")).unwrap();
    let mut s = key.child("perturb").stream();
    for p in den.iter_mut().filter(|p| p.value.data().iter().all(|&v| v == 0.0)) {
        p.value = Tensor::randn(p.value.shape().to_vec(), 0.05, &mut s);
    }
    let base = assemble(ev, den).unwrap();
    let ft = FinetuneConfig {
        ddim_steps: 2,
        grad_last_k: 1,
        accumulation: 1,
        max_steps: 1,
        eval_every: 1,
        heldout_contexts: 2,
        ..FinetuneConfig::default()
    };
    let bench = BenchConfig {
        eval_contexts: 3,
        n_seeds: 2,
        k_generated: 1,
        ddim_steps: 2,
        ..BenchConfig::default()
    };
    let eval = contexts(3, "ablate-eval");
    let report = ablation_harness(
        &base,
        &contexts(4, "ablate-train"),
        &contexts(2, "ablate-held"),
        &eval,
        &ft,
        &bench,
        &RasterOracle,
        &[1],
        key,
    )
    .unwrap();
    let names: Vec<_> = report.rows.iter().map(|r| r.setting.clone()).collect();
    let want: Vec<_> = standard_settings().into_iter().map(|s| s.name).collect();
    assert_eq!(names, want);
    assert!(report.directional.is_some());

    let base_metrics = evaluate_variant(&base, &eval, &RasterOracle, &bench, key.child("eval")).unwrap();
    let settings = standard_settings();
    let none = settings.iter().find(|s| s.weights.is_none()).unwrap();
    let row = AblationRow::from_runs(
        none,
        &[ctxdiff::bench::ablation::VariantRun {
            seed: None,
            metrics: base_metrics,
            reward_gain: None,
        }],
        &eval,
    );
    assert_eq!(report.rows.iter().find(|r| r.setting == "no_finetune").unwrap(), &row);
}

#[test]
fn generators_are_named() {
    let names = [
        IdentityGenerator.name().to_string(),
        ConstantGray::default().name().to_string(),
        PixelJitter::default().name().to_string(),
    ];
    assert_eq!(names, ["identity", "constant_gray", "pixel_jitter"]);
}
