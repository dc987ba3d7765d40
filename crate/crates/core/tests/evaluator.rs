use ctxdiff::encoders::{encode_image, encode_text, init_encoders, tokenize, DIM, N_PATCHES, SEQ_LEN};
use ctxdiff::evaluator::{
    auc, evaluate_heldout, init_evaluator, pretrain_evaluator, qformer_forward, reward_fine, reward_fine_var,
    reward_global, EvaluatorTrainConfig, N_QUERIES,
};
use ctxdiff::nn::Net;
use ctxdiff::pipeline::pairs;
use ctxdiff::sceneworld::{generate_split, ContextPair, DescriptionMode, SceneConfig, Task};
use numcore::{grad_check_coords, NumError, ParamStore, Stream, StreamKey, Tape, Tensor};
use proptest::prelude::*;

fn params(seed: u64) -> ParamStore {
    let key = StreamKey::root(seed);
    let mut p = init_encoders(key.child("enc")).unwrap();
    p.merge(init_evaluator(key.child("eval")).unwrap()).unwrap();
    p
}

fn contexts(n: usize, label: &str) -> Vec<ContextPair> {
    generate_split(
        StreamKey::root(3).child(label),
        n,
        &SceneConfig::default(),
        DescriptionMode::Focused,
        true,
        &Task::ALL,
    )
    .unwrap()
}

fn num(e: ctxdiff::Error) -> NumError {
    NumError::Invalid(e.to_string())
}

#[test]
fn logits_have_two_entries_per_pair() {
    let p = params(1);
    let ctx = contexts(3, "shape");
    let ps = pairs(&ctx);
    let imgs: Vec<_> = ps.iter().map(|q| &q.image).collect();
    let ids: Vec<_> = ps.iter().map(|q| q.ids.clone()).collect();
    let mut t = Tape::no_grad();
    let x = t.constant(ctxdiff::encoders::images_tensor(&imgs).unwrap());
    let mut net = Net::new(&mut t, &p);
    let iv = encode_image(&mut net, x).unwrap();
    let tv = encode_text(&mut net, &ids).unwrap();
    let ev = qformer_forward(&mut net, iv.tokens, tv.tokens).unwrap();
    assert_eq!(t.value(ev.logits).shape(), &[3, 2]);
    assert_eq!(t.value(ev.z).shape(), &[3 * N_QUERIES, DIM]);
}

#[test]
fn zero_inputs_give_identical_fused_rows() {
    let p = params(2);
    let mut t = Tape::no_grad();
    let i = t.constant(Tensor::zeros([N_PATCHES, DIM]));
    let tt = t.constant(Tensor::zeros([SEQ_LEN, DIM]));
    let mut net = Net::new(&mut t, &p);
    let ev = qformer_forward(&mut net, i, tt).unwrap();
    let f = t.value(ev.f).clone();
    for r in 1..SEQ_LEN {
        assert_eq!(f.row(r), f.row(0));
    }
    let w = &p.get("qformer.itm.w").unwrap().value;
    let b = &p.get("qformer.itm.b").unwrap().value;
    let logits = t.value(ev.logits);
    for k in 0..2 {
        let want: f64 = (0..DIM).map(|j| f.row(0)[j] * w.get2(k, j)).sum::<f64>() + b.data()[k];
        assert!((logits.get2(0, k) - want).abs() < 1e-12);
    }
}

#[test]
fn match_logit_gradient_wrt_image_tokens() {
    let p = params(3);
    let mut s = Stream::from_seed(8);
    let i_tokens = Tensor::randn([N_PATCHES, DIM], 1.0, &mut s);
    let t_tokens = Tensor::randn([SEQ_LEN, DIM], 1.0, &mut s);
    let coords: Vec<usize> = (0..40).map(|_| s.below(i_tokens.numel())).collect();
    let report = grad_check_coords(
        |t, iv| {
            let tv = t.constant(t_tokens.clone());
            let mut net = Net::new(t, &p);
            let ev = qformer_forward(&mut net, iv, tv).map_err(num)?;
            let r = reward_fine_var(t, ev.logits).map_err(num)?;
            t.sum_all(r)
        },
        &i_tokens,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
}

#[test]
fn fine_reward_gradient_wrt_pixels() {
    let p = params(4);
    let ctx = &contexts(1, "pixels")[0];
    let x = ctx.image().to_tensor();
    let ids = vec![tokenize(&ctx.description.tokens)];
    let mut s = Stream::from_seed(9);
    let coords: Vec<usize> = (0..40).map(|_| s.below(x.numel())).collect();
    let report = grad_check_coords(
        |t, xv| {
            let mut net = Net::new(t, &p);
            let iv = encode_image(&mut net, xv).map_err(num)?;
            let tv = encode_text(&mut net, &ids).map_err(num)?;
            let ev = qformer_forward(&mut net, iv.tokens, tv.tokens).map_err(num)?;
            let r = reward_fine_var(t, ev.logits).map_err(num)?;
            t.sum_all(r)
        },
        &x,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
}

#[test]
fn reward_examples() {
    let mut z = Tensor::zeros([2, DIM]);
    z.data_mut()[0] = 1.0;
    z.data_mut()[1] = 1.0;
    z.data_mut()[DIM] = -1.0;
    let mut t_cls = vec![0.0; DIM];
    t_cls[0] = 1.0;
    let (r, flagged) = reward_global(&z, &t_cls).unwrap();
    assert!((r - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    assert!(!flagged);
    assert_eq!(reward_fine(&[0.3, 1.7]).unwrap(), 1.7);
}

#[test]
fn zero_steps_keep_initialization() {
    let mut p = params(5);
    let init = p.clone();
    let ps = pairs(&contexts(8, "zero"));
    let cfg = EvaluatorTrainConfig {
        steps: 0,
        batch_size: 4,
        ..EvaluatorTrainConfig::default()
    };
    pretrain_evaluator(&mut p, &ps, &ps[..2], &cfg, StreamKey::root(1)).unwrap();
    assert_eq!(p, init);
}

#[test]
fn short_training_separates_matched_pairs() {
    let mut p = params(6);
    let train = pairs(&contexts(512, "train"));
    let held = pairs(&contexts(128, "held"));
    let cfg = EvaluatorTrainConfig {
        steps: 200,
        batch_size: 16,
        eval_every: 100,
        ..EvaluatorTrainConfig::default()
    };
    pretrain_evaluator(&mut p, &train, &held[..32], &cfg, StreamKey::root(2)).unwrap();
    let stats = evaluate_heldout(&p, &held, StreamKey::root(3)).unwrap();
    assert!(stats.r_fine_matched > stats.r_fine_shuffled, "{stats:?}");
    assert!(stats.auc > 0.5, "{stats:?}");
}

fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(
        pos in prop::collection::vec(-3i32..3, 1..20),
        neg in prop::collection::vec(-3i32..3, 1..20),
    ) {
        let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
        let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
        prop_assert!((auc(&pos, &neg) - brute_auc(&pos, &neg)).abs() < 1e-12);
    }
}
