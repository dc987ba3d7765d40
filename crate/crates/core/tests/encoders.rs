use ctxdiff::encoders::{
    encode_image, image_encoding, init_encoders, text_encoding, tokenize, DIM, SEQ_LEN,
};
use ctxdiff::nn::Net;
use ctxdiff::sceneworld::{render, Background, Color, Scene, SceneObject, Shape};
use ctxdiff::vocab::{parse_words, vocab_size, Token, CLS, PAD};
use numcore::{grad_check_coords, ParamStore, Stream, StreamKey, Tensor};
use proptest::prelude::*;

fn params() -> ParamStore {
    init_encoders(StreamKey::root(11)).unwrap()
}

fn words(text: &str) -> Vec<Token> {
    parse_words(text).unwrap()
}

fn scene(color: Color) -> Scene {
    Scene {
        objects: vec![
            SceneObject {
                shape: Shape::Circle,
                color,
                center: (0.3, 0.3),
                radius: 0.15,
            },
            SceneObject {
                shape: Shape::Square,
                color: Color::Blue,
                center: (0.7, 0.7),
                radius: 0.12,
            },
        ],
        background: Background::PlainLight,
    }
}

fn l2(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn empty_and_long_descriptions() {
    let empty = tokenize(&[]);
    assert_eq!(empty.ids()[0], CLS.id());
    assert!(empty.ids()[1..].iter().all(|&i| i == PAD.id()));

    let long: Vec<Token> = (0..40).map(|i| Token::from_id(2 + i % (vocab_size() - 2)).unwrap()).collect();
    let ids = tokenize(&long);
    assert_eq!(ids.ids().len(), SEQ_LEN);
    let want: Vec<usize> = long[..SEQ_LEN - 1].iter().map(|t| t.id()).collect();
    assert_eq!(&ids.ids()[1..], want.as_slice());
}

#[test]
fn identical_sequences_encode_identically() {
    let p = params();
    let ids = tokenize(&words("count 2 plain-dark"));
    let a = text_encoding(&p, &ids).unwrap();
    let b = text_encoding(&p, &ids.clone()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn swapping_content_tokens_changes_text_tokens() {
    let p = params();
    let a = text_encoding(&p, &tokenize(&words("red circle"))).unwrap();
    let b = text_encoding(&p, &tokenize(&words("circle red"))).unwrap();
    assert!(l2(&a.t_tokens, &b.t_tokens) > 1e-6);
}

#[test]
fn zero_tables_collapse_rows() {
    let mut p = params();
    p.get_mut("text.embed").unwrap().value = Tensor::zeros([vocab_size(), DIM]);
    let ids = tokenize(&words("red circle blue square"));
    let with_pos = text_encoding(&p, &ids).unwrap().t_tokens;
    assert!((1..SEQ_LEN).any(|r| with_pos.row(r) != with_pos.row(0)));

    p.get_mut("text.pos").unwrap().value = Tensor::zeros([SEQ_LEN, DIM]);
    let flat = text_encoding(&p, &ids).unwrap().t_tokens;
    for r in 1..SEQ_LEN {
        assert_eq!(flat.row(r), flat.row(0));
    }
}

#[test]
fn image_encodings_follow_content() {
    let p = params();
    let img = render(&scene(Color::Red));
    let a = image_encoding(&p, &img).unwrap();
    let b = image_encoding(&p, &img.clone()).unwrap();
    assert_eq!(a, b);
    let other = image_encoding(&p, &render(&scene(Color::Green))).unwrap();
    assert!(l2(&a.i_e, &other.i_e) > 0.0);
}

#[test]
fn image_embedding_gradient_matches_finite_differences() {
    let p = params();
    let x = render(&scene(Color::Yellow)).to_tensor();
    let mut pick = Stream::from_seed(5);
    let coords: Vec<usize> = (0..48).map(|_| pick.below(x.numel())).collect();
    let report = grad_check_coords(
        |t, xv| {
            let mut net = Net::new(t, &p);
            let iv = encode_image(&mut net, xv).map_err(|e| numcore::NumError::Invalid(e.to_string()))?;
            t.mean_all(iv.e)
        },
        &x,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
    assert!(report.analytic.iter().any(|&g| g != 0.0));
}

proptest! {
    #[test]
    fn tokenize_is_injective_on_short_descriptions(
        a in prop::collection::vec(2usize..40, 0..=31),
        b in prop::collection::vec(2usize..40, 0..=31),
    ) {
        let to_tokens = |v: &[usize]| -> Vec<Token> {
            v.iter().map(|&i| Token::from_id(i % vocab_size()).unwrap()).filter(|t| *t != CLS && *t != PAD).collect()
        };
        let (ta, tb) = (to_tokens(&a), to_tokens(&b));
        prop_assert_eq!(ta == tb, tokenize(&ta) == tokenize(&tb));
    }
}
