//! Text and image encoders. One text trunk feeds two heads: the evaluator
//! head (`T_tokens`, `T_cls`) and the conditioning head (`T_e`).

use numcore::{ParamStore, StreamKey, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{block_starts, Builder, Net};
use crate::sceneworld::image::{Image, CHANNELS, IMAGE_LEN, IMAGE_SIZE};
use crate::vocab::{parse_words, vocab_size, Token, CLS, PAD};

pub const SEQ_LEN: usize = 32;
pub const DIM: usize = 64;
pub const MLP_HIDDEN: usize = 128;
pub const PATCH: usize = 4;
pub const GRID: usize = IMAGE_SIZE / PATCH;
pub const N_PATCHES: usize = GRID * GRID;
pub const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;

/// Vocabulary ids padded to [`SEQ_LEN`], starting with `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenIds(Vec<usize>);

impl TokenIds {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }
}

/// `[CLS]` + up to 31 content tokens + `[PAD]` fill. A leading `[CLS]` in
/// the input is not repeated.
pub fn tokenize(tokens: &[Token]) -> TokenIds {
    let content = match tokens.first() {
        Some(&t) if t == CLS => &tokens[1..],
        _ => tokens,
    };
    let mut ids = Vec::with_capacity(SEQ_LEN);
    ids.push(CLS.id());
    ids.extend(content.iter().take(SEQ_LEN - 1).map(|t| t.id()));
    ids.resize(SEQ_LEN, PAD.id());
    TokenIds(ids)
}

pub fn tokenize_text(text: &str) -> Result<TokenIds> {
    Ok(tokenize(&parse_words(text)?))
}

pub fn init_encoders(key: StreamKey) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut b = Builder::new(&mut store, key.child("encoders").stream());
    b.tensor("text.embed", [vocab_size(), DIM], 0.1)?;
    b.tensor("text.pos", [SEQ_LEN, DIM], 0.1)?;
    b.attention("text.attn", DIM, false)?;
    b.mlp("text.mlp", DIM, MLP_HIDDEN)?;
    b.layer_norm("text.ln_f", DIM)?;
    b.linear("text.eval_head", DIM, DIM)?;
    b.linear("text.cond_head", DIM, DIM)?;

    b.linear("image.patch", PATCH_DIM, DIM)?;
    b.tensor("image.row", [GRID, DIM], 0.1)?;
    b.tensor("image.col", [GRID, DIM], 0.1)?;
    b.attention("image.attn", DIM, false)?;
    b.mlp("image.mlp", DIM, MLP_HIDDEN)?;
    b.layer_norm("image.ln_f", DIM)?;
    b.layer_norm("image.ln_pool", DIM)?;
    b.linear("image.cond_head", DIM, DIM)?;
    Ok(store)
}

/// Text features for a batch of `B` sequences.
pub struct TextVars {
    /// `(B*32) x 64`.
    pub tokens: Var,
    /// `B x 64`, row 0 of each sequence of `tokens`.
    pub cls: Var,
    /// `B x 64`.
    pub e: Var,
}

pub fn encode_text(net: &mut Net, batch: &[TokenIds]) -> Result<TextVars> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Eval("empty text batch".into()));
    }
    let ids: Vec<usize> = batch.iter().flat_map(|t| t.0.iter().copied()).collect();
    let table = net.p("text.embed")?;
    let x = net.tape.embedding(table, &ids)?;
    let pos = net.tile("text.pos", b)?;
    let x = net.tape.add(x, pos)?;
    let x = net.self_attention("text.attn", x, SEQ_LEN)?;
    let x = net.mlp("text.mlp", x)?;
    let h = net.layer_norm("text.ln_f", x)?;
    let tokens = net.linear("text.eval_head", h)?;
    let cls = net.tape.select_rows(tokens, &block_starts(b, SEQ_LEN))?;
    let e = net.linear("text.cond_head", cls)?;
    Ok(TextVars { tokens, cls, e })
}

/// Gather indices turning `B x 3072` HWC images into `(B*64) x 48` patch rows
/// (patches in raster order, each patch flattened row-major with channels
/// innermost). This is also the codec's space-to-depth layout.
pub fn patch_indices(b: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * IMAGE_LEN);
    for s in 0..b {
        for pr in 0..GRID {
            for pc in 0..GRID {
                for i in 0..PATCH {
                    for j in 0..PATCH {
                        for ch in 0..CHANNELS {
                            let (r, c) = (pr * PATCH + i, pc * PATCH + j);
                            idx.push(s * IMAGE_LEN + (r * IMAGE_SIZE + c) * CHANNELS + ch);
                        }
                    }
                }
            }
        }
    }
    idx
}

pub struct ImageVars {
    /// `(B*64) x 64`.
    pub tokens: Var,
    /// `B x 64`.
    pub e: Var,
}

/// Encodes a `B x 3072` matrix of images.
pub fn encode_image(net: &mut Net, images: Var) -> Result<ImageVars> {
    let (b, len) = net.tape.value(images).dims2()?;
    if len != IMAGE_LEN {
        return Err(Error::Image(format!("expected rows of {IMAGE_LEN} values, got {len}")));
    }
    let patches = net.tape.gather(images, &[b * N_PATCHES, PATCH_DIM], patch_indices(b))?;
    let x = net.linear("image.patch", patches)?;
    let rows = net.p("image.row")?;
    let cols = net.p("image.col")?;
    let row_ids: Vec<usize> = (0..b * N_PATCHES).map(|i| (i % N_PATCHES) / GRID).collect();
    let col_ids: Vec<usize> = (0..b * N_PATCHES).map(|i| i % GRID).collect();
    let re = net.tape.embedding(rows, &row_ids)?;
    let ce = net.tape.embedding(cols, &col_ids)?;
    let x = net.tape.add(x, re)?;
    let x = net.tape.add(x, ce)?;
    let x = net.self_attention("image.attn", x, N_PATCHES)?;
    let x = net.mlp("image.mlp", x)?;
    let tokens = net.layer_norm("image.ln_f", x)?;
    let pooled = net.tape.block_mean_rows(tokens, N_PATCHES)?;
    let pooled = net.layer_norm("image.ln_pool", pooled)?;
    let e = net.linear("image.cond_head", pooled)?;
    Ok(ImageVars { tokens, e })
}

pub fn images_tensor(images: &[&Image]) -> Result<Tensor> {
    let data = images.iter().flat_map(|i| i.pixels().iter().copied()).collect();
    Ok(Tensor::new([images.len(), IMAGE_LEN], data)?)
}

/// Plain-value text encoding of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding {
    pub t_tokens: Tensor,
    pub t_cls: Tensor,
    pub t_e: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoding {
    pub i_tokens: Tensor,
    pub i_e: Tensor,
}

pub fn text_encoding(params: &ParamStore, ids: &TokenIds) -> Result<TextEncoding> {
    let mut tape = Tape::no_grad();
    let mut net = Net::new(&mut tape, params);
    let v = encode_text(&mut net, std::slice::from_ref(ids))?;
    Ok(TextEncoding {
        t_tokens: tape.value(v.tokens).clone(),
        t_cls: tape.value(v.cls).clone(),
        t_e: tape.value(v.e).clone(),
    })
}

pub fn image_encoding(params: &ParamStore, image: &Image) -> Result<ImageEncoding> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(image.to_tensor());
    let mut net = Net::new(&mut tape, params);
    let v = encode_image(&mut net, x)?;
    Ok(ImageEncoding {
        i_tokens: tape.value(v.tokens).clone(),
        i_e: tape.value(v.e).clone(),
    })
}
