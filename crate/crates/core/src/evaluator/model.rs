use numcore::{ops, ParamStore, StreamKey, Tape, Tensor, Var};

use crate::encoders::{DIM, MLP_HIDDEN, N_PATCHES, SEQ_LEN};
use crate::error::{Error, Result};
use crate::nn::{Builder, Net};

pub const N_QUERIES: usize = 8;

pub fn init_evaluator(key: StreamKey) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut b = Builder::new(&mut store, key.child("evaluator").stream());
    b.tensor("qformer.queries", [N_QUERIES, DIM], 0.5)?;
    b.attention("qformer.z.attn", DIM, true)?;
    b.mlp("qformer.z.mlp", DIM, MLP_HIDDEN)?;
    b.attention("qformer.t.attn", DIM, false)?;
    b.mlp("qformer.t.mlp", DIM, MLP_HIDDEN)?;
    b.attention("qformer.za.attn", DIM, false)?;
    b.mlp("qformer.za.mlp", DIM, MLP_HIDDEN)?;
    b.attention("qformer.f.attn", DIM, true)?;
    b.mlp("qformer.f.mlp", DIM, MLP_HIDDEN)?;
    b.linear("qformer.itm", DIM, 2)?;
    Ok(store)
}

/// Evaluator activations for a batch of `B` (image, text) pairs.
pub struct EvalVars {
    /// `(B*8) x 64` visual representation tokens.
    pub z: Var,
    pub z_attn: Var,
    /// `(B*32) x 64`.
    pub t_attn: Var,
    /// `(B*32) x 64` fused features.
    pub f: Var,
    /// `B x 2`; column 1 is the positive-match logit.
    pub logits: Var,
}

/// `i_tokens` is `(B*64) x 64`, `t_tokens` is `(B*32) x 64`.
pub fn qformer_forward(net: &mut Net, i_tokens: Var, t_tokens: Var) -> Result<EvalVars> {
    let (ri, di) = net.tape.value(i_tokens).dims2()?;
    let (rt, dt) = net.tape.value(t_tokens).dims2()?;
    if di != DIM || dt != DIM || ri % N_PATCHES != 0 || rt % SEQ_LEN != 0 || ri / N_PATCHES != rt / SEQ_LEN {
        return Err(Error::Eval(format!(
            "qformer expects (B*{N_PATCHES})x{DIM} image and (B*{SEQ_LEN})x{DIM} text tokens, got {ri}x{di} and {rt}x{dt}"
        )));
    }
    let z = visual_queries(net, i_tokens)?;
    let t = net.self_attention("qformer.t.attn", t_tokens, SEQ_LEN)?;
    let t_attn = net.mlp("qformer.t.mlp", t)?;
    let za = net.self_attention("qformer.za.attn", z, N_QUERIES)?;
    let z_attn = net.mlp("qformer.za.mlp", za)?;
    let f = net.cross_attention("qformer.f.attn", t_attn, SEQ_LEN, z_attn, N_QUERIES)?;
    let f = net.mlp("qformer.f.mlp", f)?;
    let pooled = net.tape.block_mean_rows(f, SEQ_LEN)?;
    let logits = net.linear("qformer.itm", pooled)?;
    Ok(EvalVars {
        z,
        z_attn,
        t_attn,
        f,
        logits,
    })
}

/// The image-only branch: learned queries attending over `(B*64) x 64`
/// image tokens, giving `(B*8) x 64` rows of Z.
pub fn visual_queries(net: &mut Net, i_tokens: Var) -> Result<Var> {
    let (ri, _) = net.tape.value(i_tokens).dims2()?;
    let b = ri / N_PATCHES;
    let q = net.tile("qformer.queries", b)?;
    let z = net.cross_attention("qformer.z.attn", q, N_QUERIES, i_tokens, N_PATCHES)?;
    net.mlp("qformer.z.mlp", z)
}

/// Per-pair `max_i cos(Z_i, T_cls)` as a `B x 1` column.
pub fn reward_global_var(tape: &mut Tape, z: Var, t_cls: Var) -> Result<Var> {
    let (b, _) = tape.value(t_cls).dims2()?;
    let mut out = Vec::with_capacity(b);
    for s in 0..b {
        let rows: Vec<usize> = (s * N_QUERIES..(s + 1) * N_QUERIES).collect();
        let zs = tape.select_rows(z, &rows)?;
        let ts = tape.select_rows(t_cls, &[s])?;
        let c = tape.cosine_rows(zs, ts)?;
        out.push(tape.max_all(c)?);
    }
    Ok(tape.concat_rows(&out)?)
}

/// Positive-match logits as a `B x 1` column.
pub fn reward_fine_var(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (b, _) = tape.value(logits).dims2()?;
    let idx = (0..b).map(|s| s * 2 + 1).collect();
    Ok(tape.gather(logits, &[b, 1], idx)?)
}

/// Maximum cosine similarity between any row of `z` and `t_cls`, plus
/// whether a zero-norm input was encountered.
pub fn reward_global(z: &Tensor, t_cls: &[f64]) -> Result<(f64, bool)> {
    let (m, d) = z.dims2()?;
    if d != t_cls.len() || m == 0 {
        return Err(Error::Eval(format!("Z is {m}x{d}, T_cls has {}", t_cls.len())));
    }
    let mut best = f64::NEG_INFINITY;
    let mut flagged = false;
    for i in 0..m {
        let c = ops::cosine_similarity(z.row(i), t_cls)?;
        flagged |= c.zero_norm;
        best = best.max(c.value);
    }
    Ok((best, flagged))
}

/// The positive-match entry of a 2-logit ITM output.
pub fn reward_fine(itm_logits: &[f64]) -> Result<f64> {
    match itm_logits {
        [_, pos] => Ok(*pos),
        _ => Err(Error::Eval(format!("expected 2 logits, got {}", itm_logits.len()))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardPair {
    pub r_global: f64,
    pub r_fine: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; DIM];
        v[i] = 1.0;
        v
    }

    #[test]
    fn global_reward_examples() {
        let z = Tensor::from_rows(&[onehot(0), onehot(1)]).unwrap();
        assert_eq!(reward_global(&z, &onehot(0)).unwrap().0, 1.0);
        let z = Tensor::from_rows(&[onehot(1), onehot(2)]).unwrap();
        assert_eq!(reward_global(&z, &onehot(0)).unwrap().0, 0.0);
        let mut a = onehot(0);
        a[1] = 1.0;
        let mut b = vec![0.0; DIM];
        b[0] = -1.0;
        let z = Tensor::from_rows(&[a, b]).unwrap();
        let (r, _) = reward_global(&z, &onehot(0)).unwrap();
        assert!((r - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn fine_reward_selects_positive_logit() {
        assert_eq!(reward_fine(&[0.3, 1.7]).unwrap(), 1.7);
        assert!(reward_fine(&[0.3]).is_err());
    }
}
