use serde::{Deserialize, Serialize};

use numcore::{ParamStore, StreamKey, Tensor, Var};

use super::codec::{LATENT_CELLS, LATENT_CHANNELS};
use super::schedule::NoiseSchedule;
use crate::encoders::DIM;
use crate::error::{Error, Result};
use crate::nn::{is_adapter, Builder, Net};

/// 2x2 groups of latent cells.
pub const LATENT_GRID: usize = 8;
pub const TOKEN_GRID: usize = LATENT_GRID / 2;
pub const N_TOKENS: usize = TOKEN_GRID * TOKEN_GRID;
pub const TOKEN_DIM: usize = 4 * LATENT_CHANNELS;
pub const N_BLOCKS: usize = 2;
pub const DENOISER_MLP: usize = 256;
pub const TIME_HIDDEN: usize = 128;
pub const COND_TOKENS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub scale: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 8, scale: 1.0 }
    }
}

/// Names of the linear layers that carry low-rank adapters: the query and
/// value projections of every self- and cross-attention.
pub fn adapted_layers() -> Vec<String> {
    let mut out = Vec::new();
    for b in 0..N_BLOCKS {
        for kind in ["self", "cross"] {
            for p in ["q", "v"] {
                out.push(format!("denoiser.b{b}.{kind}.{p}"));
            }
        }
    }
    out
}

pub fn init_denoiser(key: StreamKey) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut b = Builder::new(&mut store, key.child("denoiser").stream());
    b.linear("denoiser.patch", TOKEN_DIM, DIM)?;
    b.tensor("denoiser.pos", [N_TOKENS, DIM], 0.1)?;
    b.linear("denoiser.time1", DIM, TIME_HIDDEN)?;
    b.linear("denoiser.time2", TIME_HIDDEN, DIM)?;
    b.linear("denoiser.cond_i", DIM, DIM)?;
    b.linear("denoiser.cond_t", DIM, DIM)?;
    for i in 0..N_BLOCKS {
        b.attention(&format!("denoiser.b{i}.self"), DIM, false)?;
        b.attention(&format!("denoiser.b{i}.cross"), DIM, true)?;
        b.mlp(&format!("denoiser.b{i}.mlp"), DIM, DENOISER_MLP)?;
    }
    b.layer_norm("denoiser.ln_f", DIM)?;
    b.linear_zero("denoiser.out", DIM, TOKEN_DIM)?;
    b.linear_zero("denoiser.gate", DIM, LATENT_CHANNELS)?;
    b.linear("denoiser.filter", TOKEN_DIM, TOKEN_DIM)?;
    b.linear_zero("denoiser.filter_gate", DIM, TOKEN_DIM)?;
    let filter = &mut store.get_mut("denoiser.filter.w")?.value;
    *filter = Tensor::zeros([TOKEN_DIM, TOKEN_DIM]);
    for i in 0..TOKEN_DIM {
        filter.data_mut()[i * TOKEN_DIM + i] = 1.0;
    }
    Ok(store)
}

/// Adds zero-delta adapters to a denoiser store. Only the adapters are left
/// trainable.
pub fn attach_adapters(store: &mut ParamStore, cfg: &AdapterConfig, key: StreamKey) -> Result<()> {
    if cfg.rank == 0 {
        return Err(Error::Config("adapter rank must be positive".into()));
    }
    store.set_trainable(false);
    let mut adapters = ParamStore::new();
    let mut b = Builder::new(&mut adapters, key.child("adapters").stream());
    for name in adapted_layers() {
        b.adapter(&name, DIM, DIM, cfg.rank)?;
    }
    store.merge(adapters)?;
    Ok(())
}

pub fn adapter_param_count(store: &ParamStore) -> usize {
    store
        .iter()
        .filter(|p| is_adapter(&p.name))
        .map(|p| p.value.numel())
        .sum()
}

/// Sinusoidal features of the timestep, `DIM` wide.
pub fn timestep_features(t: usize) -> Vec<f64> {
    let half = DIM / 2;
    let mut out = vec![0.0; DIM];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

/// Gather indices from `(B*64) x 48` latent rows to `(B*16) x 192` tokens:
/// token (r, c) concatenates cells (2r, 2c), (2r, 2c+1), (2r+1, 2c),
/// (2r+1, 2c+1).
pub fn token_indices(b: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * LATENT_CELLS * LATENT_CHANNELS);
    for s in 0..b {
        for tr in 0..TOKEN_GRID {
            for tc in 0..TOKEN_GRID {
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let cell = (2 * tr + dr) * LATENT_GRID + 2 * tc + dc;
                    for ch in 0..LATENT_CHANNELS {
                        idx.push((s * LATENT_CELLS + cell) * LATENT_CHANNELS + ch);
                    }
                }
            }
        }
    }
    idx
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Predicts the noise for a batch of latents `z_t` (`(B*64) x 48`) at
/// timesteps `t` (one per sample) given conditioning rows `i_e`, `t_e`
/// (`B x 64` each).
///
/// The token head, a time-gated linear filter of each noise-normalized
/// token `z_t / sqrt(1 - a)` and a
/// time-gated per-channel copy of `z_t` together predict
/// `v = sqrt(a) eps - sqrt(1 - a) z0`, returned as
/// `eps = sqrt(1 - a) z_t + sqrt(a) v` with `a = alpha_bar[t]`.
pub fn denoiser_forward(
    net: &mut Net,
    schedule: &NoiseSchedule,
    z_t: Var,
    t: &[usize],
    i_e: Var,
    t_e: Var,
) -> Result<Var> {
    let (rows, c) = net.tape.value(z_t).dims2()?;
    let b = t.len();
    if c != LATENT_CHANNELS || rows != b * LATENT_CELLS {
        return Err(Error::Eval(format!(
            "denoiser expects ({b}*64)x48 latents, got {rows}x{c}"
        )));
    }
    let tok_idx = token_indices(b);
    let z_tok = net.tape.gather(z_t, &[b * N_TOKENS, TOKEN_DIM], tok_idx.clone())?;
    let x = net.linear("denoiser.patch", z_tok)?;
    let pos = net.tile("denoiser.pos", b)?;
    let x = net.tape.add(x, pos)?;

    let feats: Vec<f64> = t.iter().flat_map(|&s| timestep_features(s)).collect();
    let tf = net.tape.constant(Tensor::new([b, DIM], feats)?);
    let h = net.linear("denoiser.time1", tf)?;
    let h = net.tape.gelu(h)?;
    let temb = net.linear("denoiser.time2", h)?;
    let gate = net.linear("denoiser.gate", temb)?;
    let gate = net.tape.repeat_rows(gate, LATENT_CELLS)?;
    let gated = net.tape.mul(z_t, gate)?;
    let fgate = net.linear("denoiser.filter_gate", temb)?;
    let fgate = net.tape.repeat_rows(fgate, N_TOKENS)?;
    let mut inv_sigma = Vec::with_capacity(b * N_TOKENS * TOKEN_DIM);
    for &s in t {
        let sigma = (1.0 - schedule.alpha_bar(s)?).sqrt();
        inv_sigma.extend(std::iter::repeat(1.0 / sigma).take(N_TOKENS * TOKEN_DIM));
    }
    let inv_sigma = net.tape.constant(Tensor::new([b * N_TOKENS, TOKEN_DIM], inv_sigma)?);
    let scaled = net.tape.mul(z_tok, inv_sigma)?;
    let filtered = net.linear("denoiser.filter", scaled)?;
    let filtered = net.tape.mul(filtered, fgate)?;
    let temb = net.tape.repeat_rows(temb, N_TOKENS)?;
    let mut x = net.tape.add(x, temb)?;

    let ci = net.linear("denoiser.cond_i", i_e)?;
    let ct = net.linear("denoiser.cond_t", t_e)?;
    let both = net.tape.concat_rows(&[ci, ct])?;
    // interleave to [i_0, t_0, i_1, t_1, ...]
    let ctx_idx = (0..b)
        .flat_map(|s| [s, b + s])
        .flat_map(|r| (0..DIM).map(move |j| r * DIM + j))
        .collect();
    let ctx = net.tape.gather(both, &[COND_TOKENS * b, DIM], ctx_idx)?;

    for i in 0..N_BLOCKS {
        x = net.self_attention(&format!("denoiser.b{i}.self"), x, N_TOKENS)?;
        x = net.cross_attention(&format!("denoiser.b{i}.cross"), x, N_TOKENS, ctx, COND_TOKENS)?;
        x = net.mlp(&format!("denoiser.b{i}.mlp"), x)?;
    }
    let x = net.layer_norm("denoiser.ln_f", x)?;
    let out = net.linear("denoiser.out", x)?;
    let out = net.tape.add(out, filtered)?;
    let v = net.tape.gather(out, &[b * LATENT_CELLS, LATENT_CHANNELS], inverse(&tok_idx))?;
    let v = net.tape.add(v, gated)?;

    let (mut c_z, mut c_v) = (Vec::with_capacity(rows * c), Vec::with_capacity(rows * c));
    for &s in t {
        let a = schedule.alpha_bar(s)?;
        c_z.extend(std::iter::repeat((1.0 - a).sqrt()).take(LATENT_CELLS * c));
        c_v.extend(std::iter::repeat(a.sqrt()).take(LATENT_CELLS * c));
    }
    let c_z = net.tape.constant(Tensor::new([rows, c], c_z)?);
    let c_v = net.tape.constant(Tensor::new([rows, c], c_v)?);
    let from_z = net.tape.mul(z_t, c_z)?;
    let from_v = net.tape.mul(v, c_v)?;
    Ok(net.tape.add(from_z, from_v)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_layout_is_a_permutation() {
        let mut idx = token_indices(2);
        idx.sort_unstable();
        assert_eq!(idx, (0..2 * LATENT_CELLS * LATENT_CHANNELS).collect::<Vec<_>>());
    }

    #[test]
    fn adapters_are_a_small_fraction() {
        let mut store = init_denoiser(StreamKey::root(0)).unwrap();
        attach_adapters(&mut store, &AdapterConfig::default(), StreamKey::root(0)).unwrap();
        let ratio = adapter_param_count(&store) as f64 / store.numel() as f64;
        assert!(ratio < 0.05, "{ratio}");
        assert!(store.iter().all(|p| p.trainable == is_adapter(&p.name)));
    }
}
