//! Parameter construction and forward helpers shared by the encoders, the
//! evaluator and the denoiser. Token matrices are stacked per sample: a batch
//! of `B` sequences of length `n` is a `(B*n) x d` matrix.

use numcore::{ParamStore, Stream, Tape, Tensor, Var};

use crate::error::Result;

/// Adds named parameters to a store with seeded initialisation.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    stream: Stream,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, stream: Stream) -> Self {
        Self { store, stream }
    }

    pub fn tensor(&mut self, name: &str, shape: [usize; 2], std: f64) -> Result<()> {
        let mut t = if std == 0.0 {
            Tensor::zeros(shape)
        } else {
            Tensor::randn(shape, std, &mut self.stream)
        };
        // Parameters live on the f32 grid so checkpoints reload exactly.
        t.round_to_f32();
        self.store.insert(name, t)?;
        Ok(())
    }

    /// `W` is stored `d_out x d_in` and applied as `x W^T + b`.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.tensor(&format!("{name}.w"), [d_out, d_in], (1.0 / d_in as f64).sqrt())?;
        self.tensor(&format!("{name}.b"), [1, d_out], 0.0)
    }

    pub fn linear_zero(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.tensor(&format!("{name}.w"), [d_out, d_in], 0.0)?;
        self.tensor(&format!("{name}.b"), [1, d_out], 0.0)
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<()> {
        self.store.insert(format!("{name}.g"), Tensor::full([1, d], 1.0))?;
        self.tensor(&format!("{name}.beta"), [1, d], 0.0)
    }

    /// Low-rank adapter on the linear layer `name`: `A` is `d_out x r`
    /// (random), `B` is `r x d_in` (zero).
    pub fn adapter(&mut self, name: &str, d_in: usize, d_out: usize, rank: usize) -> Result<()> {
        self.tensor(&format!("{name}.lora_a"), [d_out, rank], (1.0 / rank as f64).sqrt())?;
        self.tensor(&format!("{name}.lora_b"), [rank, d_in], 0.0)
    }

    pub fn attention(&mut self, name: &str, d: usize, cross: bool) -> Result<()> {
        self.layer_norm(&format!("{name}.ln"), d)?;
        if cross {
            self.layer_norm(&format!("{name}.ln_ctx"), d)?;
        }
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), d, d)?;
        }
        Ok(())
    }

    pub fn mlp(&mut self, name: &str, d: usize, hidden: usize) -> Result<()> {
        self.layer_norm(&format!("{name}.ln"), d)?;
        self.linear(&format!("{name}.fc1"), d, hidden)?;
        self.linear(&format!("{name}.fc2"), hidden, d)
    }
}

pub fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Forward context: a tape plus the parameters bound on it.
pub struct Net<'t, 'p> {
    pub tape: &'t mut Tape,
    pub params: &'p ParamStore,
    pub lora_scale: f64,
}

impl<'t, 'p> Net<'t, 'p> {
    pub fn new(tape: &'t mut Tape, params: &'p ParamStore) -> Self {
        Self {
            tape,
            params,
            lora_scale: 1.0,
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        Ok(self.tape.param(self.params.get(name)?))
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.tape.matmul_nt(x, w)?;
        let mut y = self.tape.add_row(y, b)?;
        let a_name = format!("{name}.lora_a");
        if self.params.contains(&a_name) {
            let a = self.p(&a_name)?;
            let bm = self.p(&format!("{name}.lora_b"))?;
            let low = self.tape.matmul_nt(x, bm)?;
            let delta = self.tape.matmul_nt(low, a)?;
            let delta = self.tape.scale(delta, self.lora_scale)?;
            y = self.tape.add(y, delta)?;
        }
        Ok(y)
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{name}.g"))?;
        let b = self.p(&format!("{name}.beta"))?;
        Ok(self.tape.layer_norm(x, g, b)?)
    }

    /// `x + O(attn(Q(LN x), K(LN x), V(LN x)))` within blocks of `n` rows.
    pub fn self_attention(&mut self, name: &str, x: Var, n: usize) -> Result<Var> {
        let h = self.layer_norm(&format!("{name}.ln"), x)?;
        let q = self.linear(&format!("{name}.q"), h)?;
        let k = self.linear(&format!("{name}.k"), h)?;
        let v = self.linear(&format!("{name}.v"), h)?;
        let a = self.tape.block_attention(q, k, v, n, n)?;
        let o = self.linear(&format!("{name}.o"), a)?;
        Ok(self.tape.add(x, o)?)
    }

    /// Residual cross-attention of `x` (blocks of `nx` rows) over `ctx`
    /// (blocks of `nc` rows).
    pub fn cross_attention(
        &mut self,
        name: &str,
        x: Var,
        nx: usize,
        ctx: Var,
        nc: usize,
    ) -> Result<Var> {
        let h = self.layer_norm(&format!("{name}.ln"), x)?;
        let c = self.layer_norm(&format!("{name}.ln_ctx"), ctx)?;
        let q = self.linear(&format!("{name}.q"), h)?;
        let k = self.linear(&format!("{name}.k"), c)?;
        let v = self.linear(&format!("{name}.v"), c)?;
        let a = self.tape.block_attention(q, k, v, nx, nc)?;
        let o = self.linear(&format!("{name}.o"), a)?;
        Ok(self.tape.add(x, o)?)
    }

    /// `x + fc2(gelu(fc1(LN x)))`.
    pub fn mlp(&mut self, name: &str, x: Var) -> Result<Var> {
        let h = self.layer_norm(&format!("{name}.ln"), x)?;
        let h = self.linear(&format!("{name}.fc1"), h)?;
        let h = self.tape.gelu(h)?;
        let h = self.linear(&format!("{name}.fc2"), h)?;
        Ok(self.tape.add(x, h)?)
    }

    /// Tiles a parameter matrix once per sample.
    pub fn tile(&mut self, name: &str, times: usize) -> Result<Var> {
        let v = self.p(name)?;
        let (r, c) = self.tape.value(v).dims2()?;
        let n = r * c;
        let idx = (0..times).flat_map(|_| 0..n).collect();
        Ok(self.tape.gather(v, &[times * r, c], idx)?)
    }
}

/// Row indices `0, n, 2n, ...` selecting the first row of every block.
pub fn block_starts(blocks: usize, n: usize) -> Vec<usize> {
    (0..blocks).map(|b| b * n).collect()
}
