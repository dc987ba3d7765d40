//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and, when any input
//! requires a gradient, enough saved state to run its vector-Jacobian
//! product. `backward` walks the tape once in reverse.

use std::collections::{BTreeMap, HashMap};

use crate::error::{shape_err, NumError, Result};
use crate::param::Parameter;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: f64 },
    Shift(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    MaxAll { a: Var, argmax: usize },
    Gather { a: Var, idx: Vec<usize> },
    CosineRows { z: Var, t: Var },
    NormalizeRows { a: Var, norms: Vec<f64> },
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        bq: usize,
        bk: usize,
        weights: Vec<f64>,
    },
    BlockMeanRows { a: Var, block: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    overrides: HashMap<String, Var>,
    grad_enabled: bool,
    zero_norm_warnings: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            overrides: HashMap::new(),
            grad_enabled: true,
            zero_norm_warnings: 0,
        }
    }

    /// A tape on which parameters bind as constants and nothing is tracked.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of zero-norm inputs seen by cosine/normalize ops.
    pub fn zero_norm_warnings(&self) -> usize {
        self.zero_norm_warnings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf that is tracked when the tape has gradients enabled.
    pub fn input(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(value, rg)
    }

    /// Re-enters a value as an untracked constant, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds a named parameter. Repeated binds return the same node.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.overrides.get(&p.name) {
            return v;
        }
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        let rg = p.trainable && self.grad_enabled;
        let v = self.push_leaf(p.value.clone(), rg);
        self.params.insert(p.name.clone(), v);
        v
    }

    /// Makes later `param` binds of `name` resolve to `v`.
    pub fn override_param(&mut self, name: impl Into<String>, v: Var) {
        self.overrides.insert(name.into(), v);
    }

    /// Names of bound parameters that are tracked.
    pub fn tracked_params(&self) -> Vec<(String, Var)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        out.sort();
        out
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| shape_err(op, format!("expected a matrix, got {:?}", self.value(v).shape())))
    }

    // ----- linear algebra -------------------------------------------------

    /// `a @ b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (kb, n, bs) = if trans_b {
            (bc, br, (1, bc as isize))
        } else {
            (br, bc, (bc as isize, 1))
        };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("{m}x{k} @ {}{br}x{bc}", if trans_b { "T " } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            bs,
            0.0,
            &mut out,
        );
        let value = Tensor::new([m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x d` row to every row of an `n x d` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.dims2("add_row", a)?;
        let (one, d2) = self.dims2("add_row", row)?;
        if one != 1 || d != d2 {
            return Err(shape_err("add_row", format!("{n}x{d} + {one}x{d2}")));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(d) {
            for (o, x) in chunk.iter_mut().zip(&r) {
                *o += x;
            }
        }
        let v = Tensor::new([n, d], out)?;
        self.push("add_row", v, Op::AddRow { a, row }, &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale { a, c }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, Op::Shift(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| {
            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        self.push("gelu", v, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    // ----- row-wise -------------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims2("softmax_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let v = Tensor::new([n, d], out)?;
        self.push("softmax_rows", v, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims2("log_softmax_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let v = Tensor::new([n, d], out)?;
        self.push("log_softmax_rows", v, Op::LogSoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalisation with affine `1 x d` gain and bias.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.dims2("layer_norm", a)?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, d] {
                return Err(shape_err(
                    "layer_norm",
                    format!("affine shape {:?}, want [1, {d}]", self.value(p).shape()),
                ));
            }
        }
        let x = self.value(a).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new([n, d], out)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[a, gamma, beta],
        )
    }

    /// Cosine similarity of every row of `z` (`m x d`) with the row vector
    /// `t` (`1 x d`), as an `m x 1` column. Zero-norm inputs give 0 and bump
    /// the warning counter.
    pub fn cosine_rows(&mut self, z: Var, t: Var) -> Result<Var> {
        let (m, d) = self.dims2("cosine_rows", z)?;
        let (one, d2) = self.dims2("cosine_rows", t)?;
        if one != 1 || d != d2 {
            return Err(shape_err("cosine_rows", format!("{m}x{d} vs {one}x{d2}")));
        }
        let tv = self.value(t).data().to_vec();
        let tn = tv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut out = vec![0.0; m];
        let mut warnings = 0;
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.value(z).row(i);
            let zn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if zn == 0.0 || tn == 0.0 {
                warnings += 1;
                continue;
            }
            let dot: f64 = row.iter().zip(&tv).map(|(a, b)| a * b).sum();
            *o = (dot / (zn * tn)).clamp(-1.0, 1.0);
        }
        self.zero_norm_warnings += warnings;
        let v = Tensor::new([m, 1], out)?;
        self.push("cosine_rows", v, Op::CosineRows { z, t }, &[z, t])
    }

    /// Scales every row to unit L2 norm; zero rows stay zero (with a warning).
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims2("normalize_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        let mut norms = vec![0.0; n];
        for (i, row) in out.chunks_mut(d.max(1)).enumerate() {
            let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[i] = nrm;
            if nrm == 0.0 {
                self.zero_norm_warnings += 1;
                continue;
            }
            for x in row.iter_mut() {
                *x /= nrm;
            }
        }
        let v = Tensor::new([n, d], out)?;
        self.push("normalize_rows", v, Op::NormalizeRows { a, norms }, &[a])
    }

    // ----- structural -----------------------------------------------------

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumError::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::new([ids.len(), d], out)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let (_, d) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != d {
                return Err(shape_err("concat_rows", format!("width {c} vs {d}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new([rows, d], out)?;
        self.push("concat_rows", v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `out[i] = a.data[idx[i]]`, reshaped to `shape`. Covers reshape,
    /// transpose, row selection and patch rearrangement.
    pub fn gather(&mut self, a: Var, shape: &[usize], idx: Vec<usize>) -> Result<Var> {
        let n = self.value(a).numel();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(shape_err("gather", format!("{shape:?} vs {} indices", idx.len())));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len());
        for &i in &idx {
            if i >= n {
                return Err(NumError::Index {
                    op: "gather",
                    index: i,
                    bound: n,
                });
            }
            out.push(src[i]);
        }
        let v = Tensor::new(shape.to_vec(), out)?;
        self.push("gather", v, Op::Gather { a, idx }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        self.gather(a, shape, (0..n).collect())
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let idx = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(a, &[c, r], idx)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (_, c) = self.dims2("select_rows", a)?;
        let idx = rows
            .iter()
            .flat_map(|&r| (0..c).map(move |j| r * c + j))
            .collect();
        self.gather(a, &[rows.len(), c], idx)
    }

    // ----- reductions -----------------------------------------------------

    /// Column means, as a `1 x d` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims2("mean_rows", a)?;
        if n == 0 {
            return Err(shape_err("mean_rows", "empty input"));
        }
        let mut out = vec![0.0; d];
        for row in self.value(a).data().chunks(d.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let v = Tensor::new([1, d], out)?;
        self.push("mean_rows", v, Op::MeanRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(shape_err("mean_all", "empty input"));
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Maximum entry; the gradient flows to the first maximiser.
    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data();
        let (argmax, m) = data
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best });
        if data.is_empty() {
            return Err(shape_err("max_all", "empty input"));
        }
        self.push("max_all", Tensor::scalar(m), Op::MaxAll { a, argmax }, &[a])
    }

    // ----- composites -----------------------------------------------------

    /// `softmax(q k^T / sqrt(d)) v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (_, d) = self.dims2("attention", q)?;
        let (nk, dk) = self.dims2("attention", k)?;
        let (nv, _) = self.dims2("attention", v)?;
        if d == 0 || d != dk || nk != nv {
            return Err(shape_err(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    self.value(q).shape(),
                    self.value(k).shape(),
                    self.value(v).shape()
                ),
            ));
        }
        let scores = self.matmul_nt(q, k)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        let weights = self.softmax_rows(scores)?;
        self.matmul(weights, v)
    }

    /// Attention applied independently to aligned row blocks: block `b` of
    /// `q` (rows `b*bq..(b+1)*bq`) attends only to block `b` of `k` and `v`
    /// (rows `b*bk..(b+1)*bk`). With one block this equals [`Tape::attention`].
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, bq: usize, bk: usize) -> Result<Var> {
        let (mq, d) = self.dims2("block_attention", q)?;
        let (mk, dk) = self.dims2("block_attention", k)?;
        let (mv, dv) = self.dims2("block_attention", v)?;
        if d == 0 || d != dk || mk != mv || bq == 0 || bk == 0 || mq % bq != 0 || mk % bk != 0 || mq / bq != mk / bk {
            return Err(shape_err(
                "block_attention",
                format!("q {mq}x{d} / {bq}, k {mk}x{dk} / {bk}, v {mv}x{dv}"),
            ));
        }
        let blocks = mq / bq;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![0.0; blocks * bq * bk];
        let mut out = vec![0.0; mq * dv];
        for b in 0..blocks {
            let w = &mut weights[b * bq * bk..(b + 1) * bq * bk];
            gemm(bq, d, bk, scale, &qd[b * bq * d..], (d as isize, 1), &kd[b * bk * d..], (1, d as isize), 0.0, w);
            for row in w.chunks_mut(bk) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
            gemm(bq, bk, dv, 1.0, w, (bk as isize, 1), &vd[b * bk * dv..], (dv as isize, 1), 0.0, &mut out[b * bq * dv..(b + 1) * bq * dv]);
        }
        let value = Tensor::new([mq, dv], out)?;
        self.push(
            "block_attention",
            value,
            Op::BlockAttention { q, k, v, bq, bk, weights },
            &[q, k, v],
        )
    }

    /// Column means of each consecutive block of `block` rows: `(n/block) x d`.
    pub fn block_mean_rows(&mut self, a: Var, block: usize) -> Result<Var> {
        let (n, d) = self.dims2("block_mean_rows", a)?;
        if block == 0 || n % block != 0 {
            return Err(shape_err("block_mean_rows", format!("{n} rows in blocks of {block}")));
        }
        let mut out = vec![0.0; (n / block) * d];
        for (i, row) in self.value(a).data().chunks(d.max(1)).enumerate() {
            let o = &mut out[(i / block) * d..(i / block + 1) * d];
            for (x, y) in o.iter_mut().zip(row) {
                *x += y / block as f64;
            }
        }
        let v = Tensor::new([n / block, d], out)?;
        self.push("block_mean_rows", v, Op::BlockMeanRows { a, block }, &[a])
    }

    /// Repeats every row of `a` `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (n, d) = self.dims2("repeat_rows", a)?;
        let idx = (0..n)
            .flat_map(|r| (0..times).flat_map(move |_| (0..d).map(move |j| r * d + j)))
            .collect();
        self.gather(a, &[n * times, d], idx)
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Mean negative log-likelihood of `targets[i]` under row `i` of `logits`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2("cross_entropy_rows", logits)?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy_rows", format!("{n} rows vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NumError::Index {
                op: "cross_entropy_rows",
                index: bad,
                bound: c,
            });
        }
        let logp = self.log_softmax_rows(logits)?;
        let idx = targets.iter().enumerate().map(|(i, &t)| i * c + t).collect();
        let picked = self.gather(logp, &[n, 1], idx)?;
        let m = self.mean_all(picked)?;
        self.scale(m, -1.0)
    }

    // ----- backward -------------------------------------------------------

    /// Gradients of the single-element `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", "loss must have exactly one element"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2()?;
                let (br, bc) = self.value(*b).dims2()?;
                let n = if *trans_b { br } else { bc };
                if self.requires_grad(*a) {
                    // dA = dC @ op(B)^T
                    let mut da = vec![0.0; m * k];
                    let bs = if *trans_b { (bc as isize, 1) } else { (1, bc as isize) };
                    gemm(m, n, k, 1.0, gd, (n as isize, 1), self.value(*b).data(), bs, 0.0, &mut da);
                    accumulate(grads, *a, Tensor::new([m, k], da)?)?;
                }
                if self.requires_grad(*b) {
                    let ad = self.value(*a).data();
                    let db = if *trans_b {
                        // B is n x k: dB = dC^T @ A
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, 1.0, gd, (1, n as isize), ad, (k as isize, 1), 0.0, &mut db);
                        Tensor::new([n, k], db)?
                    } else {
                        // B is k x n: dB = A^T @ dC
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, 1.0, ad, (1, k as isize), gd, (n as isize, 1), 0.0, &mut db);
                        Tensor::new([k, n], db)?
                    };
                    accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, || Ok(g.clone()))?;
                self.acc_if(grads, *b, || Ok(g.clone()))?;
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, || Ok(g.clone()))?;
                self.acc_if(grads, *b, || Ok(g.map(|x| -x)))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_if(grads, *a, || g.zip_map(bv, |x, y| x * y))?;
                self.acc_if(grads, *b, || g.zip_map(av, |x, y| x * y))?;
            }
            Op::AddRow { a, row } => {
                self.acc_if(grads, *a, || Ok(g.clone()))?;
                self.acc_if(grads, *row, || {
                    let (_, d) = g.dims2()?;
                    let mut out = vec![0.0; d];
                    for r in gd.chunks(d.max(1)) {
                        for (o, x) in out.iter_mut().zip(r) {
                            *o += x;
                        }
                    }
                    Tensor::new([1, d], out)
                })?;
            }
            Op::Scale { a, c } => self.acc_if(grads, *a, || Ok(g.map(|x| x * c)))?,
            Op::Shift(a) => self.acc_if(grads, *a, || Ok(g.clone()))?,
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (n, d) = y.dims2()?;
                let mut out = vec![0.0; n * d];
                for i in 0..n {
                    let yr = &y.data()[i * d..(i + 1) * d];
                    let gr = &gd[i * d..(i + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        out[i * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new([n, d], out)?)?;
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let (n, d) = y.dims2()?;
                let mut out = vec![0.0; n * d];
                for i in 0..n {
                    let yr = &y.data()[i * d..(i + 1) * d];
                    let gr = &gd[i * d..(i + 1) * d];
                    let s: f64 = gr.iter().sum();
                    for j in 0..d {
                        out[i * d + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                accumulate(grads, *a, Tensor::new([n, d], out)?)?;
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = node.value.dims2()?;
                let gam = self.value(*gamma).data();
                if self.requires_grad(*a) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let gr = &gd[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let dxh: Vec<f64> = gr.iter().zip(gam).map(|(x, y)| x * y).collect();
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xh).map(|(x, y)| x * y).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[i * d + j] = rstd[i] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    accumulate(grads, *a, Tensor::new([n, d], dx)?)?;
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += gd[i * d + j] * xhat[i * d + j];
                            db[j] += gd[i * d + j];
                        }
                    }
                    self.acc_if(grads, *gamma, || Tensor::new([1, d], dg))?;
                    self.acc_if(grads, *beta, || Tensor::new([1, d], db))?;
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let out = g.zip_map(x, |gv, x| {
                    let u = GELU_C * (x + GELU_K * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })?;
                accumulate(grads, *a, out)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let out = g.zip_map(x, |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                accumulate(grads, *a, out)?;
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.value(*table).dims2()?;
                let mut out = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        out[id * d + j] += gd[r * d + j];
                    }
                }
                accumulate(grads, *table, Tensor::new([v, d], out)?)?;
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = self.value(p).numel();
                    if self.requires_grad(p) {
                        accumulate(grads, p, Tensor::new(shape, gd[off..off + len].to_vec())?)?;
                    }
                    off += len;
                }
            }
            Op::MeanRows(a) => {
                let (n, d) = self.value(*a).dims2()?;
                let inv = 1.0 / n as f64;
                let mut out = Vec::with_capacity(n * d);
                for _ in 0..n {
                    out.extend(gd.iter().map(|x| x * inv));
                }
                accumulate(grads, *a, Tensor::new([n, d], out)?)?;
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, Tensor::full(shape, gd[0]))?;
            }
            Op::MaxAll { a, argmax } => {
                let mut t = Tensor::zeros(self.value(*a).shape().to_vec());
                t.data_mut()[*argmax] = gd[0];
                accumulate(grads, *a, t)?;
            }
            Op::Gather { a, idx } => {
                let mut t = Tensor::zeros(self.value(*a).shape().to_vec());
                let out = t.data_mut();
                for (k, &i) in idx.iter().enumerate() {
                    out[i] += gd[k];
                }
                accumulate(grads, *a, t)?;
            }
            Op::CosineRows { z, t } => {
                let (m, d) = self.value(*z).dims2()?;
                let tv = self.value(*t).data();
                let tn = tv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut dz = vec![0.0; m * d];
                let mut dt = vec![0.0; d];
                for i in 0..m {
                    let zr = self.value(*z).row(i);
                    let zn = zr.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if zn == 0.0 || tn == 0.0 {
                        continue;
                    }
                    let c = node.value.data()[i];
                    let gi = gd[i];
                    for j in 0..d {
                        dz[i * d + j] = gi * (tv[j] / (zn * tn) - c * zr[j] / (zn * zn));
                        dt[j] += gi * (zr[j] / (zn * tn) - c * tv[j] / (tn * tn));
                    }
                }
                self.acc_if(grads, *z, || Tensor::new([m, d], dz))?;
                self.acc_if(grads, *t, || Tensor::new([1, d], dt))?;
            }
            Op::BlockAttention { q, k, v, bq, bk, weights } => {
                self.backprop_block_attention((*q, *k, *v, *bq, *bk, weights), gd, grads)?;
            }
            Op::BlockMeanRows { a, block } => {
                let (n, d) = self.value(*a).dims2()?;
                let mut out = vec![0.0; n * d];
                for (i, row) in out.chunks_mut(d.max(1)).enumerate() {
                    for (x, y) in row.iter_mut().zip(&gd[(i / block) * d..(i / block + 1) * d]) {
                        *x = y / *block as f64;
                    }
                }
                accumulate(grads, *a, Tensor::new([n, d], out)?)?;
            }
            Op::NormalizeRows { a, norms } => {
                let y = &node.value;
                let (n, d) = y.dims2()?;
                let mut out = vec![0.0; n * d];
                for i in 0..n {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let yr = &y.data()[i * d..(i + 1) * d];
                    let gr = &gd[i * d..(i + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        out[i * d + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                accumulate(grads, *a, Tensor::new([n, d], out)?)?;
            }
        }
        Ok(())
    }

    fn backprop_block_attention(
        &self,
        (q, k, v, bq, bk, w): (Var, Var, Var, usize, usize, &[f64]),
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (mq, d) = self.value(q).dims2()?;
        let (mk, dv) = self.value(v).dims2()?;
        let blocks = mq / bq;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; mq * d];
        let mut dk = vec![0.0; mk * d];
        let mut dvv = vec![0.0; mk * dv];
        let mut dp = vec![0.0; bq * bk];
        for b in 0..blocks {
            let p = &w[b * bq * bk..(b + 1) * bq * bk];
            let g = &gd[b * bq * dv..(b + 1) * bq * dv];
            // dV = P^T dO
            gemm(bk, bq, dv, 1.0, p, (1, bk as isize), g, (dv as isize, 1), 0.0, &mut dvv[b * bk * dv..(b + 1) * bk * dv]);
            // dP = dO V^T
            gemm(bq, dv, bk, 1.0, g, (dv as isize, 1), &vd[b * bk * dv..], (1, dv as isize), 0.0, &mut dp);
            for (pr, gr) in p.chunks(bk).zip(dp.chunks_mut(bk)) {
                let dot: f64 = pr.iter().zip(gr.iter()).map(|(x, y)| x * y).sum();
                for (x, y) in gr.iter_mut().zip(pr) {
                    *x = y * (*x - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm(bq, bk, d, 1.0, &dp, (bk as isize, 1), &kd[b * bk * d..], (d as isize, 1), 0.0, &mut dq[b * bq * d..(b + 1) * bq * d]);
            gemm(bk, bq, d, 1.0, &dp, (1, bk as isize), &qd[b * bq * d..], (d as isize, 1), 0.0, &mut dk[b * bk * d..(b + 1) * bk * d]);
        }
        self.acc_if(grads, q, || Tensor::new([mq, d], dq))?;
        self.acc_if(grads, k, || Tensor::new([mk, d], dk))?;
        self.acc_if(grads, v, || Tensor::new([mk, dv], dvv))?;
        Ok(())
    }

    fn acc_if(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        f: impl FnOnce() -> Result<Tensor>,
    ) -> Result<()> {
        if self.requires_grad(v) {
            accumulate(grads, v, f()?)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    }

    /// Gradients of every tracked parameter bound on `tape`, by name.
    pub fn params(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        tape.tracked_params()
            .into_iter()
            .map(|(name, v)| (name, self.get_or_zeros(tape, v)))
            .collect()
    }
}
