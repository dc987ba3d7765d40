//! Central finite-difference check of reverse-mode gradients.

use crate::error::{NumError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest coordinate-wise `|analytic - numeric|`.
    pub max_abs_err: f64,
    /// `max_abs_err` divided by the larger infinity norm of the two
    /// gradient vectors (floored at 1e-12).
    pub max_rel_err: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub coords: Vec<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Checks the gradient of the scalar `f(x)` at every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// Same as [`grad_check`] restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(NumError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = f(&mut tape, xv)?;
    let yval = tape.value(y).item();
    if !yval.is_finite() {
        return Err(NumError::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(y)?;
    let full = grads.get_or_zeros(&tape, xv);

    let eval = |x: &Tensor| -> Result<f64> {
        let mut t = Tape::no_grad();
        let xv = t.constant(x.clone());
        let y = f(&mut t, xv)?;
        let v = t.value(y).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumError::NonFinite { op: "grad_check" })
        }
    };

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= x.numel() {
            return Err(NumError::Index {
                op: "grad_check",
                index: i,
                bound: x.numel(),
            });
        }
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        numeric.push((eval(&xp)? - eval(&xm)?) / (2.0 * eps));
        analytic.push(full.data()[i]);
    }
    Ok(summarize(analytic, numeric, coords.to_vec()))
}

pub(crate) fn summarize(analytic: Vec<f64>, numeric: Vec<f64>, coords: Vec<usize>) -> GradCheckReport {
    let max_abs_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(&numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    GradCheckReport {
        max_abs_err,
        max_rel_err: max_abs_err / scale,
        analytic,
        numeric,
        coords,
    }
}

/// One named finite-difference check and the tolerance it must meet.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
    pub tol: f64,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tol)
    }
}

pub const OP_EPS: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-5;

struct Suite {
    seed: u64,
    cases: Vec<SuiteCase>,
}

impl Suite {
    fn rand(&self, shape: [usize; 2], salt: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut crate::rng::Stream::from_seed(self.seed ^ salt.wrapping_mul(0x9E37_79B9)))
    }

    fn check<F>(&mut self, name: &str, x: Tensor, f: F) -> Result<()>
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let report = grad_check(f, &x, OP_EPS)?;
        self.cases.push(SuiteCase {
            name: name.to_string(),
            report,
            tol: OP_TOL,
        });
        Ok(())
    }
}

/// Projects a matrix output to a scalar with fixed random weights so every
/// entry of the output contributes to the checked gradient.
fn project(t: &mut Tape, y: Var, salt: u64) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let w = Tensor::randn(shape, 1.0, &mut crate::rng::Stream::from_seed(salt ^ 0xABCD));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum_all(p)
}

/// Finite-difference checks of every differentiable tape op, each input
/// checked separately.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut s = Suite { seed, cases: Vec::new() };

    let (a, b, c) = (s.rand([2, 4], 1), s.rand([4, 3], 2), s.rand([5, 4], 4));
    s.check("matmul lhs", a.clone(), |t, x| {
        let bv = t.constant(b.clone());
        let y = t.matmul(x, bv)?;
        project(t, y, 3)
    })?;
    s.check("matmul rhs", b.clone(), |t, x| {
        let av = t.constant(a.clone());
        let y = t.matmul(av, x)?;
        project(t, y, 3)
    })?;
    s.check("matmul_nt lhs", a.clone(), |t, x| {
        let cv = t.constant(c.clone());
        let y = t.matmul_nt(x, cv)?;
        project(t, y, 5)
    })?;
    s.check("matmul_nt rhs", c.clone(), |t, x| {
        let av = t.constant(a.clone());
        let y = t.matmul_nt(av, x)?;
        project(t, y, 5)
    })?;

    let other = s.rand([3, 4], 9);
    let x34 = s.rand([3, 4], 10);
    s.check("add", x34.clone(), |t, x| {
        let o = t.constant(other.clone());
        let y = t.add(x, o)?;
        project(t, y, 1)
    })?;
    s.check("sub", x34.clone(), |t, x| {
        let o = t.constant(other.clone());
        let y = t.sub(o, x)?;
        project(t, y, 1)
    })?;
    s.check("mul", x34.clone(), |t, x| {
        let o = t.constant(other.clone());
        let y = t.mul(x, o)?;
        let y = t.mul(y, x)?;
        project(t, y, 1)
    })?;
    s.check("scale+add_scalar", x34.clone(), |t, x| {
        let y = t.scale(x, -2.5)?;
        let y = t.add_scalar(y, 0.3)?;
        project(t, y, 1)
    })?;
    s.check("gelu", x34.clone(), |t, x| {
        let y = t.gelu(x)?;
        project(t, y, 2)
    })?;
    // keep away from the kink at zero
    let relu_in = s.rand([3, 4], 11).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    s.check("relu", relu_in, |t, x| {
        let y = t.relu(x)?;
        project(t, y, 3)
    })?;

    let row = s.rand([1, 4], 12);
    s.check("add_row row", row.clone(), |t, x| {
        let av = t.constant(x34.clone());
        let y = t.add_row(av, x)?;
        project(t, y, 4)
    })?;
    s.check("add_row matrix", x34.clone(), |t, x| {
        let r = t.constant(row.clone());
        let y = t.add_row(x, r)?;
        project(t, y, 4)
    })?;

    let x35 = s.rand([3, 5], 13);
    s.check("softmax_rows", x35.clone(), |t, x| {
        let y = t.softmax_rows(x)?;
        project(t, y, 5)
    })?;
    s.check("log_softmax_rows", x35.clone(), |t, x| {
        let y = t.log_softmax_rows(x)?;
        project(t, y, 6)
    })?;
    s.check("cross_entropy_rows", s.rand([4, 3], 14), |t, x| t.cross_entropy_rows(x, &[0, 2, 1, 2]))?;

    let g = s.rand([1, 6], 15).map(|v| 1.0 + 0.3 * v);
    let beta = s.rand([1, 6], 16);
    let x36 = s.rand([3, 6], 17);
    s.check("layer_norm x", x36.clone(), |t, xv| {
        let (gv, bv) = (t.constant(g.clone()), t.constant(beta.clone()));
        let y = t.layer_norm(xv, gv, bv)?;
        project(t, y, 10)
    })?;
    s.check("layer_norm gamma", g.clone(), |t, gv| {
        let (xv, bv) = (t.constant(x36.clone()), t.constant(beta.clone()));
        let y = t.layer_norm(xv, gv, bv)?;
        project(t, y, 10)
    })?;
    s.check("layer_norm beta", beta.clone(), |t, bv| {
        let (xv, gv) = (t.constant(x36.clone()), t.constant(g.clone()));
        let y = t.layer_norm(xv, gv, bv)?;
        project(t, y, 10)
    })?;

    s.check("embedding", s.rand([5, 3], 18), |t, x| {
        let y = t.embedding(x, &[4, 0, 4, 2])?;
        project(t, y, 2)
    })?;
    let extra = s.rand([1, 3], 19);
    s.check("concat_rows", s.rand([2, 3], 20), |t, x| {
        let o = t.constant(extra.clone());
        let y = t.concat_rows(&[o, x, x])?;
        project(t, y, 2)
    })?;
    s.check("transpose+select_rows", s.rand([2, 3], 21), |t, x| {
        let y = t.transpose(x)?;
        let y = t.select_rows(y, &[2, 0, 2])?;
        project(t, y, 2)
    })?;
    s.check("gather+reshape", s.rand([2, 3], 22), |t, x| {
        let y = t.gather(x, &[2, 2], vec![5, 0, 0, 3])?;
        let y = t.reshape(y, &[1, 4])?;
        project(t, y, 2)
    })?;

    let x43 = s.rand([4, 3], 23);
    s.check("mean_rows", x43.clone(), |t, x| {
        let y = t.mean_rows(x)?;
        project(t, y, 1)
    })?;
    s.check("mean_all", x43.clone(), |t, x| {
        let y = t.mul(x, x)?;
        t.mean_all(y)
    })?;
    s.check("max_all", x43.clone(), |t, x| {
        let y = t.scale(x, 2.0)?;
        t.max_all(y)
    })?;
    let target = s.rand([4, 3], 24);
    s.check("mse", x43.clone(), |t, x| {
        let o = t.constant(target.clone());
        t.mse(x, o)
    })?;

    let tv = s.rand([1, 5], 25);
    let z = s.rand([4, 5], 26);
    s.check("cosine_rows z", z.clone(), |t, x| {
        let c = t.constant(tv.clone());
        let y = t.cosine_rows(x, c)?;
        project(t, y, 4)
    })?;
    s.check("cosine_rows t", tv.clone(), |t, x| {
        let zv = t.constant(z.clone());
        let y = t.cosine_rows(zv, x)?;
        project(t, y, 4)
    })?;
    s.check("normalize_rows", s.rand([3, 4], 27), |t, x| {
        let y = t.normalize_rows(x)?;
        project(t, y, 7)
    })?;

    let (q, k, v) = (s.rand([3, 4], 28), s.rand([5, 4], 29), s.rand([5, 4], 30));
    s.check("attention q", q.clone(), |t, x| {
        let (kv, vv) = (t.constant(k.clone()), t.constant(v.clone()));
        let y = t.attention(x, kv, vv)?;
        project(t, y, 8)
    })?;
    s.check("attention k", k.clone(), |t, x| {
        let (qv, vv) = (t.constant(q.clone()), t.constant(v.clone()));
        let y = t.attention(qv, x, vv)?;
        project(t, y, 8)
    })?;
    s.check("attention v", v.clone(), |t, x| {
        let (qv, kv) = (t.constant(q.clone()), t.constant(k.clone()));
        let y = t.attention(qv, kv, x)?;
        project(t, y, 8)
    })?;

    // 2 blocks: 3 query rows and 5 key rows each.
    let (q, k, v) = (s.rand([6, 4], 31), s.rand([10, 4], 32), s.rand([10, 4], 33));
    s.check("block_attention q", q.clone(), |t, x| {
        let (kv, vv) = (t.constant(k.clone()), t.constant(v.clone()));
        let y = t.block_attention(x, kv, vv, 3, 5)?;
        project(t, y, 9)
    })?;
    s.check("block_attention k", k.clone(), |t, x| {
        let (qv, vv) = (t.constant(q.clone()), t.constant(v.clone()));
        let y = t.block_attention(qv, x, vv, 3, 5)?;
        project(t, y, 9)
    })?;
    s.check("block_attention v", v.clone(), |t, x| {
        let (qv, kv) = (t.constant(q.clone()), t.constant(k.clone()));
        let y = t.block_attention(qv, kv, x, 3, 5)?;
        project(t, y, 9)
    })?;

    s.check("block_mean_rows", s.rand([6, 3], 34), |t, x| {
        let y = t.block_mean_rows(x, 3)?;
        project(t, y, 10)
    })?;
    s.check("repeat_rows", s.rand([2, 3], 35), |t, x| {
        let y = t.repeat_rows(x, 4)?;
        project(t, y, 11)
    })?;
    Ok(s.cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                t.sum_all(y)
            },
            &Tensor::scalar(3.0),
            1e-4,
        )
        .unwrap();
        assert!((r.analytic[0] - 6.0).abs() < 1e-12);
        assert!((r.numeric[0] - 6.0).abs() < 1e-8);
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn rejects_bad_eps() {
        let f = |t: &mut Tape, x: Var| t.sum_all(x);
        assert!(grad_check(f, &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at a kink-free point is fine; a detach breaks the chain and must be caught
        let r = grad_check(
            |t, x| {
                let d = t.detach(x);
                let y = t.mul(d, x)?;
                t.sum_all(y)
            },
            &Tensor::scalar(2.0),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err > 0.4);
    }
}
