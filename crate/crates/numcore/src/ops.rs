//! Tape-free entry points for the primitive operations.

use crate::error::{shape_err, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// `softmax(q k^T / sqrt(d)) v` for `q: m x d`, `k: n x d`, `v: n x d_v`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = tape.attention(q, k, v)?;
    Ok(tape.value(out).clone())
}

/// The softmax weight matrix used by [`attention`].
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let d = q.dims2()?.1;
    let (q, k) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let s = tape.matmul_nt(q, k)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt())?;
    let w = tape.softmax_rows(s)?;
    Ok(tape.value(w).clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input had zero norm; `value` is then 0.
    pub zero_norm: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(shape_err("cosine_similarity", format!("{} vs {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(crate::NumError::NonFinite {
            op: "cosine_similarity",
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            zero_norm: true,
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(Cosine {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        zero_norm: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn attention_single_key() {
        let out = attention(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0]]), &m(&[&[5.0, 7.0]])).unwrap();
        assert_eq!(out.data(), &[5.0, 7.0]);
    }

    #[test]
    fn attention_zero_query_is_mean_of_values() {
        let out = attention(
            &m(&[&[0.0, 0.0]]),
            &m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &m(&[&[2.0, 0.0], &[0.0, 2.0]]),
        )
        .unwrap();
        assert!(close(out.data()[0], 1.0, 1e-15) && close(out.data()[1], 1.0, 1e-15));
    }

    #[test]
    fn attention_two_opposed_keys() {
        // softmax over scores (1/sqrt2, -1/sqrt2): weight = 1 / (1 + exp(-sqrt2))
        let w = 1.0 / (1.0 + (-(2f64).sqrt()).exp());
        let out = attention(
            &m(&[&[1.0, 0.0]]),
            &m(&[&[1.0, 0.0], &[-1.0, 0.0]]),
            &m(&[&[1.0, 0.0], &[0.0, 1.0]]),
        )
        .unwrap();
        assert!(close(out.data()[0], w, 1e-12));
        assert!(close(out.data()[1], 1.0 - w, 1e-12));
        assert!(close(out.data()[0], 0.8044, 5e-5));
        assert!(close(out.data()[1], 0.1956, 5e-5));
    }

    #[test]
    fn attention_rejects_mismatch() {
        assert!(attention(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0, 0.0]]), &m(&[&[1.0]])).is_err());
        assert!(attention(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0]]), &m(&[&[1.0], &[2.0]])).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap().value, 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap().value;
        assert!(close(c, 0.707_106_78, 1e-8));
        let z = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(z, Cosine { value: 0.0, zero_norm: true });
        assert!(cosine_similarity(&[f64::NAN, 0.0], &[1.0, 0.0]).is_err());
    }
}
