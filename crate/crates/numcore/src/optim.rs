//! AdamW: adaptive moments with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{shape_err, NumError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN/Inf; nothing was changed.
    SkippedNonFinite,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that has an entry in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<StepOutcome> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.value.shape() != g.shape() {
                return Err(shape_err(
                    "optimizer_step",
                    format!("{name}: param {:?} vs grad {:?}", p.value.shape(), g.shape()),
                ));
            }
        }
        if grads.values().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if !p.trainable {
                continue;
            }
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| {
                (
                    Tensor::zeros(g.shape().to_vec()),
                    Tensor::zeros(g.shape().to_vec()),
                )
            });
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                theta[i] -= lr * mhat / (vhat.sqrt() + eps) + lr * weight_decay * theta[i];
            }
            if !p.value.is_finite() {
                return Err(NumError::NonFinite {
                    op: "optimizer_step",
                });
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full([2, 2], v)).unwrap();
        s
    }

    fn grads(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::full([2, 2], v))])
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = store(1.5);
        let mut st = OptimState::new(AdamWConfig::default());
        st.step(&mut p, &grads(0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().value.data(), &[1.5; 4]);
    }

    #[test]
    fn zero_grad_pure_decay() {
        let mut p = store(2.0);
        let mut st = OptimState::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        });
        st.step(&mut p, &grads(0.0)).unwrap();
        for &x in p.get("w").unwrap().value.data() {
            assert!((x - 0.999 * 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(0.0);
        let mut st = OptimState::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        st.step(&mut p, &grads(1.0)).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = -0.1 / (1 + 1e-8)
        for &x in p.get("w").unwrap().value.data() {
            assert!((x + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        }
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn non_finite_grad_is_skipped() {
        let mut p = store(1.0);
        let mut st = OptimState::new(AdamWConfig::default());
        let out = st.step(&mut p, &grads(f64::NAN)).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(st.step_count(), 0);
        assert_eq!(p.get("w").unwrap().value.data(), &[1.0; 4]);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut p = store(1.0);
        p.set_trainable(false);
        let mut st = OptimState::new(AdamWConfig::default());
        st.step(&mut p, &grads(1.0)).unwrap();
        assert_eq!(p.get("w").unwrap().value.data(), &[1.0; 4]);
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut p = store(0.3);
            let mut st = OptimState::new(AdamWConfig {
                weight_decay: 0.01,
                ..Default::default()
            });
            for k in 0..5 {
                st.step(&mut p, &grads(0.1 * f64::from(k) - 0.2)).unwrap();
            }
            p.get("w").unwrap().value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
