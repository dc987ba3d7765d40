use serde::{Deserialize, Serialize};

use numcore::{Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const ALPHA_BAR_MIN: f64 = 1e-5;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

/// Cumulative signal coefficients `alpha_bar[0..=T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub alpha_bar: Vec<f64>,
}

fn cosine_raw(t: usize, t_max: usize) -> f64 {
    let x = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

/// Cosine schedule normalised so that `alpha_bar[0] = 1`, clipped to
/// `[1e-5, 1]`. Entries flattened by the lower clip are separated by 1e-12
/// steps so the sequence stays strictly decreasing.
pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::Config(format!("schedule needs T >= 2, got {t_max}")));
    }
    let mut alpha_bar: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let norm = cosine_raw(0, t_max);
            (0..=t_max)
                .map(|t| (cosine_raw(t, t_max) / norm).clamp(ALPHA_BAR_MIN, 1.0))
                .collect()
        }
    };
    alpha_bar[0] = 1.0;
    for t in (0..t_max).rev() {
        if alpha_bar[t] <= alpha_bar[t + 1] {
            alpha_bar[t] = alpha_bar[t + 1] + 1e-12;
        }
    }
    Ok(NoiseSchedule { t_max, alpha_bar })
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Config(format!("timestep {t} outside 0..={}", self.t_max)))
    }

    /// `steps + 1` timesteps evenly spaced from `T` down to 0.
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_max {
            return Err(Error::Config(format!("ddim steps must be in 1..={}", self.t_max)));
        }
        Ok((0..=steps)
            .map(|i| ((self.t_max * (steps - i)) as f64 / steps as f64).round() as usize)
            .collect())
    }
}

/// `sqrt(a) * z0 + sqrt(1 - a) * eps` for `a = alpha_bar[t]`.
pub fn add_noise(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z0.zip_map(eps, |z, e| sa * z + sn * e)?)
}

/// Coefficients `(c_z, c_eps)` of the deterministic DDIM update
/// `z_to = c_z * z + c_eps * eps_hat`.
pub fn ddim_coefficients(a_from: f64, a_to: f64) -> (f64, f64) {
    let c_z = (a_to / a_from).sqrt();
    let c_eps = (1.0 - a_to).sqrt() - (a_to / a_from).sqrt() * (1.0 - a_from).sqrt();
    (c_z, c_eps)
}

/// `sqrt(a_to) * (z - sqrt(1 - a_from) * eps) / sqrt(a_from) + sqrt(1 - a_to) * eps`.
pub fn ddim_step(z: f64, eps_hat: f64, a_from: f64, a_to: f64) -> f64 {
    a_to.sqrt() * (z - (1.0 - a_from).sqrt() * eps_hat) / a_from.sqrt() + (1.0 - a_to).sqrt() * eps_hat
}

pub fn ddim_step_tensor(z: &Tensor, eps_hat: &Tensor, a_from: f64, a_to: f64) -> Result<Tensor> {
    Ok(z.zip_map(eps_hat, |z, e| ddim_step(z, e, a_from, a_to))?)
}

pub fn ddim_step_var(tape: &mut Tape, z: Var, eps_hat: Var, a_from: f64, a_to: f64) -> Result<Var> {
    let (c_z, c_eps) = ddim_coefficients(a_from, a_to);
    let a = tape.scale(z, c_z)?;
    let b = tape.scale(eps_hat, c_eps)?;
    Ok(tape.add(a, b)?)
}
