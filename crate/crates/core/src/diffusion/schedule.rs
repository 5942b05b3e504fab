use ndarray::Array3;

use super::Latent;
use crate::error::{Error, Result};

/// Cumulative signal retention `alpha_bar[t]` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    /// Cosine schedule over `total` steps, betas clipped at 0.999 so the last
    /// entry stays strictly positive.
    pub fn cosine(total: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / total as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(total + 1);
        alpha_bar.push(1.0);
        for t in 1..=total {
            let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
            let prev = alpha_bar[t - 1];
            alpha_bar.push(prev * (1.0 - beta));
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::InvalidParameter("alpha_bar must start at 1 and cover t >= 1".into()));
        }
        let valid = alpha_bar.iter().all(|&a| a > 0.0 && a <= 1.0) && alpha_bar.windows(2).all(|w| w[1] < w[0]);
        if !valid {
            return Err(Error::InvalidParameter("alpha_bar must be strictly decreasing in (0, 1]".into()));
        }
        Ok(Self { alpha_bar })
    }

    /// T, the last valid timestep.
    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Noise-to-signal ratio `sqrt((1 - a) / a)`; zero at `t = 0`.
    pub fn sigma(&self, t: usize) -> f64 {
        let a = self.alpha_bar[t];
        ((1.0 - a) / a).sqrt()
    }

    /// Evenly spaced timesteps from T down to 0, `steps + 1` entries.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.total_steps();
        if steps == 0 || steps > total {
            return Err(Error::InvalidParameter(format!("steps must be in 1..={total}, got {steps}")));
        }
        Ok((0..=steps)
            .map(|i| ((total * (steps - i)) as f64 / steps as f64).round() as usize)
            .collect())
    }
}

/// `sqrt(a_t) * z0 + sqrt(1 - a_t) * eps`.
pub fn forward_noise(z0: &Latent, t: usize, schedule: &NoiseSchedule, eps: &Array3<f32>) -> Result<Latent> {
    if t > schedule.total_steps() {
        return Err(Error::InvalidParameter(format!(
            "timestep {t} beyond schedule length {}",
            schedule.total_steps()
        )));
    }
    if eps.dim() != z0.values.dim() {
        let (a, b, c) = z0.values.dim();
        let (x, y, z) = eps.dim();
        return Err(Error::shape(&[a, b, c], &[x, y, z]));
    }
    let a = schedule.alpha_bar(t);
    let signal = a.sqrt() as f32;
    let noise = (1.0 - a).sqrt() as f32;
    let mut values = z0.values.clone();
    values.zip_mut_with(eps, |z, &e| *z = signal * *z + noise * e);
    Ok(Latent { values, timestep: t })
}
