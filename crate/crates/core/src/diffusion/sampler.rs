//! Classifier-free guidance and the Euler-ancestral sampler.
//!
//! The sampler works in sigma space, `x = z_t / sqrt(a_t)`, with
//! `sigma_t = sqrt((1 - a_t) / a_t)` and epsilon prediction. For the step
//! `sigma -> sigma_next`:
//!
//! ```text
//! z_in       = x / sqrt(1 + sigma^2)
//! eps        = cfg(uncond(z_in, t), cond(z_in, t))
//! sigma_up   = sqrt(sigma_next^2 * (sigma^2 - sigma_next^2) / sigma^2)
//! sigma_down = sqrt(sigma_next^2 - sigma_up^2)
//! x          = x + eps * (sigma_down - sigma) + sigma_up * n,   n ~ N(0, I)
//! ```
//!
//! The chain starts from `x = sigma_T * init_noise` and ends at sigma = 0.
//! Ancestral noise `n` comes from its own seeded stream.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::NoiseSchedule;
use super::unet::{Conditioning, DenoiseHook, NoHook, NoisePredictor};
use super::Latent;
use crate::error::{Error, Result};
use crate::text::mix_seed;

const ANCESTRAL_STREAM: u64 = 0xa7c3;
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSettings {
    pub steps: usize,
    pub cfg_scale: f32,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            steps: 20,
            cfg_scale: 7.0,
            seed: 0,
        }
    }
}

/// `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(uncond: &Array3<f32>, cond: &Array3<f32>, scale: f32) -> Result<Array3<f32>> {
    if uncond.dim() != cond.dim() {
        let (a, b, c) = uncond.dim();
        let (x, y, z) = cond.dim();
        return Err(Error::shape(&[a, b, c], &[x, y, z]));
    }
    let mut out = uncond.clone();
    out.zip_mut_with(cond, |u, &c| *u += scale * (c - *u));
    Ok(out)
}

pub fn gaussian(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f32> {
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Standard-normal starting latent for a seed.
pub fn initial_noise(shape: (usize, usize, usize), seed: u64) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, INIT_STREAM));
    Latent::new(gaussian(shape, &mut rng))
}

/// Denoises `init_noise` from T to 0. The hook observes the conditional
/// branch only.
pub fn sample(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    init_noise: &Latent,
    settings: SamplerSettings,
    cond: &Conditioning,
    uncond: &Conditioning,
    hook: &mut dyn DenoiseHook,
) -> Result<Latent> {
    let timesteps = schedule.sampling_timesteps(settings.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(settings.seed, ANCESTRAL_STREAM));
    let sigma_max = schedule.sigma(timesteps[0]) as f32;
    let mut x = init_noise.values.mapv(|v| v * sigma_max);
    for pair in timesteps.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let sigma = schedule.sigma(t);
        let sigma_next = schedule.sigma(t_next);
        let input_scale = (1.0 / (1.0 + sigma * sigma).sqrt()) as f32;
        let z_in = x.mapv(|v| v * input_scale);
        let cond_eps = model.predict_noise(&z_in, t, cond, hook)?;
        let eps = if settings.cfg_scale == 1.0 {
            cond_eps
        } else {
            let uncond_eps = model.predict_noise(&z_in, t, uncond, &mut NoHook)?;
            cfg_combine(&uncond_eps, &cond_eps, settings.cfg_scale)?
        };
        let sigma_up = if sigma_next > 0.0 {
            (sigma_next * sigma_next * (sigma * sigma - sigma_next * sigma_next) / (sigma * sigma)).sqrt()
        } else {
            0.0
        };
        let sigma_down = (sigma_next * sigma_next - sigma_up * sigma_up).max(0.0).sqrt();
        let dt = (sigma_down - sigma) as f32;
        x.zip_mut_with(&eps, |xv, &e| *xv += e * dt);
        if sigma_up > 0.0 {
            let noise = gaussian(x.dim(), &mut rng);
            let up = sigma_up as f32;
            x.zip_mut_with(&noise, |xv, &n| *xv += up * n);
        }
    }
    Ok(Latent { values: x, timestep: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict_noise(&self, latent: &Array3<f32>, _: usize, _: &Conditioning, _: &mut dyn DenoiseHook) -> Result<Array3<f32>> {
            Ok(Array3::zeros(latent.dim()))
        }
    }

    fn null_cond() -> Conditioning {
        Conditioning::text_only(crate::text::TextEmbeddingMatrix(ndarray::Array2::zeros((1, 4))))
    }

    #[test]
    fn cfg_scalars() {
        let u = Array3::from_elem((1, 1, 1), 0.0f32);
        let c = Array3::from_elem((1, 1, 1), 2.0f32);
        assert_eq!(cfg_combine(&u, &c, 7.0).unwrap()[[0, 0, 0]], 14.0);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert!(cfg_combine(&u, &Array3::zeros((1, 1, 2)), 1.0).is_err());
    }

    #[test]
    fn single_step_zero_prediction_closed_form() {
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let init = initial_noise((3, 4, 4), 5);
        let settings = SamplerSettings {
            steps: 1,
            cfg_scale: 7.0,
            seed: 5,
        };
        let out = sample(&Zero, &schedule, &init, settings, &null_cond(), &null_cond(), &mut NoHook).unwrap();
        // sigma_next = 0: x_final = sigma_T * init + 0 * (0 - sigma_T)
        let sigma_max = schedule.sigma(20) as f32;
        for (o, i) in out.values.iter().zip(init.values.iter()) {
            assert_eq!(*o, i * sigma_max);
        }
    }

    #[test]
    fn two_steps_zero_prediction_adds_only_ancestral_noise() {
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let init = initial_noise((3, 2, 2), 1);
        let settings = SamplerSettings {
            steps: 2,
            cfg_scale: 1.0,
            seed: 1,
        };
        let out = sample(&Zero, &schedule, &init, settings, &null_cond(), &null_cond(), &mut NoHook).unwrap();
        let (s, sn) = (schedule.sigma(20), schedule.sigma(10));
        let up = (sn * sn * (s * s - sn * sn) / (s * s)).sqrt() as f32;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(1, ANCESTRAL_STREAM));
        let noise = gaussian((3, 2, 2), &mut rng);
        for ((o, i), n) in out.values.iter().zip(init.values.iter()).zip(noise.iter()) {
            let expected = i * s as f32 + up * n;
            assert!((o - expected).abs() <= 1e-4 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn seeds_control_noise() {
        let a = initial_noise((3, 4, 4), 1);
        assert_eq!(a, initial_noise((3, 4, 4), 1));
        assert_ne!(a, initial_noise((3, 4, 4), 2));
    }
}
