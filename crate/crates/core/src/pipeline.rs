//! Deterministic text-to-image sampling: prompt lookup, DDIM-style reverse
//! loop in latent space, and decoding.

use crate::diffusion::{ConditioningTable, LatentCodec, Scheduler};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::unet::UNet;

/// Anything that predicts noise from `(x_t, t, context)`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, timesteps: &[usize], context: &Tensor) -> Result<Tensor>;
}

impl NoisePredictor for UNet {
    fn predict_noise(&self, x_t: &Tensor, timesteps: &[usize], context: &Tensor) -> Result<Tensor> {
        self.predict(x_t, timesteps, context)
    }
}

pub struct Pipeline<'a> {
    pub model: &'a dyn NoisePredictor,
    pub scheduler: &'a Scheduler,
    pub table: &'a ConditioningTable,
    pub codec: &'a dyn LatentCodec,
    /// Latent `(channels, height, width)`.
    pub latent_shape: [usize; 3],
}

/// Initial noise for a generation seed.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng::stream(seed, "generate:init", 0))
}

impl Pipeline<'_> {
    /// Runs the reverse loop from seeded noise for the given cond ids.
    pub fn sample_latents(&self, cond_ids: &[usize], steps: usize, seed: u64) -> Result<Tensor> {
        if steps == 0 {
            return Err(Error::Usage("sampling needs at least one step".into()));
        }
        let n = cond_ids.len();
        let [c, h, w] = self.latent_shape;
        let context = self.table.context(cond_ids)?;
        let mut x = initial_noise(&[n, c, h, w], seed);
        let ts = self.scheduler.sampling_timesteps(steps);
        for (i, &t) in ts.iter().enumerate() {
            let eps = self.model.predict_noise(&x, &vec![t; n], &context)?;
            x = self.scheduler.step_to(&eps, &x, t, ts.get(i + 1).copied())?;
        }
        Ok(x)
    }

    /// One image `[1, 3, H, W]` for a class name or rendered prompt.
    pub fn generate(&self, prompt: &str, steps: usize, seed: u64) -> Result<Tensor> {
        let id = self.table.index_of(prompt)?;
        let z = self.sample_latents(&[id], steps, seed)?;
        self.codec.decode(&z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_scheduler, PoolCodec, SchedulerConfig};

    struct Planted {
        x0: Tensor,
        alpha_bar: f64,
    }

    impl NoisePredictor for Planted {
        fn predict_noise(&self, x_t: &Tensor, _: &[usize], _: &Tensor) -> Result<Tensor> {
            let (a, b) = (self.alpha_bar.sqrt(), (1.0 - self.alpha_bar).sqrt());
            x_t.zip_map(&self.x0, |x, x0| (x - a * x0) / b)
        }
    }

    #[test]
    fn planted_noise_recovers_latent() {
        let sched = make_scheduler(&SchedulerConfig::default()).unwrap();
        let table = ConditioningTable::new(&["circle".to_string()], 8, 0).unwrap();
        let codec = PoolCodec::new(2);
        let x0 = Tensor::randn(&[1, 4, 4, 4], 0.5, &mut rng::stream(3, "x0", 0));
        let model = Planted {
            x0: x0.clone(),
            alpha_bar: *sched.alpha_bars().last().unwrap(),
        };
        let p = Pipeline {
            model: &model,
            scheduler: &sched,
            table: &table,
            codec: &codec,
            latent_shape: [4, 4, 4],
        };
        let z = p.sample_latents(&[0], 1, 11).unwrap();
        let rel = z.sub(&x0).unwrap().max_abs() / x0.max_abs();
        assert!(rel < 1e-4, "{rel}");
        assert_eq!(p.generate("circle", 1, 11).unwrap().shape(), &[1, 3, 8, 8]);
        assert!(p.generate("daisy", 1, 11).is_err());
    }
}
