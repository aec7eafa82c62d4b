//! Latent-diffusion substrate: noise schedule, latent codec and
//! class-prompt conditioning.

mod codec;
mod conditioning;
mod scheduler;

pub use codec::{CodecConfig, CodecKind, ConvCodec, LatentCodec, PoolCodec};
pub use conditioning::{ConditioningTable, DEFAULT_PROMPT_TEMPLATE, TOKEN_POSITIONS};
pub use scheduler::{
    add_noise_with, ddim_update, ddim_update_clipped, make_scheduler, ScheduleKind, Scheduler, SchedulerConfig,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Latents `[N, C, H, W]` with per-sample conditioning ids and timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub data: Tensor,
    pub cond_id: Vec<usize>,
    pub timestep: Vec<usize>,
}

impl LatentBatch {
    pub fn new(data: Tensor, cond_id: Vec<usize>, timestep: Vec<usize>) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(Error::Dimension(format!(
                "latent batch must be [N, C, H, W], got {:?}",
                data.shape()
            )));
        }
        let n = data.dim(0);
        if n == 0 {
            return Err(Error::Dimension("latent batch must hold at least one sample".into()));
        }
        if cond_id.len() != n || timestep.len() != n {
            return Err(Error::Dimension(format!(
                "{n} samples but {} cond ids and {} timesteps",
                cond_id.len(),
                timestep.len()
            )));
        }
        if !data.all_finite() {
            return Err(Error::Validation("latent batch contains non-finite values".into()));
        }
        Ok(LatentBatch {
            data,
            cond_id,
            timestep,
        })
    }

    pub fn len(&self) -> usize {
        self.data.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_timesteps(&self, scheduler: &Scheduler) -> Result<()> {
        match self.timestep.iter().find(|&&t| t >= scheduler.num_timesteps()) {
            Some(t) => Err(Error::Dimension(format!(
                "timestep {t} outside [0, {})",
                scheduler.num_timesteps()
            ))),
            None => Ok(()),
        }
    }
}
