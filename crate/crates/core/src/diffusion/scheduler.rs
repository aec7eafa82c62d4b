use serde::{Deserialize, Serialize};

use super::LatentBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule_kind: ScheduleKind,
    /// Clamp the clean-sample estimate to `[-v, v]` during sampling.
    pub clip_sample: Option<f64>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            num_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule_kind: ScheduleKind::Linear,
            clip_sample: None,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_timesteps == 0 {
            return Err(Error::Config("num_timesteps must be positive".into()));
        }
        for (name, b) in [("beta_start", self.beta_start), ("beta_end", self.beta_end)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} = {b} is outside (0, 1)")));
            }
        }
        let ordered = if self.num_timesteps == 1 {
            self.beta_end >= self.beta_start
        } else {
            self.beta_end > self.beta_start
        };
        if !ordered {
            return Err(Error::Config(format!(
                "beta_end ({}) must exceed beta_start ({})",
                self.beta_end, self.beta_start
            )));
        }
        if matches!(self.clip_sample, Some(v) if !(v.is_finite() && v > 0.0)) {
            return Err(Error::Config("clip_sample must be a positive bound".into()));
        }
        Ok(())
    }
}

/// Noise schedule with the forward process and a deterministic (eta = 0)
/// reverse update.
#[derive(Debug, Clone)]
pub struct Scheduler {
    cfg: SchedulerConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_scheduler(cfg: &SchedulerConfig) -> Result<Scheduler> {
    cfg.validate()?;
    let n = cfg.num_timesteps;
    let betas: Vec<f64> = match cfg.schedule_kind {
        ScheduleKind::Linear => (0..n)
            .map(|i| {
                if n == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(Scheduler {
        cfg: cfg.clone(),
        betas,
        alphas,
        alpha_bars,
    })
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` elementwise.
pub fn add_noise_with(alpha_bar: f64, x0: &[f64], eps: &[f64], out: &mut [f64]) {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    for ((o, x), e) in out.iter_mut().zip(x0).zip(eps) {
        *o = a * x + b * e;
    }
}

/// Deterministic reverse update from `alpha_bar_t` to `alpha_bar_prev`
/// given a noise prediction.
pub fn ddim_update(alpha_bar_t: f64, alpha_bar_prev: f64, x_t: &[f64], eps: &[f64], out: &mut [f64]) {
    ddim_update_clipped(alpha_bar_t, alpha_bar_prev, x_t, eps, None, out)
}

/// [`ddim_update`] with the clean-sample estimate clamped to `[-c, c]`; the
/// noise direction is recomputed from the clamped estimate.
pub fn ddim_update_clipped(alpha_bar_t: f64, alpha_bar_prev: f64, x_t: &[f64], eps: &[f64], clip: Option<f64>, out: &mut [f64]) {
    let sa = alpha_bar_t.sqrt();
    let sb = (1.0 - alpha_bar_t).sqrt();
    let pa = alpha_bar_prev.sqrt();
    let pb = (1.0 - alpha_bar_prev).sqrt();
    for ((o, x), e) in out.iter_mut().zip(x_t).zip(eps) {
        let mut x0 = (x - sb * e) / sa;
        let mut e = *e;
        if let Some(c) = clip {
            x0 = x0.clamp(-c, c);
            if sb > 0.0 {
                e = (x - sa * x0) / sb;
            }
        }
        *o = pa * x0 + pb * e;
    }
}

impl Scheduler {
    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn num_timesteps(&self) -> usize {
        self.cfg.num_timesteps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.cfg.num_timesteps {
            return Err(Error::Dimension(format!(
                "timestep {t} outside [0, {})",
                self.cfg.num_timesteps
            )));
        }
        Ok(())
    }

    /// Forward process on raw `[N, ...]` tensors with one timestep per sample.
    pub fn add_noise_tensor(&self, x0: &Tensor, eps: &Tensor, t: &[usize]) -> Result<Tensor> {
        eps.expect_shape(x0.shape())?;
        let n = x0.dim(0);
        if t.len() != n {
            return Err(Error::Dimension(format!("{} timesteps for {n} samples", t.len())));
        }
        let row = x0.len() / n;
        let mut out = vec![0.0; x0.len()];
        for (i, &ti) in t.iter().enumerate() {
            self.check_t(ti)?;
            let r = i * row..(i + 1) * row;
            add_noise_with(
                self.alpha_bars[ti],
                &x0.data()[r.clone()],
                &eps.data()[r.clone()],
                &mut out[r],
            );
        }
        Tensor::new(x0.shape().to_vec(), out)
    }

    /// Returns `x_t` for every sample of `x0`; timesteps are taken from `t`.
    pub fn add_noise(&self, x0: &LatentBatch, eps: &Tensor, t: &[usize]) -> Result<LatentBatch> {
        let data = self.add_noise_tensor(&x0.data, eps, t)?;
        LatentBatch::new(data, x0.cond_id.clone(), t.to_vec())
    }

    /// One reverse step from each sample's timestep `t` to `t - 1`. At
    /// `t = 0` the clean-sample estimate is returned.
    pub fn denoise_step(&self, model_out: &Tensor, x_t: &LatentBatch) -> Result<LatentBatch> {
        model_out.expect_shape(x_t.data.shape())?;
        let n = x_t.len();
        let row = x_t.data.len() / n;
        let mut out = vec![0.0; x_t.data.len()];
        for (i, &t) in x_t.timestep.iter().enumerate() {
            self.check_t(t)?;
            let prev = t.checked_sub(1);
            let ab_prev = prev.map_or(1.0, |p| self.alpha_bars[p]);
            let r = i * row..(i + 1) * row;
            ddim_update(
                self.alpha_bars[t],
                ab_prev,
                &x_t.data.data()[r.clone()],
                &model_out.data()[r.clone()],
                &mut out[r],
            );
        }
        let prev_t = x_t.timestep.iter().map(|t| t.saturating_sub(1)).collect();
        LatentBatch::new(
            Tensor::new(x_t.data.shape().to_vec(), out)?,
            x_t.cond_id.clone(),
            prev_t,
        )
    }

    /// Reverse step for a whole tensor sharing timestep `t`, jumping to
    /// `prev` (`None` = fully denoised).
    pub fn step_to(&self, model_out: &Tensor, x_t: &Tensor, t: usize, prev: Option<usize>) -> Result<Tensor> {
        model_out.expect_shape(x_t.shape())?;
        self.check_t(t)?;
        let ab_prev = match prev {
            Some(p) => {
                self.check_t(p)?;
                self.alpha_bars[p]
            }
            None => 1.0,
        };
        let mut out = vec![0.0; x_t.len()];
        ddim_update_clipped(self.alpha_bars[t], ab_prev, x_t.data(), model_out.data(), self.cfg.clip_sample, &mut out);
        Tensor::new(x_t.shape().to_vec(), out)
    }

    /// `steps` evenly spaced timesteps, descending, starting at the last one.
    pub fn sampling_timesteps(&self, steps: usize) -> Vec<usize> {
        let n = self.cfg.num_timesteps;
        let steps = steps.clamp(1, n);
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| (n - 1) - i * (n - 1) / steps.max(1))
            .collect();
        ts.dedup();
        ts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn default_schedule_recurrence() {
        let s = make_scheduler(&SchedulerConfig::default()).unwrap();
        let ab = s.alpha_bars();
        assert_eq!(ab.len(), 1000);
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        // Independent product of (1 - beta_i).
        let mut prod = 1.0;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((ab[999] - prod).abs() < 1e-15);
        assert!(ab[999] < 0.01);
        assert!((ab[0] - (1.0 - s.betas()[0])).abs() < 1e-15);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_scheduler(&SchedulerConfig {
            num_timesteps: 1,
            beta_start: 0.5,
            beta_end: 0.5,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn rejects_inverted_betas() {
        let err = make_scheduler(&SchedulerConfig {
            beta_start: 0.3,
            beta_end: 0.1,
            ..Default::default()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(make_scheduler(&SchedulerConfig {
            beta_start: 0.0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn add_noise_limits() {
        let x0 = [1.0, -2.0, 3.0];
        let eps = [0.5, 0.25, -1.0];
        let mut out = [0.0; 3];
        add_noise_with(1.0, &x0, &eps, &mut out);
        assert_eq!(out, x0);
        add_noise_with(0.3, &[0.0; 3], &eps, &mut out);
        for (o, e) in out.iter().zip(eps) {
            assert!((o - 0.7f64.sqrt() * e).abs() < 1e-15);
        }
    }

    #[test]
    fn add_noise_preserves_unit_variance() {
        let s = make_scheduler(&SchedulerConfig::default()).unwrap();
        let n = 200_000;
        let mut r = rng::stream(11, "mc", 0);
        let x0 = Tensor::randn(&[n, 1], 1.0, &mut r);
        let eps = Tensor::randn(&[n, 1], 1.0, &mut r);
        let t = vec![400; n];
        let xt = s.add_noise_tensor(&x0, &eps, &t).unwrap();
        let mean = xt.mean();
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let s = make_scheduler(&SchedulerConfig::default()).unwrap();
        let x0 = Tensor::zeros(&[2, 4, 2, 2]);
        let eps = Tensor::zeros(&[2, 4, 2, 3]);
        assert!(matches!(
            s.add_noise_tensor(&x0, &eps, &[1, 1]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn one_step_schedule_inverts_forward_process() {
        let s = make_scheduler(&SchedulerConfig {
            num_timesteps: 1,
            beta_start: 0.5,
            beta_end: 0.5,
            ..Default::default()
        })
        .unwrap();
        let mut r = rng::stream(5, "x", 0);
        let x0 = LatentBatch::new(Tensor::randn(&[2, 4, 3, 3], 1.0, &mut r), vec![0, 1], vec![0, 0]).unwrap();
        let eps = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut r);
        let xt = s.add_noise(&x0, &eps, &[0, 0]).unwrap();
        let back = s.denoise_step(&eps, &xt).unwrap();
        for (a, b) in back.data.data().iter().zip(x0.data.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-12) + 1e-12);
        }
    }

    #[test]
    fn zero_prediction_at_unit_alpha_bar_is_identity() {
        let x = [0.3, -1.2];
        let mut out = [0.0; 2];
        ddim_update(1.0, 1.0, &x, &[0.0, 0.0], &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn denoise_step_matches_scalar_oracle() {
        let s = make_scheduler(&SchedulerConfig::default()).unwrap();
        let mut r = rng::stream(9, "x", 0);
        let xt = LatentBatch::new(Tensor::randn(&[3, 2, 2, 2], 1.0, &mut r), vec![0; 3], vec![0, 517, 999]).unwrap();
        let eps = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut r);
        let got = s.denoise_step(&eps, &xt).unwrap();
        for i in 0..3 {
            let t = xt.timestep[i];
            let ab: f64 = s.alpha_bars()[t];
            let abp = if t == 0 { 1.0 } else { s.alpha_bars()[t - 1] };
            for j in 0..8 {
                let x = xt.data.data()[i * 8 + j];
                let e = eps.data()[i * 8 + j];
                let x0 = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
                let want = abp.sqrt() * x0 + (1.0 - abp).sqrt() * e;
                let g = got.data.data()[i * 8 + j];
                assert!((g - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
        assert_eq!(got.timestep, vec![0, 516, 998]);
    }

    #[test]
    fn sampling_timesteps_descend_from_last() {
        let s = make_scheduler(&SchedulerConfig::default()).unwrap();
        let ts = s.sampling_timesteps(10);
        assert_eq!(ts.len(), 10);
        assert_eq!(ts[0], 999);
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.sampling_timesteps(1), vec![999]);
    }

    proptest! {
        #[test]
        fn alpha_bar_strictly_decreasing(n in 2usize..400, a in 1e-5f64..0.4, span in 1e-4f64..0.5) {
            let cfg = SchedulerConfig { num_timesteps: n, beta_start: a, beta_end: (a + span).min(0.999), ..Default::default() };
            let s = make_scheduler(&cfg).unwrap();
            prop_assert!(s.betas().windows(2).all(|w| w[1] > w[0]));
            prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(s.alpha_bars().iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn add_noise_is_linear(scale in -3.0f64..3.0, t in 0usize..1000, seed in 0u64..1000) {
            let s = make_scheduler(&SchedulerConfig::default()).unwrap();
            let mut r = rng::stream(seed, "lin", 0);
            let x0 = Tensor::randn(&[1, 4, 2, 2], 1.0, &mut r);
            let eps = Tensor::randn(&[1, 4, 2, 2], 1.0, &mut r);
            let base = s.add_noise_tensor(&x0, &eps, &[t]).unwrap();
            let scaled = s.add_noise_tensor(&x0.scale(scale), &eps.scale(scale), &[t]).unwrap();
            for (a, b) in scaled.data().iter().zip(base.data()) {
                prop_assert!((a - scale * b).abs() <= 1e-6);
            }
        }
    }
}
