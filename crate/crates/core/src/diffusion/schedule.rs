use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-beta noise schedule over `timesteps` discrete steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Parameters that regenerate a schedule; stored in checkpoint headers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

const MAX_BETA: f64 = 0.999;

impl ScheduleParams {
    /// Betas rescaled so that a short schedule covers the same noise range
    /// as the usual 1000-step one.
    pub fn linear(timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Parameter(format!(
                "schedule needs at least 2 timesteps, got {timesteps}"
            )));
        }
        let scale = 1000.0 / timesteps as f64;
        Ok(Self {
            timesteps,
            beta_start: 1e-4 * scale,
            beta_end: 0.02 * scale,
        })
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        if self.timesteps < 2 {
            return Err(Error::Parameter(format!(
                "schedule needs at least 2 timesteps, got {}",
                self.timesteps
            )));
        }
        let n = self.timesteps;
        let beta = (0..n)
            .map(|t| {
                let frac = t as f64 / (n - 1) as f64;
                (self.beta_start + frac * (self.beta_end - self.beta_start))
                    .clamp(f64::MIN_POSITIVE, MAX_BETA)
            })
            .collect();
        DiffusionSchedule::from_betas(beta)
    }
}

/// Linear schedule with `timesteps` steps.
pub fn make_schedule(timesteps: usize) -> Result<DiffusionSchedule> {
    ScheduleParams::linear(timesteps)?.build()
}

impl DiffusionSchedule {
    /// Validates `0 < beta < 1`, a strictly decreasing cumulative product and
    /// `alpha_bar[0] > 0.9`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::Parameter("schedule needs at least 2 betas".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Parameter(format!("beta {b} outside (0, 1)")));
        }
        let alpha_bar: Vec<f64> = beta
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        if alpha_bar[0] <= 0.9 {
            return Err(Error::Parameter(format!(
                "alpha_bar[0] = {} must exceed 0.9",
                alpha_bar[0]
            )));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Parameter("alpha_bar must strictly decrease".into()));
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside [0, {})",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

/// `√ā·x0 + √(1−ā)·ε` for a known cumulative product `alpha_bar`.
pub fn noise_point(x0: [f32; 2], alpha_bar: f64, eps: [f32; 2]) -> [f32; 2] {
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    [
        (a * f64::from(x0[0]) + s * f64::from(eps[0])) as f32,
        (a * f64::from(x0[1]) + s * f64::from(eps[1])) as f32,
    ]
}

/// Noises `x0` to timestep `t`.
pub fn forward_noise(
    x0: [f32; 2],
    t: usize,
    eps: [f32; 2],
    schedule: &DiffusionSchedule,
) -> Result<[f32; 2]> {
    schedule.check_timestep(t)?;
    Ok(noise_point(x0, schedule.alpha_bar[t], eps))
}
