//! Discrete diffusion noise schedules.
//!
//! Steps are 1-based: `beta(t)` for `t` in `1..=T`, while `alpha_bar(0) = 1`
//! so that the forward marginal at `t = 0` is the data itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::Cosine => write!(f, "cosine"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    /// `alpha_bar[t]` for `t` in `0..=T`.
    alpha_bar: Vec<f64>,
    /// `sigma[t]` for `t` in `0..=T`; `sigma[0]` is unused and zero.
    sigma: Vec<f64>,
}

/// Builds a schedule with `steps` noise levels.
///
/// `Linear` spaces beta uniformly from `beta_min` to `beta_max`. `Cosine`
/// follows the squared-cosine alpha-bar curve and clips each beta into
/// `[beta_min, beta_max]`.
pub fn build_schedule(steps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("step count must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )));
    }
    let beta = match kind {
        ScheduleKind::Linear => {
            if steps == 1 {
                vec![beta_min]
            } else {
                let span = beta_max - beta_min;
                (0..steps).map(|i| beta_min + span * i as f64 / (steps - 1) as f64).collect()
            }
        }
        ScheduleKind::Cosine => {
            const OFFSET: f64 = 0.008;
            let f = |t: f64| {
                let phase = (t / steps as f64 + OFFSET) / (1.0 + OFFSET) * std::f64::consts::FRAC_PI_2;
                phase.cos().powi(2)
            };
            (1..=steps).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_min, beta_max)).collect()
        }
    };
    NoiseSchedule::from_betas(beta, kind)
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step rates.
    pub fn from_betas(beta: Vec<f64>, kind: ScheduleKind) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta_{} = {b} is outside (0, 1)", i + 1)));
        }
        let steps = beta.len();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let mut sigma = vec![0.0; steps + 1];
        for t in 1..=steps {
            let var = beta[t - 1] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
            sigma[t] = var.sqrt();
        }
        Ok(Self { kind, beta, alpha_bar, sigma })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `alpha_bar` for `t` in `0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Reverse-process standard deviation at step `t` (DDPM posterior choice).
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Half log signal-to-noise ratio, `ln(sqrt(abar) / sqrt(1 - abar))`.
    /// Infinite at `t = 0`.
    pub fn log_snr(&self, t: usize) -> f64 {
        let a = self.alpha_bar[t];
        if a >= 1.0 {
            return f64::INFINITY;
        }
        0.5 * (a.ln() - (1.0 - a).ln())
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::StepOutOfRange { t, steps: self.steps() })
        } else {
            Ok(())
        }
    }

    /// Stable fingerprint of the schedule contents, used to tie trajectories
    /// to the schedule that produced them.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::splitmix64(self.steps() as u64);
        for b in &self.beta {
            h = crate::rng::splitmix64(h ^ b.to_bits());
        }
        h
    }
}

/// Forward marginal coefficients `(sqrt(abar_t), sqrt(1 - abar_t))`.
pub fn marginal_coeffs(s: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    s.check_step(t)?;
    let a = s.alpha_bar(t);
    Ok((a.sqrt(), (1.0 - a).sqrt()))
}
