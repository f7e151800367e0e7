//! Diffusion noise schedules.
//!
//! A schedule stores, for a `T`-step process, the per-step variances
//! `beta[t]`, `alpha[t] = 1 - beta[t]`, the cumulative products
//! `alpha_bar[t] = alpha_bar[t-1] * alpha[t]` and `sigma[t] = sqrt(1 - alpha[t])`.
//! Step indices are 1-based; `alpha_bar` additionally carries `alpha_bar[0] = 1`
//! so that inverting zero steps is the identity.
//!
//! All arithmetic is in `f64`. Latents are `f32` and only see the
//! coefficients at the tensor boundary.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Immutable table of schedule coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    // index 0 is unused padding for beta/alpha/sigma so that `beta[t]` is step t.
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("step count must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "linear schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect::<Vec<_>>();
        Self::from_betas(ScheduleKind::Linear, &betas)
    }

    /// Squared-cosine schedule: `alpha_bar(t) = f(t)/f(0)` with
    /// `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`, betas capped at `max_beta`.
    pub fn cosine(steps: usize, offset: f64, max_beta: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("step count must be at least 1".into()));
        }
        if !(offset > 0.0 && offset.is_finite()) {
            return Err(Error::InvalidRange(format!(
                "cosine offset must be positive, got {offset}"
            )));
        }
        if !(max_beta > 0.0 && max_beta < 1.0) {
            return Err(Error::InvalidRange(format!(
                "max_beta must lie in (0, 1), got {max_beta}"
            )));
        }
        let f = |t: usize| {
            let c = ((t as f64 / steps as f64 + offset) / (1.0 + offset) * FRAC_PI_2).cos();
            c * c
        };
        let betas = (1..=steps)
            .map(|t| (1.0 - f(t) / f(t - 1)).min(max_beta))
            .collect::<Vec<_>>();
        Self::from_betas(ScheduleKind::Cosine, &betas)
    }

    /// Builds the schedule of the given kind with default parameters.
    pub fn with_defaults(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Self::linear(steps, DEFAULT_BETA_START, DEFAULT_BETA_END),
            ScheduleKind::Cosine => Self::cosine(steps, DEFAULT_COSINE_OFFSET, DEFAULT_MAX_BETA),
        }
    }

    fn from_betas(kind: ScheduleKind, betas: &[f64]) -> Result<Self> {
        let steps = betas.len();
        let mut beta = Vec::with_capacity(steps + 1);
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut sigma = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        sigma.push(0.0);
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidRange(format!(
                    "beta[{}] = {b} is outside (0, 1)",
                    i + 1
                )));
            }
            let a = 1.0 - b;
            let prev = alpha_bar[i];
            let ab = prev * a;
            if !(ab > 0.0 && ab < prev) {
                return Err(Error::InvalidRange(format!(
                    "alpha_bar[{}] = {ab} is not strictly below alpha_bar[{i}] = {prev}",
                    i + 1
                )));
            }
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(ab);
            sigma.push((1.0 - a).sqrt());
        }
        Ok(Self {
            kind,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    /// Stored `alpha_bar[t]` for `0 <= t <= T`.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::StepOutOfRange {
                step: t,
                max: self.steps(),
            })
    }

    pub fn beta_at(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.beta[t])
    }

    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha[t])
    }

    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.sigma[t])
    }

    /// `beta[1..=T]`.
    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha[1..]
    }

    /// `alpha_bar[0..=T]`, including the leading 1.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma[1..]
    }

    /// Coefficient of the predicted noise in one DDIM inversion step, before
    /// the `sqrt(alpha_bar[t])` output scale: `sqrt(1/ab_t - 1) - sqrt(1/ab_{t-1} - 1)`.
    pub fn ddim_increment(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let cur = self.alpha_bar[t];
        let prev = self.alpha_bar[t - 1];
        Ok((1.0 / cur - 1.0).sqrt() - (1.0 / prev - 1.0).sqrt())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// CSV with header `t,beta,alpha,alpha_bar,sigma`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar,sigma\n");
        for t in 1..=self.steps() {
            out.push_str(&format!(
                "{t},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                self.beta[t], self.alpha[t], self.alpha_bar[t], self.sigma[t]
            ));
        }
        out
    }
}
