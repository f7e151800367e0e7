//! Attribute loss: half the overlap coefficient between the step-`t`
//! inversion marginals of two images.
//!
//! For isotropic Gaussians `N(m1, s^2 I)` and `N(m2, s^2 I)` the overlap is
//! the 1-D overlap along `m2 - m1`, `OVL = 1 - erf(|m2 - m1| / (2 sqrt(2) s))`,
//! so every loss here depends on the images only through `|y0 - x0|`.
//! The loss is `1/2` for identical images and falls to `0` as they separate.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::analysis::latent_distance;
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::noise::NoiseKey;
use crate::schedule::NoiseSchedule;

/// Overlap of `N(0, sigma^2)` and `N(d, sigma^2)`.
pub fn ovl_gaussian(d: f64, sigma: f64) -> Result<f64> {
    check_domain(d, sigma)?;
    Ok(libm::erfc(d / (2.0 * SQRT_2 * sigma)))
}

fn check_domain(d: f64, sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if !(d >= 0.0 && d.is_finite()) {
        return Err(Error::Domain(format!("distance must be nonnegative, got {d}")));
    }
    Ok(())
}

/// `1/2 [1 - erf(|sqrt(ab_t) (y0 - x0)| / (2 sqrt(2) sigma))]`.
pub fn attribute_loss_general(x0: &Latent, y0: &Latent, alpha_bar_t: f64, sigma: f64) -> Result<f64> {
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0) {
        return Err(Error::Domain(format!(
            "alpha_bar must lie in (0, 1], got {alpha_bar_t}"
        )));
    }
    let d = latent_distance(x0, y0)?;
    Ok(0.5 * ovl_gaussian(alpha_bar_t.sqrt() * d, sigma)?)
}

/// Attribute loss of DDPM inversion, where the marginal noise scale is `sqrt(1 - ab_t)`.
pub fn attribute_loss_ddpm(x0: &Latent, y0: &Latent, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    let d = latent_distance(x0, y0)?;
    LossModel::Ddpm.loss_from_distance(d, schedule, t)
}

/// Attribute loss of DDIM inversion with Gaussian per-step predictions whose
/// mean shift cancels between the two images:
/// `1/2 [1 - erf(|y0 - x0| / (2 sqrt(2 S_t)))]`, `S_t = sum_{i<=t} c_i^2`,
/// `c_i = sqrt(1/ab_i - 1) - sqrt(1/ab_{i-1} - 1)`.
pub fn attribute_loss_ddim(x0: &Latent, y0: &Latent, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    let d = latent_distance(x0, y0)?;
    LossModel::Ddim.loss_from_distance(d, schedule, t)
}

/// Which marginal noise model a loss is evaluated under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossModel {
    Ddpm,
    Ddim,
    /// Fixed noise scale `sigma` with the schedule's `sqrt(ab_t)` signal scale.
    General { sigma: f64 },
}

impl LossModel {
    /// Loss at step `t` for two images at distance `d`.
    pub fn loss_from_distance(&self, d: f64, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        if t == 0 || t > schedule.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                max: schedule.steps(),
            });
        }
        let ab = schedule.alpha_bar_at(t)?;
        let ovl = match *self {
            LossModel::Ddpm => ovl_gaussian(ab.sqrt() * d, (1.0 - ab).sqrt())?,
            LossModel::Ddim => {
                let sum = (1..=t)
                    .map(|i| schedule.ddim_increment(i).map(|c| c * c))
                    .sum::<Result<f64>>()?;
                ovl_gaussian(d, sum.sqrt())?
            }
            LossModel::General { sigma } => ovl_gaussian(ab.sqrt() * d, sigma)?,
        };
        Ok(0.5 * ovl)
    }

    /// Losses for `t = 1..=T`.
    pub fn curve_from_distance(&self, d: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        let steps = schedule.steps();
        match *self {
            LossModel::Ddim => {
                check_domain(d, 1.0)?;
                let mut sum = 0.0;
                (1..=steps)
                    .map(|t| {
                        let c = schedule.ddim_increment(t)?;
                        sum += c * c;
                        Ok(0.5 * ovl_gaussian(d, sum.sqrt())?)
                    })
                    .collect()
            }
            _ => (1..=steps)
                .map(|t| self.loss_from_distance(d, schedule, t))
                .collect(),
        }
    }
}

/// Attribute loss against step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub model: LossModel,
    pub steps: Vec<usize>,
    pub losses: Vec<f64>,
}

impl LossCurve {
    /// First step whose loss exceeds `rho`.
    pub fn first_crossing(&self, rho: f64) -> Result<Option<usize>> {
        check_rho(rho)?;
        Ok(self
            .steps
            .iter()
            .zip(&self.losses)
            .find(|(_, &l)| l > rho)
            .map(|(&t, _)| t))
    }

    pub fn to_csv(&self, rho: f64) -> Result<String> {
        let mut out = String::from("t,loss\n");
        for (t, l) in self.steps.iter().zip(&self.losses) {
            out.push_str(&format!("{t},{l:.16e}\n"));
        }
        match self.first_crossing(rho)? {
            Some(t) => out.push_str(&format!("tau,{t}\n")),
            None => out.push_str("tau,none\n"),
        }
        Ok(out)
    }
}

pub fn loss_curve(x0: &Latent, y0: &Latent, schedule: &NoiseSchedule, model: LossModel) -> Result<LossCurve> {
    let d = latent_distance(x0, y0)?;
    Ok(LossCurve {
        model,
        steps: (1..=schedule.steps()).collect(),
        losses: model.curve_from_distance(d, schedule)?,
    })
}

pub(crate) fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..0.5).contains(&rho) {
        return Err(Error::Domain(format!("rho must lie in [0, 0.5), got {rho}")));
    }
    Ok(())
}

/// Earliest step in `1..=T` whose loss exceeds `rho`, or `None`.
pub fn tau(
    x0: &Latent,
    y0: &Latent,
    schedule: &NoiseSchedule,
    rho: f64,
    model: LossModel,
) -> Result<Option<usize>> {
    check_rho(rho)?;
    loss_curve(x0, y0, schedule, model)?.first_crossing(rho)
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Importance estimate of `integral min(p1, p2)` for `p1 = N(0, sigma^2)` and
/// `p2 = N(d, sigma^2)`: draws `x ~ p1` and averages `min(1, p2(x) / p1(x))`.
pub fn ovl_monte_carlo(d: f64, sigma: f64, n: usize, seed: u64) -> Result<McEstimate> {
    check_domain(d, sigma)?;
    if n < 10_000 {
        return Err(Error::Domain(format!("need at least 10^4 samples, got {n}")));
    }
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for z in NoiseKey::new(seed, 0x4f56_4c00, 0).normals().take(n) {
        let x = sigma * z;
        let log_ratio = (x * x - (x - d) * (x - d)) * inv_two_var;
        let w = if log_ratio >= 0.0 { 1.0 } else { log_ratio.exp() };
        sum += w;
        sum_sq += w * w;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    Ok(McEstimate {
        estimate: mean,
        stderr: (var / nf).sqrt(),
    })
}
