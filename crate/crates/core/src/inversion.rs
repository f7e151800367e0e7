//! DDPM and DDIM inversion kernels and the partial-inversion preprocessing
//! operator.
//!
//! DDPM inversion draws an independent noise map per step, so the latent at
//! step `t` is the single-shot marginal `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps_t`
//! and needs no intermediate steps. DDIM inversion is deterministic and
//! iterates
//!
//! ```text
//! x_t = sqrt(ab_t / ab_{t-1}) x_{t-1} + sqrt(ab_t) (sqrt(1/ab_t - 1) - sqrt(1/ab_{t-1} - 1)) eps(x_{t-1}, t)
//! ```
//!
//! which unrolls to `x_t = sqrt(ab_t) x0 + sqrt(ab_t) sum_i c_i eps_i`.
//! Multi-step kernels keep their running state in `f64` and round to `f32`
//! only on output.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::noise::{draw_noise, NoiseKey};
use crate::schedule::NoiseSchedule;

/// Noise estimate `eps(x, t)` used by DDIM inversion, denoising and the DDPM
/// posterior mean. Conditioning is always unconditional.
#[derive(Debug, Clone, PartialEq)]
pub enum NoisePredictor {
    /// Always predicts zero noise.
    Zero,
    /// Knows the clean image and returns `(x - sqrt(ab_t) x0) / sqrt(1 - ab_t)`.
    Oracle { x0: Latent, alpha_bar: Vec<f64> },
    /// Replays recorded outputs; entry `t - 1` is returned at step `t`
    /// regardless of the input.
    Table(Vec<Latent>),
}

impl NoisePredictor {
    pub fn oracle(x0: Latent, schedule: &NoiseSchedule) -> Self {
        NoisePredictor::Oracle {
            x0,
            alpha_bar: schedule.alpha_bars().to_vec(),
        }
    }

    pub fn predict(&self, x: &Latent, t: usize) -> Result<Latent> {
        let mut out = vec![0.0; x.len()];
        self.predict_into(x.shape(), &x.to_f64(), t, &mut out)?;
        Latent::from_f64(x.shape().to_vec(), &out)
    }

    fn predict_into(&self, shape: &[usize], x: &[f64], t: usize, out: &mut [f64]) -> Result<()> {
        match self {
            NoisePredictor::Zero => out.fill(0.0),
            NoisePredictor::Oracle { x0, alpha_bar } => {
                check_shape(x0.shape(), shape)?;
                let (s, q) = oracle_coefficients(alpha_bar, t)?;
                for ((o, &xi), &ri) in out.iter_mut().zip(x).zip(x0.data()) {
                    *o = (xi - s * ri as f64) / q;
                }
            }
            NoisePredictor::Table(eps) => {
                let e = self.table_entry(eps, t)?;
                check_shape(e.shape(), shape)?;
                for (o, &v) in out.iter_mut().zip(e.data()) {
                    *o = v as f64;
                }
            }
        }
        Ok(())
    }

    /// Writes the `x` satisfying `a * x + b * eps(x, t) = target`.
    ///
    /// All three variants are affine in `x`, so the solve is exact.
    fn solve_step_into(
        &self,
        shape: &[usize],
        target: &[f64],
        a: f64,
        b: f64,
        t: usize,
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            NoisePredictor::Zero => {
                for (o, &y) in out.iter_mut().zip(target) {
                    *o = y / a;
                }
            }
            NoisePredictor::Oracle { x0, alpha_bar } => {
                check_shape(x0.shape(), shape)?;
                let (s, q) = oracle_coefficients(alpha_bar, t)?;
                // a x + b (x - s x0) / q = y  =>  x = (y + (b s / q) x0) / (a + b / q)
                let denom = a + b / q;
                let shift = b * s / q;
                for ((o, &y), &r) in out.iter_mut().zip(target).zip(x0.data()) {
                    *o = (y + shift * r as f64) / denom;
                }
            }
            NoisePredictor::Table(eps) => {
                let e = self.table_entry(eps, t)?;
                check_shape(e.shape(), shape)?;
                for ((o, &y), &v) in out.iter_mut().zip(target).zip(e.data()) {
                    *o = (y - b * v as f64) / a;
                }
            }
        }
        Ok(())
    }

    fn table_entry<'a>(&self, eps: &'a [Latent], t: usize) -> Result<&'a Latent> {
        t.checked_sub(1)
            .and_then(|i| eps.get(i))
            .ok_or(Error::StepOutOfRange {
                step: t,
                max: eps.len(),
            })
    }
}

fn oracle_coefficients(alpha_bar: &[f64], t: usize) -> Result<(f64, f64)> {
    let max = alpha_bar.len().saturating_sub(1);
    if t == 0 || t > max {
        return Err(Error::StepOutOfRange { step: t, max });
    }
    let ab = alpha_bar[t];
    Ok((ab.sqrt(), (1.0 - ab).sqrt()))
}

fn check_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

fn check_step(schedule: &NoiseSchedule, t: usize, min: usize) -> Result<()> {
    if t < min || t > schedule.steps() {
        return Err(Error::StepOutOfRange {
            step: t,
            max: schedule.steps(),
        });
    }
    Ok(())
}

fn step_u32(t: usize) -> Result<u32> {
    u32::try_from(t).map_err(|_| Error::InvalidRange(format!("step {t} exceeds u32")))
}

/// `sqrt(ab) x0 + sqrt(1 - ab) eps`, evaluated per element in `f64`.
pub fn forward_marginal(x0: &Latent, alpha_bar: f64, eps: &Latent) -> Result<Latent> {
    x0.ensure_same_shape(eps)?;
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::Domain(format!("alpha_bar {alpha_bar} outside (0, 1]")));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect();
    Latent::new(x0.shape().to_vec(), data)
}

/// Single-shot DDPM inversion to step `t`, with noise keyed by `key.with_step(t)`.
pub fn ddpm_invert(x0: &Latent, schedule: &NoiseSchedule, t: usize, key: NoiseKey) -> Result<Latent> {
    check_step(schedule, t, 0)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = schedule.alpha_bar_at(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(key.with_step(step_u32(t)?).normals())
        .map(|(&x, e)| (a * x as f64 + b * (e as f32) as f64) as f32)
        .collect();
    Latent::new(x0.shape().to_vec(), data)
}

/// `[x_1, ..., x_{t_max}]`, each an independent single-shot draw.
pub fn ddpm_invert_trajectory(
    x0: &Latent,
    schedule: &NoiseSchedule,
    t_max: usize,
    base_key: NoiseKey,
) -> Result<Vec<Latent>> {
    check_step(schedule, t_max, 1)?;
    (1..=t_max)
        .map(|t| ddpm_invert(x0, schedule, t, base_key))
        .collect()
}

/// Posterior-mean estimate
/// `mu(x_t) = (x_t - beta_t / sqrt(1 - ab_t) * eps(x_t, t)) / sqrt(alpha_t)`.
fn posterior_mean_into(
    x_t: &[f64],
    shape: &[usize],
    t: usize,
    predictor: &NoisePredictor,
    schedule: &NoiseSchedule,
    out: &mut [f64],
) -> Result<()> {
    let beta = schedule.beta_at(t)?;
    let alpha = schedule.alpha_at(t)?;
    let ab = schedule.alpha_bar_at(t)?;
    let mut eps = vec![0.0; x_t.len()];
    predictor.predict_into(shape, x_t, t, &mut eps)?;
    let k = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    for ((o, &x), &e) in out.iter_mut().zip(x_t).zip(&eps) {
        *o = (x - k * e) * inv;
    }
    Ok(())
}

pub fn posterior_mean(
    x_t: &Latent,
    t: usize,
    predictor: &NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let mut out = vec![0.0; x_t.len()];
    posterior_mean_into(&x_t.to_f64(), x_t.shape(), t, predictor, schedule, &mut out)?;
    Latent::from_f64(x_t.shape().to_vec(), &out)
}

/// Residuals `z_t = (x_{t-1} - mu(x_t)) / sigma_t` for a DDPM trajectory,
/// computed from the last step back to the first.
///
/// `trajectory` is `[x_1, ..., x_n]` as produced by [`ddpm_invert_trajectory`];
/// `x0` supplies `x_{0}`. The returned vector is indexed by step: entry
/// `t - 1` holds `z_t`.
pub fn ddpm_error_reduction(
    x0: &Latent,
    trajectory: &[Latent],
    predictor: &NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    if trajectory.len() > schedule.steps() {
        return Err(Error::LengthMismatch {
            expected: schedule.steps(),
            actual: trajectory.len(),
        });
    }
    for x in trajectory {
        x0.ensure_same_shape(x)?;
    }
    let shape = x0.shape();
    let mut zs = vec![None; trajectory.len()];
    let mut mu = vec![0.0; x0.len()];
    for t in (1..=trajectory.len()).rev() {
        let prev = if t == 1 { x0 } else { &trajectory[t - 2] };
        posterior_mean_into(
            &trajectory[t - 1].to_f64(),
            shape,
            t,
            predictor,
            schedule,
            &mut mu,
        )?;
        let sigma = schedule.sigma_at(t)?;
        let z: Vec<f64> = prev
            .data()
            .iter()
            .zip(&mu)
            .map(|(&p, &m)| (p as f64 - m) / sigma)
            .collect();
        zs[t - 1] = Some(Latent::from_f64(shape.to_vec(), &z)?);
    }
    Ok(zs.into_iter().flatten().collect())
}

/// Runs `x_{t-1} = mu(x_t) + sigma_t z_t` from `x_n` down to `x_0`.
///
/// Returns `[x_0, ..., x_{n-1}]`.
pub fn ddpm_resynthesize(
    x_last: &Latent,
    residuals: &[Latent],
    predictor: &NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    if residuals.len() > schedule.steps() {
        return Err(Error::LengthMismatch {
            expected: schedule.steps(),
            actual: residuals.len(),
        });
    }
    let shape = x_last.shape();
    let mut out = vec![None; residuals.len()];
    let mut state = x_last.to_f64();
    let mut mu = vec![0.0; state.len()];
    for t in (1..=residuals.len()).rev() {
        let z = &residuals[t - 1];
        x_last.ensure_same_shape(z)?;
        posterior_mean_into(&state, shape, t, predictor, schedule, &mut mu)?;
        let sigma = schedule.sigma_at(t)?;
        for ((s, &m), &zi) in state.iter_mut().zip(&mu).zip(z.data()) {
            *s = m + sigma * zi as f64;
        }
        out[t - 1] = Some(Latent::from_f64(shape.to_vec(), &state)?);
    }
    Ok(out.into_iter().flatten().collect())
}

fn ddim_coefficients(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    let ab = schedule.alpha_bar_at(t)?;
    let prev = schedule.alpha_bar_at(t - 1)?;
    Ok(((ab / prev).sqrt(), ab.sqrt() * schedule.ddim_increment(t)?))
}

// Advances `state` one DDIM step in place; writes the prediction used into `eps`.
fn ddim_step_f64(
    state: &mut [f64],
    eps: &mut [f64],
    shape: &[usize],
    t: usize,
    schedule: &NoiseSchedule,
    predictor: &NoisePredictor,
) -> Result<()> {
    let (a, b) = ddim_coefficients(schedule, t)?;
    predictor.predict_into(shape, state, t, eps)?;
    for (s, &e) in state.iter_mut().zip(eps.iter()) {
        *s = a * *s + b * e;
    }
    Ok(())
}

/// One DDIM inversion step from `x_{t-1}` to `x_t`.
pub fn ddim_invert_step(
    x_prev: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    predictor: &NoisePredictor,
) -> Result<Latent> {
    check_step(schedule, t, 1)?;
    let mut state = x_prev.to_f64();
    let mut eps = vec![0.0; state.len()];
    ddim_step_f64(&mut state, &mut eps, x_prev.shape(), t, schedule, predictor)?;
    Latent::from_f64(x_prev.shape().to_vec(), &state)
}

/// `t` DDIM inversion steps starting from `x0`.
pub fn ddim_invert(
    x0: &Latent,
    schedule: &NoiseSchedule,
    t: usize,
    predictor: &NoisePredictor,
) -> Result<Latent> {
    Ok(ddim_invert_recorded(x0, schedule, t, predictor, false)?.0)
}

/// Like [`ddim_invert`], also returning the per-step predictions when `record` is set.
pub fn ddim_invert_recorded(
    x0: &Latent,
    schedule: &NoiseSchedule,
    t: usize,
    predictor: &NoisePredictor,
    record: bool,
) -> Result<(Latent, Vec<Latent>)> {
    check_step(schedule, t, 0)?;
    let shape = x0.shape();
    let mut state = x0.to_f64();
    let mut eps = vec![0.0; state.len()];
    let mut recorded = Vec::new();
    for s in 1..=t {
        ddim_step_f64(&mut state, &mut eps, shape, s, schedule, predictor)?;
        if record {
            recorded.push(Latent::from_f64(shape.to_vec(), &eps)?);
        }
    }
    Ok((Latent::from_f64(shape.to_vec(), &state)?, recorded))
}

/// Direct evaluation of the unrolled DDIM recursion,
/// `sqrt(ab_t) x0 + sum_i sqrt(ab_t) c_i eps_i`.
pub fn ddim_invert_closed_form(
    x0: &Latent,
    schedule: &NoiseSchedule,
    t: usize,
    eps_per_step: &[Latent],
) -> Result<Latent> {
    check_step(schedule, t, 0)?;
    if eps_per_step.len() != t {
        return Err(Error::LengthMismatch {
            expected: t,
            actual: eps_per_step.len(),
        });
    }
    let scale = schedule.alpha_bar_at(t)?.sqrt();
    let mut acc: Vec<f64> = x0.data().iter().map(|&v| scale * v as f64).collect();
    for (i, eps) in eps_per_step.iter().enumerate() {
        x0.ensure_same_shape(eps)?;
        let w = scale * schedule.ddim_increment(i + 1)?;
        for (a, &e) in acc.iter_mut().zip(eps.data()) {
            *a += w * e as f64;
        }
    }
    Latent::from_f64(x0.shape().to_vec(), &acc)
}

/// Inverse of `t` DDIM inversion steps, walking from step `t` back to 0.
///
/// Each step solves `x_s = a_s x_{s-1} + b_s eps(x_{s-1}, s)` for `x_{s-1}`
/// exactly. Denoising with a `t` that differs from the inversion depth does
/// not recover the input; the reconstruction error grows with the mismatch.
pub fn ddim_denoise(
    x_t: &Latent,
    schedule: &NoiseSchedule,
    t: usize,
    predictor: &NoisePredictor,
) -> Result<Latent> {
    check_step(schedule, t, 0)?;
    let shape = x_t.shape();
    let mut state = x_t.to_f64();
    let mut next = vec![0.0; state.len()];
    for s in (1..=t).rev() {
        let (a, b) = ddim_coefficients(schedule, s)?;
        predictor.solve_step_into(shape, &state, a, b, s, &mut next)?;
        std::mem::swap(&mut state, &mut next);
    }
    Latent::from_f64(shape.to_vec(), &state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InversionMethod {
    Ddpm,
    Ddim,
}

impl fmt::Display for InversionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InversionMethod::Ddpm => "ddpm",
            InversionMethod::Ddim => "ddim",
        })
    }
}

impl FromStr for InversionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(InversionMethod::Ddpm),
            "ddim" => Ok(InversionMethod::Ddim),
            other => Err(Error::Config(format!("unknown inversion method `{other}`"))),
        }
    }
}

/// Predictor used by DDIM preprocessing, where no trained denoiser exists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DdimPredictorKind {
    /// Pure `sqrt(ab_t)` rescaling.
    Zero,
    /// Replays the same keyed standard-normal maps DDPM would draw at steps `1..=t`.
    #[default]
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub method: InversionMethod,
    /// Number of inversion steps applied (`t` of `t/T`).
    pub t_stop: usize,
    pub total_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub error_reduction: bool,
    #[serde(default)]
    pub ddim_predictor: DdimPredictorKind,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            method: InversionMethod::Ddpm,
            t_stop: 15,
            total_steps: 50,
            seed: 0,
            error_reduction: false,
            ddim_predictor: DdimPredictorKind::Noise,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total steps must be at least 1".into()));
        }
        if self.t_stop > self.total_steps {
            return Err(Error::Config(format!(
                "t_stop {} exceeds total steps {}",
                self.t_stop, self.total_steps
            )));
        }
        if self.error_reduction && self.method == InversionMethod::Ddim {
            return Err(Error::Config(
                "error reduction only applies to ddpm inversion".into(),
            ));
        }
        Ok(())
    }

    pub fn key(&self, stream_id: u64) -> NoiseKey {
        NoiseKey::new(self.seed, stream_id, 0)
    }
}

/// Partial inversion of one observation: `t_stop` of `total_steps` steps.
///
/// DDPM runs the single-shot marginal at `t_stop`. With `error_reduction` set
/// the full trajectory and its residuals are computed as well; the returned
/// observation is the same either way.
pub fn stem_preprocess(
    o: &Latent,
    config: &InversionConfig,
    schedule: &NoiseSchedule,
    stream_id: u64,
) -> Result<Latent> {
    config.validate()?;
    if schedule.steps() != config.total_steps {
        return Err(Error::Config(format!(
            "schedule has {} steps but config expects {}",
            schedule.steps(),
            config.total_steps
        )));
    }
    if config.t_stop == 0 {
        return Ok(o.clone());
    }
    let key = config.key(stream_id);
    match config.method {
        InversionMethod::Ddpm if config.error_reduction => {
            let mut traj = ddpm_invert_trajectory(o, schedule, config.t_stop, key)?;
            let predictor = NoisePredictor::oracle(o.clone(), schedule);
            ddpm_error_reduction(o, &traj, &predictor, schedule)?;
            Ok(traj.pop().expect("t_stop >= 1"))
        }
        InversionMethod::Ddpm => ddpm_invert(o, schedule, config.t_stop, key),
        InversionMethod::Ddim => {
            let predictor = match config.ddim_predictor {
                DdimPredictorKind::Zero => NoisePredictor::Zero,
                DdimPredictorKind::Noise => NoisePredictor::Table(
                    (1..=config.t_stop)
                        .map(|t| draw_noise(key.with_step(step_u32(t)?), o.shape()))
                        .collect::<Result<_>>()?,
                ),
            };
            ddim_invert(o, schedule, config.t_stop, &predictor)
        }
    }
}
