//! Brownian-bridge diffusion between a target latent `x_0` (at `t = 0`) and a
//! source latent `y` (at `t = T`).
//!
//! The marginal is `x_t ~ N((1 - m_t) x_0 + m_t y, δ_t)` with `m_t = t / T`
//! and `δ_t = 2 s m_t (1 - m_t)`. Transitions between arbitrary steps are
//! exact, so sampling may skip steps freely.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};
use crate::rng;
use crate::tensor::Latent;

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    total_steps: usize,
    variance_scale: f64,
    m: Vec<f64>,
    delta: Vec<f64>,
}

/// One `(t, m_t, δ_t)` row of a schedule dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub t: usize,
    pub m: f64,
    pub delta: f64,
}

impl BridgeSchedule {
    pub fn new(total_steps: usize, variance_scale: f64) -> Result<Self> {
        if total_steps < 2 {
            return Err(DseError::config(format!("bridge needs T >= 2, got {total_steps}")));
        }
        if !(variance_scale > 0.0) || !variance_scale.is_finite() {
            return Err(DseError::config(format!(
                "variance scale must be positive, got {variance_scale}"
            )));
        }
        let tf = total_steps as f64;
        let m: Vec<f64> = (0..=total_steps).map(|t| t as f64 / tf).collect();
        let delta = m.iter().map(|&mt| 2.0 * variance_scale * mt * (1.0 - mt)).collect();
        Ok(Self {
            total_steps,
            variance_scale,
            m,
            delta,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn variance_scale(&self) -> f64 {
        self.variance_scale
    }

    pub fn m(&self, t: usize) -> f64 {
        self.m[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    pub fn rows(&self) -> Vec<ScheduleRow> {
        (0..=self.total_steps)
            .map(|t| ScheduleRow {
                t,
                m: self.m[t],
                delta: self.delta[t],
            })
            .collect()
    }

    /// Debug dump as a JSON array of `{t, m, delta}` objects.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows()).expect("schedule rows serialize")
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.total_steps {
            return Err(DseError::argument(format!(
                "step {t} outside [0, {}]",
                self.total_steps
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(total_steps: usize, variance_scale: f64) -> Result<BridgeSchedule> {
    BridgeSchedule::new(total_steps, variance_scale)
}

/// Draws `x_t = (1 - m_t) x_0 + m_t y + √δ_t ε`.
pub fn forward_marginal(schedule: &BridgeSchedule, x0: &Latent, y: &Latent, t: usize, eps: &Latent) -> Result<Latent> {
    schedule.check_t(t)?;
    x0.check_same_shape(y, "forward_marginal x0/y")?;
    x0.check_same_shape(eps, "forward_marginal x0/eps")?;
    let (m, sd) = (schedule.m(t), schedule.delta(t).sqrt());
    let mut out = x0.clone();
    for ((o, &yv), &e) in out.data.iter_mut().zip(&y.data).zip(&eps.data) {
        *o = (1.0 - m) * *o + m * yv + sd * e;
    }
    Ok(out)
}

/// Coefficients of `q(x_to | x_from, y) = N(a·x_from + b·y, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub a: f64,
    pub b: f64,
    pub v: f64,
}

pub fn step_params(schedule: &BridgeSchedule, t_from: usize, t_to: usize) -> Result<StepParams> {
    schedule.check_t(t_to)?;
    if t_from >= t_to {
        return Err(DseError::argument(format!(
            "forward transition needs t_from < t_to, got {t_from} -> {t_to}"
        )));
    }
    let (m_from, m_to) = (schedule.m(t_from), schedule.m(t_to));
    let a = (1.0 - m_to) / (1.0 - m_from);
    let b = m_to - a * m_from;
    let v = schedule.delta(t_to) - a * a * schedule.delta(t_from);
    Ok(StepParams { a, b, v: v.max(0.0) })
}

/// The reverse posterior `q(x_to | x_from, x̂_0, y)` written as
/// `mean = coef_xt·x_from + coef_x0·x̂_0 + coef_y·y` with scalar `variance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    pub coef_xt: f64,
    pub coef_x0: f64,
    pub coef_y: f64,
    pub variance: f64,
}

/// Conjugate-Gaussian combination of the marginal prior at `t_to` (centred on
/// `x̂_0`) with the forward likelihood of the current state at `t_from`.
///
/// Degenerate branches: `δ_to = 0` returns the prior mean with zero variance;
/// an uninformative likelihood (`a = 0`, i.e. `t_from = T`) returns the
/// prior; `v = 0` with `a ≠ 0` inverts the transition exactly.
pub fn posterior_coeffs(schedule: &BridgeSchedule, t_from: usize, t_to: usize) -> Result<PosteriorCoeffs> {
    schedule.check_t(t_from)?;
    if t_to >= t_from {
        return Err(DseError::argument(format!(
            "reverse step needs t_to < t_from, got {t_from} -> {t_to}"
        )));
    }
    let m_to = schedule.m(t_to);
    let d_to = schedule.delta(t_to);
    let prior = PosteriorCoeffs {
        coef_xt: 0.0,
        coef_x0: 1.0 - m_to,
        coef_y: m_to,
        variance: d_to,
    };
    if d_to == 0.0 {
        return Ok(PosteriorCoeffs { variance: 0.0, ..prior });
    }
    let StepParams { a, b, v } = step_params(schedule, t_to, t_from)?;
    if a == 0.0 {
        return Ok(prior);
    }
    if v == 0.0 {
        return Ok(PosteriorCoeffs {
            coef_xt: 1.0 / a,
            coef_x0: 0.0,
            coef_y: -b / a,
            variance: 0.0,
        });
    }
    let var = 1.0 / (a * a / v + 1.0 / d_to);
    Ok(PosteriorCoeffs {
        coef_xt: var * a / v,
        coef_x0: var * (1.0 - m_to) / d_to,
        coef_y: var * (m_to / d_to - a * b / v),
        variance: var,
    })
}

/// Posterior mean and variance of `x_to` given the current state `x_t` at
/// `t_from`, an estimate `x̂_0` and the source `y`.
pub fn reverse_posterior(
    schedule: &BridgeSchedule,
    x_t: &Latent,
    x0_hat: &Latent,
    y: &Latent,
    t_from: usize,
    t_to: usize,
) -> Result<(Latent, f64)> {
    x_t.check_same_shape(x0_hat, "reverse_posterior x_t/x0_hat")?;
    x_t.check_same_shape(y, "reverse_posterior x_t/y")?;
    let c = posterior_coeffs(schedule, t_from, t_to)?;
    let mut mean = x_t.clone();
    for ((o, &x0), &yv) in mean.data.iter_mut().zip(&x0_hat.data).zip(&y.data) {
        *o = c.coef_xt * *o + c.coef_x0 * x0 + c.coef_y * yv;
    }
    Ok((mean, c.variance))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsKind {
    StandardNormal,
    TargetEmpirical,
}

/// Noise policy for the reverse process.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsSource {
    kind: EpsKind,
    pool: Option<Vec<f64>>,
    /// Multiplier on the reverse-process noise.
    pub scale: f64,
}

impl EpsSource {
    pub fn standard_normal(scale: f64) -> Result<Self> {
        check_scale(scale)?;
        Ok(Self {
            kind: EpsKind::StandardNormal,
            pool: None,
            scale,
        })
    }

    /// Builds an empirical source from raw target-domain values, standardizing
    /// them to zero mean and unit variance.
    pub fn target_empirical(raw_pool: &[f64], scale: f64) -> Result<Self> {
        check_scale(scale)?;
        if raw_pool.is_empty() {
            return Err(DseError::config("target-empirical noise needs a non-empty pool"));
        }
        let n = raw_pool.len() as f64;
        let mean = raw_pool.iter().sum::<f64>() / n;
        let var = raw_pool.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if !(var > 1e-18) || !var.is_finite() {
            return Err(DseError::config("target-empirical pool has zero variance"));
        }
        let sd = var.sqrt();
        let pool = raw_pool.iter().map(|v| (v - mean) / sd).collect();
        Ok(Self {
            kind: EpsKind::TargetEmpirical,
            pool: Some(pool),
            scale,
        })
    }

    pub fn kind(&self) -> EpsKind {
        self.kind
    }

    pub fn pool(&self) -> Option<&[f64]> {
        self.pool.as_deref()
    }

    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        check_scale(scale)?;
        Ok(Self { scale, ..self.clone() })
    }

    /// Checks the pool invariant (non-empty, standardized within 1e-6).
    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        if self.kind == EpsKind::TargetEmpirical {
            let pool = self
                .pool
                .as_deref()
                .filter(|p| !p.is_empty())
                .ok_or_else(|| DseError::config("target-empirical noise needs a non-empty pool"))?;
            let n = pool.len() as f64;
            let mean = pool.iter().sum::<f64>() / n;
            let var = pool.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if mean.abs() > 1e-6 || (var - 1.0).abs() > 1e-6 {
                return Err(DseError::config(format!(
                    "pool is not standardized (mean {mean}, variance {var})"
                )));
            }
        }
        Ok(())
    }

    /// Draws `n` unscaled values from the source using `rng`.
    pub fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        match self.kind {
            EpsKind::StandardNormal => Ok((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()),
            EpsKind::TargetEmpirical => {
                let pool = self
                    .pool
                    .as_deref()
                    .filter(|p| !p.is_empty())
                    .ok_or_else(|| DseError::config("target-empirical noise needs a non-empty pool"))?;
                Ok((0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect())
            }
        }
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(DseError::config(format!("noise scale must be non-negative, got {scale}")));
    }
    Ok(())
}

/// Draws `n` unscaled noise values; the source's `scale` is applied by the sampler.
pub fn eps_sample(source: &EpsSource, n: usize, seed: u64) -> Result<Vec<f64>> {
    source.sample_with(n, &mut rng::seeded(seed))
}

/// Decreasing list of sampling steps, starting at `T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSchedule {
    steps: Vec<usize>,
}

impl StepSchedule {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Consecutive `(from, to)` pairs, ending with a final jump to 0.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, self.steps.get(i + 1).copied().unwrap_or(0)))
    }
}

/// Evenly spaced steps `round(i·T/n)` for `i = n, …, 1`, rounding halves up.
pub fn make_step_schedule(total_steps: usize, n_steps: usize) -> Result<StepSchedule> {
    if n_steps == 0 || n_steps > total_steps {
        return Err(DseError::config(format!(
            "sampling steps must lie in [1, {total_steps}], got {n_steps}"
        )));
    }
    let mut steps: Vec<usize> = (1..=n_steps)
        .rev()
        .map(|i| (2 * i * total_steps + n_steps) / (2 * n_steps))
        .collect();
    steps.dedup();
    Ok(StepSchedule { steps })
}

/// Estimates the displacement `D = x_t - x_0` from the current state.
pub trait DisplacementPredictor {
    fn predict(&self, x_t: &Latent, t: usize, context: &Latent) -> Result<Latent>;
}

impl<F> DisplacementPredictor for F
where
    F: Fn(&Latent, usize, &Latent) -> Result<Latent>,
{
    fn predict(&self, x_t: &Latent, t: usize, context: &Latent) -> Result<Latent> {
        self(x_t, t, context)
    }
}

/// Runs the reverse bridge from `y` at `t = T` down to `t = 0`.
pub fn reverse_sample<P: DisplacementPredictor + ?Sized>(
    schedule: &BridgeSchedule,
    y: &Latent,
    context: &Latent,
    predictor: &P,
    steps: &StepSchedule,
    eps: &EpsSource,
    seed: u64,
) -> Result<Latent> {
    reverse_sample_observed(schedule, y, context, predictor, steps, eps, seed, |_, _| {})
}

/// [`reverse_sample`] with a callback receiving `(t, x_t)` after every step.
#[allow(clippy::too_many_arguments)]
pub fn reverse_sample_observed<P: DisplacementPredictor + ?Sized>(
    schedule: &BridgeSchedule,
    y: &Latent,
    context: &Latent,
    predictor: &P,
    steps: &StepSchedule,
    eps: &EpsSource,
    seed: u64,
    mut observe: impl FnMut(usize, &Latent),
) -> Result<Latent> {
    eps.validate()?;
    if steps.steps().first() != Some(&schedule.total_steps()) {
        return Err(DseError::argument("step schedule must start at T"));
    }
    let mut rng = rng::seeded(seed);
    let mut x = y.clone();
    for (t_from, t_to) in steps.transitions() {
        let d = predictor.predict(&x, t_from, context)?;
        x.check_same_shape(&d, "predictor output")?;
        let x0_hat = x.zip_map(&d, |a, b| a - b)?;
        let c = posterior_coeffs(schedule, t_from, t_to)?;
        let sd = eps.scale * c.variance.sqrt();
        let noise = if sd > 0.0 { Some(eps.sample_with(x.len(), &mut rng)?) } else { None };
        for i in 0..x.len() {
            let mut v = c.coef_xt * x.data[i] + c.coef_x0 * x0_hat.data[i] + c.coef_y * y.data[i];
            if let Some(n) = &noise {
                v += sd * n[i];
            }
            x.data[i] = v;
        }
        if !x.all_finite() {
            return Err(DseError::Numerical {
                step: t_from,
                message: format!("non-finite state after transition {t_from} -> {t_to}"),
            });
        }
        observe(t_to, &x);
    }
    Ok(x)
}
