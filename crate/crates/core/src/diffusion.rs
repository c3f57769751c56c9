//! Cosine noise schedule, forward corruption and the deterministic DDIM update.
//!
//! The forward process corrupts a clean signal point `z0` into
//! `z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps` with unit Gaussian
//! `eps`. The reverse update is the eta = 0 DDIM step in x0-parameterization:
//! the denoiser predicts `z0` directly and the implied noise is reconstructed
//! from the current state.

use crate::geometry::SignalPoint4;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("schedule needs at least one step, got T={0}")]
    BadStepCount(usize),
    #[error("cosine offset must lie in (0, 0.1), got {0}")]
    BadOffset(f64),
    #[error("ladder length {steps} must lie in [1, T={t_max}]")]
    BadLadder { steps: usize, t_max: usize },
    #[error("no reverse step possible from t=0")]
    StepFromZero,
}

/// Discrete time step in `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TimeStep(pub usize);

/// Cumulative signal-retention table `abar_t` for `t = 0..=T`.
///
/// Invariants: `abar[0] = 1`, strictly decreasing, every entry in `(0, 1]`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha_bar: Vec<f64>,
}

/// Floor applied to the raw cosine values so `abar_T` stays bounded away
/// from zero.
pub const ALPHA_BAR_FLOOR: f64 = 1e-5;

/// Default training horizon.
pub const DEFAULT_T: usize = 1000;

/// Default cosine offset.
pub const DEFAULT_S_OFFSET: f64 = 0.008;

impl NoiseSchedule {
    /// Cosine schedule: `abar_t = cos^2(((t/T + s)/(1 + s)) * pi/2)`
    /// normalized to `abar_0 = 1` and floored at [`ALPHA_BAR_FLOOR`].
    pub fn cosine(t_max: usize, s_offset: f64) -> Result<Self, ScheduleError> {
        if t_max < 1 {
            return Err(ScheduleError::BadStepCount(t_max));
        }
        if !(s_offset > 0.0 && s_offset < 0.1) {
            return Err(ScheduleError::BadOffset(s_offset));
        }
        let base = cosine_raw(0.0, s_offset);
        let mut alpha_bar: Vec<f64> = (0..=t_max)
            .map(|t| (cosine_raw(t as f64 / t_max as f64, s_offset) / base).max(ALPHA_BAR_FLOOR))
            .collect();
        // The floor can flatten the last few entries; lift each one a hair
        // above its successor so the table stays strictly decreasing.
        for t in (0..t_max).rev() {
            let lifted = alpha_bar[t + 1] * (1.0 + 1e-9);
            if alpha_bar[t] <= alpha_bar[t + 1] {
                alpha_bar[t] = lifted;
            }
        }
        debug_assert!(alpha_bar.windows(2).all(|w| w[0] > w[1]));
        debug_assert!(alpha_bar.iter().all(|&a| a > 0.0 && a <= 1.0));
        Ok(Self { t_max, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha_bar(&self, t: TimeStep) -> f64 {
        self.alpha_bar[t.0]
    }

    pub fn entries(&self) -> &[f64] {
        &self.alpha_bar
    }
}

fn cosine_raw(x: f64, s: f64) -> f64 {
    let angle = ((x + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
    angle.cos().powi(2)
}

/// Forward corruption `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`,
/// clamped into `[-b_scale, b_scale]`. The caller supplies the noise draws.
pub fn corrupt(
    z0: &SignalPoint4,
    t: TimeStep,
    sched: &NoiseSchedule,
    noise: &[f64; 4],
    b_scale: f64,
) -> SignalPoint4 {
    let ab = sched.alpha_bar(t);
    let signal = ab.sqrt();
    let spread = (1.0 - ab).sqrt();
    let out = std::array::from_fn(|i| signal * z0.0[i] + spread * noise[i]);
    SignalPoint4(out).clamped(b_scale)
}

/// Deterministic DDIM update from `t` to `t_prev < t` given the predicted
/// clean signal `z0_hat`: reconstructs `eps_hat` and re-noises to `t_prev`.
pub fn ddim_step(
    z_t: &SignalPoint4,
    z0_hat: &SignalPoint4,
    t: TimeStep,
    t_prev: TimeStep,
    sched: &NoiseSchedule,
    b_scale: f64,
) -> Result<SignalPoint4, ScheduleError> {
    if t.0 == 0 {
        return Err(ScheduleError::StepFromZero);
    }
    debug_assert!(t_prev < t);
    let ab_t = sched.alpha_bar(t);
    let ab_p = sched.alpha_bar(t_prev);
    let (sig_t, spread_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sig_p, spread_p) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
    let out = std::array::from_fn(|i| {
        let eps_hat = (z_t.0[i] - sig_t * z0_hat.0[i]) / spread_t;
        sig_p * z0_hat.0[i] + spread_p * eps_hat
    });
    Ok(SignalPoint4(out).clamped(b_scale))
}

/// Evenly spaced inference ladder `[T, ..., 0]` of length `steps + 1`,
/// strictly decreasing.
pub fn timestep_ladder(t_max: usize, steps: usize) -> Result<Vec<TimeStep>, ScheduleError> {
    if steps < 1 || steps > t_max {
        return Err(ScheduleError::BadLadder { steps, t_max });
    }
    let ladder: Vec<TimeStep> = (0..=steps)
        .map(|i| {
            // round(T * (steps - i) / steps), half away from zero
            let num = t_max * (steps - i);
            TimeStep((2 * num + steps) / (2 * steps))
        })
        .collect();
    debug_assert!(ladder.windows(2).all(|w| w[0] > w[1]));
    debug_assert_eq!(ladder[0].0, t_max);
    debug_assert_eq!(ladder[steps].0, 0);
    Ok(ladder)
}
