//! Variance schedule and derived per-timestep constants.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// All per-timestep diffusion constants in one immutable table.
///
/// `sigma[t]^2 = beta[t]` (the simple isotropic-variance choice) and
/// `omega[t] = 1` unless overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    omega: Vec<f64>,
}

/// Default "full" schedule: the standard DDPM constants.
pub const FULL_T: usize = 1000;
pub const FULL_BETA_START: f64 = 1e-4;
pub const FULL_BETA_END: f64 = 0.02;

/// Fast schedule for desk-scale runs: 50 steps with endpoints scaled 20x so
/// the total noise budget (sum of betas) matches the full schedule and the
/// terminal marginal stays indistinguishable from a unit Gaussian.
pub const FAST_T: usize = 50;
pub const FAST_BETA_START: f64 = 2e-3;
pub const FAST_BETA_END: f64 = 0.4;

pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(CoreError::config("schedule: step count must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(CoreError::config(format!(
            "schedule: betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear => linspace(beta_start, beta_end, t),
    };
    Ok(NoiseSchedule::from_betas_unchecked(betas))
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    (0..n)
        .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
        .collect()
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas, permitting the degenerate
    /// beta = 0 used by tests. Betas must still lie in [0, 1).
    pub fn from_betas_test_mode(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(CoreError::config("schedule: step count must be >= 1"));
        }
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(CoreError::config("schedule: test-mode betas must lie in [0, 1)"));
        }
        Ok(Self::from_betas_unchecked(betas))
    }

    fn from_betas_unchecked(betas: Vec<f64>) -> Self {
        let t = betas.len();
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t);
        let mut prod = 1.0f64;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma: Vec<f64> = betas.iter().map(|b| b.sqrt()).collect();
        NoiseSchedule { t_steps: t, beta: betas, alpha, alpha_bar, sigma, omega: vec![1.0; t] }
    }

    pub fn fast() -> Self {
        make_schedule(FAST_T, FAST_BETA_START, FAST_BETA_END, ScheduleKind::Linear).unwrap()
    }

    pub fn full() -> Self {
        make_schedule(FULL_T, FULL_BETA_START, FULL_BETA_END, ScheduleKind::Linear).unwrap()
    }

    pub fn len(&self) -> usize {
        self.t_steps
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn omega(&self, t: usize) -> f64 {
        self.omega[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn set_omega(&mut self, omega: Vec<f64>) -> Result<()> {
        if omega.len() != self.t_steps {
            return Err(CoreError::shape("omega length must equal T"));
        }
        self.omega = omega;
        Ok(())
    }

    /// Signal scale sqrt(alpha_bar[t]) of the closed-form marginal.
    pub fn signal_scale(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    /// Noise scale sqrt(1 - alpha_bar[t]) of the closed-form marginal.
    pub fn noise_scale(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// Re-checks every schedule invariant; used by tests and checkpoint loads.
    pub fn validate(&self) -> Result<()> {
        let t = self.t_steps;
        if self.beta.len() != t || self.alpha.len() != t || self.alpha_bar.len() != t {
            return Err(CoreError::shape("schedule: vector lengths differ from T"));
        }
        let mut prod = 1.0f64;
        let mut prev = f64::INFINITY;
        for i in 0..t {
            if !(0.0..1.0).contains(&self.beta[i]) {
                return Err(CoreError::config(format!("schedule: beta[{i}] out of [0,1)")));
            }
            if self.sigma[i] < 0.0 {
                return Err(CoreError::config(format!("schedule: sigma[{i}] negative")));
            }
            prod *= self.alpha[i];
            let rel = (self.alpha_bar[i] - prod).abs() / prod.max(1e-300);
            if rel > 1e-12 {
                return Err(CoreError::numeric(format!(
                    "schedule: alpha_bar[{i}] deviates from product by rel {rel}"
                )));
            }
            if self.alpha_bar[i] > prev {
                return Err(CoreError::numeric(format!("schedule: alpha_bar increases at {i}")));
            }
            prev = self.alpha_bar[i];
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_beta_test_mode_keeps_signal() {
        let s = NoiseSchedule::from_betas_test_mode(vec![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.len(), 3);
        for t in 0..3 {
            assert_eq!(s.alpha_bar(t), 1.0);
        }
        s.validate().unwrap();
    }

    #[test]
    fn near_one_beta_reaches_full_noise() {
        let s = make_schedule(1, 1.0 - 1e-12, 1.0 - 1e-12, ScheduleKind::Linear).unwrap();
        assert!(s.alpha_bar(0) < 1e-9);
    }

    #[test]
    fn full_schedule_terminal_alpha_bar_matches_independent_product() {
        let s = NoiseSchedule::full();
        // Independent oracle: recompute betas from the linspace definition and
        // multiply in a separate loop.
        let mut prod = 1.0f64;
        for i in 0..1000usize {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        let rel = (s.alpha_bar(999) - prod).abs() / prod;
        assert!(rel < 1e-10, "rel={rel}");
        // Frozen reference from an external double-precision script.
        assert_abs_diff_eq!(s.alpha_bar(999), 4.035829765375676e-5, epsilon = 1e-15);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(make_schedule(0, 1e-4, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 1e-4, 1.0, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.5, 0.2, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::from_betas_test_mode(vec![]).is_err());
        assert!(NoiseSchedule::from_betas_test_mode(vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants_hold_for_valid_params(
            t in 1usize..200,
            start in 1e-6f64..0.5,
            spread in 0.0f64..0.49,
        ) {
            let end = (start + spread).min(0.999);
            let s = make_schedule(t, start, end, ScheduleKind::Linear).unwrap();
            prop_assert!(s.validate().is_ok());
            // Strictly decreasing for strictly positive betas.
            for i in 1..t {
                prop_assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
            }
        }
    }
}
