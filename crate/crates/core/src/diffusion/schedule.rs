use serde::{Deserialize, Serialize};

use super::{DiffusionError, Result};

pub const DEFAULT_SIGMA_MIN: f64 = 0.002;
pub const DEFAULT_SIGMA_MAX: f64 = 80.0;
pub const DEFAULT_RHO: f64 = 7.0;

/// Schedule shape without the step count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
            rho: DEFAULT_RHO,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self, steps: usize) -> Result<SigmaSchedule> {
        SigmaSchedule::karras(steps, self.sigma_min, self.sigma_max, self.rho)
    }
}

/// Noise levels `sigma_0 > ... > sigma_{N-1} > sigma_N = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    sigmas: Vec<f64>,
}

impl SigmaSchedule {
    /// Polynomial interpolation in the `1/rho` power domain with the end points
    /// pinned exactly.
    pub fn karras(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        if steps == 0 {
            return Err(DiffusionError::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(DiffusionError::InvalidArgument(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
            )));
        }
        if !(rho > 0.0) {
            return Err(DiffusionError::InvalidArgument(format!(
                "rho must be positive, got {rho}"
            )));
        }
        let mut sigmas = Vec::with_capacity(steps + 1);
        if steps == 1 {
            sigmas.push(sigma_max);
        } else {
            let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
            for i in 0..steps {
                let s = if i == 0 {
                    sigma_max
                } else if i == steps - 1 {
                    sigma_min
                } else {
                    (a + i as f64 / (steps - 1) as f64 * (b - a)).powf(rho)
                };
                sigmas.push(s);
            }
        }
        sigmas.push(0.0);
        Ok(Self {
            sigma_min,
            sigma_max,
            rho,
            sigmas,
        })
    }

    pub fn new(steps: usize) -> Result<Self> {
        Self::karras(steps, DEFAULT_SIGMA_MIN, DEFAULT_SIGMA_MAX, DEFAULT_RHO)
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// All `N + 1` levels.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }

    /// Checks the ordering invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigmas.len() >= 2
            && *self.sigmas.last().unwrap() == 0.0
            && self.sigmas.windows(2).all(|w| w[0] > w[1])
            && self.sigmas.iter().all(|s| s.is_finite());
        if ok {
            Ok(())
        } else {
            Err(DiffusionError::InvalidArgument(
                "schedule must decrease strictly to 0".into(),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let s = SigmaSchedule::new(18).unwrap();
        assert_eq!(s.sigmas().len(), 19);
        assert_eq!(s.sigma(0), 80.0);
        assert_eq!(s.sigma(17), 0.002);
        assert_eq!(s.sigma(18), 0.0);
    }

    #[test]
    fn two_steps() {
        assert_eq!(SigmaSchedule::new(2).unwrap().sigmas(), &[80.0, 0.002, 0.0]);
        assert_eq!(SigmaSchedule::new(1).unwrap().sigmas(), &[80.0, 0.0]);
    }

    #[test]
    fn strictly_decreasing() {
        let s = SigmaSchedule::new(50).unwrap();
        assert!(s.sigmas().windows(2).all(|w| w[0] > w[1]));
        s.validate().unwrap();
    }

    #[test]
    fn interior_matches_formula() {
        let s = SigmaSchedule::new(10).unwrap();
        let i = 4.0;
        let expected = (80f64.powf(1.0 / 7.0)
            + i / 9.0 * (0.002f64.powf(1.0 / 7.0) - 80f64.powf(1.0 / 7.0)))
        .powf(7.0);
        assert!((s.sigma(4) - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(SigmaSchedule::karras(10, 80.0, 0.002, 7.0).is_err());
        assert!(SigmaSchedule::karras(10, 1.0, 1.0, 7.0).is_err());
        assert!(SigmaSchedule::new(0).is_err());
    }
}
