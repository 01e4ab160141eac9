//! Variance-preserving noise schedule with an affine rate `beta(t) = g(t)^2`.
//!
//! Forward process: `dX = -g(t)^2/2 X dt + g(t) dW` on forward time `t in [0, T]`.
//! Samplers run on the generative clock `t_gen = T - t`; every reverse-time
//! coefficient here is the forward coefficient read at `T - t_gen`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::quadrature::{integrate, QuadOptions};

/// Relative slack allowed on the time-domain check to absorb grid rounding.
const DOMAIN_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub beta0: f64,
    pub beta1: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
}

/// Closed-form coefficients at one forward time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub g: f64,
    pub mean_scale: f64,
    pub varpi: f64,
}

impl ScheduleParams {
    pub fn new(beta0: f64, beta1: f64, t_end: f64) -> Result<Self> {
        let p = Self {
            beta0,
            beta1,
            t_end,
        };
        p.validate()?;
        Ok(p)
    }

    /// `g == 1` on `[0, t_end]`.
    pub fn unit(t_end: f64) -> Result<Self> {
        Self::new(1.0, 1.0, t_end)
    }

    /// The common image-model schedule `g(t) = sqrt(0.1 (1 - t) + 20 t)` on `[0, 1]`.
    pub fn standard_vp() -> Self {
        Self {
            beta0: 0.1,
            beta1: 20.0,
            t_end: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta0.is_finite() && self.beta0 > 0.0) {
            return Err(invalid("beta0", format!("must be > 0, got {}", self.beta0)));
        }
        if !(self.beta1.is_finite() && self.beta1 >= self.beta0) {
            return Err(invalid(
                "beta1",
                format!("must be >= beta0 = {}, got {}", self.beta0, self.beta1),
            ));
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(invalid("T", format!("must be > 0, got {}", self.t_end)));
        }
        Ok(())
    }

    pub fn is_unit(&self) -> bool {
        self.beta0 == 1.0 && self.beta1 == 1.0
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        let slack = DOMAIN_SLACK * self.t_end;
        if !(t >= -slack && t <= self.t_end + slack) {
            return Err(LabError::TimeOutOfDomain {
                t,
                t_end: self.t_end,
            });
        }
        Ok(t.clamp(0.0, self.t_end))
    }

    /// `beta(t) = beta0 + (beta1 - beta0) t`, unchecked.
    #[inline]
    pub fn beta_at(&self, t: f64) -> f64 {
        self.beta0 + (self.beta1 - self.beta0) * t
    }

    /// `int_0^t beta(s) ds`, unchecked.
    #[inline]
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t
    }

    /// All closed-form coefficients at forward time `t`, unchecked.
    #[inline]
    pub fn coefficients(&self, t: f64) -> Coefficients {
        let b = self.integrated_beta(t);
        Coefficients {
            g: self.beta_at(t).sqrt(),
            mean_scale: (-0.5 * b).exp(),
            varpi: (-(-b).exp_m1()).sqrt(),
        }
    }

    /// Diffusion coefficient at forward time `t`.
    pub fn g(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.beta_at(t).sqrt())
    }

    /// Conditional standard deviation of `X_t` given `X_0`.
    pub fn varpi(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.coefficients(t).varpi)
    }

    /// Mean contraction `E[X_t | X_0] = mean_scale(t) X_0`.
    pub fn mean_scale(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.coefficients(t).mean_scale)
    }

    /// Reverse-time diffusion coefficient `g(T - t_gen)`, unchecked.
    #[inline]
    pub fn g_rev(&self, t_gen: f64) -> f64 {
        self.beta_at(self.t_end - t_gen).sqrt()
    }

    /// Forward time corresponding to a generative-clock time. Involution.
    #[inline]
    pub fn flip(&self, t: f64) -> f64 {
        self.t_end - t
    }
}

/// Reverse drift `-f(x) + (g^2 + h^2)/2 * score` at generative time `t_gen`,
/// where `f(x) = -g^2/2 x` is read at forward time `T - t_gen`.
pub fn reverse_drift(
    params: &ScheduleParams,
    score_value: &[f64],
    x: &[f64],
    t_gen: f64,
    h: f64,
) -> Result<Vec<f64>> {
    if score_value.len() != x.len() {
        return Err(LabError::DimensionMismatch {
            expected: x.len(),
            got: score_value.len(),
        });
    }
    let g = params.g(params.t_end - t_gen)?;
    let g2 = g * g;
    let c = 0.5 * (g2 + h * h);
    Ok(x
        .iter()
        .zip(score_value)
        .map(|(&xi, &si)| 0.5 * g2 * xi + c * si)
        .collect())
}

/// How the generative diffusion coefficient `h` is specified.
///
/// Both variants evaluate to `h(t_gen) = value * g(T - t_gen)` on the original
/// clock: a constant `h` in the unit-`g` rescaled clock is exactly the
/// proportional profile in original time. They are kept distinct so configs
/// record which convention the experimenter meant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "h_mode", content = "h_value", rename_all = "snake_case")]
pub enum HProfile {
    AlphaOfG(f64),
    ConstUnitTime(f64),
}

impl HProfile {
    pub fn value(&self) -> f64 {
        match *self {
            HProfile::AlphaOfG(a) | HProfile::ConstUnitTime(a) => a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.value();
        if !(v.is_finite() && v >= 0.0) {
            return Err(invalid("h_value", format!("must be >= 0, got {v}")));
        }
        Ok(())
    }

    /// `h` at generative time `t_gen`, unchecked.
    #[inline]
    pub fn h_at(&self, params: &ScheduleParams, t_gen: f64) -> f64 {
        self.value() * params.g_rev(t_gen)
    }
}

/// Result of mapping a general-`g` schedule to unit-`g` time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitTimeRescaling {
    pub params: ScheduleParams,
    /// Unit-time duration `theta = int_0^T g(u)^2 du`.
    pub theta: f64,
    /// Constant `h` to use on the unit clock.
    pub unit_h: f64,
}

impl UnitTimeRescaling {
    /// Original forward time reached after unit time `u` (`tau(u)`).
    pub fn tau(&self, u: f64) -> f64 {
        let p = &self.params;
        let slope = p.beta1 - p.beta0;
        if slope.abs() < 1e-14 * p.beta0 {
            return u / p.beta0;
        }
        // Solve beta0 tau + slope tau^2 / 2 = u, stable root.
        let disc = p.beta0 * p.beta0 + 2.0 * slope * u;
        2.0 * u / (p.beta0 + disc.sqrt())
    }

    /// Inverse of [`Self::tau`]: unit time corresponding to forward time `t`.
    pub fn tau_inv(&self, t: f64) -> f64 {
        self.params.integrated_beta(t)
    }

    /// Original-clock `h` at generative time `s` induced by the constant unit-time `h`.
    pub fn h_original(&self, s: f64) -> f64 {
        self.unit_h * self.params.g_rev(s)
    }

    /// Unit schedule on `[0, theta]` matching this rescaling.
    pub fn unit_params(&self) -> ScheduleParams {
        ScheduleParams {
            beta0: 1.0,
            beta1: 1.0,
            t_end: self.theta,
        }
    }
}

/// Map the schedule to unit-`g` time.
///
/// `theta` is obtained by quadrature of `g^2`, i.e. integrating the ODE
/// `tau' = g(tau)^-2` to `T`.
pub fn rescale_to_unit_g(params: &ScheduleParams, h: &HProfile) -> Result<UnitTimeRescaling> {
    // beta is affine, so positivity at the endpoints is positivity everywhere.
    for t in [0.0, params.t_end] {
        if !(params.beta_at(t) > 0.0) {
            return Err(LabError::SingularSchedule { t });
        }
    }
    params.validate()?;
    h.validate()?;
    let q = integrate(
        |u| params.beta_at(u),
        0.0,
        params.t_end,
        &[],
        QuadOptions::new(1e-13, 1e-13),
    )?;
    Ok(UnitTimeRescaling {
        params: *params,
        theta: q.value,
        unit_h: h.value(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vp() -> ScheduleParams {
        ScheduleParams::new(0.1, 20.0, 1.0).unwrap()
    }

    #[test]
    fn g_examples() {
        let unit = ScheduleParams::unit(1.0).unwrap();
        assert_eq!(unit.g(0.7).unwrap(), 1.0);
        assert!((vp().g(0.0).unwrap() - 0.1f64.sqrt()).abs() < 1e-15);
        assert!((vp().g(1.0).unwrap() - 20f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(
            vp().g(1.5),
            Err(LabError::TimeOutOfDomain { .. })
        ));
        assert!(vp().varpi(-0.1).is_err());
        assert!(vp().mean_scale(f64::NAN).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(ScheduleParams::new(0.0, 1.0, 1.0).is_err());
        assert!(ScheduleParams::new(2.0, 1.0, 1.0).is_err());
        assert!(ScheduleParams::new(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn varpi_examples() {
        let unit = ScheduleParams::unit(10.0).unwrap();
        assert_eq!(unit.varpi(0.0).unwrap(), 0.0);
        assert!((unit.varpi(4f64.ln()).unwrap() - 0.75f64.sqrt()).abs() < 1e-15);
        let long = ScheduleParams::new(0.1, 20.0, 10.0).unwrap();
        assert!((long.varpi(10.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_scale_examples() {
        let unit = ScheduleParams::unit(2.0).unwrap();
        assert_eq!(unit.mean_scale(0.0).unwrap(), 1.0);
        assert!((unit.mean_scale(2.0).unwrap() - (-1f64).exp()).abs() < 1e-15);
        for t in [0.1, 0.5, 1.0] {
            let c = vp().coefficients(t);
            assert!((c.mean_scale.powi(2) + c.varpi.powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_drift_examples() {
        let unit = ScheduleParams::unit(1.0).unwrap();
        let x = [0.8, -1.5];
        let s: Vec<f64> = x.iter().map(|v| -v).collect();
        let d = reverse_drift(&unit, &s, &x, 0.3, 1.0).unwrap();
        for (di, xi) in d.iter().zip(x) {
            assert!((di + 0.5 * xi).abs() < 1e-15);
        }
        // probability-flow specialization
        let p = vp();
        let s = [0.3];
        let d = reverse_drift(&p, &s, &[2.0], 0.25, 0.0).unwrap();
        let g2 = p.beta_at(0.75);
        assert!((d[0] - (0.5 * g2 * 2.0 + 0.5 * g2 * 0.3)).abs() < 1e-14);
    }

    #[test]
    fn rescaling_examples() {
        let unit = ScheduleParams::unit(2.0).unwrap();
        let r = rescale_to_unit_g(&unit, &HProfile::ConstUnitTime(1.3)).unwrap();
        assert!((r.theta - 2.0).abs() < 1e-13);
        assert!((r.tau(0.7) - 0.7).abs() < 1e-15);
        assert!((r.h_original(0.4) - 1.3).abs() < 1e-15);

        let r = rescale_to_unit_g(&vp(), &HProfile::ConstUnitTime(2.0)).unwrap();
        assert!((r.theta - 10.05).abs() < 1e-10);
        for s in [0.0, 0.3, 0.9] {
            assert!((r.h_original(s) - 2.0 * vp().g_rev(s)).abs() < 1e-14);
        }
        for u in [0.0, 0.5, 3.0, 10.05] {
            assert!((r.tau_inv(r.tau(u)) - u).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_schedule_rejected() {
        let bad = ScheduleParams {
            beta0: 0.0,
            beta1: 1.0,
            t_end: 1.0,
        };
        assert!(matches!(
            rescale_to_unit_g(&bad, &HProfile::AlphaOfG(1.0)),
            Err(LabError::SingularSchedule { .. })
        ));
    }
}
