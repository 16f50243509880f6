//! Discretized transport trajectories with rest-to-rest boundary conditions.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Default axial trap frequency, 2*pi*230 kHz.
pub const DEFAULT_AXIAL_FREQUENCY: f64 = 2.0 * std::f64::consts::PI * 230e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportProfile {
    /// Quintic minimum-jerk profile `s = dx (10 t^3 - 15 t^4 + 6 t^5)`.
    Poly5,
    /// Cycloidal profile `s = dx (t - sin(2 pi t) / (2 pi))`.
    Sine,
}

impl TransportProfile {
    /// Normalized displacement at normalized time `tau` in [0, 1].
    pub fn shape(&self, tau: f64) -> f64 {
        match self {
            TransportProfile::Poly5 => {
                let t3 = tau * tau * tau;
                t3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)
            }
            TransportProfile::Sine => {
                tau - (2.0 * std::f64::consts::PI * tau).sin() / (2.0 * std::f64::consts::PI)
            }
        }
    }

    /// d shape / d tau.
    pub fn shape_rate(&self, tau: f64) -> f64 {
        match self {
            TransportProfile::Poly5 => {
                let t2 = tau * tau;
                30.0 * t2 * (1.0 - tau) * (1.0 - tau)
            }
            TransportProfile::Sine => 1.0 - (2.0 * std::f64::consts::PI * tau).cos(),
        }
    }
}

/// Time-discretized transport A -> B along the trap axis.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// Signed transport distance in m.
    pub distance: f64,
    /// Total duration in s.
    pub duration: f64,
    /// Sample period in s.
    pub dt: f64,
    /// Step count L; positions has L+1 samples.
    pub steps: usize,
    pub positions: Vec<Vector3<f64>>,
    /// Target axial angular frequency in rad/s.
    pub axial_frequency: f64,
    pub profile: TransportProfile,
}

impl TransportPlan {
    pub fn start(&self) -> Vector3<f64> {
        self.positions[0]
    }

    pub fn end(&self) -> Vector3<f64> {
        self.positions[self.steps]
    }

    /// Shift every sample so the transport starts at `origin`.
    pub fn with_start(mut self, origin: Vector3<f64>) -> Self {
        let shift = origin - self.positions[0];
        for p in &mut self.positions {
            *p += shift;
        }
        self
    }

    pub fn with_axial_frequency(mut self, omega_x: f64) -> Self {
        self.axial_frequency = omega_x;
        self
    }
}

/// Generate the discretized trajectory `r_i = r(i dt)` for a transport of
/// `distance` in `duration`, starting at the origin and moving along x.
///
/// Both profiles have zero velocity and acceleration at the endpoints.
pub fn generate_trajectory(
    distance: f64,
    duration: f64,
    dt: f64,
    profile: TransportProfile,
) -> Result<TransportPlan> {
    if distance == 0.0 && duration == 0.0 {
        return Err(invalid("degenerate transport: zero distance and duration"));
    }
    if !(duration > 0.0) || !(dt > 0.0) {
        return Err(invalid("duration and dt must be positive"));
    }
    let ratio = duration / dt;
    let steps = ratio.round() as usize;
    if steps == 0 || (ratio - steps as f64).abs() > 1e-9 * ratio.max(1.0) {
        return Err(invalid(format!(
            "duration {duration} s is not an integer multiple of dt {dt} s"
        )));
    }
    let positions = (0..=steps)
        .map(|i| {
            let tau = i as f64 / steps as f64;
            Vector3::new(distance * profile.shape(tau), 0.0, 0.0)
        })
        .collect();
    Ok(TransportPlan {
        distance,
        duration,
        dt,
        steps,
        positions,
        axial_frequency: DEFAULT_AXIAL_FREQUENCY,
        profile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn paper_parameters_give_160_steps() {
        let p = generate_trajectory(280e-6, 12.8e-6, 80e-9, TransportProfile::Poly5).unwrap();
        assert_eq!(p.steps, 160);
        assert_eq!(p.positions.len(), 161);
        assert_relative_eq!(p.positions[160].x, 280e-6, max_relative = 1e-12);
        assert_eq!(p.positions[0].x, 0.0);
    }

    #[test]
    fn non_integral_duration_rejected() {
        assert!(generate_trajectory(280e-6, 12.81e-6, 80e-9, TransportProfile::Poly5).is_err());
    }

    #[test]
    fn midpoint_symmetry_for_both_profiles() {
        for prof in [TransportProfile::Poly5, TransportProfile::Sine] {
            let p = generate_trajectory(280e-6, 12.8e-6, 80e-9, prof).unwrap();
            assert_relative_eq!(p.positions[80].x, 140e-6, max_relative = 1e-12);
        }
    }

    #[test]
    fn quintic_peak_velocity_is_1p875_dx_over_t() {
        // Analytic extremum of the quintic: max |ds/dt| = 1.875 dx / T at
        // tau = 1/2. At the paper parameters that is 41.015625 m/s.
        let p = generate_trajectory(280e-6, 12.8e-6, 80e-9, TransportProfile::Poly5).unwrap();
        let vmax_numeric = (0..p.steps)
            .map(|i| (p.positions[i + 1].x - p.positions[i].x) / p.dt)
            .fold(0.0f64, f64::max);
        let vmax_analytic = 1.875 * 280e-6 / 12.8e-6;
        assert_relative_eq!(vmax_analytic, 41.015625, max_relative = 1e-12);
        // Finite differencing samples the speed slightly off the extremum.
        assert_relative_eq!(vmax_numeric, vmax_analytic, max_relative = 1e-3);
    }

    #[test]
    fn monotone_with_rest_to_rest_endpoints() {
        for prof in [TransportProfile::Poly5, TransportProfile::Sine] {
            let p = generate_trajectory(280e-6, 12.8e-6, 80e-9, prof).unwrap();
            for i in 0..p.steps {
                assert!(p.positions[i + 1].x >= p.positions[i].x);
            }
            // Endpoint velocity and acceleration vanish exactly.
            for tau in [0.0, 1.0] {
                assert_eq!(prof.shape_rate(tau), 0.0);
                let h = 1e-6;
                let acc = (prof.shape_rate(tau + h).min(prof.shape_rate((tau + h).min(1.0)))
                    - prof.shape_rate((tau - h).max(0.0)))
                    / (2.0 * h);
                assert!(acc.abs() < 1e-4, "endpoint acceleration ~ 0, got {acc}");
            }
        }
    }

    #[test]
    fn with_start_shifts_all_samples() {
        let p = generate_trajectory(280e-6, 12.8e-6, 80e-9, TransportProfile::Poly5)
            .unwrap()
            .with_start(Vector3::new(840e-6, 0.0, 0.0));
        assert_relative_eq!(p.positions[0].x, 840e-6);
        assert_relative_eq!(p.positions[160].x, 1120e-6, max_relative = 1e-12);
    }
}
