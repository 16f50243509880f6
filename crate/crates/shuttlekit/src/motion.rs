//! Classical ion dynamics under a time-dependent voltage ramp, for auditing
//! transport-induced heating.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::synth::{find_minimum, VerifyOptions};
use crate::trap::TrapModel;

/// Reduced Planck constant in J s.
pub const HBAR: f64 = 1.054_571_817e-34;

#[derive(Debug, Clone, Copy)]
pub struct MotionState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub time: f64,
}

impl MotionState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        MotionState {
            position,
            velocity: Vector3::zeros(),
            time: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MotionTrace {
    pub final_state: MotionState,
    /// Total energy above the final potential minimum, in J.
    pub final_secular_energy: f64,
    /// The same in units of the quantum at `omega_ref`.
    pub final_quanta: f64,
    /// One sampled state per ramp step (start of step).
    pub sampled: Vec<MotionState>,
}

/// Integrate `m r'' = -q grad Phi(r, t)` over a voltage sequence sampled at
/// `dt`, with voltages piecewise-linearly interpolated between samples and a
/// fixed-step 4th-order Runge-Kutta scheme (`substeps` per sample).
///
/// The final secular energy is measured relative to the potential minimum of
/// the last voltage sample, found by Newton descent from the final position.
pub fn integrate_motion(
    voltages: &[Vec<f64>],
    dt: f64,
    model: &TrapModel,
    init: MotionState,
    substeps: usize,
    omega_ref: f64,
) -> Result<MotionTrace> {
    if voltages.len() < 2 {
        return Err(crate::error::invalid("need at least two voltage samples"));
    }
    if substeps == 0 {
        return Err(crate::error::invalid("substeps must be at least 1"));
    }
    let n = model.n_electrodes();
    let q = model.ion_charge;
    let m = model.ion_mass;
    let h = dt / substeps as f64;

    let mut state = init;
    let mut sampled = Vec::with_capacity(voltages.len());
    let mut volts = vec![0.0; n];

    for w in 0..voltages.len() - 1 {
        sampled.push(state);
        let (row0, row1) = (&voltages[w], &voltages[w + 1]);
        for s in 0..substeps {
            // Classical RK4 on (r, v); voltages evaluated at the substage
            // times within the linear interpolation window.
            let accel = |r: &Vector3<f64>, tau: f64, volts: &mut Vec<f64>| -> Result<Vector3<f64>> {
                for j in 0..n {
                    volts[j] = row0[j] + tau * (row1[j] - row0[j]);
                }
                let p = model.probe(volts, r).map_err(|e| match e {
                    Error::OutOfBounds(x, y, z) => Error::IonEscaped {
                        time: state.time,
                        x,
                        y,
                        z,
                    },
                    other => other,
                })?;
                Ok(-(q / m) * p.gradient)
            };
            let t0 = s as f64 / substeps as f64;
            let t_half = (s as f64 + 0.5) / substeps as f64;
            let t1 = (s as f64 + 1.0) / substeps as f64;

            let (r, v) = (state.position, state.velocity);
            let a1 = accel(&r, t0, &mut volts)?;
            let r2 = r + 0.5 * h * v;
            let a2 = accel(&r2, t_half, &mut volts)?;
            let v2 = v + 0.5 * h * a1;
            let r3 = r + 0.5 * h * v2;
            let a3 = accel(&r3, t_half, &mut volts)?;
            let v3 = v + 0.5 * h * a2;
            let r4 = r + h * v3;
            let a4 = accel(&r4, t1, &mut volts)?;
            let v4 = v + h * a3;

            state.position = r + h / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4);
            state.velocity = v + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            state.time += h;
        }
    }
    sampled.push(state);

    let last = voltages.last().unwrap();
    let options = VerifyOptions::default();
    let r_min = find_minimum(model, last, &state.position, &options)
        .or_else(|| find_minimum(model, last, &init.position, &options))
        .ok_or_else(|| Error::NonConvergence("final potential minimum not found".into()))?;
    let phi_min = model.probe(last, &r_min)?.value;
    let phi = model.probe(last, &state.position)?.value;
    let energy = 0.5 * m * state.velocity.norm_squared() + q * (phi - phi_min);

    Ok(MotionTrace {
        final_state: state,
        final_secular_energy: energy,
        final_quanta: energy / (HBAR * omega_ref),
        sampled,
    })
}
