//! Lateral path-tracking benchmark: kinematic bicycle linearized around a
//! speed and road-curvature schedule, with state `x = [δ, e_ψ, e_y]` (steering
//! angle, heading error, lateral error) and input the steering rate.

use std::f64::consts::FRAC_PI_4;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Mat, Vector};
use crate::polytope::Polytope;
use crate::sim::Scenario;
use crate::sysmodel::{ChanceSpec, ModelError, ParameterHull, StageCost, SystemRealization};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub lf: f64,
    pub lr: f64,
    pub dt: f64,
    pub theta_delta: f64,
    pub theta_psi: f64,
    pub theta_y: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self { lf: 2.4, lr: 2.4, dt: 0.1, theta_delta: 0.1, theta_psi: 0.1, theta_y: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64) -> bool {
        self.min <= x && x <= self.max
    }
}

pub const NU_BOUNDS: Bounds = Bounds { min: 1.0, max: 20.0 };
pub const RHO_BOUNDS: Bounds = Bounds { min: -0.025, max: 0.025 };

/// Speed and curvature per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceProfile {
    pub nu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl ReferenceProfile {
    /// Speed ramp 5 → 15 m/s with a curvature pulse of +0.02 then −0.02 over
    /// the second and third quarters of the run.
    pub fn default_profile(steps: usize) -> Self {
        let nu = (0..steps)
            .map(|k| if steps > 1 { 5.0 + 10.0 * k as f64 / (steps - 1) as f64 } else { 5.0 })
            .collect();
        let rho = (0..steps)
            .map(|k| {
                let q = 4 * k / steps.max(1);
                match q {
                    1 => 0.02,
                    2 => -0.02,
                    _ => 0.0,
                }
            })
            .collect();
        Self { nu, rho }
    }

    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }

    fn mean(&self) -> (f64, f64) {
        let n = self.len().max(1) as f64;
        (self.nu.iter().sum::<f64>() / n, self.rho.iter().sum::<f64>() / n)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VehicleError {
    #[error("profile step {step}: {what} = {value} outside [{min}, {max}]")]
    OutOfBounds { step: usize, what: &'static str, value: f64, min: f64, max: f64 },
    #[error("profile speed and curvature lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("profile must contain at least one step")]
    EmptyProfile,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn linearize(params: &VehicleParams, nu: f64, rho: f64) -> SystemRealization {
    let VehicleParams { lf, lr, dt, .. } = *params;
    let wheelbase = lf + lr;
    let a = Mat::from_row_slice(
        3,
        3,
        &[1.0, 0.0, 0.0, nu * dt / wheelbase, 1.0, 0.0, lr * nu * dt / wheelbase, nu * dt, 1.0],
    );
    let b = Mat::from_column_slice(3, 1, &[dt, lr * dt / wheelbase, 0.0]);
    let d = Mat::from_diagonal(&Vector::from_vec(vec![
        params.theta_delta * dt,
        params.theta_psi * dt,
        params.theta_y * dt,
    ]));
    let r = Vector::from_vec(vec![0.0, -rho * nu * dt, 0.0]);
    SystemRealization::new(a, b, d, r).expect("vehicle blocks have consistent shapes")
}

/// Four-vertex hull over the corner `(ν, ρ)` pairs.
pub fn build_hull(params: &VehicleParams, nu: Bounds, rho: Bounds) -> ParameterHull {
    let vertices = [(nu.min, rho.min), (nu.min, rho.max), (nu.max, rho.min), (nu.max, rho.max)]
        .iter()
        .map(|&(n, r)| linearize(params, n, r))
        .collect();
    ParameterHull::new(vertices).expect("vertices share shapes")
}

/// Constraint and cost settings of the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleSetup {
    pub params: VehicleParams,
    pub nu_bounds: Bounds,
    pub rho_bounds: Bounds,
    pub horizon: usize,
    pub p_state: f64,
    pub p_control: f64,
    pub lateral_limit: f64,
    pub angle_limit: f64,
    pub input_limit: f64,
    pub state_weight: f64,
    pub input_weight: f64,
}

impl Default for VehicleSetup {
    fn default() -> Self {
        Self {
            params: VehicleParams::default(),
            nu_bounds: NU_BOUNDS,
            rho_bounds: RHO_BOUNDS,
            horizon: 4,
            p_state: 0.025,
            p_control: 0.05,
            lateral_limit: 2.0,
            angle_limit: FRAC_PI_4,
            input_limit: 1.0,
            state_weight: 1.0,
            input_weight: 100.0,
        }
    }
}

/// Assembles the closed-loop scenario for a reference profile.
///
/// The schedule is extended past the end of the profile by holding its last
/// entry so every window has `horizon` stages.
pub fn build_scenario(setup: &VehicleSetup, profile: &ReferenceProfile) -> Result<Scenario, VehicleError> {
    if profile.nu.len() != profile.rho.len() {
        return Err(VehicleError::Length(profile.nu.len(), profile.rho.len()));
    }
    if profile.is_empty() {
        return Err(VehicleError::EmptyProfile);
    }
    for (k, (&n, &r)) in profile.nu.iter().zip(&profile.rho).enumerate() {
        let b = setup.nu_bounds;
        if !b.contains(n) {
            return Err(VehicleError::OutOfBounds { step: k, what: "speed", value: n, min: b.min, max: b.max });
        }
        let b = setup.rho_bounds;
        if !b.contains(r) {
            return Err(VehicleError::OutOfBounds { step: k, what: "curvature", value: r, min: b.min, max: b.max });
        }
    }
    let steps = profile.len();
    let schedule = (0..steps + setup.horizon)
        .map(|k| {
            let k = k.min(steps - 1);
            linearize(&setup.params, profile.nu[k], profile.rho[k])
        })
        .collect();
    let (nu_mean, rho_mean) = profile.mean();

    let (a, l) = (setup.angle_limit, setup.lateral_limit);
    let state = Polytope::boxed(&[-a, -a, -l], &[a, a, l]);
    let control = Polytope::boxed(&[-setup.input_limit], &[setup.input_limit]);
    let spec = ChanceSpec::from_polytopes(
        &state,
        &vec![setup.p_state; state.num_rows()],
        &control,
        &vec![setup.p_control; control.num_rows()],
    )?;
    let cost = StageCost::new(
        Mat::identity(3, 3) * setup.state_weight,
        Mat::from_element(1, 1, setup.input_weight),
        Vector::zeros(3),
    )?;
    Ok(Scenario {
        hull: build_hull(&setup.params, setup.nu_bounds, setup.rho_bounds),
        nominal: linearize(&setup.params, nu_mean, rho_mean),
        schedule,
        spec,
        cost,
        horizon: setup.horizon,
        steps,
        x0: Vector::zeros(3),
    })
}
