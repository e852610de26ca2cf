//! Quadrotor kinematic model: thrust-vector acceleration with linear drag and
//! first-order roll/pitch response, plus its forward-Euler discretization.
//!
//! The same model serves as the controller's prediction model (coarse step)
//! and, at a finer step, as the plant truth model.

use nalgebra::{SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::scalar::Real;

/// State dimension: position (3), velocity (3), roll, pitch.
pub const STATE_DIM: usize = 8;
/// Input dimension: mass-normalized thrust, desired roll, desired pitch.
pub const INPUT_DIM: usize = 3;

pub type StateVector<T> = SVector<T, STATE_DIM>;
pub type InputVector<T> = SVector<T, INPUT_DIM>;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("thrust must be non-negative, got {0}")]
    NegativeThrust(f64),
    #[error("integration step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("rollout requires at least one input")]
    EmptyPlan,
    #[error("invalid model parameter: {0}")]
    InvalidParams(&'static str),
}

/// Wrap an angle into [-pi, pi]. Values already in range pass through
/// bit-exactly, so wrapping is idempotent.
pub fn wrap_angle<T: Real>(a: T) -> T {
    if a >= -T::pi() && a <= T::pi() {
        return a;
    }
    let two_pi = T::two_pi();
    let turns = (a + T::pi()) / two_pi;
    (turns - turns.floor()) * two_pi - T::pi()
}

/// World-frame vehicle state.
///
/// Angles are wrapped into [-pi, pi] at construction; every field is finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState<T: Real> {
    /// Position (m).
    pub p: Vector3<T>,
    /// Velocity (m/s).
    pub v: Vector3<T>,
    /// Roll (rad).
    pub phi: T,
    /// Pitch (rad).
    pub theta: T,
}

impl<T: Real> VehicleState<T> {
    pub fn new(p: Vector3<T>, v: Vector3<T>, phi: T, theta: T) -> Result<Self, DynamicsError> {
        if !(p.iter().all(|c| c.is_finite()) && v.iter().all(|c| c.is_finite())) {
            return Err(DynamicsError::NonFinite("position/velocity"));
        }
        if !(phi.is_finite() && theta.is_finite()) {
            return Err(DynamicsError::NonFinite("attitude"));
        }
        Ok(Self { p, v, phi: wrap_angle(phi), theta: wrap_angle(theta) })
    }

    /// State at the world origin, at rest, level.
    pub fn at_rest() -> Self {
        Self { p: Vector3::zeros(), v: Vector3::zeros(), phi: T::zero(), theta: T::zero() }
    }

    pub fn to_vector(&self) -> StateVector<T> {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.p);
        x.fixed_rows_mut::<3>(3).copy_from(&self.v);
        x[6] = self.phi;
        x[7] = self.theta;
        x
    }

    /// Rebuild from a packed vector without re-validating; callers guarantee
    /// the vector came from model arithmetic on valid states.
    pub(crate) fn from_vector_unchecked(x: &StateVector<T>) -> Self {
        Self {
            p: x.fixed_rows::<3>(0).into(),
            v: x.fixed_rows::<3>(3).into(),
            phi: x[6],
            theta: x[7],
        }
    }
}

/// Command accepted by the vehicle: total mass-normalized thrust plus desired
/// roll and pitch angles for the underlying attitude loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput<T: Real> {
    /// Mass-normalized thrust (m/s^2), non-negative.
    pub thrust: T,
    /// Desired roll (rad).
    pub phi_d: T,
    /// Desired pitch (rad).
    pub theta_d: T,
}

impl<T: Real> ControlInput<T> {
    pub fn new(thrust: T, phi_d: T, theta_d: T) -> Result<Self, DynamicsError> {
        if !(thrust.is_finite() && phi_d.is_finite() && theta_d.is_finite()) {
            return Err(DynamicsError::NonFinite("control input"));
        }
        if thrust < T::zero() {
            return Err(DynamicsError::NegativeThrust(thrust.as_f64()));
        }
        Ok(Self { thrust, phi_d, theta_d })
    }

    pub fn to_vector(&self) -> InputVector<T> {
        InputVector::from([self.thrust, self.phi_d, self.theta_d])
    }

    pub(crate) fn from_vector_unchecked(u: &InputVector<T>) -> Self {
        Self { thrust: u[0], phi_d: u[1], theta_d: u[2] }
    }
}

/// Physical constants of the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams<T: Real> {
    /// Gravity (m/s^2).
    pub gravity: T,
    /// Per-axis linear drag coefficients (1/s), applied to velocity.
    pub drag: Vector3<T>,
    /// Roll/pitch loop gains.
    pub k_phi: T,
    pub k_theta: T,
    /// Roll/pitch loop time constants (s).
    pub tau_phi: T,
    pub tau_theta: T,
}

impl<T: Real> ModelParams<T> {
    pub fn new(
        gravity: T,
        drag: Vector3<T>,
        k_phi: T,
        k_theta: T,
        tau_phi: T,
        tau_theta: T,
    ) -> Result<Self, DynamicsError> {
        if gravity <= T::zero() || !gravity.is_finite() {
            return Err(DynamicsError::InvalidParams("gravity must be positive"));
        }
        if drag.iter().any(|a| *a < T::zero() || !a.is_finite()) {
            return Err(DynamicsError::InvalidParams("drag must be non-negative"));
        }
        if k_phi <= T::zero() || k_theta <= T::zero() {
            return Err(DynamicsError::InvalidParams("attitude gains must be positive"));
        }
        if tau_phi <= T::zero() || tau_theta <= T::zero() {
            return Err(DynamicsError::InvalidParams("time constants must be positive"));
        }
        Ok(Self { gravity, drag, k_phi, k_theta, tau_phi, tau_theta })
    }
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self {
            gravity: T::of(9.81),
            drag: Vector3::from_element(T::of(0.1)),
            k_phi: T::one(),
            k_theta: T::one(),
            tau_phi: T::of(0.5),
            tau_theta: T::of(0.5),
        }
    }
}

/// Steady-state hover command: thrust cancels gravity, level attitude.
pub fn hover_input<T: Real>(params: &ModelParams<T>) -> ControlInput<T> {
    ControlInput { thrust: params.gravity, phi_d: T::zero(), theta_d: T::zero() }
}

/// World-frame acceleration of a body-z thrust vector under roll `phi` then
/// pitch `theta` (R_y(theta) * R_x(phi) applied to [0, 0, T]).
///
/// The result magnitude equals the thrust magnitude.
pub fn rotation_thrust<T: Real>(phi: T, theta: T, thrust: T) -> Result<Vector3<T>, DynamicsError> {
    if !(phi.is_finite() && theta.is_finite() && thrust.is_finite()) {
        return Err(DynamicsError::NonFinite("rotation_thrust input"));
    }
    if thrust < T::zero() {
        return Err(DynamicsError::NegativeThrust(thrust.as_f64()));
    }
    Ok(thrust_direction(phi, theta) * thrust)
}

/// Unit direction of the thrust vector, i.e. the third column of
/// R_y(theta) * R_x(phi).
fn thrust_direction<T: Real>(phi: T, theta: T) -> Vector3<T> {
    let (sp, cp) = (phi.sin(), phi.cos());
    let (st, ct) = (theta.sin(), theta.cos());
    Vector3::new(cp * st, -sp, cp * ct)
}

/// Continuous-time state derivative.
///
/// pdot = v; vdot = R(phi,theta)[0,0,T] - [0,0,g] - diag(drag) v;
/// attitude follows a first-order law toward the commanded angles.
pub fn derivative<T: Real>(
    x: &VehicleState<T>,
    u: &ControlInput<T>,
    params: &ModelParams<T>,
) -> StateVector<T> {
    derivative_vector(&x.to_vector(), &u.to_vector(), params)
}

/// Derivative on packed vectors; shared by the public API and the optimizer
/// hot path so there is exactly one model implementation.
pub(crate) fn derivative_vector<T: Real>(
    x: &StateVector<T>,
    u: &InputVector<T>,
    params: &ModelParams<T>,
) -> StateVector<T> {
    let v = x.fixed_rows::<3>(3);
    let accel = thrust_direction(x[6], x[7]) * u[0];
    let mut dx = StateVector::zeros();
    dx[0] = v[0];
    dx[1] = v[1];
    dx[2] = v[2];
    dx[3] = accel[0] - params.drag[0] * v[0];
    dx[4] = accel[1] - params.drag[1] * v[1];
    dx[5] = accel[2] - params.gravity - params.drag[2] * v[2];
    dx[6] = (params.k_phi * u[1] - x[6]) / params.tau_phi;
    dx[7] = (params.k_theta * u[2] - x[7]) / params.tau_theta;
    dx
}

/// One forward-Euler step of `dt` seconds; angles re-wrapped.
pub fn euler_step<T: Real>(
    x: &VehicleState<T>,
    u: &ControlInput<T>,
    params: &ModelParams<T>,
    dt: T,
) -> Result<VehicleState<T>, DynamicsError> {
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(DynamicsError::InvalidStep(dt.as_f64()));
    }
    let next = step_vector(&x.to_vector(), &u.to_vector(), params, dt);
    VehicleState::new(
        next.fixed_rows::<3>(0).into(),
        next.fixed_rows::<3>(3).into(),
        next[6],
        next[7],
    )
}

pub(crate) fn step_vector<T: Real>(
    x: &StateVector<T>,
    u: &InputVector<T>,
    params: &ModelParams<T>,
    dt: T,
) -> StateVector<T> {
    let mut next = x + derivative_vector(x, u, params) * dt;
    next[6] = wrap_angle(next[6]);
    next[7] = wrap_angle(next[7]);
    next
}

/// Forward simulation: state `j` of the result is `euler_step` applied `j+1`
/// times from `x0` using `inputs[0..=j]`. Deterministic.
pub fn rollout<T: Real>(
    x0: &VehicleState<T>,
    inputs: &[ControlInput<T>],
    params: &ModelParams<T>,
    dt: T,
) -> Result<Vec<VehicleState<T>>, DynamicsError> {
    if inputs.is_empty() {
        return Err(DynamicsError::EmptyPlan);
    }
    let mut states = Vec::with_capacity(inputs.len());
    let mut x = *x0;
    for u in inputs {
        x = euler_step(&x, u, params, dt)?;
        states.push(x);
    }
    Ok(states)
}

/// Discrete Jacobians of one Euler step: `A = d step/d x`, `B = d step/d u`,
/// both evaluated at `(x, u)`.
pub(crate) fn step_jacobians<T: Real>(
    x: &StateVector<T>,
    u: &InputVector<T>,
    params: &ModelParams<T>,
    dt: T,
) -> (SMatrix<T, STATE_DIM, STATE_DIM>, SMatrix<T, STATE_DIM, INPUT_DIM>) {
    let (sp, cp) = (x[6].sin(), x[6].cos());
    let (st, ct) = (x[7].sin(), x[7].cos());
    let thrust = u[0];

    let mut a = SMatrix::<T, STATE_DIM, STATE_DIM>::identity();
    // position <- velocity
    a[(0, 3)] = dt;
    a[(1, 4)] = dt;
    a[(2, 5)] = dt;
    // velocity drag
    a[(3, 3)] += -dt * params.drag[0];
    a[(4, 4)] += -dt * params.drag[1];
    a[(5, 5)] += -dt * params.drag[2];
    // velocity <- attitude, through the thrust direction
    a[(3, 6)] = dt * (-sp * st * thrust);
    a[(4, 6)] = dt * (-cp * thrust);
    a[(5, 6)] = dt * (-sp * ct * thrust);
    a[(3, 7)] = dt * (cp * ct * thrust);
    a[(5, 7)] = dt * (-cp * st * thrust);
    // attitude decay
    a[(6, 6)] += -dt / params.tau_phi;
    a[(7, 7)] += -dt / params.tau_theta;

    let mut b = SMatrix::<T, STATE_DIM, INPUT_DIM>::zeros();
    b[(3, 0)] = dt * (cp * st);
    b[(4, 0)] = dt * (-sp);
    b[(5, 0)] = dt * (cp * ct);
    b[(6, 1)] = dt * params.k_phi / params.tau_phi;
    b[(7, 2)] = dt * params.k_theta / params.tau_theta;

    (a, b)
}
