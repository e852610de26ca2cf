//! Receding-horizon input optimizer.
//!
//! Minimizes a quadratic tracking cost (state error, input error against the
//! hover input, and input-rate smoothness) over an N-step forward-Euler
//! prediction, by projected gradient descent on the input plan with Armijo
//! backtracking. Gradients come from a reverse sensitivity sweep through the
//! rollout, so one gradient costs about two rollouts.

use std::time::Instant;

use nalgebra::SMatrix;
use thiserror::Error;

use crate::dynamics::{
    self, step_jacobians, step_vector, ControlInput, DynamicsError, InputVector, ModelParams,
    StateVector, VehicleState, INPUT_DIM, STATE_DIM,
};
use crate::scalar::Real;

pub type StateWeight<T> = SMatrix<T, STATE_DIM, STATE_DIM>;
pub type InputWeight<T> = SMatrix<T, INPUT_DIM, INPUT_DIM>;

#[derive(Debug, Error, PartialEq)]
pub enum MpcError {
    #[error("{0} weight matrix is not symmetric")]
    NotSymmetric(&'static str),
    #[error("{0} weight matrix is not positive semidefinite (min eigenvalue {1})")]
    NotPsd(&'static str, f64),
    #[error("invalid input bounds: {0}")]
    InvalidBounds(&'static str),
    #[error("invalid solver config: {0}")]
    InvalidConfig(&'static str),
    #[error("plan length {got} does not match horizon {expected}")]
    PlanLength { expected: usize, got: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Quadratic cost weights. Validated symmetric positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcWeights<T: Real> {
    q_x: StateWeight<T>,
    q_u: InputWeight<T>,
    q_du: InputWeight<T>,
}

fn check_spsd<T: Real, const N: usize>(
    m: &SMatrix<T, N, N>,
    name: &'static str,
) -> Result<(), MpcError> {
    let scale = m.iter().fold(T::one(), |acc, v| acc.max(v.abs()));
    let sym_tol = T::of(1e-12).max(T::default_epsilon() * T::of(100.0) * scale);
    for i in 0..N {
        for j in (i + 1)..N {
            if (m[(i, j)] - m[(j, i)]).abs() > sym_tol {
                return Err(MpcError::NotSymmetric(name));
            }
        }
    }
    let eig_tol = T::default_epsilon() * T::of(64.0) * scale;
    let dynamic = nalgebra::DMatrix::from_fn(N, N, |i, j| m[(i, j)]);
    let eigenvalues = dynamic.symmetric_eigen().eigenvalues;
    if let Some(min) = eigenvalues.iter().cloned().reduce(|a, b| a.min(b)) {
        if min < -eig_tol {
            return Err(MpcError::NotPsd(name, min.as_f64()));
        }
    }
    Ok(())
}

impl<T: Real> MpcWeights<T> {
    pub fn new(
        q_x: StateWeight<T>,
        q_u: InputWeight<T>,
        q_du: InputWeight<T>,
    ) -> Result<Self, MpcError> {
        check_spsd(&q_x, "state")?;
        check_spsd(&q_u, "input")?;
        check_spsd(&q_du, "input-rate")?;
        Ok(Self { q_x, q_u, q_du })
    }

    /// Diagonal weights from per-component entries.
    pub fn diagonal(
        q_x: [T; STATE_DIM],
        q_u: [T; INPUT_DIM],
        q_du: [T; INPUT_DIM],
    ) -> Result<Self, MpcError> {
        Self::new(
            StateWeight::from_diagonal(&q_x.into()),
            InputWeight::from_diagonal(&q_u.into()),
            InputWeight::from_diagonal(&q_du.into()),
        )
    }

    pub fn q_x(&self) -> &StateWeight<T> {
        &self.q_x
    }
    pub fn q_u(&self) -> &InputWeight<T> {
        &self.q_u
    }
    pub fn q_du(&self) -> &InputWeight<T> {
        &self.q_du
    }
}

impl<T: Real> Default for MpcWeights<T> {
    fn default() -> Self {
        let o = T::one();
        Self::diagonal(
            [T::of(10.0), T::of(10.0), T::of(10.0), o, o, o, T::of(2.0), T::of(2.0)],
            [o, o, o],
            [T::of(5.0), T::of(5.0), T::of(5.0)],
        )
        .expect("default weights are diagonal PSD")
    }
}

/// Box constraints on the command: thrust interval plus a symmetric bound on
/// the desired roll/pitch angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputBounds<T: Real> {
    pub thrust_min: T,
    pub thrust_max: T,
    pub tilt_max: T,
}

impl<T: Real> InputBounds<T> {
    pub fn new(thrust_min: T, thrust_max: T, tilt_max: T) -> Result<Self, MpcError> {
        if !(thrust_min >= T::zero() && thrust_min < thrust_max) {
            return Err(MpcError::InvalidBounds("need 0 <= thrust_min < thrust_max"));
        }
        if !(tilt_max > T::zero() && tilt_max <= T::pi()) {
            return Err(MpcError::InvalidBounds("need 0 < tilt_max <= pi"));
        }
        Ok(Self { thrust_min, thrust_max, tilt_max })
    }

    fn clamp_vector(&self, u: &InputVector<T>) -> InputVector<T> {
        InputVector::from([
            u[0].clamp(self.thrust_min, self.thrust_max),
            u[1].clamp(-self.tilt_max, self.tilt_max),
            u[2].clamp(-self.tilt_max, self.tilt_max),
        ])
    }
}

impl<T: Real> Default for InputBounds<T> {
    fn default() -> Self {
        Self { thrust_min: T::zero(), thrust_max: T::of(2.0 * 9.81), tilt_max: T::of(0.3) }
    }
}

/// Full solver configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig<T: Real> {
    /// Prediction horizon N (steps).
    pub horizon: usize,
    /// Prediction sampling time (s); one step per control period.
    pub dt: T,
    pub weights: MpcWeights<T>,
    pub bounds: InputBounds<T>,
    pub max_iters: usize,
    /// Stop when the projected-gradient norm falls below this.
    pub grad_tol: T,
    pub params: ModelParams<T>,
}

impl<T: Real> MpcConfig<T> {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon < 1 {
            return Err(MpcError::InvalidConfig("horizon must be at least 1"));
        }
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(MpcError::InvalidConfig("dt must be positive"));
        }
        if self.max_iters < 1 {
            return Err(MpcError::InvalidConfig("max_iters must be at least 1"));
        }
        if !(self.grad_tol > T::zero()) {
            return Err(MpcError::InvalidConfig("grad_tol must be positive"));
        }
        Ok(())
    }
}

impl<T: Real> Default for MpcConfig<T> {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: T::of(0.05),
            weights: MpcWeights::default(),
            bounds: InputBounds::default(),
            max_iters: 60,
            grad_tol: T::of(1e-4),
            params: ModelParams::default(),
        }
    }
}

/// Result of one receding-horizon solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution<T: Real> {
    /// The command to apply now; equals `input_plan[0]`.
    pub first_input: ControlInput<T>,
    pub input_plan: Vec<ControlInput<T>>,
    pub predicted_states: Vec<VehicleState<T>>,
    pub cost: T,
    pub iterations: usize,
    pub solve_time: std::time::Duration,
    /// Set when the line search hit a non-finite cost and the best iterate so
    /// far was returned instead of a converged one.
    pub degraded: bool,
}

/// One term of the horizon sum: state error, input error, and input-rate
/// penalties as quadratic forms.
pub fn stage_cost<T: Real>(
    x: &VehicleState<T>,
    u: &ControlInput<T>,
    u_prev: &ControlInput<T>,
    x_d: &VehicleState<T>,
    u_d: &ControlInput<T>,
    w: &MpcWeights<T>,
) -> T {
    stage_cost_vec(
        &x.to_vector(),
        &u.to_vector(),
        &u_prev.to_vector(),
        &x_d.to_vector(),
        &u_d.to_vector(),
        w,
    )
}

fn stage_cost_vec<T: Real>(
    x: &StateVector<T>,
    u: &InputVector<T>,
    u_prev: &InputVector<T>,
    x_d: &StateVector<T>,
    u_d: &InputVector<T>,
    w: &MpcWeights<T>,
) -> T {
    let rx = x_d - x;
    let ru = u_d - u;
    let du = u - u_prev;
    (rx.transpose() * w.q_x * rx)[0]
        + (ru.transpose() * w.q_u * ru)[0]
        + (du.transpose() * w.q_du * du)[0]
}

/// Cost of `plan` over the horizon from `x0`; the smoothness term at the first
/// step compares against `u_last`, the previously applied command.
pub fn total_cost<T: Real>(
    x0: &VehicleState<T>,
    plan: &[ControlInput<T>],
    u_last: &ControlInput<T>,
    x_d: &VehicleState<T>,
    cfg: &MpcConfig<T>,
) -> Result<T, MpcError> {
    if plan.len() != cfg.horizon {
        return Err(MpcError::PlanLength { expected: cfg.horizon, got: plan.len() });
    }
    let plan_vec: Vec<InputVector<T>> = plan.iter().map(|u| u.to_vector()).collect();
    Ok(total_cost_vec(&x0.to_vector(), &plan_vec, &u_last.to_vector(), &x_d.to_vector(), cfg))
}

fn total_cost_vec<T: Real>(
    x0: &StateVector<T>,
    plan: &[InputVector<T>],
    u_last: &InputVector<T>,
    x_d: &StateVector<T>,
    cfg: &MpcConfig<T>,
) -> T {
    let u_d = dynamics::hover_input(&cfg.params).to_vector();
    let mut cost = T::zero();
    let mut x = *x0;
    let mut u_prev = *u_last;
    for u in plan {
        x = step_vector(&x, u, &cfg.params, cfg.dt);
        cost += stage_cost_vec(&x, u, &u_prev, x_d, &u_d, &cfg.weights);
        u_prev = *u;
    }
    cost
}

/// Exact gradient of [`total_cost`] with respect to every input in the plan,
/// via one forward rollout and one adjoint sweep.
pub fn cost_gradient<T: Real>(
    x0: &VehicleState<T>,
    plan: &[ControlInput<T>],
    u_last: &ControlInput<T>,
    x_d: &VehicleState<T>,
    cfg: &MpcConfig<T>,
) -> Result<Vec<InputVector<T>>, MpcError> {
    if plan.len() != cfg.horizon {
        return Err(MpcError::PlanLength { expected: cfg.horizon, got: plan.len() });
    }
    let plan_vec: Vec<InputVector<T>> = plan.iter().map(|u| u.to_vector()).collect();
    Ok(cost_gradient_vec(&x0.to_vector(), &plan_vec, &u_last.to_vector(), &x_d.to_vector(), cfg))
}

fn cost_gradient_vec<T: Real>(
    x0: &StateVector<T>,
    plan: &[InputVector<T>],
    u_last: &InputVector<T>,
    x_d: &StateVector<T>,
    cfg: &MpcConfig<T>,
) -> Vec<InputVector<T>> {
    let n = plan.len();
    let u_d = dynamics::hover_input(&cfg.params).to_vector();
    let two = T::of(2.0);

    // Forward rollout, caching the step Jacobians along the trajectory.
    let mut xs = Vec::with_capacity(n + 1);
    xs.push(*x0);
    let mut jac_a = Vec::with_capacity(n);
    let mut jac_b = Vec::with_capacity(n);
    for u in plan {
        let x = *xs.last().unwrap();
        let (a, b) = step_jacobians(&x, u, &cfg.params, cfg.dt);
        jac_a.push(a);
        jac_b.push(b);
        xs.push(step_vector(&x, u, &cfg.params, cfg.dt));
    }

    // Adjoint sweep: lambda accumulates the cost sensitivity to xs[k+1].
    let mut grad = vec![InputVector::<T>::zeros(); n];
    let mut lambda = StateVector::<T>::zeros();
    for k in (0..n).rev() {
        let c_k = (cfg.weights.q_x * (x_d - xs[k + 1])) * (-two);
        lambda = if k == n - 1 { c_k } else { c_k + jac_a[k + 1].transpose() * lambda };

        let u_prev = if k == 0 { *u_last } else { plan[k - 1] };
        let mut g = jac_b[k].transpose() * lambda;
        g += (cfg.weights.q_u * (u_d - plan[k])) * (-two);
        g += (cfg.weights.q_du * (plan[k] - u_prev)) * two;
        if k + 1 < n {
            g -= (cfg.weights.q_du * (plan[k + 1] - plan[k])) * two;
        }
        grad[k] = g;
    }
    grad
}

/// Component-wise clamp of a plan into the input box. Idempotent.
pub fn project<T: Real>(plan: &[ControlInput<T>], bounds: &InputBounds<T>) -> Vec<ControlInput<T>> {
    plan.iter()
        .map(|u| ControlInput::from_vector_unchecked(&bounds.clamp_vector(&u.to_vector())))
        .collect()
}

/// Receding-horizon warm start: drop the applied first input, repeat the last.
pub fn shift_warm_start<T: Real>(previous_plan: &[ControlInput<T>]) -> Vec<ControlInput<T>> {
    match previous_plan.split_first() {
        Some((_, rest)) if !rest.is_empty() => {
            let mut plan = rest.to_vec();
            plan.push(*plan.last().unwrap());
            plan
        }
        _ => previous_plan.to_vec(),
    }
}

/// Projected gradient descent with Armijo backtracking from `warm_start`
/// (default: the held command repeated over the horizon).
///
/// The returned cost never exceeds the initial plan's cost; iteration stops on
/// the projected-gradient tolerance or the iteration cap. Every returned input
/// lies inside the bounds.
pub fn solve_once<T: Real>(
    x0: &VehicleState<T>,
    x_d: &VehicleState<T>,
    u_last: &ControlInput<T>,
    warm_start: Option<&[ControlInput<T>]>,
    cfg: &MpcConfig<T>,
) -> Result<MpcSolution<T>, MpcError> {
    solve_traced(x0, x_d, u_last, warm_start, cfg).map(|(solution, _)| solution)
}

/// [`solve_once`] plus the per-iteration cost sequence (index 0 is the cost of
/// the projected initial plan).
pub fn solve_traced<T: Real>(
    x0: &VehicleState<T>,
    x_d: &VehicleState<T>,
    u_last: &ControlInput<T>,
    warm_start: Option<&[ControlInput<T>]>,
    cfg: &MpcConfig<T>,
) -> Result<(MpcSolution<T>, Vec<T>), MpcError> {
    cfg.validate()?;
    let started = Instant::now();
    let n = cfg.horizon;

    let initial: Vec<InputVector<T>> = match warm_start {
        Some(plan) => {
            if plan.len() != n {
                return Err(MpcError::PlanLength { expected: n, got: plan.len() });
            }
            plan.iter().map(|u| u.to_vector()).collect()
        }
        None => vec![u_last.to_vector(); n],
    };
    let x0v = x0.to_vector();
    let xdv = x_d.to_vector();
    let ulv = u_last.to_vector();

    let mut plan: Vec<InputVector<T>> =
        initial.iter().map(|u| cfg.bounds.clamp_vector(u)).collect();
    let mut cost = total_cost_vec(&x0v, &plan, &ulv, &xdv, cfg);
    let mut trace = vec![cost];
    let mut iterations = 0;
    let mut degraded = false;

    if !cost.is_finite() {
        // Unusable starting point; fall back to the safest plan we can form.
        plan = vec![cfg.bounds.clamp_vector(&dynamics::hover_input(&cfg.params).to_vector()); n];
        cost = total_cost_vec(&x0v, &plan, &ulv, &xdv, cfg);
        trace = vec![cost];
        degraded = true;
    }

    let armijo = T::of(1e-4);
    let mut alpha = T::one();
    let alpha_min = T::of(1e-14);

    'outer: while iterations < cfg.max_iters {
        let grad = cost_gradient_vec(&x0v, &plan, &ulv, &xdv, cfg);

        // First-order optimality measure on the box: unit-step projected gradient.
        let mut pg_sq = T::zero();
        for (u, g) in plan.iter().zip(&grad) {
            let moved = cfg.bounds.clamp_vector(&(u - g));
            pg_sq += (u - moved).norm_squared();
        }
        if pg_sq.sqrt() <= cfg.grad_tol {
            break;
        }

        // Backtracking along the projection arc; the accepted step carries
        // over (doubled) as the first trial of the next iteration.
        alpha = (alpha + alpha).min(T::of(1e3));
        loop {
            let candidate: Vec<InputVector<T>> = plan
                .iter()
                .zip(&grad)
                .map(|(u, g)| cfg.bounds.clamp_vector(&(u - g * alpha)))
                .collect();
            let candidate_cost = total_cost_vec(&x0v, &candidate, &ulv, &xdv, cfg);

            if candidate_cost.is_finite() {
                let mut decrease = T::zero();
                for ((u, g), c) in plan.iter().zip(&grad).zip(&candidate) {
                    decrease += g.dot(&(u - c));
                }
                if candidate_cost <= cost - armijo * decrease {
                    plan = candidate;
                    cost = candidate_cost;
                    iterations += 1;
                    trace.push(cost);
                    continue 'outer;
                }
            } else {
                degraded = true;
            }

            alpha *= T::of(0.5);
            if alpha < alpha_min {
                // No acceptable step length remains; keep the best iterate.
                break 'outer;
            }
        }
    }

    let input_plan: Vec<ControlInput<T>> =
        plan.iter().map(|u| ControlInput::from_vector_unchecked(u)).collect();
    let mut predicted_states = Vec::with_capacity(n);
    let mut x = x0v;
    for u in &plan {
        x = step_vector(&x, u, &cfg.params, cfg.dt);
        predicted_states.push(VehicleState::from_vector_unchecked(&x));
    }

    let solution = MpcSolution {
        first_input: input_plan[0],
        input_plan,
        predicted_states,
        cost,
        iterations,
        solve_time: started.elapsed(),
        degraded,
    };
    Ok((solution, trace))
}

/// Stateful receding-horizon solver: owns the warm start carried between
/// control cycles. One instance serves one control loop.
#[derive(Debug, Clone)]
pub struct MpcSolver<T: Real> {
    cfg: MpcConfig<T>,
    warm: Option<Vec<ControlInput<T>>>,
    last_trace: Vec<T>,
}

impl<T: Real> MpcSolver<T> {
    pub fn new(cfg: MpcConfig<T>) -> Result<Self, MpcError> {
        cfg.validate()?;
        Ok(Self { cfg, warm: None, last_trace: Vec::new() })
    }

    pub fn config(&self) -> &MpcConfig<T> {
        &self.cfg
    }

    /// Solve from the current state, warm-starting from the previous cycle's
    /// shifted plan when one exists.
    pub fn solve(
        &mut self,
        x0: &VehicleState<T>,
        x_d: &VehicleState<T>,
        u_last: &ControlInput<T>,
    ) -> Result<MpcSolution<T>, MpcError> {
        let (solution, trace) = solve_traced(x0, x_d, u_last, self.warm.as_deref(), &self.cfg)?;
        self.warm = Some(shift_warm_start(&solution.input_plan));
        self.last_trace = trace;
        Ok(solution)
    }

    /// Per-iteration cost sequence of the most recent solve.
    pub fn last_iteration_costs(&self) -> &[T] {
        &self.last_trace
    }

    pub fn reset_warm_start(&mut self) {
        self.warm = None;
    }
}
