//! Mission sequencing: takeoff, hover dwell, waypoint trajectory tracking.
//!
//! The controller feeds each odometry sample through [`Mission::step`], which
//! walks the phase machine and emits the reference state the optimizer should
//! track. Waypoints advance on arrival: the index moves forward whenever the
//! vehicle is inside the arrival tolerance of the current waypoint, skipping
//! consecutive waypoints that are already inside it.

use nalgebra::Vector3;
use thiserror::Error;

use crate::dynamics::VehicleState;
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum MissionError {
    #[error("invalid trajectory spec: {0}")]
    InvalidSpec(&'static str),
    #[error("waypoint list is empty")]
    EmptyWaypoints,
    #[error("invalid mission state: {0}")]
    InvalidState(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Circle,
    Spiral,
    Hover,
}

/// Geometric description of the reference trajectory.
///
/// `center.z` is the base altitude; a spiral climbs from it at
/// `altitude_rate`. Circle and spiral trace `center + [R cos(wt), R sin(wt)]`
/// in the horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec<T: Real> {
    pub kind: TrajectoryKind,
    pub radius: T,
    /// Angular rate w (rad/s); sign sets the direction of travel.
    pub angular_rate: T,
    pub center: Vector3<T>,
    /// Climb rate (m/s), used by spirals.
    pub altitude_rate: T,
    /// Nominal duration (s); fixes the waypoint count.
    pub duration: T,
}

impl<T: Real> TrajectorySpec<T> {
    pub fn validate(&self) -> Result<(), MissionError> {
        if !(self.duration > T::zero()) {
            return Err(MissionError::InvalidSpec("duration must be positive"));
        }
        if self.kind != TrajectoryKind::Hover {
            if !(self.radius > T::zero()) {
                return Err(MissionError::InvalidSpec("radius must be positive"));
            }
            if self.angular_rate == T::zero() {
                return Err(MissionError::InvalidSpec("angular_rate must be non-zero"));
            }
        }
        Ok(())
    }

    /// Trajectory point at time `t`.
    pub fn point_at(&self, t: T) -> Vector3<T> {
        match self.kind {
            TrajectoryKind::Hover => self.center,
            TrajectoryKind::Circle => {
                let a = self.angular_rate * t;
                self.center + Vector3::new(self.radius * a.cos(), self.radius * a.sin(), T::zero())
            }
            TrajectoryKind::Spiral => {
                let a = self.angular_rate * t;
                self.center
                    + Vector3::new(
                        self.radius * a.cos(),
                        self.radius * a.sin(),
                        self.altitude_rate * t,
                    )
            }
        }
    }
}

/// Sample the trajectory every `step_dt` seconds over its duration; the first
/// waypoint is the point at t = 0.
pub fn generate_waypoints<T: Real>(
    spec: &TrajectorySpec<T>,
    step_dt: T,
) -> Result<Vec<Vector3<T>>, MissionError> {
    spec.validate()?;
    if !(step_dt > T::zero()) {
        return Err(MissionError::InvalidSpec("step_dt must be positive"));
    }
    let count = (spec.duration / step_dt).round().as_f64() as usize;
    let count = count.max(1);
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        points.push(spec.point_at(step_dt * T::from_usize(i).unwrap()));
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    TakeOff,
    Hover,
    Tracking,
    Done,
}

/// Mutable tracking progress: current phase, waypoint index, and the arrival
/// tolerance. The index never decreases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissionState<T: Real> {
    pub phase: Phase,
    pub waypoint_index: usize,
    pub tolerance: T,
}

impl<T: Real> MissionState<T> {
    pub fn new(tolerance: T) -> Result<Self, MissionError> {
        if !(tolerance > T::zero()) {
            return Err(MissionError::InvalidState("tolerance must be positive"));
        }
        Ok(Self { phase: Phase::Idle, waypoint_index: 0, tolerance })
    }
}

/// Advance the waypoint index past every waypoint already within tolerance of
/// `current_p`, and return the active reference waypoint.
///
/// Reaching the end of the list flips the phase to `Done`, with the reference
/// pinned to the final waypoint.
pub fn advance<T: Real>(
    mut mission: MissionState<T>,
    current_p: &Vector3<T>,
    waypoints: &[Vector3<T>],
) -> Result<(Vector3<T>, MissionState<T>), MissionError> {
    if waypoints.is_empty() {
        return Err(MissionError::EmptyWaypoints);
    }
    if mission.phase != Phase::Tracking && mission.phase != Phase::Done {
        return Err(MissionError::InvalidState("advance requires the tracking phase"));
    }
    while mission.waypoint_index < waypoints.len()
        && (current_p - waypoints[mission.waypoint_index]).norm() < mission.tolerance
    {
        mission.waypoint_index += 1;
    }
    if mission.waypoint_index >= waypoints.len() {
        mission.waypoint_index = waypoints.len();
        mission.phase = Phase::Done;
        return Ok((waypoints[waypoints.len() - 1], mission));
    }
    Ok((waypoints[mission.waypoint_index], mission))
}

/// Full mission driver as run by the controller.
#[derive(Debug, Clone)]
pub struct Mission<T: Real> {
    waypoints: Vec<Vector3<T>>,
    state: MissionState<T>,
    hover_point: Vector3<T>,
    /// Required continuous in-tolerance time at the hover point before
    /// trajectory tracking starts (ns).
    dwell_ns: u64,
    hover_held_since: Option<u64>,
}

impl<T: Real> Mission<T> {
    /// Build a mission for `spec`, sampling waypoints at the control period.
    pub fn new(
        spec: &TrajectorySpec<T>,
        step_dt: T,
        tolerance: T,
        dwell_s: f64,
    ) -> Result<Self, MissionError> {
        let waypoints = generate_waypoints(spec, step_dt)?;
        Ok(Self {
            waypoints,
            state: MissionState::new(tolerance)?,
            hover_point: Vector3::new(T::zero(), T::zero(), T::one()),
            dwell_ns: (dwell_s * 1e9) as u64,
            hover_held_since: None,
        })
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn waypoint_index(&self) -> usize {
        self.state.waypoint_index
    }

    pub fn waypoints(&self) -> &[Vector3<T>] {
        &self.waypoints
    }

    /// Reference state for the current odometry sample: the position to go to
    /// with zero velocity and level attitude. The matching input target is the
    /// hover input.
    pub fn step(&mut self, odometry: &VehicleState<T>, now_ns: u64) -> VehicleState<T> {
        let reference_point = match self.state.phase {
            Phase::Idle => {
                self.state.phase = Phase::TakeOff;
                self.hover_point
            }
            Phase::TakeOff => {
                if (odometry.p - self.hover_point).norm() < self.state.tolerance {
                    self.state.phase = Phase::Hover;
                    self.hover_held_since = Some(now_ns);
                }
                self.hover_point
            }
            Phase::Hover => {
                if (odometry.p - self.hover_point).norm() < self.state.tolerance {
                    let since = *self.hover_held_since.get_or_insert(now_ns);
                    if now_ns.saturating_sub(since) >= self.dwell_ns {
                        self.state.phase = Phase::Tracking;
                    }
                } else {
                    self.hover_held_since = None;
                }
                self.hover_point
            }
            Phase::Tracking | Phase::Done => {
                let (reference, next) =
                    advance(self.state, &odometry.p, &self.waypoints).expect("waypoints non-empty");
                self.state = next;
                reference
            }
        };
        VehicleState {
            p: reference_point,
            v: Vector3::zeros(),
            phi: T::zero(),
            theta: T::zero(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn circle_spec() -> TrajectorySpec<f64> {
        TrajectorySpec {
            kind: TrajectoryKind::Circle,
            radius: 2.0,
            angular_rate: std::f64::consts::TAU / 100.0,
            center: Vector3::new(0.0, 0.0, 1.0),
            altitude_rate: 0.0,
            duration: 100.0,
        }
    }

    #[test]
    fn circle_starts_on_the_x_axis() {
        let wp = generate_waypoints(&circle_spec(), 0.05).unwrap();
        assert_eq!(wp.len(), 2000);
        assert_relative_eq!(wp[0], Vector3::new(2.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn circle_waypoints_keep_radius() {
        let spec = circle_spec();
        let wp = generate_waypoints(&spec, 0.05).unwrap();
        for p in &wp {
            let r = (p - Vector3::new(0.0, 0.0, 1.0)).xy().norm();
            assert!((r - 2.0).abs() <= 1e-9);
            assert_eq!(p[2], 1.0);
        }
    }

    #[test]
    fn circle_reference_continuity() {
        let spec = circle_spec();
        let step_dt = 0.05;
        let wp = generate_waypoints(&spec, step_dt).unwrap();
        let bound = spec.radius * spec.angular_rate * step_dt + 1e-12;
        for pair in wp.windows(2) {
            assert!((pair[1] - pair[0]).norm() <= bound);
        }
    }

    #[test]
    fn spiral_climbs_linearly() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Spiral,
            radius: 2.0,
            angular_rate: std::f64::consts::TAU / 100.0,
            center: Vector3::new(0.0, 0.0, 1.0),
            altitude_rate: 0.01,
            duration: 130.0,
        };
        let p = spec.point_at(130.0);
        assert_relative_eq!(p[2], 1.0 + 1.3, epsilon = 1e-12);
    }

    #[test]
    fn hover_spec_is_constant() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Hover,
            radius: 1.0,
            angular_rate: 1.0,
            center: Vector3::new(0.0, 0.0, 1.0),
            altitude_rate: 0.0,
            duration: 30.0,
        };
        let wp = generate_waypoints(&spec, 0.05).unwrap();
        assert_eq!(wp.len(), 600);
        assert!(wp.iter().all(|p| *p == Vector3::new(0.0, 0.0, 1.0)));
    }

    #[test]
    fn spec_validation() {
        let mut s = circle_spec();
        s.radius = 0.0;
        assert!(s.validate().is_err());
        let mut s = circle_spec();
        s.angular_rate = 0.0;
        assert!(s.validate().is_err());
        let mut s = circle_spec();
        s.duration = -1.0;
        assert!(s.validate().is_err());
    }

    fn tracking_state(tolerance: f64) -> MissionState<f64> {
        MissionState { phase: Phase::Tracking, waypoint_index: 0, tolerance }
    }

    #[test]
    fn advance_on_exact_arrival() {
        let wp = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0)];
        let (reference, next) =
            advance(tracking_state(0.4), &Vector3::new(0.0, 0.0, 1.0), &wp).unwrap();
        assert_eq!(next.waypoint_index, 1);
        assert_eq!(reference, wp[1]);
    }

    #[test]
    fn advance_boundary_is_strict() {
        let wp = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(5.0, 0.0, 0.0)];
        // 0.39 m away: inside the 0.4 tolerance, advances.
        let (_, next) = advance(tracking_state(0.4), &Vector3::new(0.39, 0.0, 0.0), &wp).unwrap();
        assert_eq!(next.waypoint_index, 1);
        // 0.41 m away: outside, holds.
        let (reference, next) =
            advance(tracking_state(0.4), &Vector3::new(0.41, 0.0, 0.0), &wp).unwrap();
        assert_eq!(next.waypoint_index, 0);
        assert_eq!(reference, wp[0]);
    }

    #[test]
    fn advance_skips_consecutive_waypoints_within_tolerance() {
        let wp = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::new(0.2, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
        ];
        let (reference, next) = advance(tracking_state(0.4), &Vector3::zeros(), &wp).unwrap();
        assert_eq!(next.waypoint_index, 3);
        assert_eq!(reference, wp[3]);
        assert_eq!(next.phase, Phase::Tracking);
    }

    #[test]
    fn advance_reaches_done_at_list_end() {
        let wp = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.1, 0.0, 0.0)];
        let (reference, next) = advance(tracking_state(0.4), &Vector3::zeros(), &wp).unwrap();
        assert_eq!(next.phase, Phase::Done);
        assert_eq!(reference, wp[1]);
        // Done state keeps returning the final waypoint.
        let (again, _) = advance(next, &Vector3::new(9.0, 9.0, 9.0), &wp).unwrap();
        assert_eq!(again, wp[1]);
    }

    #[test]
    fn advance_rejects_empty_and_wrong_phase() {
        assert_eq!(
            advance::<f64>(tracking_state(0.4), &Vector3::zeros(), &[]).unwrap_err(),
            MissionError::EmptyWaypoints
        );
        let idle = MissionState { phase: Phase::Idle, waypoint_index: 0, tolerance: 0.4 };
        assert!(advance(idle, &Vector3::zeros(), &[Vector3::zeros()]).is_err());
    }

    #[test]
    fn mission_starts_with_takeoff_reference() {
        let mut m = Mission::new(&circle_spec(), 0.05, 0.4, 2.0).unwrap();
        let odo = VehicleState::at_rest();
        let reference = m.step(&odo, 0);
        assert_eq!(reference.p, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(reference.v, Vector3::zeros());
        assert_eq!(m.phase(), Phase::TakeOff);
    }

    #[test]
    fn mission_requires_two_second_dwell_before_tracking() {
        let mut m = Mission::new(&circle_spec(), 0.05, 0.4, 2.0).unwrap();
        let at_hover =
            VehicleState::new(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros(), 0.0, 0.0).unwrap();
        m.step(&VehicleState::at_rest(), 0); // Idle -> TakeOff
        m.step(&at_hover, 1_000_000_000); // arrives: TakeOff -> Hover
        assert_eq!(m.phase(), Phase::Hover);
        m.step(&at_hover, 2_000_000_000); // 1 s held: not yet
        assert_eq!(m.phase(), Phase::Hover);
        m.step(&at_hover, 3_000_000_000); // 2 s held: tracking starts
        assert_eq!(m.phase(), Phase::Tracking);
    }

    #[test]
    fn mission_dwell_resets_when_hover_is_lost() {
        let mut m = Mission::new(&circle_spec(), 0.05, 0.4, 2.0).unwrap();
        let at_hover =
            VehicleState::new(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros(), 0.0, 0.0).unwrap();
        let away =
            VehicleState::new(Vector3::new(0.0, 0.0, 0.2), Vector3::zeros(), 0.0, 0.0).unwrap();
        m.step(&VehicleState::at_rest(), 0);
        m.step(&at_hover, 1_000_000_000);
        m.step(&away, 2_500_000_000); // drifts out: timer resets
        assert_eq!(m.phase(), Phase::Hover);
        m.step(&at_hover, 3_000_000_000);
        m.step(&at_hover, 4_000_000_000);
        assert_eq!(m.phase(), Phase::Hover); // only 1 s of fresh dwell
        m.step(&at_hover, 5_000_000_000);
        assert_eq!(m.phase(), Phase::Tracking);
    }

    #[test]
    fn hover_mission_reaches_done_and_pins_reference() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Hover,
            radius: 1.0,
            angular_rate: 1.0,
            center: Vector3::new(0.0, 0.0, 1.0),
            altitude_rate: 0.0,
            duration: 10.0,
        };
        let mut m = Mission::new(&spec, 0.05, 0.4, 0.0).unwrap();
        let at_hover =
            VehicleState::new(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros(), 0.0, 0.0).unwrap();
        m.step(&VehicleState::at_rest(), 0);
        m.step(&at_hover, 1); // -> Hover, zero dwell satisfied next step
        m.step(&at_hover, 2); // -> Tracking
        // All waypoints coincide with the hover point, so tracking collapses.
        let reference = m.step(&at_hover, 3);
        assert_eq!(m.phase(), Phase::Done);
        assert_eq!(reference.p, Vector3::new(0.0, 0.0, 1.0));
    }

    proptest! {
        #[test]
        fn waypoint_index_is_monotone(
            seed in 0u64..500,
            steps in 1usize..60,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let wp = generate_waypoints(&circle_spec(), 0.5).unwrap();
            let mut state = tracking_state(0.4);
            let mut last = state.waypoint_index;
            for _ in 0..steps {
                let p = Vector3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(0.0..2.0),
                );
                let (_, next) = advance(state, &p, &wp).unwrap();
                prop_assert!(next.waypoint_index >= last);
                last = next.waypoint_index;
                state = next;
            }
        }
    }
}
