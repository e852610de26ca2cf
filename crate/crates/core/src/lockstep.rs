//! Deterministic plant/controller co-simulation on a virtual clock.
//!
//! Both cores advance in lockstep: the plant integrates fixed substeps,
//! odometry and commands sit in virtual delay queues for the configured
//! one-way delay, and controller compute occupies zero virtual time. Two runs
//! with the same configuration produce bit-identical logs, which is what the
//! tracking tests need; wall-clock experiments use the real runtime instead.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::controller::{ControllerConfig, ControllerCore, ControllerError, ControllerLogs, ExecStamp};
use crate::link::{CommandMsg, OdometryMsg};
use crate::mission::Phase;
use crate::plant::{LinkStatus, PlantConfig, PlantCore, PlantError, PlantLogs};

#[derive(Debug, Error)]
pub enum LockstepError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("plant odometry rate {plant} Hz must equal controller rate {controller} Hz")]
    RateMismatch { plant: f64, controller: f64 },
}

/// Combined output of one closed-loop run, virtual or real.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub plant: PlantLogs,
    pub controller: ControllerLogs,
    pub plant_status: LinkStatus,
    pub controller_status: LinkStatus,
    /// Set when a mission run hit the hard stop (1.5x the nominal duration)
    /// without reaching `Done`.
    pub timed_out: bool,
    /// Wall-clock cost of producing the run.
    pub wall: Duration,
    /// Simulated seconds covered.
    pub sim_duration_s: f64,
}

/// Run plant and controller in lockstep for `duration_s` of virtual time.
///
/// With `wait_for_done` the run continues past the nominal duration until the
/// mission reaches `Done`, up to 1.5x the duration; hitting that cap sets
/// `timed_out` and returns the partial logs.
pub fn run_lockstep(
    plant_cfg: PlantConfig,
    controller_cfg: ControllerConfig,
    one_way_delay: Duration,
    duration_s: f64,
    wait_for_done: bool,
) -> Result<RunArtifacts, LockstepError> {
    if (plant_cfg.odom_rate - controller_cfg.rate).abs() > 1e-9 {
        return Err(LockstepError::RateMismatch {
            plant: plant_cfg.odom_rate,
            controller: controller_cfg.rate,
        });
    }
    let wall_start = Instant::now();
    let mut plant = PlantCore::new(plant_cfg.clone())?;
    let mut controller = ControllerCore::new(&controller_cfg, ExecStamp::ZeroVirtual)?;

    let delay_ns = one_way_delay.as_nanos() as u64;
    let substeps = plant_cfg.substeps_per_period();
    let substep_ns = (plant_cfg.sim_dt * 1e9).round() as u64;
    let duration_ns = (duration_s * 1e9) as u64;
    let hard_stop_ns = (duration_s * 1.5 * 1e9) as u64;

    let mut odometry_inflight: VecDeque<(u64, OdometryMsg)> = VecDeque::new();
    let mut commands_inflight: VecDeque<(u64, CommandMsg)> = VecDeque::new();
    let mut vnow: u64 = 0;
    let mut substep: u64 = 0;
    let mut timed_out = false;

    loop {
        let at_period_boundary = substep % substeps == 0;
        if at_period_boundary {
            let done = controller.phase() == Phase::Done;
            if vnow >= duration_ns && (!wait_for_done || done) {
                break;
            }
            if wait_for_done && vnow >= hard_stop_ns {
                timed_out = true;
                break;
            }
        }

        while let Some((due, _)) = commands_inflight.front() {
            if *due <= vnow {
                let (due, cmd) = commands_inflight.pop_front().unwrap();
                plant.on_command(&cmd, due);
            } else {
                break;
            }
        }

        if at_period_boundary {
            let odo = plant.publish_odometry(vnow);
            odometry_inflight.push_back((vnow + delay_ns, odo));
        }

        while let Some((due, _)) = odometry_inflight.front() {
            if *due <= vnow {
                let (due, odo) = odometry_inflight.pop_front().unwrap();
                let cmd = controller.on_odometry(&odo, due);
                commands_inflight.push_back((due + delay_ns, cmd));
            } else {
                break;
            }
        }

        plant.integrate_substep()?;
        vnow += substep_ns;
        substep += 1;
    }

    let sim_duration_s = plant.sim_time_s();
    Ok(RunArtifacts {
        plant: plant.into_logs(),
        controller: controller.into_logs(),
        plant_status: LinkStatus::Clean,
        controller_status: LinkStatus::Clean,
        timed_out,
        wall: wall_start.elapsed(),
        sim_duration_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mission::{TrajectoryKind, TrajectorySpec};
    use crate::MpcConfig64;
    use nalgebra::Vector3;

    fn hover_controller(rate: f64, duration: f64) -> ControllerConfig {
        ControllerConfig {
            rate,
            mpc: MpcConfig64 { dt: 1.0 / rate, ..MpcConfig64::default() },
            mission: TrajectorySpec {
                kind: TrajectoryKind::Hover,
                radius: 1.0,
                angular_rate: 1.0,
                center: Vector3::new(0.0, 0.0, 1.0),
                altitude_rate: 0.0,
                duration,
            },
            tolerance: 0.4,
            hover_dwell_s: 2.0,
            endpoint: "127.0.0.1:0".into(),
        }
    }

    #[test]
    fn hover_run_climbs_and_settles() {
        let artifacts = run_lockstep(
            PlantConfig::default(),
            hover_controller(20.0, 30.0),
            Duration::ZERO,
            30.0,
            false,
        )
        .unwrap();
        assert!(!artifacts.timed_out);
        let last = artifacts.plant.trajectory.last().unwrap();
        let err = (last.state.p - Vector3::new(0.0, 0.0, 1.0)).norm();
        assert!(err < 0.1, "final hover error {err}");
        assert_eq!(artifacts.controller.final_phase, Some(Phase::Done));
    }

    #[test]
    fn lockstep_runs_are_bit_identical() {
        let run = || {
            run_lockstep(
                PlantConfig::default(),
                hover_controller(20.0, 10.0),
                Duration::from_millis(10),
                10.0,
                false,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.plant.trajectory.len(), b.plant.trajectory.len());
        for (ra, rb) in a.plant.trajectory.iter().zip(&b.plant.trajectory) {
            assert_eq!(ra, rb);
        }
        assert_eq!(a.plant.latency, b.plant.latency);
        assert_eq!(a.controller.commands.len(), b.controller.commands.len());
        for (ca, cb) in a.controller.commands.iter().zip(&b.controller.commands) {
            assert_eq!(ca, cb);
        }
    }

    #[test]
    fn virtual_delay_shows_up_as_exact_round_trip() {
        let artifacts = run_lockstep(
            PlantConfig::default(),
            hover_controller(20.0, 5.0),
            Duration::from_millis(10),
            5.0,
            false,
        )
        .unwrap();
        assert!(!artifacts.plant.latency.is_empty());
        for record in &artifacts.plant.latency {
            assert_eq!(record.l_total_ns, 20_000_000, "virtual round trip is exactly 2D");
            assert_eq!(record.l_exec_ns, 0);
            assert_eq!(record.l_rtd_ns, 20_000_000);
        }
    }

    #[test]
    fn zero_delay_round_trip_is_zero() {
        let artifacts = run_lockstep(
            PlantConfig::default(),
            hover_controller(20.0, 2.0),
            Duration::ZERO,
            2.0,
            false,
        )
        .unwrap();
        for record in &artifacts.plant.latency {
            assert_eq!(record.l_total_ns, 0);
            assert_eq!(record.l_rtd_ns, 0);
        }
    }
}
