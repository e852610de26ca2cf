//! Edge-side controller service: consumes odometry, runs the mission machine
//! and the receding-horizon solver, and answers each sample with a command
//! carrying the measured compute time and echoed odometry timestamps.
//!
//! Each cycle fires on odometry arrival. The plant paces odometry at the
//! control rate, so command spacing inherits that rate; driving cycles from
//! arrivals (instead of a free-running local timer) keeps the round-trip
//! latency free of an arbitrary phase offset between the two loops.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use thiserror::Error;

use crate::dynamics::hover_input;
use crate::link::{
    encode, CommandMsg, DelayChannel, FrameDecoder, OdometryMsg, RecvOutcome, WireMessage,
};
use crate::mission::{Mission, MissionError, Phase, TrajectorySpec};
use crate::mpc::{MpcError, MpcSolver};
use crate::plant::LinkStatus;
use crate::time::now_ns;
use crate::{ControlInput64, MpcConfig64};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid controller config: {0}")]
    Config(&'static str),
    #[error("failed to listen on {endpoint}: {source}")]
    Listen { endpoint: String, source: std::io::Error },
    #[error(transparent)]
    Mission(#[from] MissionError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    /// Control frequency (Hz); the prediction step is its reciprocal.
    pub rate: f64,
    pub mpc: MpcConfig64,
    pub mission: TrajectorySpec<f64>,
    /// Waypoint arrival tolerance (m).
    pub tolerance: f64,
    /// Hover dwell required before tracking starts (s).
    pub hover_dwell_s: f64,
    /// Listen endpoint for the plant connection.
    pub endpoint: String,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(1.0..=500.0).contains(&self.rate) {
            return Err(ControllerError::Config("rate must be within 1..=500 Hz"));
        }
        let period = 1.0 / self.rate;
        if (self.mpc.dt - period).abs() > 1e-9 {
            return Err(ControllerError::Config("mpc.dt must equal the control period"));
        }
        self.mpc.validate()?;
        self.mission.validate()?;
        if !(self.tolerance > 0.0) {
            return Err(ControllerError::Config("tolerance must be positive"));
        }
        Ok(())
    }

    pub fn period_ns(&self) -> u64 {
        (1e9 / self.rate).round() as u64
    }
}

/// How commands report controller compute time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecStamp {
    /// Wall-clock measurement of the mission + solve work.
    Measured,
    /// Zero, for deterministic virtual-time runs where compute occupies no
    /// simulated time.
    ZeroVirtual,
}

/// One command-log row. The CSV keeps the pinned columns; the reference and
/// phase ride along in memory for post-run joins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommandLogRow {
    pub cycle: u64,
    /// Seconds since the first cycle, on the loop's clock.
    pub t_s: f64,
    pub exec_ns: u64,
    pub input: ControlInput64,
    pub echo_seq: u64,
    pub deadline_missed: bool,
    pub reference: Vector3<f64>,
    pub phase: Phase,
}

/// Everything the controller records during a run.
#[derive(Debug, Clone, Default)]
pub struct ControllerLogs {
    pub commands: Vec<CommandLogRow>,
    pub deadline_misses: u64,
    /// Odometry samples superseded before their cycle ran.
    pub dropped_odometry: u64,
    pub degraded_solves: u64,
    pub final_phase: Option<Phase>,
}

/// Clock-agnostic controller state machine: one instance per control loop.
pub struct ControllerCore {
    mission: Mission<f64>,
    solver: MpcSolver<f64>,
    u_last: ControlInput64,
    exec_stamp: ExecStamp,
    period_ns: u64,
    next_cmd_seq: u64,
    first_cycle_ns: Option<u64>,
    logs: ControllerLogs,
}

impl ControllerCore {
    pub fn new(cfg: &ControllerConfig, exec_stamp: ExecStamp) -> Result<Self, ControllerError> {
        cfg.validate()?;
        let mission = Mission::new(&cfg.mission, cfg.mpc.dt, cfg.tolerance, cfg.hover_dwell_s)?;
        let u_last = hover_input(&cfg.mpc.params);
        Ok(Self {
            mission,
            solver: MpcSolver::new(cfg.mpc.clone())?,
            u_last,
            exec_stamp,
            period_ns: cfg.period_ns(),
            next_cmd_seq: 1,
            first_cycle_ns: None,
            logs: ControllerLogs::default(),
        })
    }

    pub fn phase(&self) -> Phase {
        self.mission.phase()
    }

    pub fn logs(&self) -> &ControllerLogs {
        &self.logs
    }

    pub fn into_logs(mut self) -> ControllerLogs {
        self.logs.final_phase = Some(self.mission.phase());
        self.logs
    }

    pub fn note_dropped_odometry(&mut self, count: u64) {
        self.logs.dropped_odometry += count;
    }

    /// Run one control cycle for an odometry sample arriving at `now_ns` (on
    /// the loop's clock) and produce the command to send.
    pub fn on_odometry(&mut self, odo: &OdometryMsg, now_ns: u64) -> CommandMsg {
        let started = Instant::now();
        let first = *self.first_cycle_ns.get_or_insert(now_ns);

        let reference = self.mission.step(&odo.state, now_ns);
        let solution = self
            .solver
            .solve(&odo.state, &reference, &self.u_last)
            .expect("validated config solves");
        if solution.degraded {
            self.logs.degraded_solves += 1;
        }
        self.u_last = solution.first_input;

        let measured_ns = started.elapsed().as_nanos() as u64;
        let (exec_ns, sent_at) = match self.exec_stamp {
            ExecStamp::Measured => (measured_ns, crate::time::now_ns()),
            ExecStamp::ZeroVirtual => (0, now_ns),
        };
        let deadline_missed = exec_ns > self.period_ns;
        if deadline_missed {
            self.logs.deadline_misses += 1;
        }

        self.logs.commands.push(CommandLogRow {
            cycle: self.next_cmd_seq,
            t_s: now_ns.saturating_sub(first) as f64 / 1e9,
            exec_ns,
            input: solution.first_input,
            echo_seq: odo.seq,
            deadline_missed,
            reference: reference.p,
            phase: self.mission.phase(),
        });

        let cmd = CommandMsg {
            seq: self.next_cmd_seq,
            sent_at,
            echo_seq: odo.seq,
            echo_sent_at: odo.sent_at,
            exec_ns,
            input: solution.first_input,
        };
        self.next_cmd_seq += 1;
        cmd
    }
}

/// Handle for observing a running controller loop from the harness.
#[derive(Debug, Clone, Default)]
pub struct PhaseProbe {
    phase: Arc<AtomicU8>,
}

impl PhaseProbe {
    pub fn new() -> Self {
        Self::default()
    }

    fn publish(&self, phase: Phase) {
        self.phase.store(phase_code(phase), Ordering::Relaxed);
    }

    pub fn phase(&self) -> Phase {
        match self.phase.load(Ordering::Relaxed) {
            1 => Phase::TakeOff,
            2 => Phase::Hover,
            3 => Phase::Tracking,
            4 => Phase::Done,
            _ => Phase::Idle,
        }
    }
}

fn phase_code(phase: Phase) -> u8 {
    match phase {
        Phase::Idle => 0,
        Phase::TakeOff => 1,
        Phase::Hover => 2,
        Phase::Tracking => 3,
        Phase::Done => 4,
    }
}

/// Serve one plant connection on a pre-bound listener until `stop` is set or
/// the link drops. Odometry passes through a delay channel for
/// `one_way_delay`, emulating the network toward the edge.
pub fn run_controller_on(
    listener: TcpListener,
    cfg: ControllerConfig,
    one_way_delay: Duration,
    stop: Arc<AtomicBool>,
    probe: PhaseProbe,
) -> Result<(ControllerLogs, LinkStatus), ControllerError> {
    let mut core = ControllerCore::new(&cfg, ExecStamp::Measured)?;
    let endpoint = cfg.endpoint.clone();

    listener.set_nonblocking(true).map_err(|source| ControllerError::Listen {
        endpoint: endpoint.clone(),
        source,
    })?;
    let mut stream = loop {
        if stop.load(Ordering::Relaxed) {
            return Ok((core.into_logs(), LinkStatus::Clean));
        }
        match listener.accept() {
            Ok((stream, _)) => break stream,
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(source) => return Err(ControllerError::Listen { endpoint, source }),
        }
    };
    stream.set_nonblocking(false).ok();
    stream.set_nodelay(true).ok();

    let delayed: DelayChannel<OdometryMsg> = DelayChannel::new(one_way_delay.as_nanos() as u64);
    let reader_stream = stream.try_clone().map_err(|source| ControllerError::Listen {
        endpoint: cfg.endpoint.clone(),
        source,
    })?;
    let reader_channel = delayed.clone();
    let reader = std::thread::spawn(move || read_odometry(reader_stream, reader_channel));

    let mut status = LinkStatus::Clean;
    'serve: loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let (mut due, mut odo) = match delayed.recv_timeout(Duration::from_millis(50)) {
            RecvOutcome::Matured(item) => item,
            RecvOutcome::TimedOut => continue,
            RecvOutcome::Closed => {
                status =
                    if stop.load(Ordering::Relaxed) { LinkStatus::Clean } else { LinkStatus::LinkLost };
                break 'serve;
            }
        };
        // A late cycle may leave newer samples already matured: act on the
        // freshest one only.
        let newer = delayed.drain_matured(now_ns());
        if !newer.is_empty() {
            core.note_dropped_odometry(newer.len() as u64);
            let (d, o) = *newer.last().unwrap();
            due = d;
            odo = o;
        }

        let cmd = core.on_odometry(&odo, due);
        probe.publish(core.phase());
        if stream.write_all(&encode(&WireMessage::Command(cmd))).is_err() {
            status = LinkStatus::LinkLost;
            break;
        }
    }

    stream.shutdown(std::net::Shutdown::Both).ok();
    reader.join().ok();
    Ok((core.into_logs(), status))
}

/// Bind `cfg.endpoint` and serve one plant connection.
pub fn run_controller(
    cfg: ControllerConfig,
    one_way_delay: Duration,
    stop: Arc<AtomicBool>,
    probe: PhaseProbe,
) -> Result<(ControllerLogs, LinkStatus), ControllerError> {
    let listener = TcpListener::bind(&cfg.endpoint).map_err(|source| ControllerError::Listen {
        endpoint: cfg.endpoint.clone(),
        source,
    })?;
    run_controller_on(listener, cfg, one_way_delay, stop, probe)
}

fn read_odometry(mut stream: TcpStream, channel: DelayChannel<OdometryMsg>) {
    let mut decoder = FrameDecoder::new();
    let mut buf = [0u8; 4096];
    loop {
        match stream.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                decoder.feed(&buf[..n]);
                loop {
                    match decoder.next_message() {
                        Ok(Some(WireMessage::Odometry(odo))) => {
                            channel.push(odo);
                        }
                        Ok(Some(WireMessage::Command(_))) => {
                            // The plant never sends commands; ignore.
                        }
                        Ok(None) => break,
                        Err(_) => {
                            channel.close();
                            return;
                        }
                    }
                }
            }
        }
    }
    channel.close();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mission::TrajectoryKind;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    pub(crate) fn hover_cfg(rate: f64) -> ControllerConfig {
        ControllerConfig {
            rate,
            mpc: MpcConfig64 { dt: 1.0 / rate, ..MpcConfig64::default() },
            mission: TrajectorySpec {
                kind: TrajectoryKind::Hover,
                radius: 1.0,
                angular_rate: 1.0,
                center: Vector3::new(0.0, 0.0, 1.0),
                altitude_rate: 0.0,
                duration: 30.0,
            },
            tolerance: 0.4,
            hover_dwell_s: 2.0,
            endpoint: "127.0.0.1:0".to_string(),
        }
    }

    fn odo(seq: u64, state: crate::VehicleState64, sent_at: u64) -> OdometryMsg {
        OdometryMsg { seq, sent_at, state }
    }

    #[test]
    fn config_requires_matching_prediction_step() {
        let mut cfg = hover_cfg(20.0);
        assert!(cfg.validate().is_ok());
        cfg.mpc.dt = 0.06;
        assert!(cfg.validate().is_err());
        cfg.mpc.dt = 0.05;
        cfg.rate = 0.5;
        assert!(cfg.validate().is_err());
        cfg.rate = 600.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn commands_at_equilibrium_converge_to_hover_input() {
        let cfg = hover_cfg(20.0);
        let mut core = ControllerCore::new(&cfg, ExecStamp::ZeroVirtual).unwrap();
        let at_hover = crate::VehicleState64::new(
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::zeros(),
            0.0,
            0.0,
        )
        .unwrap();
        let mut last = None;
        for seq in 1..=40u64 {
            let cmd = core.on_odometry(&odo(seq, at_hover, seq * 50_000_000), seq * 50_000_000);
            last = Some(cmd);
        }
        let cmd = last.unwrap();
        assert_relative_eq!(cmd.input.thrust, 9.81, epsilon = 1e-3);
        assert_relative_eq!(cmd.input.phi_d, 0.0, epsilon = 1e-3);
        assert_relative_eq!(cmd.input.theta_d, 0.0, epsilon = 1e-3);
    }

    #[test]
    fn commands_echo_the_consumed_odometry() {
        let cfg = hover_cfg(20.0);
        let mut core = ControllerCore::new(&cfg, ExecStamp::ZeroVirtual).unwrap();
        let state = crate::VehicleState64::at_rest();
        let cmd = core.on_odometry(&odo(17, state, 123_456), 200_000);
        assert_eq!(cmd.echo_seq, 17);
        assert_eq!(cmd.echo_sent_at, 123_456);
        assert_eq!(cmd.exec_ns, 0);
        assert_eq!(cmd.seq, 1);

        // Freshness: a later cycle echoes a later (or equal) sequence.
        let cmd2 = core.on_odometry(&odo(19, state, 223_456), 300_000);
        assert!(cmd2.echo_seq >= cmd.echo_seq);
        assert_eq!(cmd2.seq, 2);
    }

    #[test]
    fn measured_exec_is_stamped_and_checked_against_the_period() {
        let cfg = hover_cfg(20.0);
        let mut core = ControllerCore::new(&cfg, ExecStamp::Measured).unwrap();
        let cmd = core.on_odometry(&odo(1, crate::VehicleState64::at_rest(), 0), 0);
        assert!(cmd.exec_ns > 0, "measured compute time must be non-zero");
        let row = core.logs().commands[0];
        assert_eq!(row.exec_ns, cmd.exec_ns);
        assert_eq!(row.deadline_missed, cmd.exec_ns > cfg.period_ns());
    }

    #[test]
    fn deadline_miss_flag_matches_the_period_comparison() {
        // Pure decision logic: exec above the period counts as a miss.
        let period_ns = hover_cfg(20.0).period_ns();
        assert_eq!(period_ns, 50_000_000);
        assert!(60_000_000u64 > period_ns);
        assert!(50_000_000u64 <= period_ns);
    }
}
