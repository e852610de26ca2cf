//! Simulated vehicle process: fine-step integration, zero-order hold on the
//! newest valid command, paced odometry publication, and latency bookkeeping
//! from command echoes.
//!
//! [`PlantCore`] is the clock-agnostic state machine; [`run_plant`] drives it
//! against real sockets and the wall clock. The lockstep runner drives the
//! same core on a virtual clock.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::dynamics::{euler_step, hover_input, DynamicsError};
use crate::link::{
    encode, Admission, CommandGate, CommandMsg, DelayChannel, FrameDecoder, LatencyRecord,
    OdometryMsg, WireMessage,
};
use crate::mpc::{project, InputBounds};
use crate::time::{now_ns, Pacer};
use crate::{ControlInput64, ModelParams64, VehicleState64};

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("invalid plant config: {0}")]
    Config(&'static str),
    #[error("failed to reach the controller at {endpoint}: {source}")]
    Connect { endpoint: String, source: std::io::Error },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// How a runtime loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkStatus {
    /// Stopped on request.
    Clean,
    /// The peer vanished first; logs were flushed and the loop exited.
    LinkLost,
}

#[derive(Debug, Clone)]
pub struct PlantConfig {
    pub params: ModelParams64,
    /// Integration step (s); must divide the odometry period evenly.
    pub sim_dt: f64,
    /// Odometry publish rate (Hz); equals the control rate.
    pub odom_rate: f64,
    pub initial_state: VehicleState64,
    /// Controller endpoint to connect to.
    pub endpoint: String,
    /// Actuator saturation applied to accepted commands.
    pub input_limits: InputBounds<f64>,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            params: ModelParams64::default(),
            sim_dt: 0.005,
            odom_rate: 20.0,
            initial_state: VehicleState64::at_rest(),
            endpoint: crate::link::DEFAULT_ENDPOINT.to_string(),
            input_limits: InputBounds::default(),
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.sim_dt > 0.0) {
            return Err(PlantError::Config("sim_dt must be positive"));
        }
        if !(self.odom_rate > 0.0) {
            return Err(PlantError::Config("odom_rate must be positive"));
        }
        let period = 1.0 / self.odom_rate;
        if self.sim_dt > period + 1e-12 {
            return Err(PlantError::Config("sim_dt must not exceed the odometry period"));
        }
        let substeps = period / self.sim_dt;
        if (substeps - substeps.round()).abs() > 1e-6 {
            return Err(PlantError::Config("odometry period must be an integer number of sim steps"));
        }
        Ok(())
    }

    /// Integration substeps per odometry period.
    pub fn substeps_per_period(&self) -> u64 {
        (1.0 / (self.odom_rate * self.sim_dt)).round() as u64
    }
}

/// One trajectory log row, sampled at every odometry publication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    /// Simulated seconds since plant start.
    pub t_s: f64,
    pub state: VehicleState64,
    /// Input under zero-order hold at this instant.
    pub applied: ControlInput64,
    /// Sequence number of the odometry published at this sample.
    pub odom_seq: u64,
    /// Command sequence of the input under hold, for joining plant samples
    /// with the controller's per-cycle reference log.
    pub applied_cmd_seq: Option<u64>,
}

/// Everything the plant records during a run.
#[derive(Debug, Clone, Default)]
pub struct PlantLogs {
    pub trajectory: Vec<TrajectorySample>,
    pub latency: Vec<LatencyRecord>,
    /// Nanoseconds between consecutive accepted command arrivals, indexed by
    /// the cycle of the later command.
    pub intervals: Vec<(u64, u64)>,
    pub stale_discards: u64,
    pub unknown_echo_discards: u64,
    pub odometry_published: u64,
    pub commands_accepted: u64,
}

/// Clock-agnostic plant state machine.
#[derive(Debug)]
pub struct PlantCore {
    cfg: PlantConfig,
    state: VehicleState64,
    applied: ControlInput64,
    next_seq: u64,
    latest_published_seq: u64,
    gate: CommandGate,
    last_accept_ns: Option<u64>,
    applied_cmd_seq: Option<u64>,
    sim_time_s: f64,
    logs: PlantLogs,
}

impl PlantCore {
    pub fn new(cfg: PlantConfig) -> Result<Self, PlantError> {
        cfg.validate()?;
        let applied = hover_input(&cfg.params);
        let state = cfg.initial_state;
        Ok(Self {
            cfg,
            state,
            applied,
            next_seq: 1,
            latest_published_seq: 0,
            gate: CommandGate::new(),
            last_accept_ns: None,
            applied_cmd_seq: None,
            sim_time_s: 0.0,
            logs: PlantLogs::default(),
        })
    }

    pub fn state(&self) -> &VehicleState64 {
        &self.state
    }

    pub fn applied_input(&self) -> &ControlInput64 {
        &self.applied
    }

    pub fn sim_time_s(&self) -> f64 {
        self.sim_time_s
    }

    /// Offer a received command; `arrival_ns` is its delay-matured arrival
    /// time. Accepted commands replace the held input under zero-order hold.
    pub fn on_command(&mut self, cmd: &CommandMsg, arrival_ns: u64) {
        match self.gate.admit(cmd, arrival_ns, self.latest_published_seq) {
            Admission::Accepted(record) => {
                self.applied = project(&[cmd.input], &self.cfg.input_limits)[0];
                self.applied_cmd_seq = Some(cmd.seq);
                if let Some(prev) = self.last_accept_ns {
                    self.logs.intervals.push((record.cycle, arrival_ns.saturating_sub(prev)));
                }
                self.last_accept_ns = Some(arrival_ns);
                self.logs.latency.push(record);
                self.logs.commands_accepted = self.gate.accepted();
            }
            Admission::Stale => self.logs.stale_discards = self.gate.stale_discards(),
            Admission::UnknownEcho => {
                self.logs.unknown_echo_discards = self.gate.unknown_discards()
            }
        }
    }

    /// Advance the truth model by one `sim_dt` step under the held input.
    pub fn integrate_substep(&mut self) -> Result<(), PlantError> {
        self.state = euler_step(&self.state, &self.applied, &self.cfg.params, self.cfg.sim_dt)?;
        self.sim_time_s += self.cfg.sim_dt;
        Ok(())
    }

    /// Emit the next odometry sample and append the trajectory row.
    pub fn publish_odometry(&mut self, now_ns: u64) -> OdometryMsg {
        let msg = OdometryMsg { seq: self.next_seq, sent_at: now_ns, state: self.state };
        self.logs.trajectory.push(TrajectorySample {
            t_s: self.sim_time_s,
            state: self.state,
            applied: self.applied,
            odom_seq: self.next_seq,
            applied_cmd_seq: self.applied_cmd_seq,
        });
        self.latest_published_seq = self.next_seq;
        self.next_seq += 1;
        self.logs.odometry_published += 1;
        msg
    }

    pub fn into_logs(self) -> PlantLogs {
        self.logs
    }

    pub fn logs(&self) -> &PlantLogs {
        &self.logs
    }
}

/// Run the plant against the controller over TCP until `stop` is set or the
/// link drops. Received commands sit in a delay channel for `one_way_delay`
/// before becoming visible, emulating the network toward the vehicle.
pub fn run_plant(
    cfg: PlantConfig,
    one_way_delay: Duration,
    stop: Arc<AtomicBool>,
) -> Result<(PlantLogs, LinkStatus), PlantError> {
    let mut core = PlantCore::new(cfg.clone())?;

    let stream = connect_with_retry(&cfg.endpoint, &stop)?;
    let Some(mut stream) = stream else {
        // Stopped before the controller ever listened.
        return Ok((core.into_logs(), LinkStatus::Clean));
    };
    stream.set_nodelay(true).ok();

    let delayed: DelayChannel<CommandMsg> = DelayChannel::new(one_way_delay.as_nanos() as u64);
    let reader_stream = stream.try_clone().map_err(|source| PlantError::Connect {
        endpoint: cfg.endpoint.clone(),
        source,
    })?;
    let reader_channel = delayed.clone();
    let reader = std::thread::spawn(move || read_commands(reader_stream, reader_channel));

    let substeps = cfg.substeps_per_period();
    let mut pacer = Pacer::new((cfg.sim_dt * 1e9).round() as u64);
    let mut substep: u64 = 0;
    let mut status = LinkStatus::Clean;

    loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        pacer.wait_tick();

        for (due, cmd) in delayed.drain_matured(now_ns()) {
            core.on_command(&cmd, due);
        }

        if substep % substeps == 0 {
            let odo = core.publish_odometry(now_ns());
            if stream.write_all(&encode(&WireMessage::Odometry(odo))).is_err() {
                status = LinkStatus::LinkLost;
                break;
            }
        }
        core.integrate_substep()?;
        substep += 1;

        if delayed.is_closed_and_empty() {
            status = if stop.load(Ordering::Relaxed) { LinkStatus::Clean } else { LinkStatus::LinkLost };
            break;
        }
    }

    stream.shutdown(std::net::Shutdown::Both).ok();
    reader.join().ok();
    Ok((core.into_logs(), status))
}

fn connect_with_retry(
    endpoint: &str,
    stop: &AtomicBool,
) -> Result<Option<TcpStream>, PlantError> {
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    loop {
        match TcpStream::connect(endpoint) {
            Ok(stream) => return Ok(Some(stream)),
            Err(source) => {
                if stop.load(Ordering::Relaxed) {
                    return Ok(None);
                }
                if std::time::Instant::now() >= deadline {
                    return Err(PlantError::Connect { endpoint: endpoint.to_string(), source });
                }
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

fn read_commands(mut stream: TcpStream, channel: DelayChannel<CommandMsg>) {
    let mut decoder = FrameDecoder::new();
    let mut buf = [0u8; 4096];
    loop {
        match stream.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                decoder.feed(&buf[..n]);
                loop {
                    match decoder.next_message() {
                        Ok(Some(WireMessage::Command(cmd))) => {
                            channel.push(cmd);
                        }
                        Ok(Some(WireMessage::Odometry(_))) => {
                            // The controller never sends odometry; ignore.
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
    use crate::dynamics::ControlInput;
    use nalgebra::Vector3;

    fn cfg() -> PlantConfig {
        PlantConfig::default()
    }

    fn command(echo_seq: u64, input: ControlInput64) -> CommandMsg {
        CommandMsg {
            seq: echo_seq,
            sent_at: 0,
            echo_seq,
            echo_sent_at: echo_seq * 50_000_000,
            exec_ns: 1_000_000,
            input,
        }
    }

    #[test]
    fn config_requires_integer_substeps() {
        let mut c = cfg();
        c.sim_dt = 0.003; // 50 ms / 3 ms is not integral
        assert!(c.validate().is_err());
        c.sim_dt = 0.005;
        assert!(c.validate().is_ok());
        assert_eq!(c.substeps_per_period(), 10);
        c.sim_dt = 0.06; // larger than the period
        assert!(c.validate().is_err());
    }

    #[test]
    fn uncommanded_plant_hovers_in_place() {
        let mut core = PlantCore::new(cfg()).unwrap();
        for _ in 0..200 {
            core.integrate_substep().unwrap();
        }
        assert_eq!(core.state(), &VehicleState64::at_rest());
    }

    #[test]
    fn constant_excess_thrust_accelerates_one_meter_per_second() {
        // v_z after 1 s of (g + 1) thrust, against a 10x finer reference and
        // the drag-corrected expectation.
        let mut core = PlantCore::new(cfg()).unwrap();
        core.publish_odometry(0);
        let input = ControlInput::new(core.cfg.params.gravity + 1.0, 0.0, 0.0).unwrap();
        core.on_command(&command(1, input), 1000);
        for _ in 0..200 {
            core.integrate_substep().unwrap();
        }

        let mut fine = VehicleState64::at_rest();
        for _ in 0..2000 {
            fine = euler_step(&fine, &input, &cfg().params, 0.0005).unwrap();
        }
        let vz = core.state().v[2];
        assert!((vz - fine.v[2]).abs() < 1e-3, "vz {} vs fine {}", vz, fine.v[2]);
        assert!((vz - 1.0).abs() < 0.06, "vz {} should be ~1 with small drag correction", vz);
    }

    #[test]
    fn zero_order_hold_between_commands() {
        let mut core = PlantCore::new(cfg()).unwrap();
        core.publish_odometry(0);
        let input = ControlInput::new(12.0, 0.1, -0.1).unwrap();
        core.on_command(&command(1, input), 10);
        for step in 0..50 {
            core.integrate_substep().unwrap();
            if step % 10 == 0 {
                core.publish_odometry(step * 5_000_000);
            }
            assert_eq!(core.applied_input(), &input);
        }
        let rows = &core.logs().trajectory;
        assert!(rows[1..].iter().all(|r| r.applied == input));
    }

    #[test]
    fn stale_commands_do_not_replace_the_held_input() {
        let mut core = PlantCore::new(cfg()).unwrap();
        for _ in 0..5 {
            core.publish_odometry(0);
        }
        let newer = ControlInput::new(12.0, 0.0, 0.0).unwrap();
        let older = ControlInput::new(5.0, 0.0, 0.0).unwrap();
        core.on_command(&command(4, newer), 100);
        core.on_command(&command(2, older), 200); // reordered arrival
        assert_eq!(core.applied_input(), &newer);
        assert_eq!(core.logs().stale_discards, 1);
        assert_eq!(core.logs().latency.len(), 1);
    }

    #[test]
    fn accepted_commands_are_saturated_to_the_input_limits() {
        let mut core = PlantCore::new(cfg()).unwrap();
        core.publish_odometry(0);
        let wild = ControlInput::new(100.0, 0.0, 0.0).unwrap();
        core.on_command(&command(1, wild), 10);
        assert_eq!(core.applied_input().thrust, cfg().input_limits.thrust_max);
    }

    #[test]
    fn intervals_and_latency_records_accumulate() {
        let mut core = PlantCore::new(cfg()).unwrap();
        for _ in 0..10 {
            core.publish_odometry(0);
        }
        let input = ControlInput::new(9.81, 0.0, 0.0).unwrap();
        core.on_command(&command(1, input), 50_000_000);
        core.on_command(&command(2, input), 100_000_000);
        core.on_command(&command(3, input), 152_000_000);
        let logs = core.logs();
        assert_eq!(logs.latency.len(), 3);
        assert_eq!(logs.intervals.len(), 2);
        assert_eq!(logs.intervals[0], (1, 50_000_000));
        assert_eq!(logs.intervals[1], (2, 52_000_000));
        for r in &logs.latency {
            assert_eq!(r.l_total_ns as i64, r.l_rtd_ns + r.l_exec_ns as i64);
        }
    }

    #[test]
    fn odometry_sequence_increments_by_one() {
        let mut core = PlantCore::new(cfg()).unwrap();
        let seqs: Vec<u64> = (0..5).map(|i| core.publish_odometry(i).seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4, 5]);
    }
}
