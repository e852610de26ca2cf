//! Wire protocol between plant and controller, plus delay injection and
//! round-trip latency accounting.
//!
//! Frames are length-prefixed: a 4-byte little-endian payload length, then a
//! 1-byte type tag, 8-byte sequence number, 8-byte send timestamp, and a
//! type-specific body. All scalars travel as 64-bit IEEE-754 little-endian.
//!
//! Commands echo the sequence number and send timestamp of the odometry
//! sample they answer, so the plant can compute round-trip latency entirely
//! on its own monotonic clock.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

use crate::dynamics::{ControlInput, VehicleState};
use crate::time::now_ns;
use crate::{ControlInput64, VehicleState64};

use nalgebra::Vector3;

/// Default controller listen endpoint.
pub const DEFAULT_ENDPOINT: &str = "127.0.0.1:7447";

pub const ODOMETRY_TAG: u8 = 0x01;
pub const COMMAND_TAG: u8 = 0x02;
/// Payload bytes: tag + seq + sent_at + 8 state doubles.
pub const ODOMETRY_PAYLOAD_LEN: usize = 1 + 8 + 8 + 8 * 8;
/// Payload bytes: tag + seq + sent_at + echo_seq + echo_sent_at + exec_ns + 3 input doubles.
pub const COMMAND_PAYLOAD_LEN: usize = 1 + 8 + 8 + 8 + 8 + 8 + 3 * 8;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("unknown message tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("payload length {len} does not match tag 0x{tag:02x}")]
    LengthMismatch { tag: u8, len: usize },
    #[error("frame length {0} exceeds the largest defined message")]
    FrameTooLarge(u32),
    #[error("message field failed validation: {0}")]
    InvalidField(&'static str),
}

/// Vehicle state sample streamed plant -> controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryMsg {
    /// Strictly increasing per connection.
    pub seq: u64,
    /// Sender-monotonic nanoseconds at publish time.
    pub sent_at: u64,
    pub state: VehicleState64,
}

/// Command streamed controller -> plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommandMsg {
    pub seq: u64,
    /// Sender-monotonic nanoseconds at send time.
    pub sent_at: u64,
    /// Sequence number of the odometry sample this command answers.
    pub echo_seq: u64,
    /// That odometry's `sent_at`, copied verbatim.
    pub echo_sent_at: u64,
    /// Controller compute duration for this cycle (ns).
    pub exec_ns: u64,
    pub input: ControlInput64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WireMessage {
    Odometry(OdometryMsg),
    Command(CommandMsg),
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Encode a message as one length-prefixed frame.
pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let payload_len = match msg {
        WireMessage::Odometry(_) => ODOMETRY_PAYLOAD_LEN,
        WireMessage::Command(_) => COMMAND_PAYLOAD_LEN,
    };
    let mut buf = Vec::with_capacity(4 + payload_len);
    buf.extend_from_slice(&(payload_len as u32).to_le_bytes());
    match msg {
        WireMessage::Odometry(m) => {
            buf.push(ODOMETRY_TAG);
            put_u64(&mut buf, m.seq);
            put_u64(&mut buf, m.sent_at);
            for i in 0..3 {
                put_f64(&mut buf, m.state.p[i]);
            }
            for i in 0..3 {
                put_f64(&mut buf, m.state.v[i]);
            }
            put_f64(&mut buf, m.state.phi);
            put_f64(&mut buf, m.state.theta);
        }
        WireMessage::Command(m) => {
            buf.push(COMMAND_TAG);
            put_u64(&mut buf, m.seq);
            put_u64(&mut buf, m.sent_at);
            put_u64(&mut buf, m.echo_seq);
            put_u64(&mut buf, m.echo_sent_at);
            put_u64(&mut buf, m.exec_ns);
            put_f64(&mut buf, m.input.thrust);
            put_f64(&mut buf, m.input.phi_d);
            put_f64(&mut buf, m.input.theta_d);
        }
    }
    debug_assert_eq!(buf.len(), 4 + payload_len);
    buf
}

fn get_u64(payload: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(payload[at..at + 8].try_into().unwrap())
}

fn get_f64(payload: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(payload[at..at + 8].try_into().unwrap())
}

fn decode_payload(payload: &[u8]) -> Result<WireMessage, ProtocolError> {
    let tag = payload[0];
    match tag {
        ODOMETRY_TAG => {
            if payload.len() != ODOMETRY_PAYLOAD_LEN {
                return Err(ProtocolError::LengthMismatch { tag, len: payload.len() });
            }
            let state = VehicleState::new(
                Vector3::new(get_f64(payload, 17), get_f64(payload, 25), get_f64(payload, 33)),
                Vector3::new(get_f64(payload, 41), get_f64(payload, 49), get_f64(payload, 57)),
                get_f64(payload, 65),
                get_f64(payload, 73),
            )
            .map_err(|_| ProtocolError::InvalidField("odometry state"))?;
            Ok(WireMessage::Odometry(OdometryMsg {
                seq: get_u64(payload, 1),
                sent_at: get_u64(payload, 9),
                state,
            }))
        }
        COMMAND_TAG => {
            if payload.len() != COMMAND_PAYLOAD_LEN {
                return Err(ProtocolError::LengthMismatch { tag, len: payload.len() });
            }
            let input =
                ControlInput::new(get_f64(payload, 41), get_f64(payload, 49), get_f64(payload, 57))
                    .map_err(|_| ProtocolError::InvalidField("command input"))?;
            Ok(WireMessage::Command(CommandMsg {
                seq: get_u64(payload, 1),
                sent_at: get_u64(payload, 9),
                echo_seq: get_u64(payload, 17),
                echo_sent_at: get_u64(payload, 25),
                exec_ns: get_u64(payload, 33),
                input,
            }))
        }
        other => Err(ProtocolError::UnknownTag(other)),
    }
}

/// Incremental frame decoder: feed arbitrary byte chunks, pop complete
/// messages. Byte-stream partitioning never changes the decoded sequence.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: VecDeque<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        self.buf.extend(bytes);
    }

    /// Decode the next complete frame, or `None` when more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<WireMessage>, ProtocolError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let mut len_bytes = [0u8; 4];
        for (i, b) in self.buf.iter().take(4).enumerate() {
            len_bytes[i] = *b;
        }
        let payload_len = u32::from_le_bytes(len_bytes);
        if payload_len as usize > ODOMETRY_PAYLOAD_LEN.max(COMMAND_PAYLOAD_LEN) {
            return Err(ProtocolError::FrameTooLarge(payload_len));
        }
        if self.buf.len() < 4 + payload_len as usize {
            return Ok(None);
        }
        self.buf.drain(..4);
        let payload: Vec<u8> = self.buf.drain(..payload_len as usize).collect();
        if payload.is_empty() {
            return Err(ProtocolError::LengthMismatch { tag: 0, len: 0 });
        }
        decode_payload(&payload).map(Some)
    }
}

/// Decode exactly one message from a complete frame.
pub fn decode(frame: &[u8]) -> Result<WireMessage, ProtocolError> {
    let mut decoder = FrameDecoder::new();
    decoder.feed(frame);
    match decoder.next_message()? {
        Some(msg) => Ok(msg),
        None => Err(ProtocolError::LengthMismatch { tag: 0, len: frame.len() }),
    }
}

/// FIFO channel that releases each message no earlier than its enqueue time
/// plus a fixed one-way delay. Zero delay degrades to pass-through.
///
/// Safe to feed and drain from different threads; the receiver can block with
/// [`DelayChannel::recv`] or poll with [`DelayChannel::drain_matured`].
#[derive(Debug)]
pub struct DelayChannel<M> {
    shared: Arc<DelayShared<M>>,
}

#[derive(Debug)]
struct DelayShared<M> {
    delay_ns: u64,
    queue: Mutex<DelayQueue<M>>,
    available: Condvar,
}

#[derive(Debug)]
struct DelayQueue<M> {
    items: VecDeque<(u64, M)>,
    closed: bool,
}

impl<M> Clone for DelayChannel<M> {
    fn clone(&self) -> Self {
        Self { shared: Arc::clone(&self.shared) }
    }
}

impl<M> DelayChannel<M> {
    pub fn new(delay_ns: u64) -> Self {
        Self {
            shared: Arc::new(DelayShared {
                delay_ns,
                queue: Mutex::new(DelayQueue { items: VecDeque::new(), closed: false }),
                available: Condvar::new(),
            }),
        }
    }

    pub fn delay_ns(&self) -> u64 {
        self.shared.delay_ns
    }

    /// Enqueue now; the message matures at `now + delay`. Returns the
    /// maturation time.
    pub fn push(&self, msg: M) -> u64 {
        let due = now_ns() + self.shared.delay_ns;
        let mut q = self.shared.queue.lock().unwrap();
        q.items.push_back((due, msg));
        drop(q);
        self.shared.available.notify_all();
        due
    }

    /// Mark the channel closed; blocked receivers drain and then observe EOF.
    pub fn close(&self) {
        self.shared.queue.lock().unwrap().closed = true;
        self.shared.available.notify_all();
    }

    /// Pop every message matured at `now`, oldest first, with maturation times.
    pub fn drain_matured(&self, now: u64) -> Vec<(u64, M)> {
        let mut q = self.shared.queue.lock().unwrap();
        let mut out = Vec::new();
        while let Some((due, _)) = q.items.front() {
            if *due <= now {
                out.push(q.items.pop_front().unwrap());
            } else {
                break;
            }
        }
        out
    }

    /// Block until a message matures or the channel closes empty. Returns the
    /// message with its maturation time.
    pub fn recv(&self) -> Option<(u64, M)> {
        loop {
            match self.recv_timeout(Duration::from_millis(50)) {
                RecvOutcome::Matured(item) => return Some(item),
                RecvOutcome::Closed => return None,
                RecvOutcome::TimedOut => {}
            }
        }
    }

    /// Bounded-wait receive, so callers can interleave shutdown checks.
    pub fn recv_timeout(&self, timeout: Duration) -> RecvOutcome<(u64, M)> {
        let deadline = std::time::Instant::now() + timeout;
        let mut q = self.shared.queue.lock().unwrap();
        loop {
            if let Some((due, _)) = q.items.front() {
                let due = *due;
                let now = now_ns();
                if due <= now {
                    return RecvOutcome::Matured(q.items.pop_front().unwrap());
                }
                let until_due = Duration::from_nanos(due - now);
                let remaining = deadline.saturating_duration_since(std::time::Instant::now());
                if remaining.is_zero() {
                    return RecvOutcome::TimedOut;
                }
                let (next, _) =
                    self.shared.available.wait_timeout(q, until_due.min(remaining)).unwrap();
                q = next;
            } else {
                if q.closed {
                    return RecvOutcome::Closed;
                }
                let remaining = deadline.saturating_duration_since(std::time::Instant::now());
                if remaining.is_zero() {
                    return RecvOutcome::TimedOut;
                }
                let (next, _) = self.shared.available.wait_timeout(q, remaining).unwrap();
                q = next;
            }
        }
    }

    pub fn is_closed_and_empty(&self) -> bool {
        let q = self.shared.queue.lock().unwrap();
        q.closed && q.items.is_empty()
    }
}

/// Result of a bounded-wait receive on a [`DelayChannel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecvOutcome<I> {
    Matured(I),
    TimedOut,
    Closed,
}

/// Per-cycle latency triple, stored in integer nanoseconds so the identity
/// `l_total = l_exec + l_rtd` and the 6-decimal millisecond CSV rendering are
/// both exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyRecord {
    pub cycle: u64,
    pub l_exec_ns: u64,
    pub l_rtd_ns: i64,
    pub l_total_ns: u64,
}

impl LatencyRecord {
    pub fn l_exec_ms(&self) -> f64 {
        self.l_exec_ns as f64 / 1e6
    }
    pub fn l_rtd_ms(&self) -> f64 {
        self.l_rtd_ns as f64 / 1e6
    }
    pub fn l_total_ms(&self) -> f64 {
        self.l_total_ns as f64 / 1e6
    }
}

/// Latency fields from a command echo, all on the receiver's clock: total is
/// `now - echo_sent_at`, execution is the controller-reported compute time,
/// and the round trip is their difference.
pub fn rtl_from_echo(cmd: &CommandMsg, now_ns: u64, cycle: u64) -> LatencyRecord {
    let l_total_ns = now_ns.saturating_sub(cmd.echo_sent_at);
    let l_rtd_ns = l_total_ns as i64 - cmd.exec_ns as i64;
    LatencyRecord { cycle, l_exec_ns: cmd.exec_ns, l_rtd_ns, l_total_ns }
}

/// Outcome of offering a received command to the plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Admission {
    Accepted(LatencyRecord),
    /// Echoes an odometry older than the last applied command's echo.
    Stale,
    /// Echoes a sequence this receiver never published.
    UnknownEcho,
}

/// Command admission: drops stale and unknown echoes, numbers the accepted
/// cycles, and produces one latency record per accepted command.
#[derive(Debug, Default)]
pub struct CommandGate {
    last_applied_echo: Option<u64>,
    accepted: u64,
    stale_discards: u64,
    unknown_discards: u64,
}

impl CommandGate {
    pub fn new() -> Self {
        Self::default()
    }

    /// `now_ns` is the command's arrival (delay-matured) time on this host;
    /// `latest_published_seq` is the newest odometry sequence sent so far.
    pub fn admit(
        &mut self,
        cmd: &CommandMsg,
        now_ns: u64,
        latest_published_seq: u64,
    ) -> Admission {
        if cmd.echo_seq > latest_published_seq {
            self.unknown_discards += 1;
            return Admission::UnknownEcho;
        }
        if let Some(last) = self.last_applied_echo {
            if cmd.echo_seq < last {
                self.stale_discards += 1;
                return Admission::Stale;
            }
        }
        let record = rtl_from_echo(cmd, now_ns, self.accepted);
        self.accepted += 1;
        self.last_applied_echo = Some(cmd.echo_seq);
        Admission::Accepted(record)
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }
    pub fn stale_discards(&self) -> u64 {
        self.stale_discards
    }
    pub fn unknown_discards(&self) -> u64 {
        self.unknown_discards
    }
}
