//! Framed PC-to-device coordination protocol over an abstract byte stream.
//!
//! The coordinator assigns a channel to each device per slot and reads back
//! the ACK bit. Devices here are in-memory mocks that resolve transmissions
//! through the shared slot aggregator, but the wire format and the
//! [`Transport`] trait are the extension point for real serial links.
//!
//! Wire layout (checksum is the XOR of all preceding bytes):
//!
//! ```text
//! 0x49 0x54 | version | msg_type | agent_id | payload_len | payload... | checksum
//! ```

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::env::{self, ChannelPlan, LinkModel};
use crate::rng;
use crate::sim::{self, AgentState, EpisodeMetrics, SimError, SimParams, SlotBackend};
use crate::dqn::Transition;

pub const MAGIC: [u8; 2] = [0x49, 0x54];
pub const VERSION: u8 = 0x01;

/// Error codes carried in the payload of an ERROR frame.
pub const ERR_CHECKSUM: u8 = 0x01;
pub const ERR_TRUNCATED: u8 = 0x02;
pub const ERR_BAD_MAGIC: u8 = 0x03;
pub const ERR_UNKNOWN_TYPE: u8 = 0x04;
pub const ERR_BAD_VERSION: u8 = 0x05;
pub const ERR_BAD_PAYLOAD: u8 = 0x06;
pub const ERR_ENV: u8 = 0x07;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgType {
    AssignChannel = 0x01,
    TxResult = 0x02,
    Ping = 0x03,
    Pong = 0x04,
    Error = 0x7F,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(Self::AssignChannel),
            0x02 => Some(Self::TxResult),
            0x03 => Some(Self::Ping),
            0x04 => Some(Self::Pong),
            0x7F => Some(Self::Error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub agent_id: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, agent_id: u8, payload: Vec<u8>) -> Self {
        Self { msg_type, agent_id, payload }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    #[error("no frame magic in buffer")]
    BadMagic,
    #[error("frame truncated")]
    Truncated,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("unknown message type {0:#04x}")]
    UnknownMsgType(u8),
    #[error("unsupported protocol version {0:#04x}")]
    BadVersion(u8),
}

impl DecodeError {
    fn code(&self) -> u8 {
        match self {
            DecodeError::ChecksumMismatch => ERR_CHECKSUM,
            DecodeError::Truncated => ERR_TRUNCATED,
            DecodeError::BadMagic => ERR_BAD_MAGIC,
            DecodeError::UnknownMsgType(_) => ERR_UNKNOWN_TYPE,
            DecodeError::BadVersion(_) => ERR_BAD_VERSION,
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum TransportError {
    #[error("transport read timed out")]
    TimedOut,
    #[error("transport closed")]
    Closed,
}

#[derive(Debug, Error)]
pub enum HilError {
    #[error("payload of {0} bytes exceeds the 255-byte frame limit")]
    PayloadTooLarge(usize),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

/// Serialize a frame to its exact wire bytes.
pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, HilError> {
    if f.payload.len() > 255 {
        return Err(HilError::PayloadTooLarge(f.payload.len()));
    }
    let mut out = Vec::with_capacity(7 + f.payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(f.msg_type as u8);
    out.push(f.agent_id);
    out.push(f.payload.len() as u8);
    out.extend_from_slice(&f.payload);
    let checksum = out.iter().fold(0u8, |acc, b| acc ^ b);
    out.push(checksum);
    Ok(out)
}

const HEADER_LEN: usize = 6; // magic(2) version type agent_id payload_len

enum ParseAttempt {
    Valid(Frame, usize),
    Invalid(DecodeError),
    Incomplete,
}

fn try_parse_at(buf: &[u8], start: usize) -> ParseAttempt {
    let b = &buf[start..];
    if b.len() < HEADER_LEN + 1 {
        return ParseAttempt::Incomplete;
    }
    let payload_len = b[5] as usize;
    let total = HEADER_LEN + payload_len + 1;
    if b.len() < total {
        return ParseAttempt::Incomplete;
    }
    let checksum = b[..total - 1].iter().fold(0u8, |acc, x| acc ^ x);
    if checksum != b[total - 1] {
        return ParseAttempt::Invalid(DecodeError::ChecksumMismatch);
    }
    if b[2] != VERSION {
        return ParseAttempt::Invalid(DecodeError::BadVersion(b[2]));
    }
    let Some(msg_type) = MsgType::from_byte(b[3]) else {
        return ParseAttempt::Invalid(DecodeError::UnknownMsgType(b[3]));
    };
    let frame = Frame::new(msg_type, b[4], b[4 + 2..4 + 2 + payload_len].to_vec());
    ParseAttempt::Valid(frame, start + total)
}

fn find_magic(buf: &[u8], from: usize) -> Option<usize> {
    if buf.len() < 2 {
        return None;
    }
    (from..buf.len() - 1).find(|&i| buf[i] == MAGIC[0] && buf[i + 1] == MAGIC[1])
}

/// Decode the first valid frame in `bytes`, skipping leading garbage.
/// Returns the frame and how many bytes were consumed. If no valid frame
/// exists, reports the first failure encountered while scanning.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), DecodeError> {
    let mut pos = 0;
    let mut first_error: Option<DecodeError> = None;
    while let Some(m) = find_magic(bytes, pos) {
        match try_parse_at(bytes, m) {
            ParseAttempt::Valid(frame, consumed) => return Ok((frame, consumed)),
            ParseAttempt::Incomplete => {
                first_error.get_or_insert(DecodeError::Truncated);
            }
            ParseAttempt::Invalid(e) => {
                first_error.get_or_insert(e);
            }
        }
        pos = m + 1;
    }
    Err(first_error.unwrap_or(DecodeError::BadMagic))
}

/// Streaming decoder: buffers partial reads, resynchronizes on the magic
/// after corruption, and never hands a partial frame upward.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_bytes(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, a decode error (one corrupt candidate consumed),
    /// or `None` when more bytes are needed.
    pub fn next_frame(&mut self) -> Option<Result<Frame, DecodeError>> {
        match find_magic(&self.buf, 0) {
            Some(m) => match try_parse_at(&self.buf, m) {
                ParseAttempt::Valid(frame, consumed) => {
                    self.buf.drain(..consumed);
                    Some(Ok(frame))
                }
                ParseAttempt::Incomplete => {
                    self.buf.drain(..m);
                    None
                }
                ParseAttempt::Invalid(e) => {
                    self.buf.drain(..m + 1);
                    Some(Err(e))
                }
            },
            None => {
                // keep a possible partial magic at the tail
                let keep = self.buf.last() == Some(&MAGIC[0]);
                let tail = if keep { self.buf.len() - 1 } else { self.buf.len() };
                self.buf.drain(..tail);
                None
            }
        }
    }
}

/// Duplex byte stream with blocking reads under a timeout.
pub trait Transport: Send {
    fn send(&mut self, bytes: &[u8]) -> Result<(), TransportError>;
    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>, TransportError>;
}

/// In-memory transport endpoint. `pair()` yields two connected ends.
pub struct MockTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl MockTransport {
    pub fn pair() -> (MockTransport, MockTransport) {
        let (tx_a, rx_b) = mpsc::channel();
        let (tx_b, rx_a) = mpsc::channel();
        (MockTransport { tx: tx_a, rx: rx_a }, MockTransport { tx: tx_b, rx: rx_b })
    }
}

impl Transport for MockTransport {
    fn send(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        self.tx.send(bytes.to_vec()).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>, TransportError> {
        match self.rx.recv_timeout(timeout) {
            Ok(bytes) => Ok(bytes),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::TimedOut),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }
}

/// Frame-level endpoint over a transport: owns the stream decoder.
pub struct FramedPort<T: Transport> {
    transport: T,
    decoder: FrameDecoder,
}

impl<T: Transport> FramedPort<T> {
    pub fn new(transport: T) -> Self {
        Self { transport, decoder: FrameDecoder::new() }
    }

    pub fn send(&mut self, frame: &Frame) -> Result<(), HilError> {
        let bytes = encode_frame(frame)?;
        self.transport.send(&bytes)?;
        Ok(())
    }

    /// Blocking read of the next frame. Decode errors surface to the caller;
    /// timeouts and closure surface as transport errors.
    pub fn recv(&mut self, timeout: Duration) -> Result<Frame, HilError> {
        loop {
            if let Some(result) = self.decoder.next_frame() {
                return result.map_err(HilError::from);
            }
            let bytes = self.transport.recv(timeout)?;
            self.decoder.push_bytes(&bytes);
        }
    }
}

/// Joint-slot barrier shared by mock devices: collects one channel choice
/// per device, resolves the slot once, and hands each device its ACK.
pub struct SlotAggregator {
    plan: ChannelPlan,
    link: LinkModel,
    num_agents: usize,
    state: Mutex<AggregatorState>,
    cv: Condvar,
}

struct AggregatorState {
    rng: rand_chacha::ChaCha8Rng,
    choices: Vec<Option<usize>>,
    acks: Option<Vec<bool>>,
    fetched: usize,
}

impl SlotAggregator {
    pub fn new(plan: ChannelPlan, link: LinkModel, num_agents: usize, env_seed: u64) -> Self {
        Self {
            plan,
            link,
            num_agents,
            state: Mutex::new(AggregatorState {
                rng: rng::env_stream(env_seed),
                choices: vec![None; num_agents],
                acks: None,
                fetched: 0,
            }),
            cv: Condvar::new(),
        }
    }

    /// Submit this device's choice for the current slot and block until the
    /// joint outcome is known. Returns the device's ACK bit.
    pub fn submit_and_wait(&self, agent: usize, channel: usize) -> Result<bool, SimError> {
        let mut st = self.state.lock().unwrap();
        st.choices[agent] = Some(channel);
        if st.choices.iter().all(|c| c.is_some()) {
            let choices: Vec<usize> = st.choices.iter().map(|c| c.unwrap()).collect();
            let outcome = env::resolve_slot(&self.plan, &self.link, &choices, &mut st.rng)?;
            st.acks = Some(outcome.agents.iter().map(|a| a.success).collect());
            self.cv.notify_all();
        }
        while st.acks.is_none() {
            st = self.cv.wait(st).unwrap();
        }
        let ack = st.acks.as_ref().unwrap()[agent];
        st.fetched += 1;
        if st.fetched == self.num_agents {
            st.choices.fill(None);
            st.acks = None;
            st.fetched = 0;
        }
        Ok(ack)
    }
}

/// Mock end device: answers ASSIGN_CHANNEL with TX_RESULT (consulting the
/// slot aggregator), PING with PONG, and anything malformed with ERROR.
/// Runs until the transport closes.
pub fn mock_device<T: Transport>(
    mut port: FramedPort<T>,
    agent_id: u8,
    aggregator: Arc<SlotAggregator>,
) {
    loop {
        let frame = match port.recv(Duration::from_secs(3600)) {
            Ok(f) => f,
            Err(HilError::Decode(e)) => {
                let _ = port.send(&Frame::new(MsgType::Error, agent_id, vec![e.code()]));
                continue;
            }
            Err(_) => return,
        };
        let reply = match frame.msg_type {
            MsgType::Ping => Frame::new(MsgType::Pong, agent_id, Vec::new()),
            MsgType::AssignChannel => {
                if frame.payload.len() != 1 {
                    Frame::new(MsgType::Error, agent_id, vec![ERR_BAD_PAYLOAD])
                } else {
                    match aggregator.submit_and_wait(agent_id as usize, frame.payload[0] as usize)
                    {
                        Ok(ack) => Frame::new(MsgType::TxResult, agent_id, vec![ack as u8]),
                        Err(_) => Frame::new(MsgType::Error, agent_id, vec![ERR_ENV]),
                    }
                }
            }
            _ => Frame::new(MsgType::Error, agent_id, vec![ERR_UNKNOWN_TYPE]),
        };
        if port.send(&reply).is_err() {
            return;
        }
    }
}

/// One coordinator round-trip for a single agent: select the epsilon-greedy
/// action, assign it over the wire, and map the ACK reply to a transition.
/// A TX_RESULT timeout counts as no-ACK; transport failure is an error.
/// Returns the transition and whether the device timed out.
pub fn coordinator_step<T: Transport>(
    agent: &mut AgentState,
    port: &mut FramedPort<T>,
    epsilon: f64,
    timeout: Duration,
) -> Result<(Transition, bool), HilError> {
    let action = agent.net.select_action(agent.state, epsilon, &mut agent.policy_rng);
    port.send(&Frame::new(MsgType::AssignChannel, agent.id as u8, vec![action as u8]))?;
    match port.recv(timeout) {
        Ok(frame) if frame.msg_type == MsgType::TxResult => {
            let ack = frame.payload.first().copied() == Some(1);
            Ok((Transition::from_ack(agent.state, action, ack), false))
        }
        Ok(frame) => Err(HilError::Protocol(format!(
            "expected TX_RESULT, got {:?}",
            frame.msg_type
        ))),
        Err(HilError::Transport(TransportError::TimedOut)) => {
            Ok((Transition::from_ack(agent.state, action, false), true))
        }
        Err(e) => Err(e),
    }
}

/// Slot backend that routes every transmission through the framed protocol,
/// one port per device. TX_RESULT timeouts count as no-ACK.
pub struct HilBackend<T: Transport> {
    ports: Vec<FramedPort<T>>,
    timeout: Duration,
}

impl<T: Transport> HilBackend<T> {
    pub fn new(ports: Vec<FramedPort<T>>, timeout: Duration) -> Self {
        Self { ports, timeout }
    }
}

impl<T: Transport> SlotBackend for HilBackend<T> {
    fn transmit(&mut self, choices: &[usize]) -> Result<Vec<bool>, SimError> {
        // assign everyone first: devices block on the slot barrier
        for (i, (&ch, port)) in choices.iter().zip(&mut self.ports).enumerate() {
            port.send(&Frame::new(MsgType::AssignChannel, i as u8, vec![ch as u8]))
                .map_err(|e| SimError::Backend(e.to_string()))?;
        }
        let mut acks = Vec::with_capacity(choices.len());
        for port in &mut self.ports {
            match port.recv(self.timeout) {
                Ok(frame) if frame.msg_type == MsgType::TxResult => {
                    acks.push(frame.payload.first().copied() == Some(1));
                }
                Ok(frame) => {
                    return Err(SimError::Backend(format!(
                        "expected TX_RESULT, got {:?}",
                        frame.msg_type
                    )))
                }
                Err(HilError::Transport(TransportError::TimedOut)) => acks.push(false),
                Err(e) => return Err(SimError::Backend(e.to_string())),
            }
        }
        Ok(acks)
    }
}

/// Run the full training phase through mock devices over the framed
/// protocol. Byte-stream plumbing aside, this consumes the same RNG streams
/// as [`sim::run_training`] and therefore produces identical results.
pub fn run_hil_training(
    params: &SimParams,
) -> Result<(Vec<AgentState>, Vec<EpisodeMetrics>), SimError> {
    params.validate()?;
    let aggregator = Arc::new(SlotAggregator::new(
        params.plan.clone(),
        params.link.clone(),
        params.num_agents,
        params.master_seed,
    ));
    let mut ports = Vec::with_capacity(params.num_agents);
    let mut devices: Vec<JoinHandle<()>> = Vec::with_capacity(params.num_agents);
    for id in 0..params.num_agents {
        let (coord_end, device_end) = MockTransport::pair();
        ports.push(FramedPort::new(coord_end));
        let agg = Arc::clone(&aggregator);
        devices.push(std::thread::spawn(move || {
            mock_device(FramedPort::new(device_end), id as u8, agg);
        }));
    }
    let mut backend = HilBackend::new(ports, Duration::from_secs(10));
    let result = sim::run_training_with_backend(params, &mut backend);
    drop(backend); // closes the transports, devices exit
    for handle in devices {
        let _ = handle.join();
    }
    result
}
