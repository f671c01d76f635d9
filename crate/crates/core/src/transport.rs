//! Framed two-party channel with message, byte and round accounting.
//!
//! Every message travels as a [`Frame`]: `u32` payload length, `u16` message
//! type and `u16` session id (all little-endian), then the payload. Both
//! endpoints of a channel keep counters for everything they send and receive;
//! in simulation mode each message also advances a virtual clock by
//! `T_bc + payload_bits / Rt_bw`, on both endpoints.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sharing::PartyId;

pub const HEADER_BYTES: usize = 8;

/// Message types on the wire. Unknown codes are rejected when decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u16)]
pub enum MsgType {
    Control = 1,
    ShareInput = 2,
    MulOpen = 3,
    SquareOpen = 4,
    TruncOpen = 5,
    OtSetup = 6,
    OtChoice = 7,
    OtTable = 8,
    OtStatus = 9,
    BitAnd = 10,
    Reveal = 11,
}

impl MsgType {
    pub const ALL: [MsgType; 11] = [
        MsgType::Control,
        MsgType::ShareInput,
        MsgType::MulOpen,
        MsgType::SquareOpen,
        MsgType::TruncOpen,
        MsgType::OtSetup,
        MsgType::OtChoice,
        MsgType::OtTable,
        MsgType::OtStatus,
        MsgType::BitAnd,
        MsgType::Reveal,
    ];

    /// The four messages of one oblivious-transfer comparison batch.
    pub const OT_FLOW: [MsgType; 4] = [
        MsgType::OtSetup,
        MsgType::OtChoice,
        MsgType::OtTable,
        MsgType::OtStatus,
    ];

    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn from_code(code: u16) -> Result<MsgType> {
        MsgType::ALL
            .iter()
            .copied()
            .find(|t| t.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown message type {code}")))
    }

    pub fn is_ot_flow(self) -> bool {
        MsgType::OT_FLOW.contains(&self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub session_id: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.msg_type.code().to_le_bytes());
        out.extend_from_slice(&self.session_id.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Format("frame shorter than header".into()));
        }
        let len = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        if bytes.len() != HEADER_BYTES + len {
            return Err(Error::Format(format!(
                "frame length field {len} disagrees with {} payload bytes",
                bytes.len() - HEADER_BYTES
            )));
        }
        Ok(Frame {
            msg_type: MsgType::from_code(u16::from_le_bytes([bytes[4], bytes[5]]))?,
            session_id: u16::from_le_bytes([bytes[6], bytes[7]]),
            payload: bytes[HEADER_BYTES..].to_vec(),
        })
    }
}

/// Network parameters for the virtual clock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Base latency per message, seconds.
    pub t_bc: f64,
    /// Bandwidth, bits per second.
    pub rt_bw: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            t_bc: 50e-6,
            rt_bw: 8e9,
        }
    }
}

impl SimParams {
    pub fn message_time(&self, payload_bytes: usize) -> f64 {
        self.t_bc + (payload_bytes as f64 * 8.0) / self.rt_bw
    }

    /// Applies `SECNN_T_BC` / `SECNN_RT_BW` environment overrides.
    pub fn with_env_overrides(mut self) -> Result<SimParams> {
        if let Ok(v) = std::env::var("SECNN_T_BC") {
            self.t_bc = v
                .parse()
                .map_err(|_| Error::Config(format!("SECNN_T_BC={v}")))?;
        }
        if let Ok(v) = std::env::var("SECNN_RT_BW") {
            self.rt_bw = v
                .parse()
                .map_err(|_| Error::Config(format!("SECNN_RT_BW={v}")))?;
        }
        if !(self.t_bc >= 0.0 && self.rt_bw > 0.0) {
            return Err(Error::Config("simulation parameters must be positive".into()));
        }
        Ok(self)
    }
}

/// Moves whole encoded frames between the two endpoints.
pub trait Link: Send {
    fn send_frame(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn recv_frame(&mut self) -> io::Result<Vec<u8>>;
}

struct LoopbackLink {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
}

impl Link for LoopbackLink {
    fn send_frame(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.tx
            .send(bytes.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer dropped"))
    }

    fn recv_frame(&mut self) -> io::Result<Vec<u8>> {
        self.rx
            .recv()
            .map_err(|_| io::Error::new(io::ErrorKind::UnexpectedEof, "peer dropped"))
    }
}

struct TcpLink {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl TcpLink {
    fn new(stream: TcpStream) -> io::Result<TcpLink> {
        stream.set_nodelay(true)?;
        Ok(TcpLink {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }
}

impl Link for TcpLink {
    fn send_frame(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.writer.write_all(bytes)
    }

    fn recv_frame(&mut self) -> io::Result<Vec<u8>> {
        let mut header = [0u8; HEADER_BYTES];
        self.reader.read_exact(&mut header)?;
        let len = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        let mut frame = Vec::with_capacity(HEADER_BYTES + len);
        frame.extend_from_slice(&header);
        frame.resize(HEADER_BYTES + len, 0);
        self.reader.read_exact(&mut frame[HEADER_BYTES..])?;
        Ok(frame)
    }
}

/// Per-message-type counters, both directions combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounter {
    pub messages: u64,
    /// Header plus payload.
    pub bytes: u64,
    pub payload_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TranscriptReport {
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub messages_received: u64,
    pub bytes_received: u64,
    pub rounds: u64,
    pub virtual_time: f64,
    pub by_type: BTreeMap<MsgType, TypeCounter>,
}

impl TranscriptReport {
    pub fn messages(&self) -> u64 {
        self.messages_sent + self.messages_received
    }

    pub fn bytes(&self) -> u64 {
        self.bytes_sent + self.bytes_received
    }

    pub fn of(&self, t: MsgType) -> TypeCounter {
        self.by_type.get(&t).copied().unwrap_or_default()
    }

    /// Header-plus-payload bytes of the given message types.
    pub fn bytes_of(&self, types: &[MsgType]) -> u64 {
        types.iter().map(|&t| self.of(t).bytes).sum()
    }

    pub fn messages_of(&self, types: &[MsgType]) -> u64 {
        types.iter().map(|&t| self.of(t).messages).sum()
    }

    /// Counter-wise difference `self - earlier`.
    pub fn since(&self, earlier: &TranscriptReport) -> TranscriptReport {
        let mut by_type = BTreeMap::new();
        for (&t, c) in &self.by_type {
            let e = earlier.of(t);
            let d = TypeCounter {
                messages: c.messages - e.messages,
                bytes: c.bytes - e.bytes,
                payload_bytes: c.payload_bytes - e.payload_bytes,
            };
            if d.messages > 0 {
                by_type.insert(t, d);
            }
        }
        TranscriptReport {
            messages_sent: self.messages_sent - earlier.messages_sent,
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            messages_received: self.messages_received - earlier.messages_received,
            bytes_received: self.bytes_received - earlier.bytes_received,
            rounds: self.rounds - earlier.rounds,
            virtual_time: self.virtual_time - earlier.virtual_time,
            by_type,
        }
    }
}

/// One endpoint of a two-party channel.
pub struct Channel {
    party: PartyId,
    session_id: u16,
    link: Box<dyn Link>,
    sim: Option<SimParams>,
    counters: TranscriptReport,
    sent_hash: Sha256,
    recv_hash: Sha256,
    capture: Option<Vec<u8>>,
    consumed: HashSet<u64>,
    started: Instant,
}

impl Channel {
    pub fn new(party: PartyId, session_id: u16, link: Box<dyn Link>, sim: Option<SimParams>) -> Channel {
        Channel {
            party,
            session_id,
            link,
            sim,
            counters: TranscriptReport::default(),
            sent_hash: Sha256::new(),
            recv_hash: Sha256::new(),
            capture: None,
            consumed: HashSet::new(),
            started: Instant::now(),
        }
    }

    /// Two in-memory endpoints, S0 first.
    pub fn loopback_pair(session_id: u16, sim: Option<SimParams>) -> (Channel, Channel) {
        let (tx0, rx1) = mpsc::channel();
        let (tx1, rx0) = mpsc::channel();
        (
            Channel::new(PartyId::S0, session_id, Box::new(LoopbackLink { tx: tx0, rx: rx0 }), sim),
            Channel::new(PartyId::S1, session_id, Box::new(LoopbackLink { tx: tx1, rx: rx1 }), sim),
        )
    }

    pub fn from_tcp(party: PartyId, session_id: u16, stream: TcpStream, sim: Option<SimParams>) -> Result<Channel> {
        Ok(Channel::new(party, session_id, Box::new(TcpLink::new(stream)?), sim))
    }

    /// Accepts one peer on `listener`.
    pub fn tcp_accept(party: PartyId, session_id: u16, listener: &TcpListener, sim: Option<SimParams>) -> Result<Channel> {
        let (stream, _) = listener.accept()?;
        Channel::from_tcp(party, session_id, stream, sim)
    }

    /// Connects to a listening peer, retrying until `timeout` elapses.
    pub fn tcp_connect<A: ToSocketAddrs + Clone>(
        party: PartyId,
        session_id: u16,
        addr: A,
        timeout: Duration,
        sim: Option<SimParams>,
    ) -> Result<Channel> {
        let deadline = Instant::now() + timeout;
        loop {
            match TcpStream::connect(addr.clone()) {
                Ok(s) => return Channel::from_tcp(party, session_id, s, sim),
                Err(e) if Instant::now() >= deadline => return Err(e.into()),
                Err(_) => std::thread::sleep(Duration::from_millis(20)),
            }
        }
    }

    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn sim(&self) -> Option<SimParams> {
        self.sim
    }

    /// Keeps a copy of every byte sent and received (for transcript scans).
    pub fn enable_capture(&mut self) {
        self.capture = Some(Vec::new());
    }

    pub fn take_capture(&mut self) -> Option<Vec<u8>> {
        self.capture.take()
    }

    fn account(&mut self, t: MsgType, payload: usize) {
        let c = self.counters.by_type.entry(t).or_default();
        c.messages += 1;
        c.bytes += (HEADER_BYTES + payload) as u64;
        c.payload_bytes += payload as u64;
        if let Some(sim) = self.sim {
            self.counters.virtual_time += sim.message_time(payload);
        }
    }

    fn send_raw(&mut self, t: MsgType, payload: &[u8]) -> Result<()> {
        let frame = Frame {
            msg_type: t,
            session_id: self.session_id,
            payload: payload.to_vec(),
        }
        .encode();
        self.link.send_frame(&frame)?;
        self.sent_hash.update(&frame);
        if let Some(c) = self.capture.as_mut() {
            c.extend_from_slice(&frame);
        }
        self.counters.messages_sent += 1;
        self.counters.bytes_sent += frame.len() as u64;
        self.account(t, payload.len());
        Ok(())
    }

    fn recv_raw(&mut self, expected: MsgType) -> Result<Vec<u8>> {
        let bytes = self.link.recv_frame()?;
        let frame = Frame::decode(&bytes)?;
        if frame.session_id != self.session_id {
            return Err(Error::Protocol(format!(
                "frame for session {} on session {}",
                frame.session_id, self.session_id
            )));
        }
        if frame.msg_type != expected {
            return Err(Error::UnexpectedMessage {
                expected,
                got: frame.msg_type,
            });
        }
        self.recv_hash.update(&bytes);
        if let Some(c) = self.capture.as_mut() {
            c.extend_from_slice(&bytes);
        }
        self.counters.messages_received += 1;
        self.counters.bytes_received += bytes.len() as u64;
        self.account(expected, frame.payload.len());
        Ok(frame.payload)
    }

    /// One-way message; counts one round on this endpoint.
    pub fn send(&mut self, t: MsgType, payload: &[u8]) -> Result<()> {
        self.send_raw(t, payload)?;
        self.counters.rounds += 1;
        Ok(())
    }

    /// Receives the next message, which must have type `expected`; counts one
    /// round on this endpoint.
    pub fn recv(&mut self, expected: MsgType) -> Result<Vec<u8>> {
        let p = self.recv_raw(expected)?;
        self.counters.rounds += 1;
        Ok(p)
    }

    /// Both parties send `payload` and receive the peer's; one round.
    ///
    /// S0 writes first and S1 reads first, so a TCP exchange never has both
    /// sides blocked on a full send buffer.
    pub fn exchange(&mut self, t: MsgType, payload: &[u8]) -> Result<Vec<u8>> {
        let theirs = match self.party {
            PartyId::S0 => {
                self.send_raw(t, payload)?;
                self.recv_raw(t)?
            }
            PartyId::S1 => {
                let theirs = self.recv_raw(t)?;
                self.send_raw(t, payload)?;
                theirs
            }
        };
        self.counters.rounds += 1;
        Ok(theirs)
    }

    pub fn transcript_report(&self) -> TranscriptReport {
        self.counters.clone()
    }

    /// SHA-256 of every frame sent and received so far, hex encoded.
    pub fn transcript_digests(&self) -> (String, String) {
        (
            hex(&self.sent_hash.clone().finalize()),
            hex(&self.recv_hash.clone().finalize()),
        )
    }

    pub fn wall_clock(&self) -> Duration {
        self.started.elapsed()
    }

    /// Marks a correlated-randomness item as spent. Each item may be used by
    /// exactly one protocol invocation.
    pub fn consume(&mut self, item_id: u64) -> Result<()> {
        if !self.consumed.insert(item_id) {
            return Err(Error::Contract(format!(
                "correlated item {item_id} used twice"
            )));
        }
        Ok(())
    }
}

/// Runs the two halves of a protocol over a fresh loopback pair, S0 on the
/// calling thread and S1 on a scoped worker.
pub fn run_pair<T0, T1, F0, F1>(sim: Option<SimParams>, f0: F0, f1: F1) -> (T0, T1)
where
    F0: FnOnce(&mut Channel) -> T0,
    F1: FnOnce(&mut Channel) -> T1 + Send,
    T1: Send,
{
    let (mut c0, mut c1) = Channel::loopback_pair(0, sim);
    std::thread::scope(|s| {
        let h = s.spawn(move || f1(&mut c1));
        // c0 is dropped before the join so a blocked S1 sees a disconnect
        let r0 = f0(&mut c0);
        drop(c0);
        (r0, h.join().expect("S1 panicked"))
    })
}

pub fn transcript_report(ch: &Channel) -> TranscriptReport {
    ch.transcript_report()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Little-endian packing of ring words.
pub fn words_to_bytes(words: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(words.len() * 4);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn bytes_to_words(bytes: &[u8], expected: usize) -> Result<Vec<u32>> {
    if bytes.len() != expected * 4 {
        return Err(Error::Protocol(format!(
            "expected {} words, got {} bytes",
            expected,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Packs 0/1 values eight to a byte, LSB first.
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        out[i / 8] |= (b & 1) << (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<u8>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Protocol(format!(
            "expected {} packed bits, got {} bytes",
            n,
            bytes.len()
        )));
    }
    Ok((0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect())
}
