//! The three-phase masking protocol: sensor and fusion-center state machines,
//! mask generation, wire messages and an in-process broadcast bus.
//!
//! # Wire format
//!
//! Every message is a 16-byte header followed by a tagged payload. Integers
//! are little-endian.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 2    | magic `"ZM"`                            |
//! | 2      | 1    | version (1)                             |
//! | 3      | 1    | phase (1, 2 or 3)                       |
//! | 4      | 2    | K                                       |
//! | 6      | 2    | N                                       |
//! | 8      | 1    | m                                       |
//! | 9      | 2    | alphabet size                           |
//! | 11     | 2    | sender                                  |
//! | 13     | 2    | receiver, `0xFFFF` for broadcast        |
//! | 15     | 1    | reserved (0)                            |
//!
//! Payloads start with a tag byte:
//!
//! * `1` public key: the key's own wire encoding.
//! * `2` mask ciphertext: symbol (u16) then the ciphertext wire encoding.
//! * `3` obfuscated report: one ring element per symbol, each
//!   [`RingParams::encoded_width`] bytes.

use crate::crypto::{Ciphertext, CryptoError, EncryptionScheme, KeyPair, PublicKey};
use crate::detection::Hypothesis;
use crate::ring::{RingElement, RingError, RingParams};
use crate::typestat::{
    compute_type, quantize_sqrt, Alphabet, EmpiricalType, ExactDiameter, QuantizedSqrtType, TypeError,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

pub const MAGIC: [u8; 2] = *b"ZM";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
pub const BROADCAST: u16 = 0xFFFF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Phase {
    Announce = 1,
    Exchange = 2,
    Report = 3,
}

impl Phase {
    fn from_byte(b: u8) -> Result<Self, ProtocolError> {
        match b {
            1 => Ok(Phase::Announce),
            2 => Ok(Phase::Exchange),
            3 => Ok(Phase::Report),
            _ => Err(ProtocolError::Malformed("phase")),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Phase::Announce => "1 (key announce)",
            Phase::Exchange => "2 (mask exchange)",
            Phase::Report => "3 (report)",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid network: {0}")]
    Network(String),
    #[error("sensor {sensor}: cannot {action} while {state}")]
    State { sensor: usize, action: &'static str, state: &'static str },
    #[error("sensor {receiver} could not decrypt the mask sent by sensor {sender}: {source}")]
    Decryption {
        sender: usize,
        receiver: usize,
        #[source]
        source: CryptoError,
    },
    #[error("sensor {receiver} is missing {missing} mask ciphertexts")]
    IncompleteRound { receiver: usize, missing: usize },
    #[error("sensor {sensor} has no public key from sensor {missing}")]
    MissingKey { sensor: usize, missing: usize },
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("malformed message: {0}")]
    Malformed(&'static str),
    #[error("expected {expected} reports, got {got}")]
    ReportCount { expected: usize, got: usize },
    #[error("duplicate message from sensor {0}")]
    Duplicate(usize),
    #[error("threshold must be non-negative, got {0}")]
    InvalidThreshold(f64),
    #[error("phase {phase}, sensor {sensor}: {source}")]
    Attributed {
        phase: Phase,
        sensor: usize,
        #[source]
        source: Box<ProtocolError>,
    },
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Type(#[from] TypeError),
}

impl ProtocolError {
    fn at(self, phase: Phase, sensor: usize) -> Self {
        match self {
            e @ ProtocolError::Attributed { .. } => e,
            e => ProtocolError::Attributed { phase, sensor, source: Box::new(e) },
        }
    }

    /// Phase and sensor the error was attributed to, if any.
    pub fn attribution(&self) -> Option<(Phase, usize)> {
        match self {
            ProtocolError::Attributed { phase, sensor, .. } => Some((*phase, *sensor)),
            _ => None,
        }
    }
}

/// Parameters every entity agrees on before the protocol starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkParams {
    sensors: usize,
    ring: RingParams,
    alphabet: usize,
}

impl NetworkParams {
    pub fn new(sensors: usize, ring: RingParams, alphabet: usize) -> Result<Self, ProtocolError> {
        if sensors < 2 {
            return Err(ProtocolError::Network(format!("need at least 2 sensors, got {sensors}")));
        }
        if sensors >= BROADCAST as usize {
            return Err(ProtocolError::Network(format!("too many sensors: {sensors}")));
        }
        if alphabet == 0 || alphabet > u16::MAX as usize {
            return Err(ProtocolError::Network(format!("unsupported alphabet size {alphabet}")));
        }
        if ring.modulus() > u16::MAX as u64 || ring.frac_bits() > u8::MAX as u32 {
            return Err(ProtocolError::Network(format!("ring {ring} does not fit the header")));
        }
        ring.check_network(sensors)?;
        Ok(Self { sensors, ring, alphabet })
    }

    /// Network with the smallest valid modulus `N = K + 1`.
    pub fn with_default_modulus(sensors: usize, frac_bits: u32, alphabet: usize) -> Result<Self, ProtocolError> {
        Self::new(sensors, RingParams::for_network(sensors, frac_bits)?, alphabet)
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    pub fn ring(&self) -> RingParams {
        self.ring
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    /// Width of the band `2^-m K^2 |X|` that bounds the gap between the fused
    /// statistic and the diameter of the unquantized types.
    pub fn perturbation_band(&self) -> f64 {
        let k = self.sensors as f64;
        k * k * self.alphabet as f64 * self.ring.spacing()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Header {
    pub phase: Phase,
    pub sensors: u16,
    pub modulus: u16,
    pub frac_bits: u8,
    pub alphabet: u16,
    pub sender: u16,
    /// `None` for broadcast.
    pub receiver: Option<u16>,
}

impl Header {
    pub fn new(net: &NetworkParams, phase: Phase, sender: usize, receiver: Option<usize>) -> Self {
        Self {
            phase,
            sensors: net.sensors as u16,
            modulus: net.ring.modulus() as u16,
            frac_bits: net.ring.frac_bits() as u8,
            alphabet: net.alphabet as u16,
            sender: sender as u16,
            receiver: receiver.map(|r| r as u16),
        }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..2].copy_from_slice(&MAGIC);
        b[2] = VERSION;
        b[3] = self.phase as u8;
        b[4..6].copy_from_slice(&self.sensors.to_le_bytes());
        b[6..8].copy_from_slice(&self.modulus.to_le_bytes());
        b[8] = self.frac_bits;
        b[9..11].copy_from_slice(&self.alphabet.to_le_bytes());
        b[11..13].copy_from_slice(&self.sender.to_le_bytes());
        b[13..15].copy_from_slice(&self.receiver.unwrap_or(BROADCAST).to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, ProtocolError> {
        if b.len() < HEADER_LEN {
            return Err(ProtocolError::Malformed("short header"));
        }
        if b[0..2] != MAGIC {
            return Err(ProtocolError::Malformed("bad magic"));
        }
        if b[2] != VERSION {
            return Err(ProtocolError::Malformed("unsupported version"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        let receiver = u16_at(13);
        Ok(Self {
            phase: Phase::from_byte(b[3])?,
            sensors: u16_at(4),
            modulus: u16_at(6),
            frac_bits: b[8],
            alphabet: u16_at(9),
            sender: u16_at(11),
            receiver: (receiver != BROADCAST).then_some(receiver),
        })
    }

    /// Checks that the header was produced for `net`.
    pub fn check(&self, net: &NetworkParams) -> Result<(), ProtocolError> {
        let ours = Header::new(net, self.phase, self.sender as usize, None);
        if (self.sensors, self.modulus, self.frac_bits, self.alphabet)
            != (ours.sensors, ours.modulus, ours.frac_bits, ours.alphabet)
        {
            return Err(ProtocolError::HeaderMismatch(format!(
                "message for K={} N={} m={} |X|={}, network has K={} N={} m={} |X|={}",
                self.sensors, self.modulus, self.frac_bits, self.alphabet, ours.sensors, ours.modulus,
                ours.frac_bits, ours.alphabet
            )));
        }
        if self.sender as usize >= net.sensors {
            return Err(ProtocolError::HeaderMismatch(format!("unknown sender {}", self.sender)));
        }
        Ok(())
    }
}

/// `G_k(x)` for every symbol, as released by sensor `k`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ObfuscatedMessage {
    pub sensor: usize,
    pub values: Vec<RingElement>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Payload {
    PublicKeyAnnounce(PublicKey),
    MaskCiphertext { symbol: usize, ciphertext: Ciphertext },
    ObfuscatedReport(Vec<RingElement>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::PublicKeyAnnounce(_) => 1,
            Payload::MaskCiphertext { .. } => 2,
            Payload::ObfuscatedReport(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Payload::PublicKeyAnnounce(_) => "public_key",
            Payload::MaskCiphertext { .. } => "mask_ciphertext",
            Payload::ObfuscatedReport(_) => "obfuscated_report",
        }
    }

    fn phase(&self) -> Phase {
        match self {
            Payload::PublicKeyAnnounce(_) => Phase::Announce,
            Payload::MaskCiphertext { .. } => Phase::Exchange,
            Payload::ObfuscatedReport(_) => Phase::Report,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProtocolMessage {
    pub header: Header,
    pub payload: Payload,
}

impl ProtocolMessage {
    pub fn sender(&self) -> usize {
        self.header.sender as usize
    }

    pub fn receiver(&self) -> Option<usize> {
        self.header.receiver.map(usize::from)
    }

    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes().to_vec();
        out.push(self.payload.tag());
        match &self.payload {
            Payload::PublicKeyAnnounce(pk) => out.extend_from_slice(&pk.to_wire()),
            Payload::MaskCiphertext { symbol, ciphertext } => {
                out.extend_from_slice(&(*symbol as u16).to_le_bytes());
                out.extend_from_slice(&ciphertext.to_wire());
            }
            Payload::ObfuscatedReport(values) => {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let header = Header::from_bytes(bytes)?;
        let body = &bytes[HEADER_LEN..];
        let (&tag, rest) = body.split_first().ok_or(ProtocolError::Malformed("missing payload"))?;
        let payload = match tag {
            1 => Payload::PublicKeyAnnounce(PublicKey::from_wire(rest)?),
            2 => {
                if rest.len() < 2 {
                    return Err(ProtocolError::Malformed("mask payload"));
                }
                let symbol = u16::from_le_bytes([rest[0], rest[1]]) as usize;
                Payload::MaskCiphertext { symbol, ciphertext: Ciphertext::from_wire(&rest[2..])? }
            }
            3 => {
                let ring = RingParams::new(header.modulus as u64, header.frac_bits as u32)?;
                let width = ring.encoded_width();
                if rest.len() != width * header.alphabet as usize {
                    return Err(ProtocolError::Malformed("report length"));
                }
                let values = rest.chunks(width).map(|c| ring.decode(c)).collect::<Result<_, _>>()?;
                Payload::ObfuscatedReport(values)
            }
            _ => return Err(ProtocolError::Malformed("payload tag")),
        };
        if payload.phase() != header.phase {
            return Err(ProtocolError::Malformed("payload does not belong to header phase"));
        }
        Ok(Self { header, payload })
    }
}

/// One transcript line in the JSON-lines log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: usize,
    pub phase: u8,
    pub kind: String,
    pub sender: usize,
    pub receiver: Option<usize>,
    /// Hex of the full wire encoding.
    pub wire: String,
}

/// Every message seen on the public channel, in delivery order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    messages: Vec<ProtocolMessage>,
}

impl Transcript {
    pub fn push(&mut self, msg: ProtocolMessage) {
        self.messages.push(msg);
    }

    pub fn messages(&self) -> &[ProtocolMessage] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.messages.iter().filter(|m| m.payload.kind() == kind).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (seq, m) in self.messages.iter().enumerate() {
            let entry = TranscriptEntry {
                seq,
                phase: m.header.phase as u8,
                kind: m.payload.kind().to_string(),
                sender: m.sender(),
                receiver: m.receiver(),
                wire: hex::encode(m.to_wire()),
            };
            out.push_str(&serde_json::to_string(&entry).expect("transcript entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ProtocolError> {
        let mut messages = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let entry: TranscriptEntry =
                serde_json::from_str(line).map_err(|_| ProtocolError::Malformed("transcript line"))?;
            let bytes = hex::decode(&entry.wire).map_err(|_| ProtocolError::Malformed("transcript hex"))?;
            messages.push(ProtocolMessage::from_wire(&bytes)?);
        }
        Ok(Self { messages })
    }
}

/// How sensors draw their off-diagonal masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskPolicy {
    #[default]
    Uniform,
    /// Every mask is zero. Only for tests: the reports then equal the
    /// quantized roots.
    Zero,
}

/// Draws sensor `k`'s row `R_{k,l}(x)`: uniform off the diagonal, and
/// `R_{k,k}(x) = ⊖ ⊕_{l≠k} R_{k,l}(x)` on it. Indexed `[l][x]`.
pub fn draw_mask_row(
    sender: usize,
    net: &NetworkParams,
    policy: MaskPolicy,
    rng: &mut dyn RngCore,
) -> Vec<Vec<RingElement>> {
    let ring = net.ring;
    let mut row = vec![vec![ring.zero(); net.alphabet]; net.sensors];
    for (l, entries) in row.iter_mut().enumerate() {
        if l == sender {
            continue;
        }
        for e in entries.iter_mut() {
            *e = match policy {
                MaskPolicy::Uniform => ring.uniform(rng),
                MaskPolicy::Zero => ring.zero(),
            };
        }
    }
    for x in 0..net.alphabet {
        let off: RingElement = (0..net.sensors).filter(|&l| l != sender).fold(ring.zero(), |acc, l| acc + row[l][x]);
        row[sender][x] = -off;
    }
    row
}

/// The full collection `R_{k,l}(x)`, indexed `[k][l][x]`.
///
/// No single entity ever holds this; it exists for tests and the privacy
/// games.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    entries: Vec<Vec<Vec<RingElement>>>,
}

impl MaskMatrix {
    pub fn generate(net: &NetworkParams, policy: MaskPolicy, rng: &mut dyn RngCore) -> Self {
        let entries = (0..net.sensors).map(|k| draw_mask_row(k, net, policy, rng)).collect();
        Self { entries }
    }

    /// Accepts rows that satisfy the diagonal constraint.
    pub fn from_rows(entries: Vec<Vec<Vec<RingElement>>>) -> Result<Self, ProtocolError> {
        let k = entries.len();
        let size = entries.first().and_then(|r| r.first()).map_or(0, |c| c.len());
        if entries.iter().any(|r| r.len() != k || r.iter().any(|c| c.len() != size)) {
            return Err(ProtocolError::Malformed("mask matrix shape"));
        }
        let m = Self { entries };
        if let Some(bad) = (0..k).find(|&s| !m.row_sums_to_zero(s)) {
            return Err(ProtocolError::Network(format!("mask row {bad} does not sum to zero")));
        }
        Ok(m)
    }

    pub fn sensors(&self) -> usize {
        self.entries.len()
    }

    pub fn alphabet(&self) -> usize {
        self.entries[0][0].len()
    }

    pub fn entry(&self, sender: usize, receiver: usize, symbol: usize) -> RingElement {
        self.entries[sender][receiver][symbol]
    }

    pub fn row(&self, sender: usize) -> &[Vec<RingElement>] {
        &self.entries[sender]
    }

    fn row_sums_to_zero(&self, sender: usize) -> bool {
        let row = &self.entries[sender];
        (0..row[0].len()).all(|x| row.iter().map(|c| c[x]).reduce(|a, b| a + b).is_some_and(|s| s.ticks() == 0))
    }

    /// `Σ_{R_{K,l}}(x) = ⊕_k R_{k,l}(x)`, the mask total received by `l`.
    pub fn column_sum(&self, receiver: usize) -> Vec<RingElement> {
        (0..self.alphabet())
            .map(|x| self.entries.iter().map(|r| r[receiver][x]).reduce(|a, b| a + b).expect("non-empty"))
            .collect()
    }

    /// `⊕_l Σ_{R_{K,l}}(x)`, which is zero for every valid matrix.
    pub fn total(&self) -> Vec<RingElement> {
        let cols: Vec<_> = (0..self.sensors()).map(|l| self.column_sum(l)).collect();
        (0..self.alphabet()).map(|x| cols.iter().map(|c| c[x]).reduce(|a, b| a + b).expect("non-empty")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SensorState {
    Fresh,
    Loaded,
    Announced,
    Exchanging,
    Exchanged,
    Reported,
}

impl SensorState {
    fn describe(self) -> &'static str {
        match self {
            SensorState::Fresh => "waiting for measurements",
            SensorState::Loaded => "holding measurements",
            SensorState::Announced => "announced its key",
            SensorState::Exchanging => "exchanging masks",
            SensorState::Exchanged => "holding its mask sum",
            SensorState::Reported => "finished",
        }
    }
}

/// Single-threaded state machine for one sensor.
pub struct SensorEngine {
    id: usize,
    net: NetworkParams,
    scheme: Arc<dyn EncryptionScheme>,
    security: u32,
    policy: MaskPolicy,
    rng: ChaCha20Rng,
    state: SensorState,
    measurements: Option<EmpiricalType>,
    quantized: Option<QuantizedSqrtType>,
    keys: Option<KeyPair>,
    foreign_keys: BTreeMap<usize, PublicKey>,
    received: BTreeMap<(usize, usize), RingElement>,
    mask_sum: Option<Vec<RingElement>>,
}

impl fmt::Debug for SensorEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SensorEngine").field("id", &self.id).field("state", &self.state).finish_non_exhaustive()
    }
}

impl SensorEngine {
    pub fn new(
        id: usize,
        net: NetworkParams,
        scheme: Arc<dyn EncryptionScheme>,
        security: u32,
        rng: ChaCha20Rng,
    ) -> Result<Self, ProtocolError> {
        if id >= net.sensors {
            return Err(ProtocolError::Network(format!("sensor id {id} out of range")));
        }
        Ok(Self {
            id,
            net,
            scheme,
            security,
            policy: MaskPolicy::Uniform,
            rng,
            state: SensorState::Fresh,
            measurements: None,
            quantized: None,
            keys: None,
            foreign_keys: BTreeMap::new(),
            received: BTreeMap::new(),
            mask_sum: None,
        })
    }

    pub fn with_mask_policy(mut self, policy: MaskPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn expect(&self, state: SensorState, action: &'static str) -> Result<(), ProtocolError> {
        if self.state == state {
            Ok(())
        } else {
            Err(ProtocolError::State { sensor: self.id, action, state: self.state.describe() })
        }
    }

    pub fn load_measurements(&mut self, sequence: &[usize]) -> Result<(), ProtocolError> {
        let ty = compute_type(sequence, Alphabet::new(self.net.alphabet)?)?;
        self.load_type(ty)
    }

    /// Loads an already-counted type, skipping the raw sequence.
    pub fn load_type(&mut self, ty: EmpiricalType) -> Result<(), ProtocolError> {
        self.expect(SensorState::Fresh, "load measurements")?;
        if ty.alphabet_size() != self.net.alphabet {
            return Err(TypeError::WrongLength { expected: self.net.alphabet, got: ty.alphabet_size() }.into());
        }
        self.measurements = Some(ty);
        self.state = SensorState::Loaded;
        Ok(())
    }

    /// Phase 1: generate keys, quantize the type and announce the public key.
    pub fn phase1_announce(&mut self) -> Result<ProtocolMessage, ProtocolError> {
        self.expect(SensorState::Loaded, "announce")?;
        let ty = self.measurements.as_ref().expect("loaded");
        self.quantized = Some(quantize_sqrt(ty, self.net.ring));
        let keys = self.scheme.keygen(self.security, &mut self.rng)?;
        let msg = ProtocolMessage {
            header: Header::new(&self.net, Phase::Announce, self.id, None),
            payload: Payload::PublicKeyAnnounce(keys.public.clone()),
        };
        self.keys = Some(keys);
        self.state = SensorState::Announced;
        Ok(msg)
    }

    pub fn receive_public_key(&mut self, msg: &ProtocolMessage) -> Result<(), ProtocolError> {
        msg.header.check(&self.net)?;
        let Payload::PublicKeyAnnounce(pk) = &msg.payload else {
            return Err(ProtocolError::Malformed("expected a public key"));
        };
        if msg.sender() == self.id {
            return Ok(());
        }
        if self.state != SensorState::Announced && self.state != SensorState::Loaded {
            return Err(ProtocolError::State { sensor: self.id, action: "accept keys", state: self.state.describe() });
        }
        if self.foreign_keys.insert(msg.sender(), pk.clone()).is_some() {
            return Err(ProtocolError::Duplicate(msg.sender()));
        }
        Ok(())
    }

    pub fn foreign_key_count(&self) -> usize {
        self.foreign_keys.len()
    }

    /// Phase 2: draw this sensor's mask row and encrypt each off-diagonal
    /// entry for its receiver.
    pub fn phase2_exchange(&mut self) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        self.expect(SensorState::Announced, "exchange masks")?;
        if let Some(missing) = (0..self.net.sensors).find(|&l| l != self.id && !self.foreign_keys.contains_key(&l)) {
            return Err(ProtocolError::MissingKey { sensor: self.id, missing });
        }
        let row = draw_mask_row(self.id, &self.net, self.policy, &mut self.rng);
        let mut out = Vec::with_capacity((self.net.sensors - 1) * self.net.alphabet);
        for (l, entries) in row.iter().enumerate() {
            if l == self.id {
                for (x, r) in entries.iter().enumerate() {
                    self.received.insert((self.id, x), *r);
                }
                continue;
            }
            let pk = &self.foreign_keys[&l];
            for (x, r) in entries.iter().enumerate() {
                let ciphertext = self.scheme.encrypt(r, pk, &mut self.rng)?;
                out.push(ProtocolMessage {
                    header: Header::new(&self.net, Phase::Exchange, self.id, Some(l)),
                    payload: Payload::MaskCiphertext { symbol: x, ciphertext },
                });
            }
        }
        self.state = SensorState::Exchanging;
        Ok(out)
    }

    /// Decrypts a mask addressed to this sensor; other messages are ignored.
    pub fn receive_mask(&mut self, msg: &ProtocolMessage) -> Result<(), ProtocolError> {
        msg.header.check(&self.net)?;
        let Payload::MaskCiphertext { symbol, ciphertext } = &msg.payload else {
            return Err(ProtocolError::Malformed("expected a mask ciphertext"));
        };
        if msg.receiver() != Some(self.id) {
            return Ok(());
        }
        if self.state != SensorState::Exchanging && self.state != SensorState::Announced {
            return Err(ProtocolError::State { sensor: self.id, action: "accept masks", state: self.state.describe() });
        }
        let sender = msg.sender();
        if *symbol >= self.net.alphabet || sender == self.id {
            return Err(ProtocolError::Malformed("mask index"));
        }
        let sk = &self.keys.as_ref().expect("keys exist after announce").private;
        let r = self
            .scheme
            .decrypt(ciphertext, sk, self.net.ring)
            .map_err(|source| ProtocolError::Decryption { sender, receiver: self.id, source })?;
        if self.received.insert((sender, *symbol), r).is_some() {
            return Err(ProtocolError::Duplicate(sender));
        }
        Ok(())
    }

    /// Closes the exchange round once every mask has arrived and stores
    /// `Σ_{R_{K,k}}(x)`.
    pub fn finish_exchange(&mut self) -> Result<(), ProtocolError> {
        self.expect(SensorState::Exchanging, "finish the exchange")?;
        let expected = self.net.sensors * self.net.alphabet;
        if self.received.len() < expected {
            return Err(ProtocolError::IncompleteRound { receiver: self.id, missing: expected - self.received.len() });
        }
        let ring = self.net.ring;
        let mut sums = vec![ring.zero(); self.net.alphabet];
        for (&(_, x), r) in &self.received {
            sums[x] = sums[x] + *r;
        }
        self.mask_sum = Some(sums);
        self.state = SensorState::Exchanged;
        Ok(())
    }

    /// `Σ_{R_{K,k}}(x)` once the exchange is complete.
    pub fn mask_sum(&self) -> Option<&[RingElement]> {
        self.mask_sum.as_deref()
    }

    pub fn quantized(&self) -> Option<&QuantizedSqrtType> {
        self.quantized.as_ref()
    }

    /// Phase 3: release `G_k(x) = Q_k(x) ⊕ Σ_{R_{K,k}}(x)`.
    pub fn phase3_report(&mut self) -> Result<ProtocolMessage, ProtocolError> {
        self.expect(SensorState::Exchanged, "report")?;
        let q = self.quantized.as_ref().expect("quantized in phase 1");
        let sums = self.mask_sum.as_ref().expect("set by finish_exchange");
        let values = q.values().iter().zip(sums).map(|(a, b)| *a + *b).collect();
        self.state = SensorState::Reported;
        Ok(ProtocolMessage {
            header: Header::new(&self.net, Phase::Report, self.id, None),
            payload: Payload::ObfuscatedReport(values),
        })
    }
}

/// Computes `K^2 - Σ_x (⊕_k G_k(x))^2` from the reports.
///
/// The modular sum is read as its representative in `[0, N)` before squaring;
/// with valid masks this is the plain sum of the quantized roots.
pub fn fusion_statistic(reports: &[ObfuscatedMessage], net: &NetworkParams) -> Result<ExactDiameter, ProtocolError> {
    if reports.len() != net.sensors {
        return Err(ProtocolError::ReportCount { expected: net.sensors, got: reports.len() });
    }
    let mut seen = BTreeSet::new();
    for r in reports {
        if r.sensor >= net.sensors || !seen.insert(r.sensor) {
            return Err(ProtocolError::Duplicate(r.sensor));
        }
        if r.values.len() != net.alphabet {
            return Err(ProtocolError::HeaderMismatch(format!(
                "report from sensor {} has {} symbols, expected {}",
                r.sensor,
                r.values.len(),
                net.alphabet
            )));
        }
        if let Some(v) = r.values.iter().find(|v| v.params() != net.ring) {
            return Err(RingError::Mismatch { left: net.ring, right: v.params() }.into());
        }
    }
    let sums = (0..net.alphabet).map(|x| reports.iter().map(|r| r.values[x]).reduce(|a, b| a + b).expect("K >= 2").ticks());
    Ok(ExactDiameter::from_root_sums(net.sensors, sums, net.ring.frac_bits()))
}

/// Collects reports and applies the threshold test.
#[derive(Debug)]
pub struct FusionEngine {
    net: NetworkParams,
    threshold: f64,
    reports: BTreeMap<usize, ObfuscatedMessage>,
}

impl FusionEngine {
    pub fn new(net: NetworkParams, threshold: f64) -> Result<Self, ProtocolError> {
        if threshold.is_nan() || threshold < 0.0 {
            return Err(ProtocolError::InvalidThreshold(threshold));
        }
        Ok(Self { net, threshold, reports: BTreeMap::new() })
    }

    /// Records an obfuscated report; other messages are ignored.
    pub fn receive(&mut self, msg: &ProtocolMessage) -> Result<(), ProtocolError> {
        let Payload::ObfuscatedReport(values) = &msg.payload else {
            return Ok(());
        };
        msg.header.check(&self.net)?;
        let sensor = msg.sender();
        let report = ObfuscatedMessage { sensor, values: values.clone() };
        if self.reports.insert(sensor, report).is_some() {
            return Err(ProtocolError::Duplicate(sensor));
        }
        Ok(())
    }

    pub fn statistic(&self) -> Result<ExactDiameter, ProtocolError> {
        let reports: Vec<_> = self.reports.values().cloned().collect();
        fusion_statistic(&reports, &self.net)
    }

    pub fn decide(&self) -> Result<(ExactDiameter, Hypothesis), ProtocolError> {
        let stat = self.statistic()?;
        Ok((stat, Hypothesis::from_statistic(stat.to_f64(), self.threshold)))
    }
}

/// Whether a bus delivers or drops an intercepted message.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delivery {
    Deliver,
    Drop,
}

/// Everything needed to run the protocol once.
#[derive(Clone)]
pub struct ProtocolConfig {
    pub net: NetworkParams,
    pub scheme: Arc<dyn EncryptionScheme>,
    pub security: u32,
    pub seed: u64,
    pub mask_policy: MaskPolicy,
}

impl ProtocolConfig {
    /// Builds one engine per sensor, each with its own stream of the seeded
    /// generator.
    pub fn engines(&self) -> Result<Vec<SensorEngine>, ProtocolError> {
        (0..self.net.sensors)
            .map(|k| {
                let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
                rng.set_stream(k as u64 + 1);
                Ok(SensorEngine::new(k, self.net, self.scheme.clone(), self.security, rng)?
                    .with_mask_policy(self.mask_policy))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    pub statistic: ExactDiameter,
    pub decision: Hypothesis,
    pub transcript: Transcript,
}

/// Runs all three phases over the in-process bus with sensor types given
/// directly.
pub fn run_protocol(
    config: &ProtocolConfig,
    types: &[EmpiricalType],
    threshold: f64,
) -> Result<ProtocolOutcome, ProtocolError> {
    run_protocol_intercepted(config, types, threshold, &mut |_| Delivery::Deliver)
}

/// [`run_protocol`] with a hook that sees, and may alter or drop, each message
/// before delivery.
///
/// Messages are delivered round-robin: within a phase, sensor 0's messages
/// go first, then sensor 1's, and so on.
pub fn run_protocol_intercepted(
    config: &ProtocolConfig,
    types: &[EmpiricalType],
    threshold: f64,
    intercept: &mut dyn FnMut(&mut ProtocolMessage) -> Delivery,
) -> Result<ProtocolOutcome, ProtocolError> {
    let net = config.net;
    if types.len() != net.sensors {
        return Err(ProtocolError::Network(format!("{} types for {} sensors", types.len(), net.sensors)));
    }
    let mut fusion = FusionEngine::new(net, threshold)?;
    let mut sensors = config.engines()?;
    let mut transcript = Transcript::default();
    for (s, ty) in sensors.iter_mut().zip(types) {
        s.load_type(ty.clone()).map_err(|e| e.at(Phase::Announce, s.id))?;
    }

    let mut post = |mut msg: ProtocolMessage, transcript: &mut Transcript| -> Option<ProtocolMessage> {
        if intercept(&mut msg) == Delivery::Drop {
            return None;
        }
        transcript.push(msg.clone());
        Some(msg)
    };

    // phase 1
    let mut announcements = Vec::new();
    for s in sensors.iter_mut() {
        let msg = s.phase1_announce().map_err(|e| e.at(Phase::Announce, s.id))?;
        announcements.extend(post(msg, &mut transcript));
    }
    for msg in &announcements {
        for s in sensors.iter_mut() {
            s.receive_public_key(msg).map_err(|e| e.at(Phase::Announce, s.id))?;
        }
    }

    // phase 2
    let mut ciphertexts = Vec::new();
    for s in sensors.iter_mut() {
        for msg in s.phase2_exchange().map_err(|e| e.at(Phase::Exchange, s.id))? {
            ciphertexts.extend(post(msg, &mut transcript));
        }
    }
    for msg in &ciphertexts {
        for s in sensors.iter_mut() {
            s.receive_mask(msg).map_err(|e| e.at(Phase::Exchange, s.id))?;
        }
    }
    for s in sensors.iter_mut() {
        s.finish_exchange().map_err(|e| e.at(Phase::Exchange, s.id))?;
    }

    // phase 3
    for s in sensors.iter_mut() {
        let msg = s.phase3_report().map_err(|e| e.at(Phase::Report, s.id))?;
        if let Some(msg) = post(msg, &mut transcript) {
            let sender = msg.sender();
            fusion.receive(&msg).map_err(|e| e.at(Phase::Report, sender))?;
        }
    }
    let (statistic, decision) = fusion.decide()?;
    Ok(ProtocolOutcome { statistic, decision, transcript })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{ElGamal, Identity, ELGAMAL_SECURITY};
    use crate::typestat::{hellinger_diameter_of_types, quantized_diameter};
    use rand::Rng;

    fn random_type(rng: &mut impl Rng, size: usize, t: usize) -> EmpiricalType {
        let seq: Vec<usize> = (0..t).map(|_| rng.gen_range(0..size)).collect();
        compute_type(&seq, Alphabet::new(size).unwrap()).unwrap()
    }

    fn config(net: NetworkParams, seed: u64) -> ProtocolConfig {
        ProtocolConfig { net, scheme: Arc::new(Identity), security: 1, seed, mask_policy: MaskPolicy::Uniform }
    }

    fn elgamal(net: NetworkParams, seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            net,
            scheme: Arc::new(ElGamal),
            security: ELGAMAL_SECURITY,
            seed,
            mask_policy: MaskPolicy::Uniform,
        }
    }

    #[test]
    fn network_requires_modulus_above_k() {
        let ring = RingParams::new(3, 4).unwrap();
        assert!(NetworkParams::new(3, ring, 2).is_err());
        assert!(NetworkParams::new(2, ring, 2).is_ok());
        assert!(NetworkParams::new(1, ring, 2).is_err());
    }

    #[test]
    fn header_roundtrip_is_sixteen_bytes() {
        let net = NetworkParams::with_default_modulus(5, 13, 9).unwrap();
        for recv in [None, Some(3)] {
            let h = Header::new(&net, Phase::Exchange, 2, recv);
            let b = h.to_bytes();
            assert_eq!(b.len(), 16);
            assert_eq!(&b[..4], &[b'Z', b'M', 1, 2]);
            assert_eq!(Header::from_bytes(&b).unwrap(), h);
        }
    }

    #[test]
    fn mask_matrix_zero_sum_exhaustive_small() {
        // every assignment of the 6 off-diagonal masks at K=3, m=2, N=4, |X|=1
        let net = NetworkParams::new(3, RingParams::new(4, 2).unwrap(), 1).unwrap();
        let ring = net.ring();
        let order = ring.order();
        let mut count = 0u64;
        for code in 0..order.pow(6) {
            let mut c = code;
            let mut entries = vec![vec![vec![ring.zero(); 1]; 3]; 3];
            for k in 0..3 {
                for l in 0..3 {
                    if k != l {
                        entries[k][l][0] = ring.element(c % order).unwrap();
                        c /= order;
                    }
                }
                entries[k][k][0] = -(0..3).filter(|&l| l != k).fold(ring.zero(), |a, l| a + entries[k][l][0]);
            }
            let m = MaskMatrix::from_rows(entries).unwrap();
            assert_eq!(m.total()[0].ticks(), 0);
            count += 1;
        }
        assert_eq!(count, 16u64.pow(6));
    }

    #[test]
    fn invalid_mask_rows_rejected() {
        let net = NetworkParams::with_default_modulus(3, 3, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let m = MaskMatrix::generate(&net, MaskPolicy::Uniform, &mut rng);
        let mut rows: Vec<Vec<Vec<RingElement>>> = (0..3).map(|k| m.row(k).to_vec()).collect();
        rows[1][2][0] = rows[1][2][0] + net.ring().element(1).unwrap();
        assert!(MaskMatrix::from_rows(rows).is_err());
    }

    #[test]
    fn announce_bookkeeping() {
        let net = NetworkParams::with_default_modulus(3, 4, 2).unwrap();
        let cfg = config(net, 1);
        let mut engines = cfg.engines().unwrap();
        assert!(matches!(engines[0].phase1_announce(), Err(ProtocolError::State { .. })));
        for e in engines.iter_mut() {
            e.load_measurements(&[0, 1, 1]).unwrap();
        }
        let msgs: Vec<_> = engines.iter_mut().map(|e| e.phase1_announce().unwrap()).collect();
        assert!(matches!(engines[0].phase1_announce(), Err(ProtocolError::State { .. })));
        for m in &msgs {
            for e in engines.iter_mut() {
                e.receive_public_key(m).unwrap();
            }
        }
        assert!(engines.iter().all(|e| e.foreign_key_count() == 2));
    }

    #[test]
    fn report_before_exchange_is_state_error() {
        let net = NetworkParams::with_default_modulus(2, 4, 2).unwrap();
        let mut e = config(net, 1).engines().unwrap().remove(0);
        e.load_measurements(&[0, 1]).unwrap();
        e.phase1_announce().unwrap();
        assert!(matches!(e.phase3_report(), Err(ProtocolError::State { .. })));
        // keys of the other sensor are still missing
        assert!(matches!(e.phase2_exchange(), Err(ProtocolError::MissingKey { missing: 1, .. })));
    }

    #[test]
    fn transcript_counts() {
        let net = NetworkParams::with_default_modulus(2, 4, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let types: Vec<_> = (0..2).map(|_| random_type(&mut rng, 2, 10)).collect();
        let out = run_protocol(&config(net, 1), &types, 0.5).unwrap();
        assert_eq!(out.transcript.count_kind("public_key"), 2);
        // (K-1)|X| ciphertexts per sensor
        assert_eq!(out.transcript.count_kind("mask_ciphertext"), 4);
        assert_eq!(out.transcript.count_kind("obfuscated_report"), 2);
        let replay = Transcript::from_jsonl(&out.transcript.to_jsonl()).unwrap();
        assert_eq!(replay, out.transcript);
    }

    #[test]
    fn zero_masks_report_quantized_roots() {
        let net = NetworkParams::with_default_modulus(3, 6, 4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let types: Vec<_> = (0..3).map(|_| random_type(&mut rng, 4, 20)).collect();
        let mut cfg = config(net, 2);
        cfg.mask_policy = MaskPolicy::Zero;
        let out = run_protocol(&cfg, &types, 0.0).unwrap();
        for m in out.transcript.messages() {
            if let Payload::ObfuscatedReport(values) = &m.payload {
                assert_eq!(*values, quantize_sqrt(&types[m.sender()], net.ring()).values());
            }
        }
    }

    #[test]
    fn statistic_is_exact_and_within_band() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for trial in 0..200 {
            let k = rng.gen_range(2..=8);
            let size = rng.gen_range(2..=16);
            let net = NetworkParams::with_default_modulus(k, 13, size).unwrap();
            let t = rng.gen_range(1..200);
            let types: Vec<_> = (0..k).map(|_| random_type(&mut rng, size, t)).collect();
            let out = run_protocol(&config(net, trial), &types, 1.0).unwrap();
            let q: Vec<_> = types.iter().map(|ty| quantize_sqrt(ty, net.ring())).collect();
            assert_eq!(out.statistic, quantized_diameter(&q).unwrap());
            let d = hellinger_diameter_of_types(&types).unwrap();
            assert!((d - out.statistic.to_f64()).abs() <= net.perturbation_band());
        }
    }

    #[test]
    fn identical_types_give_small_statistic() {
        let net = NetworkParams::with_default_modulus(4, 13, 3).unwrap();
        let ty = EmpiricalType::from_counts(vec![3, 5, 9]).unwrap();
        let out = run_protocol(&config(net, 9), &vec![ty; 4], 0.0).unwrap();
        assert!(out.statistic.to_f64().abs() <= net.perturbation_band());
    }

    #[test]
    fn threshold_edges() {
        let net = NetworkParams::with_default_modulus(3, 8, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let high = crate::typestat::diameter_max(3, 3) + net.perturbation_band() + 1e-9;
        for trial in 0..20 {
            let types: Vec<_> = (0..3).map(|_| random_type(&mut rng, 3, 7)).collect();
            assert_eq!(run_protocol(&config(net, trial), &types, 0.0).unwrap().decision, Hypothesis::H1);
            assert_eq!(run_protocol(&config(net, trial), &types, high).unwrap().decision, Hypothesis::H0);
        }
        assert!(matches!(
            run_protocol(&config(net, 0), &[], -1.0),
            Err(ProtocolError::Network(_)) | Err(ProtocolError::InvalidThreshold(_))
        ));
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let net = NetworkParams::with_default_modulus(3, 10, 4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let types: Vec<_> = (0..3).map(|_| random_type(&mut rng, 4, 30)).collect();
        let a = run_protocol(&elgamal(net, 42), &types, 0.3).unwrap();
        let b = run_protocol(&elgamal(net, 42), &types, 0.3).unwrap();
        assert_eq!(a.transcript.to_jsonl(), b.transcript.to_jsonl());
        let c = run_protocol(&elgamal(net, 43), &types, 0.3).unwrap();
        assert_ne!(a.transcript, c.transcript);
        assert_eq!(a.statistic, c.statistic);
    }

    #[test]
    fn tampered_ciphertext_names_sender() {
        let net = NetworkParams::with_default_modulus(3, 6, 2).unwrap();
        let types = vec![EmpiricalType::from_counts(vec![1, 1]).unwrap(); 3];
        let mut hit = false;
        let err = run_protocol_intercepted(&elgamal(net, 1), &types, 0.1, &mut |m| {
            let sender = m.sender();
            if let Payload::MaskCiphertext { ciphertext, .. } = &mut m.payload {
                if !hit && sender == 1 {
                    hit = true;
                    ciphertext.payload[33] ^= 0x40;
                }
            }
            Delivery::Deliver
        })
        .unwrap_err();
        assert_eq!(err.attribution().map(|a| a.0), Some(Phase::Exchange));
        let ProtocolError::Attributed { source, .. } = err else { unreachable!() };
        assert!(matches!(*source, ProtocolError::Decryption { sender: 1, .. }), "{source}");
    }

    #[test]
    fn dropped_ciphertext_is_incomplete_round() {
        let net = NetworkParams::with_default_modulus(3, 6, 2).unwrap();
        let types = vec![EmpiricalType::from_counts(vec![1, 1]).unwrap(); 3];
        let err = run_protocol_intercepted(&config(net, 1), &types, 0.1, &mut |m| {
            if m.receiver() == Some(2) && m.sender() == 0 {
                Delivery::Drop
            } else {
                Delivery::Deliver
            }
        })
        .unwrap_err();
        assert_eq!(err.attribution(), Some((Phase::Exchange, 2)));
    }

    #[test]
    fn transcript_carries_no_secrets() {
        let net = NetworkParams::with_default_modulus(3, 8, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let types: Vec<_> = (0..3).map(|_| random_type(&mut rng, 3, 40)).collect();
        let cfg = elgamal(net, 11);
        let out = run_protocol(&cfg, &types, 0.3).unwrap();
        // every phase-2 payload is a ciphertext, never a bare ring element
        for m in out.transcript.messages() {
            match &m.payload {
                Payload::PublicKeyAnnounce(pk) => assert_eq!(pk.bytes.len(), 32),
                Payload::MaskCiphertext { ciphertext, .. } => assert_eq!(ciphertext.payload.len(), 64),
                Payload::ObfuscatedReport(v) => assert_eq!(v.len(), 3),
            }
        }
    }
}
