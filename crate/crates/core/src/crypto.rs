//! Public-key encryption of ring elements and the chosen-plaintext game.
//!
//! [`ElGamal`] is the CPA-secure instantiation: lifted ElGamal over the
//! Ristretto prime-order group, with a ring element `r` encoded as `r * G` and
//! recovered by a baby-step/giant-step search on decryption. [`Identity`] and
//! [`FixedPad`] are insecure fixtures for exercising the games.

use crate::ring::{RingElement, RingError, RingParams};
use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::{Identity as _, MultiscalarMul};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("security parameter {requested} not supported by {scheme} (supported: {supported})")]
    UnsupportedSecurity { scheme: &'static str, requested: u32, supported: &'static str },
    #[error("key or ciphertext belongs to scheme {found:?}, expected {expected:?}")]
    SchemeMismatch { expected: SchemeTag, found: SchemeTag },
    #[error("malformed {0}")]
    Malformed(&'static str),
    #[error("ciphertext does not decrypt to an element of the ring")]
    DecryptionFailed,
    #[error("ring of order {0} too large for exponent decoding")]
    RingTooLarge(u64),
    #[error("no public key for receiver {0}")]
    MissingKey(usize),
    #[error("attacker returned {0}, expected a bit")]
    InvalidGuess(u8),
    #[error("experiment needs at least one trial")]
    NoTrials,
    #[error(transparent)]
    Ring(#[from] RingError),
}

/// Wire tag identifying the scheme that produced a key or ciphertext.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum SchemeTag {
    ElGamal = 1,
    Identity = 2,
    FixedPad = 3,
}

impl SchemeTag {
    pub fn from_byte(b: u8) -> Result<Self, CryptoError> {
        match b {
            1 => Ok(SchemeTag::ElGamal),
            2 => Ok(SchemeTag::Identity),
            3 => Ok(SchemeTag::FixedPad),
            _ => Err(CryptoError::Malformed("scheme tag")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PublicKey {
    pub scheme: SchemeTag,
    pub security: u32,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

impl PublicKey {
    /// `tag | security (u16 LE) | len (u16 LE) | group element encoding`.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.bytes.len());
        out.push(self.scheme as u8);
        out.extend_from_slice(&(self.security as u16).to_le_bytes());
        out.extend_from_slice(&(self.bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < 5 {
            return Err(CryptoError::Malformed("public key"));
        }
        let scheme = SchemeTag::from_byte(bytes[0])?;
        let security = u16::from_le_bytes([bytes[1], bytes[2]]) as u32;
        let len = u16::from_le_bytes([bytes[3], bytes[4]]) as usize;
        if bytes.len() != 5 + len {
            return Err(CryptoError::Malformed("public key"));
        }
        Ok(Self { scheme, security, bytes: bytes[5..].to_vec() })
    }
}

/// Private half of a key pair. Deliberately not serializable.
#[derive(Clone)]
pub struct PrivateKey {
    scheme: SchemeTag,
    security: u32,
    bytes: Vec<u8>,
}

impl PrivateKey {
    pub fn scheme(&self) -> SchemeTag {
        self.scheme
    }

    pub fn security(&self) -> u32 {
        self.security
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivateKey({:?}, n={}, <redacted>)", self.scheme, self.security)
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

impl KeyPair {
    pub fn security(&self) -> u32 {
        self.public.security
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ciphertext {
    pub scheme: SchemeTag,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
}

impl Ciphertext {
    /// `tag | len (u16 LE) | payload`.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 + self.payload.len());
        out.push(self.scheme as u8);
        out.extend_from_slice(&(self.payload.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, CryptoError> {
        let (ct, used) = Self::read_wire(bytes)?;
        if used != bytes.len() {
            return Err(CryptoError::Malformed("ciphertext"));
        }
        Ok(ct)
    }

    /// Parses one ciphertext from the front of `bytes`, returning the number
    /// of bytes consumed.
    pub fn read_wire(bytes: &[u8]) -> Result<(Self, usize), CryptoError> {
        if bytes.len() < 3 {
            return Err(CryptoError::Malformed("ciphertext"));
        }
        let scheme = SchemeTag::from_byte(bytes[0])?;
        let len = u16::from_le_bytes([bytes[1], bytes[2]]) as usize;
        let payload = bytes.get(3..3 + len).ok_or(CryptoError::Malformed("ciphertext"))?;
        Ok((Self { scheme, payload: payload.to_vec() }, 3 + len))
    }
}

/// A public-key scheme `(S, E, D)` whose plaintexts are ring elements.
pub trait EncryptionScheme: Send + Sync {
    fn tag(&self) -> SchemeTag;

    fn name(&self) -> &'static str;

    /// Upper bound on serialized payload length.
    fn max_ciphertext_len(&self) -> usize;

    fn keygen(&self, security: u32, rng: &mut dyn RngCore) -> Result<KeyPair, CryptoError>;

    fn encrypt(
        &self,
        plaintext: &RingElement,
        pk: &PublicKey,
        rng: &mut dyn RngCore,
    ) -> Result<Ciphertext, CryptoError>;

    fn decrypt(&self, ct: &Ciphertext, sk: &PrivateKey, ring: RingParams) -> Result<RingElement, CryptoError>;
}

fn check_tag(expected: SchemeTag, found: SchemeTag) -> Result<(), CryptoError> {
    if expected == found {
        Ok(())
    } else {
        Err(CryptoError::SchemeMismatch { expected, found })
    }
}

/// Lifted ElGamal on Ristretto255.
#[derive(Clone, Copy, Debug, Default)]
pub struct ElGamal;

/// Security level of Ristretto255, the only group offered.
pub const ELGAMAL_SECURITY: u32 = 128;

/// Largest ring order accepted by [`ElGamal`] decryption.
pub const ELGAMAL_MAX_ORDER: u64 = 1 << 32;

const BABY_STEPS_MAX: u64 = 1 << 16;

fn random_scalar(rng: &mut dyn RngCore) -> Scalar {
    let mut wide = [0u8; 64];
    rng.fill_bytes(&mut wide);
    Scalar::from_bytes_mod_order_wide(&wide)
}

fn decode_point(bytes: &[u8]) -> Result<RistrettoPoint, CryptoError> {
    CompressedRistretto::from_slice(bytes)
        .map_err(|_| CryptoError::Malformed("group element"))?
        .decompress()
        .ok_or(CryptoError::Malformed("group element"))
}

/// Decompresses a public key, remembering the last one seen on this thread
/// since masks are encrypted in runs under the same key.
fn decode_public_point(bytes: &[u8]) -> Result<RistrettoPoint, CryptoError> {
    thread_local! {
        static LAST: RefCell<Option<(Vec<u8>, RistrettoPoint)>> = const { RefCell::new(None) };
    }
    LAST.with(|last| {
        if let Some((b, p)) = last.borrow().as_ref() {
            if b.as_slice() == bytes {
                return Ok(*p);
            }
        }
        let p = decode_point(bytes)?;
        *last.borrow_mut() = Some((bytes.to_vec(), p));
        Ok(p)
    })
}

fn decode_scalar(bytes: &[u8]) -> Result<Scalar, CryptoError> {
    let arr: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::Malformed("private key"))?;
    Option::from(Scalar::from_canonical_bytes(arr)).ok_or(CryptoError::Malformed("private key"))
}

/// Baby-step table `j*G -> j` for `j < baby`.
struct DlogTable {
    baby: u64,
    lookup: HashMap<[u8; 32], u64>,
    giant: RistrettoPoint,
}

impl DlogTable {
    fn build(baby: u64) -> Self {
        let g = RISTRETTO_BASEPOINT_TABLE.basepoint();
        let mut lookup = HashMap::with_capacity(baby as usize);
        let mut acc = RistrettoPoint::identity();
        for j in 0..baby {
            lookup.insert(acc.compress().to_bytes(), j);
            acc += g;
        }
        Self { baby, lookup, giant: acc }
    }

    fn solve(&self, target: RistrettoPoint, order: u64) -> Option<u64> {
        let mut point = target;
        let mut base = 0u64;
        while base < order {
            if let Some(&j) = self.lookup.get(&point.compress().to_bytes()) {
                let v = base + j;
                return (v < order).then_some(v);
            }
            point -= self.giant;
            base += self.baby;
        }
        None
    }
}

fn dlog_table(baby: u64) -> Arc<DlogTable> {
    static TABLES: OnceLock<Mutex<BTreeMap<u64, Arc<DlogTable>>>> = OnceLock::new();
    let tables = TABLES.get_or_init(|| Mutex::new(BTreeMap::new()));
    // reuse any table at least as large as requested
    if let Some((_, t)) = tables.lock().unwrap().range(baby..).next() {
        return t.clone();
    }
    let table = Arc::new(DlogTable::build(baby));
    tables.lock().unwrap().insert(baby, table.clone());
    table
}

impl EncryptionScheme for ElGamal {
    fn tag(&self) -> SchemeTag {
        SchemeTag::ElGamal
    }

    fn name(&self) -> &'static str {
        "elgamal"
    }

    fn max_ciphertext_len(&self) -> usize {
        64
    }

    fn keygen(&self, security: u32, rng: &mut dyn RngCore) -> Result<KeyPair, CryptoError> {
        if security != ELGAMAL_SECURITY {
            return Err(CryptoError::UnsupportedSecurity {
                scheme: self.name(),
                requested: security,
                supported: "128",
            });
        }
        let x = random_scalar(rng);
        let h = &x * RISTRETTO_BASEPOINT_TABLE;
        Ok(KeyPair {
            public: PublicKey { scheme: self.tag(), security, bytes: h.compress().to_bytes().to_vec() },
            private: PrivateKey { scheme: self.tag(), security, bytes: x.to_bytes().to_vec() },
        })
    }

    fn encrypt(
        &self,
        plaintext: &RingElement,
        pk: &PublicKey,
        rng: &mut dyn RngCore,
    ) -> Result<Ciphertext, CryptoError> {
        check_tag(self.tag(), pk.scheme)?;
        if plaintext.params().order() > ELGAMAL_MAX_ORDER {
            return Err(CryptoError::RingTooLarge(plaintext.params().order()));
        }
        let h = decode_public_point(&pk.bytes)?;
        let y = random_scalar(rng);
        let m = Scalar::from(plaintext.ticks());
        let c1 = &y * RISTRETTO_BASEPOINT_TABLE;
        let c2 = RistrettoPoint::multiscalar_mul([m, y], [RISTRETTO_BASEPOINT_TABLE.basepoint(), h]);
        let mut payload = Vec::with_capacity(64);
        payload.extend_from_slice(c1.compress().as_bytes());
        payload.extend_from_slice(c2.compress().as_bytes());
        Ok(Ciphertext { scheme: self.tag(), payload })
    }

    fn decrypt(&self, ct: &Ciphertext, sk: &PrivateKey, ring: RingParams) -> Result<RingElement, CryptoError> {
        check_tag(self.tag(), ct.scheme)?;
        check_tag(self.tag(), sk.scheme)?;
        let order = ring.order();
        if order > ELGAMAL_MAX_ORDER {
            return Err(CryptoError::RingTooLarge(order));
        }
        if ct.payload.len() != 64 {
            return Err(CryptoError::Malformed("ciphertext"));
        }
        let c1 = decode_point(&ct.payload[..32])?;
        let c2 = decode_point(&ct.payload[32..])?;
        let x = decode_scalar(&sk.bytes)?;
        let encoded = c2 - x * c1;
        let table = dlog_table(order.min(BABY_STEPS_MAX));
        let ticks = table.solve(encoded, order).ok_or(CryptoError::DecryptionFailed)?;
        Ok(ring.element(ticks)?)
    }
}

fn any_security(security: u32, scheme: &'static str) -> Result<(), CryptoError> {
    if security == 0 {
        Err(CryptoError::UnsupportedSecurity { scheme, requested: 0, supported: ">= 1" })
    } else {
        Ok(())
    }
}

fn ticks_payload(ct: &Ciphertext) -> Result<u64, CryptoError> {
    let arr: [u8; 8] = ct.payload.as_slice().try_into().map_err(|_| CryptoError::Malformed("ciphertext"))?;
    Ok(u64::from_le_bytes(arr))
}

/// Insecure: the ciphertext is the plaintext tick count.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl EncryptionScheme for Identity {
    fn tag(&self) -> SchemeTag {
        SchemeTag::Identity
    }

    fn name(&self) -> &'static str {
        "identity"
    }

    fn max_ciphertext_len(&self) -> usize {
        8
    }

    fn keygen(&self, security: u32, rng: &mut dyn RngCore) -> Result<KeyPair, CryptoError> {
        any_security(security, self.name())?;
        let mut id = vec![0u8; 16];
        rng.fill_bytes(&mut id);
        Ok(KeyPair {
            public: PublicKey { scheme: self.tag(), security, bytes: id.clone() },
            private: PrivateKey { scheme: self.tag(), security, bytes: id },
        })
    }

    fn encrypt(&self, plaintext: &RingElement, pk: &PublicKey, _rng: &mut dyn RngCore) -> Result<Ciphertext, CryptoError> {
        check_tag(self.tag(), pk.scheme)?;
        Ok(Ciphertext { scheme: self.tag(), payload: plaintext.ticks().to_le_bytes().to_vec() })
    }

    fn decrypt(&self, ct: &Ciphertext, sk: &PrivateKey, ring: RingParams) -> Result<RingElement, CryptoError> {
        check_tag(self.tag(), ct.scheme)?;
        check_tag(self.tag(), sk.scheme)?;
        ring.element(ticks_payload(ct)?).map_err(|_| CryptoError::DecryptionFailed)
    }
}

/// Insecure and deterministic: XOR with a per-key pad published in the key.
#[derive(Clone, Copy, Debug, Default)]
pub struct FixedPad;

impl FixedPad {
    fn pad(bytes: &[u8]) -> Result<u64, CryptoError> {
        let arr: [u8; 8] = bytes.try_into().map_err(|_| CryptoError::Malformed("pad key"))?;
        Ok(u64::from_le_bytes(arr))
    }
}

impl EncryptionScheme for FixedPad {
    fn tag(&self) -> SchemeTag {
        SchemeTag::FixedPad
    }

    fn name(&self) -> &'static str {
        "fixed-pad"
    }

    fn max_ciphertext_len(&self) -> usize {
        8
    }

    fn keygen(&self, security: u32, rng: &mut dyn RngCore) -> Result<KeyPair, CryptoError> {
        any_security(security, self.name())?;
        let pad = rng.next_u64().to_le_bytes().to_vec();
        Ok(KeyPair {
            public: PublicKey { scheme: self.tag(), security, bytes: pad.clone() },
            private: PrivateKey { scheme: self.tag(), security, bytes: pad },
        })
    }

    fn encrypt(&self, plaintext: &RingElement, pk: &PublicKey, _rng: &mut dyn RngCore) -> Result<Ciphertext, CryptoError> {
        check_tag(self.tag(), pk.scheme)?;
        let v = plaintext.ticks() ^ Self::pad(&pk.bytes)?;
        Ok(Ciphertext { scheme: self.tag(), payload: v.to_le_bytes().to_vec() })
    }

    fn decrypt(&self, ct: &Ciphertext, sk: &PrivateKey, ring: RingParams) -> Result<RingElement, CryptoError> {
        check_tag(self.tag(), ct.scheme)?;
        check_tag(self.tag(), sk.scheme)?;
        let v = ticks_payload(ct)? ^ Self::pad(&sk.bytes)?;
        ring.element(v).map_err(|_| CryptoError::DecryptionFailed)
    }
}

/// Looks up a scheme by its CLI name.
pub fn scheme_by_name(name: &str) -> Option<Arc<dyn EncryptionScheme>> {
    match name {
        "elgamal" => Some(Arc::new(ElGamal)),
        "identity" => Some(Arc::new(Identity)),
        "fixed-pad" => Some(Arc::new(FixedPad)),
        _ => None,
    }
}

/// Default security parameter for a scheme.
pub fn default_security(scheme: &dyn EncryptionScheme) -> u32 {
    match scheme.tag() {
        SchemeTag::ElGamal => ELGAMAL_SECURITY,
        _ => 1,
    }
}

/// Position of one mask `R_{k,l}(x)` in a collection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskIndex {
    pub sender: usize,
    pub receiver: usize,
    pub symbol: usize,
}

/// Encrypts each plaintext independently under its receiver's key, keeping
/// the input order and indexing.
pub fn multi_encrypt(
    scheme: &dyn EncryptionScheme,
    plaintexts: &[(MaskIndex, RingElement)],
    keys: &BTreeMap<usize, PublicKey>,
    rng: &mut dyn RngCore,
) -> Result<Vec<(MaskIndex, Ciphertext)>, CryptoError> {
    plaintexts
        .iter()
        .map(|(idx, r)| {
            let pk = keys.get(&idx.receiver).ok_or(CryptoError::MissingKey(idx.receiver))?;
            Ok((*idx, scheme.encrypt(r, pk, rng)?))
        })
        .collect()
}

/// Inverse of [`multi_encrypt`] for the receivers whose private keys are given.
pub fn multi_decrypt(
    scheme: &dyn EncryptionScheme,
    ciphertexts: &[(MaskIndex, Ciphertext)],
    keys: &BTreeMap<usize, PrivateKey>,
    ring: RingParams,
) -> Result<Vec<(MaskIndex, RingElement)>, CryptoError> {
    ciphertexts
        .iter()
        .map(|(idx, ct)| {
            let sk = keys.get(&idx.receiver).ok_or(CryptoError::MissingKey(idx.receiver))?;
            Ok((*idx, scheme.decrypt(ct, sk, ring)?))
        })
        .collect()
}

/// What a CPA attacker sees in step 4 of the game.
pub struct CpaChallenge<'a> {
    pub ciphertext: &'a Ciphertext,
    pub r0: RingElement,
    pub r1: RingElement,
    pub public_key: &'a PublicKey,
    pub scheme: &'a dyn EncryptionScheme,
}

/// A chosen-plaintext attacker; returns its guess of the hidden bit.
pub trait CpaAttacker: Sync {
    fn name(&self) -> &'static str;

    /// Step 2 of the game: the attacker's challenge pair. Defaults to two
    /// independent uniform ring elements.
    fn choose(&self, ring: RingParams, _pk: &PublicKey, rng: &mut dyn RngCore) -> (RingElement, RingElement) {
        (ring.uniform(rng), ring.uniform(rng))
    }

    fn guess(&self, challenge: &CpaChallenge<'_>, rng: &mut dyn RngCore) -> u8;
}

/// Ignores its input and flips a coin.
pub struct CoinFlip;

impl CpaAttacker for CoinFlip {
    fn name(&self) -> &'static str {
        "coin-flip"
    }

    fn guess(&self, _c: &CpaChallenge<'_>, rng: &mut dyn RngCore) -> u8 {
        (rng.next_u32() & 1) as u8
    }
}

/// Reads the payload as a little-endian tick count and matches it against
/// the challenge pair.
pub struct PlaintextMatch;

impl CpaAttacker for PlaintextMatch {
    fn name(&self) -> &'static str {
        "plaintext-match"
    }

    fn guess(&self, c: &CpaChallenge<'_>, rng: &mut dyn RngCore) -> u8 {
        let mut buf = [0u8; 8];
        let n = c.ciphertext.payload.len().min(8);
        buf[..n].copy_from_slice(&c.ciphertext.payload[..n]);
        let v = u64::from_le_bytes(buf);
        if v == c.r1.ticks() && v != c.r0.ticks() {
            1
        } else if v == c.r0.ticks() {
            0
        } else {
            (rng.next_u32() & 1) as u8
        }
    }
}

/// Re-encrypts `r0` under the public key and compares ciphertexts; wins
/// against any deterministic scheme.
pub struct ReEncrypt;

impl CpaAttacker for ReEncrypt {
    fn name(&self) -> &'static str {
        "re-encrypt"
    }

    fn guess(&self, c: &CpaChallenge<'_>, rng: &mut dyn RngCore) -> u8 {
        match c.scheme.encrypt(&c.r0, c.public_key, rng) {
            Ok(ct) if ct == *c.ciphertext => 0,
            Ok(_) => match c.scheme.encrypt(&c.r1, c.public_key, rng) {
                Ok(ct) if ct == *c.ciphertext => 1,
                _ => (rng.next_u32() & 1) as u8,
            },
            Err(_) => (rng.next_u32() & 1) as u8,
        }
    }
}

/// Guesses from the parity of the payload bytes, compared with the parity of
/// the candidate plaintexts.
pub struct ParityProbe;

impl CpaAttacker for ParityProbe {
    fn name(&self) -> &'static str {
        "parity-probe"
    }

    fn guess(&self, c: &CpaChallenge<'_>, _rng: &mut dyn RngCore) -> u8 {
        let parity = c.ciphertext.payload.iter().fold(0u8, |a, b| a ^ b) & 1;
        u8::from(parity == (c.r1.ticks() & 1) as u8)
    }
}

/// The standard suite of CPA attackers.
pub fn cpa_suite() -> Vec<Box<dyn CpaAttacker>> {
    vec![Box::new(CoinFlip), Box::new(PlaintextMatch), Box::new(ReEncrypt), Box::new(ParityProbe)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpaReport {
    pub scheme: String,
    pub attacker: String,
    pub trials: u64,
    pub wins: u64,
    pub win_rate: f64,
    pub advantage: f64,
    /// Standard deviation of the win rate under a fair coin, `0.5 / sqrt(trials)`.
    pub sigma: f64,
    pub within_3_sigma: bool,
}

/// Runs `trials` independent rounds of the CPA game and reports the empirical
/// win frequency. Each trial has its own RNG derived from `seed`.
pub fn run_cpa_experiment(
    scheme: &dyn EncryptionScheme,
    security: u32,
    ring: RingParams,
    attacker: &dyn CpaAttacker,
    trials: u64,
    seed: u64,
) -> Result<CpaReport, CryptoError> {
    if trials == 0 {
        return Err(CryptoError::NoTrials);
    }
    let outcomes: Result<Vec<bool>, CryptoError> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(trial);
            // 1. keygen
            let keys = scheme.keygen(security, &mut rng)?;
            // 2. attacker picks the challenge pair
            let (r0, r1) = attacker.choose(ring, &keys.public, &mut rng);
            // 3. hidden bit and challenge ciphertext
            let bit: u8 = rng.gen_range(0..=1);
            let ct = scheme.encrypt(if bit == 0 { &r0 } else { &r1 }, &keys.public, &mut rng)?;
            // 4. attacker's guess
            let challenge = CpaChallenge { ciphertext: &ct, r0, r1, public_key: &keys.public, scheme };
            let guess = attacker.guess(&challenge, &mut rng);
            if guess > 1 {
                return Err(CryptoError::InvalidGuess(guess));
            }
            Ok(guess == bit)
        })
        .collect();
    let wins = outcomes?.into_iter().filter(|&w| w).count() as u64;
    let win_rate = wins as f64 / trials as f64;
    let sigma = 0.5 / (trials as f64).sqrt();
    Ok(CpaReport {
        scheme: scheme.name().to_string(),
        attacker: attacker.name().to_string(),
        trials,
        wins,
        win_rate,
        advantage: win_rate - 0.5,
        sigma,
        within_3_sigma: (win_rate - 0.5).abs() < 3.0 * sigma,
    })
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
