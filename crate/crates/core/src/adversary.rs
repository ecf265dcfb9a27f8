//! Executable privacy games against the masking protocol.
//!
//! The type estimation attack (TEA) and type discrimination attack (TDA)
//! experiments are run trial by trial: a challenger plays the honest sensors,
//! the attacker controls a colluding set and sees exactly what those sensors
//! would see. Colluders are always the last `L` sensors.
//!
//! The module also checks the conditional uniformity of honest mask sums,
//! exactly by enumeration or by a chi-square test.

use crate::crypto::{default_security, Ciphertext, CryptoError, EncryptionScheme, KeyPair, MaskIndex, PublicKey};
use crate::protocol::{draw_mask_row, MaskPolicy, NetworkParams, ProtocolError};
use crate::ring::{RingElement, RingError, RingParams};
use crate::typestat::{quantized_root_ticks, QuantizedSqrtType, TypeError};
use rand::distributions::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::WeightedAliasIndex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;
use std::cell::OnceCell;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// Largest joint support a [`TypeModel`] will tabulate.
pub const MAX_MODEL_ENTRIES: usize = 1_000_000;

/// Largest number of mask draws enumerated in exact uniformity mode.
pub const MAX_EXACT_DRAWS: u128 = 1 << 24;

#[derive(Debug, Error)]
pub enum AdversaryError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("attacker {attacker} disqualified: {reason}")]
    Disqualified { attacker: String, reason: String },
    #[error("invalid game parameters: {0}")]
    InvalidParams(String),
    #[error("instance too large: {0}")]
    Capability(String),
    #[error("candidate types have different modular sums")]
    SumMismatch,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Ring(#[from] RingError),
}

type Result<T> = std::result::Result<T, AdversaryError>;

/// One sensor's mask row `R_{k,l}(x)`, indexed `[l][x]`.
pub type MaskRow = Vec<Vec<RingElement>>;

fn check_same_space(candidate: &[QuantizedSqrtType], truth: &[QuantizedSqrtType]) -> Result<()> {
    if candidate.len() != truth.len() {
        return Err(AdversaryError::DimensionMismatch(format!(
            "{} sensors vs {}",
            candidate.len(),
            truth.len()
        )));
    }
    let Some(first) = truth.first() else {
        return Err(AdversaryError::DimensionMismatch("no sensors".into()));
    };
    for q in candidate.iter().chain(truth) {
        if q.alphabet_size() != first.alphabet_size() || q.params() != first.params() {
            return Err(AdversaryError::DimensionMismatch(format!(
                "type over {} symbols in {} vs {} symbols in {}",
                q.alphabet_size(),
                q.params(),
                first.alphabet_size(),
                first.params()
            )));
        }
    }
    Ok(())
}

/// Per-symbol modular sum of a collection of quantized types.
pub fn modular_sum(types: &[QuantizedSqrtType]) -> Result<Vec<RingElement>> {
    let first = types.first().ok_or_else(|| AdversaryError::DimensionMismatch("no sensors".into()))?;
    let ring = first.params();
    Ok((0..first.alphabet_size()).map(|x| types.iter().fold(ring.zero(), |acc, q| acc + q.values()[x])).collect())
}

/// Sum over sensors of the squared Hellinger distance between the squared
/// candidate and squared truth.
pub fn collection_hellinger(candidate: &[QuantizedSqrtType], truth: &[QuantizedSqrtType]) -> Result<f64> {
    check_same_space(candidate, truth)?;
    Ok(candidate
        .iter()
        .zip(truth)
        .map(|(c, t)| {
            0.5 * c
                .values()
                .iter()
                .zip(t.values())
                .map(|(a, b)| {
                    let d = a.to_f64() - b.to_f64();
                    d * d
                })
                .sum::<f64>()
        })
        .sum())
}

/// Whether `candidate` lies in the `tau`-neighborhood of `truth`: within
/// Hellinger distance `tau` and with the same per-symbol modular sums.
pub fn neighborhood_contains(candidate: &[QuantizedSqrtType], truth: &[QuantizedSqrtType], tau: f64) -> Result<bool> {
    let distance = collection_hellinger(candidate, truth)?;
    Ok(distance <= tau && modular_sum(candidate)? == modular_sum(truth)?)
}

/// Law of one sensor's quantized root type.
#[derive(Clone, Debug)]
struct SensorLaw {
    support: Vec<Vec<u64>>,
    probs: Vec<f64>,
    sampler: WeightedAliasIndex<f64>,
}

impl SensorLaw {
    fn new(dist: &[f64], length: u64, ring: RingParams) -> Result<Self> {
        let size = dist.len();
        let total: f64 = dist.iter().sum();
        if dist.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(AdversaryError::InvalidParams(format!("not a distribution: {dist:?}")));
        }
        let mut mass: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
        let mut counts = vec![0u64; size];
        let mut visited = 0usize;
        compositions(length, &mut counts, 0, &mut |c| {
            visited += 1;
            if visited > MAX_MODEL_ENTRIES {
                return false;
            }
            let mut log_p = ln_gamma(length as f64 + 1.0);
            for (&n, &p) in c.iter().zip(dist) {
                if n > 0 {
                    if p == 0.0 {
                        return true;
                    }
                    log_p += n as f64 * p.ln() - ln_gamma(n as f64 + 1.0);
                }
            }
            let ticks = c.iter().map(|&n| quantized_root_ticks(n, length, ring)).collect();
            *mass.entry(ticks).or_default() += log_p.exp();
            true
        });
        if visited > MAX_MODEL_ENTRIES {
            return Err(AdversaryError::Capability(format!(
                "more than {MAX_MODEL_ENTRIES} types of length {length} over {size} symbols"
            )));
        }
        let (support, probs): (Vec<_>, Vec<_>) = mass.into_iter().unzip();
        let sampler = WeightedAliasIndex::new(probs.clone())
            .map_err(|e| AdversaryError::InvalidParams(format!("type law: {e}")))?;
        Ok(Self { support, probs, sampler })
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<u64> {
        self.support[self.sampler.sample(rng)].clone()
    }

    fn mode(&self) -> &[u64] {
        let best = (0..self.probs.len()).fold(0, |b, i| if self.probs[i] > self.probs[b] { i } else { b });
        &self.support[best]
    }
}

/// Visits every vector of non-negative counts summing to `remaining` in
/// `counts[at..]`; stops when `visit` returns false.
fn compositions(remaining: u64, counts: &mut [u64], at: usize, visit: &mut dyn FnMut(&[u64]) -> bool) -> bool {
    if at + 1 == counts.len() {
        counts[at] = remaining;
        return visit(counts);
    }
    for n in 0..=remaining {
        counts[at] = n;
        if !compositions(remaining - n, counts, at + 1, visit) {
            return false;
        }
    }
    true
}

/// The honest configurations sharing one modular sum.
#[derive(Clone, Debug)]
pub struct Coset {
    members: Vec<Vec<Vec<u64>>>,
    probs: Vec<f64>,
    sampler: WeightedAliasIndex<f64>,
    best: usize,
}

impl Coset {
    /// Honest tick vectors in the coset, `[sensor][symbol]`.
    pub fn members(&self) -> &[Vec<Vec<u64>>] {
        &self.members
    }

    /// Conditional probabilities of the members given the sum.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// The most probable member; ties go to the first in lexicographic order.
    pub fn most_likely(&self) -> &[Vec<u64>] {
        &self.members[self.best]
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> &[Vec<u64>] {
        &self.members[self.sampler.sample(rng)]
    }
}

/// Joint law of the quantized root types in a game: independent sensors, each
/// drawing `length` i.i.d. symbols from its own distribution.
#[derive(Clone, Debug)]
pub struct TypeModel {
    ring: RingParams,
    length: u64,
    honest: usize,
    laws: Vec<SensorLaw>,
    cosets: HashMap<Vec<u64>, Coset>,
}

impl TypeModel {
    /// `distributions[k]` is sensor `k`'s symbol law; the first `honest`
    /// sensors are the honest ones.
    pub fn new(distributions: &[Vec<f64>], honest: usize, length: u64, ring: RingParams) -> Result<Self> {
        if honest == 0 || honest > distributions.len() {
            return Err(AdversaryError::InvalidParams(format!(
                "{honest} honest sensors out of {}",
                distributions.len()
            )));
        }
        let size = distributions[0].len();
        if size == 0 || distributions.iter().any(|d| d.len() != size) {
            return Err(AdversaryError::InvalidParams("distributions need a common non-empty alphabet".into()));
        }
        if length == 0 {
            return Err(AdversaryError::InvalidParams("sequence length must be positive".into()));
        }
        let laws = distributions.iter().map(|d| SensorLaw::new(d, length, ring)).collect::<Result<Vec<_>>>()?;
        let joint: usize = laws[..honest].iter().try_fold(1usize, |acc, l| acc.checked_mul(l.support.len())).unwrap_or(usize::MAX);
        if joint > MAX_MODEL_ENTRIES {
            return Err(AdversaryError::Capability(format!(
                "joint honest support of {joint} exceeds {MAX_MODEL_ENTRIES}"
            )));
        }

        let order = ring.order();
        let mut grouped: BTreeMap<Vec<u64>, Vec<(Vec<Vec<u64>>, f64)>> = BTreeMap::new();
        let mut index = vec![0usize; honest];
        loop {
            let member: Vec<Vec<u64>> = index.iter().zip(&laws).map(|(&i, l)| l.support[i].clone()).collect();
            let p: f64 = index.iter().zip(&laws).map(|(&i, l)| l.probs[i]).product();
            let sum: Vec<u64> = (0..size).map(|x| member.iter().map(|q| q[x]).sum::<u64>() % order).collect();
            grouped.entry(sum).or_default().push((member, p));
            // odometer over the honest supports
            let mut at = 0;
            loop {
                if at == honest {
                    break;
                }
                index[at] += 1;
                if index[at] < laws[at].support.len() {
                    break;
                }
                index[at] = 0;
                at += 1;
            }
            if at == honest {
                break;
            }
        }

        let mut cosets = HashMap::with_capacity(grouped.len());
        for (sum, mut entries) in grouped {
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let total: f64 = entries.iter().map(|e| e.1).sum();
            if total <= 0.0 {
                continue;
            }
            let probs: Vec<f64> = entries.iter().map(|e| e.1 / total).collect();
            let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
            let sampler = WeightedAliasIndex::new(probs.clone())
                .map_err(|e| AdversaryError::InvalidParams(format!("coset law: {e}")))?;
            let members = entries.into_iter().map(|e| e.0).collect();
            cosets.insert(sum, Coset { members, probs, sampler, best });
        }
        Ok(Self { ring, length, honest, laws, cosets })
    }

    pub fn ring(&self) -> RingParams {
        self.ring
    }

    pub fn length(&self) -> u64 {
        self.length
    }

    pub fn honest(&self) -> usize {
        self.honest
    }

    pub fn sensors(&self) -> usize {
        self.laws.len()
    }

    pub fn alphabet(&self) -> usize {
        self.laws[0].support[0].len()
    }

    /// Draws the honest sensors' types from the prior.
    pub fn sample_honest(&self, rng: &mut dyn RngCore) -> Vec<Vec<u64>> {
        self.laws[..self.honest].iter().map(|l| l.sample(rng)).collect()
    }

    /// Draws the colluding sensors' types from the prior.
    pub fn sample_colluders(&self, rng: &mut dyn RngCore) -> Vec<Vec<u64>> {
        self.laws[self.honest..].iter().map(|l| l.sample(rng)).collect()
    }

    /// Most probable type of each colluding sensor.
    pub fn colluder_modes(&self) -> Vec<Vec<u64>> {
        self.laws[self.honest..].iter().map(|l| l.mode().to_vec()).collect()
    }

    /// Honest configurations with the given per-symbol modular sum (ticks).
    pub fn coset(&self, sum: &[u64]) -> Option<&Coset> {
        self.cosets.get(sum)
    }

    /// Iterates over all cosets with positive mass, keyed by their sum.
    pub fn cosets(&self) -> impl Iterator<Item = (&Vec<u64>, &Coset)> {
        self.cosets.iter()
    }

    /// Whether a tick vector is a possible honest configuration.
    pub fn supports(&self, honest: &[Vec<u64>]) -> bool {
        honest.len() == self.honest
            && honest.iter().zip(&self.laws).all(|(q, law)| law.support.binary_search(q).is_ok())
    }

    pub fn sum_of(&self, honest: &[Vec<u64>]) -> Vec<u64> {
        let order = self.ring.order();
        (0..self.alphabet()).map(|x| honest.iter().map(|q| q[x]).sum::<u64>() % order).collect()
    }

    pub fn to_types(&self, ticks: &[Vec<u64>]) -> Result<Vec<QuantizedSqrtType>> {
        ticks
            .iter()
            .map(|q| {
                let values = q.iter().map(|&t| self.ring.element(t)).collect::<std::result::Result<Vec<_>, _>>()?;
                Ok(QuantizedSqrtType::from_values(values, self.length)?)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameParams {
    pub sensors: usize,
    /// Size of the colluding set, which is always the last sensors.
    pub colluders: usize,
    pub alphabet: usize,
    pub frac_bits: u32,
    pub length: u64,
    pub tau: f64,
    pub trials: u64,
    pub seed: u64,
    /// Per-sensor symbol distributions; empty means uniform everywhere.
    pub distributions: Vec<Vec<f64>>,
}

impl Default for GameParams {
    fn default() -> Self {
        Self {
            sensors: 3,
            colluders: 1,
            alphabet: 2,
            frac_bits: 3,
            length: 8,
            tau: 0.02,
            trials: 100_000,
            seed: 1,
            distributions: Vec::new(),
        }
    }
}

impl GameParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AdversaryError::InvalidParams(msg));
        if self.colluders >= self.sensors {
            return bad(format!("{} colluders leave no honest sensor among {}", self.colluders, self.sensors));
        }
        if self.trials == 0 {
            return bad("need at least one trial".into());
        }
        if !self.tau.is_finite() || self.tau < 0.0 {
            return bad(format!("radius {} must be non-negative", self.tau));
        }
        if !self.distributions.is_empty() && self.distributions.len() != self.sensors {
            return bad(format!("{} distributions for {} sensors", self.distributions.len(), self.sensors));
        }
        self.network()?;
        Ok(())
    }

    pub fn network(&self) -> Result<NetworkParams> {
        Ok(NetworkParams::with_default_modulus(self.sensors, self.frac_bits, self.alphabet)?)
    }

    /// Whether at least two sensors are honest, the regime in which the
    /// protocol's privacy guarantee applies.
    pub fn guarantee_regime(&self) -> bool {
        self.colluders + 2 <= self.sensors
    }

    pub fn honest(&self) -> usize {
        self.sensors - self.colluders
    }

    pub fn model(&self) -> Result<TypeModel> {
        self.validate()?;
        let dists = if self.distributions.is_empty() {
            vec![vec![1.0 / self.alphabet as f64; self.alphabet]; self.sensors]
        } else {
            self.distributions.clone()
        };
        TypeModel::new(&dists, self.honest(), self.length, self.network()?.ring())
    }
}

/// Everything the colluding sensors legitimately hold during a game.
///
/// Foreign private keys and foreign mask rows are stored privately and have no
/// accessor; the only way to learn about them is through the ciphertexts and
/// reports, as in the protocol.
pub struct AttackerContext<'a> {
    net: NetworkParams,
    honest: Vec<usize>,
    colluders: Vec<usize>,
    scheme: &'a dyn EncryptionScheme,
    public_keys: BTreeMap<usize, PublicKey>,
    own_keys: BTreeMap<usize, KeyPair>,
    own_types: Vec<QuantizedSqrtType>,
    rows: Vec<Option<MaskRow>>,
    ciphertexts: Vec<OnceCell<std::result::Result<Vec<(MaskIndex, Ciphertext)>, CryptoError>>>,
    encryption_lanes: (u64, u64, u64),
    reports: BTreeMap<usize, Vec<RingElement>>,
    candidates: Option<(Vec<QuantizedSqrtType>, Vec<QuantizedSqrtType>)>,
}

impl AttackerContext<'_> {
    pub fn net(&self) -> &NetworkParams {
        &self.net
    }

    pub fn ring(&self) -> RingParams {
        self.net.ring()
    }

    pub fn honest(&self) -> &[usize] {
        &self.honest
    }

    pub fn colluders(&self) -> &[usize] {
        &self.colluders
    }

    pub fn scheme(&self) -> &dyn EncryptionScheme {
        self.scheme
    }

    /// Public keys of every sensor, the colluders' included.
    pub fn public_keys(&self) -> &BTreeMap<usize, PublicKey> {
        &self.public_keys
    }

    pub fn own_keys(&self) -> &BTreeMap<usize, KeyPair> {
        &self.own_keys
    }

    /// Quantized root types of the colluders, in colluder order.
    pub fn own_types(&self) -> &[QuantizedSqrtType] {
        &self.own_types
    }

    /// The colluders' mask rows, once they have been fixed.
    pub fn own_rows(&self) -> BTreeMap<usize, &MaskRow> {
        self.colluders.iter().filter_map(|&l| self.rows[l].as_ref().map(|r| (l, r))).collect()
    }

    /// Masks sent by honest sensors to colluders, as decrypted with the
    /// colluders' own keys. Decryption is correct for every key pair the
    /// scheme produces, so these are the plaintexts themselves.
    pub fn received_masks(&self) -> Vec<(MaskIndex, RingElement)> {
        let mut out = Vec::new();
        for &k in &self.honest {
            let row = self.rows[k].as_ref().expect("honest rows are fixed before play");
            for &l in &self.colluders {
                for (x, &r) in row[l].iter().enumerate() {
                    out.push((MaskIndex { sender: k, receiver: l, symbol: x }, r));
                }
            }
        }
        out
    }

    /// Ciphertexts sent by `sender`, encrypted on first use. Empty when the
    /// sender has not fixed its masks yet.
    pub fn ciphertexts_from(&self, sender: usize) -> std::result::Result<&[(MaskIndex, Ciphertext)], CryptoError> {
        let Some(row) = self.rows.get(sender).and_then(|r| r.as_ref()) else {
            return Ok(&[]);
        };
        let cell = &self.ciphertexts[sender];
        let result = cell.get_or_init(|| {
            let (seed, lane, trial) = self.encryption_lanes;
            let mut rng = lane_rng(seed, lane + sender as u64, trial);
            let mut out = Vec::with_capacity((self.net.sensors() - 1) * self.net.alphabet());
            for (l, entries) in row.iter().enumerate() {
                if l == sender {
                    continue;
                }
                let pk = self.public_keys.get(&l).ok_or(CryptoError::MissingKey(l))?;
                for (x, r) in entries.iter().enumerate() {
                    let ct = self.scheme.encrypt(r, pk, &mut rng)?;
                    out.push((MaskIndex { sender, receiver: l, symbol: x }, ct));
                }
            }
            Ok(out)
        });
        result.as_deref().map_err(Clone::clone)
    }

    /// Every ciphertext exchanged so far.
    pub fn ciphertexts(&self) -> std::result::Result<Vec<(MaskIndex, Ciphertext)>, CryptoError> {
        let mut all = Vec::new();
        for k in 0..self.net.sensors() {
            all.extend_from_slice(self.ciphertexts_from(k)?);
        }
        Ok(all)
    }

    /// Released reports `G_k`: honest sensors' after the release step, and the
    /// colluders' own. Empty while masks are still being chosen.
    pub fn reports(&self) -> &BTreeMap<usize, Vec<RingElement>> {
        &self.reports
    }

    /// The two honest candidates of a discrimination game.
    pub fn candidates(&self) -> Option<(&[QuantizedSqrtType], &[QuantizedSqrtType])> {
        self.candidates.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()))
    }
}

/// Per-symbol modular sum of the honest types, as any colluding set can work
/// it out from the reports, its own rows and the masks it received.
pub fn leaked_sum(ctx: &AttackerContext<'_>) -> Result<Vec<RingElement>> {
    let ring = ctx.ring();
    let size = ctx.net().alphabet();
    let mut sum = vec![ring.zero(); size];
    for &h in ctx.honest() {
        let g = ctx
            .reports()
            .get(&h)
            .ok_or_else(|| AdversaryError::InvalidParams(format!("report of sensor {h} not released yet")))?;
        for x in 0..size {
            sum[x] = sum[x] + g[x];
        }
    }
    // the honest columns cancel everything except the colluders' columns
    for (_, row) in ctx.own_rows() {
        for &l in ctx.colluders() {
            for x in 0..size {
                sum[x] = sum[x] + row[l][x];
            }
        }
    }
    for (idx, r) in ctx.received_masks() {
        sum[idx.symbol] = sum[idx.symbol] + r;
    }
    Ok(sum)
}

/// A colluding set. Both hooks default to following the protocol.
pub trait Attacker: Sync {
    fn name(&self) -> &'static str;

    /// Replaces the colluders' key pairs. Must return one pair per colluder.
    fn inject_keys(
        &self,
        _colluders: &[usize],
        _honest_keys: &BTreeMap<usize, PublicKey>,
        _scheme: &dyn EncryptionScheme,
        _rng: &mut dyn RngCore,
    ) -> Option<std::result::Result<BTreeMap<usize, KeyPair>, CryptoError>> {
        None
    }

    /// Replaces the colluders' mask rows. Each row must sum to zero per
    /// symbol.
    fn inject_masks(&self, _ctx: &AttackerContext<'_>, _rng: &mut dyn RngCore) -> Option<BTreeMap<usize, MaskRow>> {
        None
    }
}

/// Estimates the honest sensors' types.
pub trait TeaAttacker: Attacker {
    fn estimate(&self, ctx: &AttackerContext<'_>, model: &TypeModel, rng: &mut dyn RngCore) -> Vec<QuantizedSqrtType>;
}

/// Guesses which candidate the honest sensors hold; `true` means the second.
pub trait TdaAttacker: Attacker {
    fn guess(&self, ctx: &AttackerContext<'_>, rng: &mut dyn RngCore) -> bool;
}

/// Ignores the transcript: a prior draw for estimation, a coin for
/// discrimination.
pub struct RandomGuess;

impl Attacker for RandomGuess {
    fn name(&self) -> &'static str {
        "random-guess"
    }
}

impl TeaAttacker for RandomGuess {
    fn estimate(&self, _ctx: &AttackerContext<'_>, model: &TypeModel, rng: &mut dyn RngCore) -> Vec<QuantizedSqrtType> {
        model.to_types(&model.sample_honest(rng)).unwrap_or_default()
    }
}

impl TdaAttacker for RandomGuess {
    fn guess(&self, _ctx: &AttackerContext<'_>, rng: &mut dyn RngCore) -> bool {
        rng.gen()
    }
}

/// Reads ciphertexts as raw tick counts; succeeds only when the scheme leaves
/// plaintexts in the clear.
fn read_plain(ct: &Ciphertext, ring: RingParams) -> Option<RingElement> {
    let bytes: [u8; 8] = ct.payload.as_slice().try_into().ok()?;
    ring.element(u64::from_le_bytes(bytes)).ok()
}

/// Recovers the honest types outright if every honest ciphertext reads as a
/// plaintext and the result is a valid type vector.
fn reconstruct_honest(ctx: &AttackerContext<'_>) -> Option<Vec<Vec<u64>>> {
    let ring = ctx.ring();
    let k = ctx.net().sensors();
    let size = ctx.net().alphabet();
    let mut rows: Vec<MaskRow> = vec![vec![vec![ring.zero(); size]; k]; k];
    for &h in ctx.honest() {
        for (idx, ct) in ctx.ciphertexts_from(h).ok()? {
            rows[h][idx.receiver][idx.symbol] = read_plain(ct, ring)?;
        }
        for x in 0..size {
            let off = (0..k).filter(|&l| l != h).fold(ring.zero(), |acc, l| acc + rows[h][l][x]);
            rows[h][h][x] = -off;
        }
    }
    for (l, row) in ctx.own_rows() {
        rows[l] = row.clone();
    }
    let mut out = Vec::with_capacity(ctx.honest().len());
    for &h in ctx.honest() {
        let g = ctx.reports().get(&h)?;
        let q: Vec<u64> = (0..size)
            .map(|x| (0..k).fold(g[x], |acc, s| acc - rows[s][h][x]).ticks())
            .collect();
        if q.iter().any(|&t| t >= ring.one_ticks()) {
            return None;
        }
        out.push(q);
    }
    Some(out)
}

/// Circular distance between two ring elements, in ticks.
fn ring_distance(a: RingElement, b: u64) -> u64 {
    let order = a.params().order();
    let d = (a.ticks() + order - b % order) % order;
    d.min(order - d)
}

/// Picks the candidate closest to the honest reports after removing the
/// mask contributions the colluders know.
fn nearest_candidate(ctx: &AttackerContext<'_>, rng: &mut dyn RngCore) -> bool {
    let Some((q0, q1)) = ctx.candidates() else {
        return rng.gen();
    };
    let size = ctx.net().alphabet();
    let own = ctx.own_rows();
    let mut score = [0u64; 2];
    for (i, &h) in ctx.honest().iter().enumerate() {
        let Some(g) = ctx.reports().get(&h) else {
            return rng.gen();
        };
        for x in 0..size {
            let residual = own.values().fold(g[x], |acc, row| acc - row[h][x]);
            score[0] += ring_distance(residual, q0[i].values()[x].ticks());
            score[1] += ring_distance(residual, q1[i].values()[x].ticks());
        }
    }
    match score[0].cmp(&score[1]) {
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => rng.gen(),
    }
}

fn match_candidates(ctx: &AttackerContext<'_>, honest: &[Vec<u64>], rng: &mut dyn RngCore) -> bool {
    let Some((q0, q1)) = ctx.candidates() else {
        return rng.gen();
    };
    let is = |c: &[QuantizedSqrtType]| c.iter().zip(honest).all(|(q, h)| q.ticks() == *h);
    match (is(q0), is(q1)) {
        (true, false) => false,
        (false, true) => true,
        _ => rng.gen(),
    }
}

fn sum_aware_estimate(ctx: &AttackerContext<'_>, model: &TypeModel, rng: &mut dyn RngCore) -> Vec<QuantizedSqrtType> {
    if let Some(honest) = reconstruct_honest(ctx).filter(|h| model.supports(h)) {
        return model.to_types(&honest).unwrap_or_default();
    }
    let Ok(sum) = leaked_sum(ctx) else {
        return RandomGuess.estimate(ctx, model, rng);
    };
    let key: Vec<u64> = sum.iter().map(|s| s.ticks()).collect();
    match model.coset(&key) {
        Some(c) => model.to_types(c.most_likely()).unwrap_or_default(),
        None => RandomGuess.estimate(ctx, model, rng),
    }
}

fn sum_aware_guess(ctx: &AttackerContext<'_>, rng: &mut dyn RngCore) -> bool {
    match reconstruct_honest(ctx) {
        Some(honest) => match_candidates(ctx, &honest, rng),
        None => nearest_candidate(ctx, rng),
    }
}

/// Uses the leaked modular sum: reads the honest masks when the ciphertexts
/// allow it, and otherwise answers with the most likely configuration
/// consistent with the sum.
pub struct SumAware;

impl Attacker for SumAware {
    fn name(&self) -> &'static str {
        "sum-aware"
    }
}

impl TeaAttacker for SumAware {
    fn estimate(&self, ctx: &AttackerContext<'_>, model: &TypeModel, rng: &mut dyn RngCore) -> Vec<QuantizedSqrtType> {
        sum_aware_estimate(ctx, model, rng)
    }
}

impl TdaAttacker for SumAware {
    fn guess(&self, ctx: &AttackerContext<'_>, rng: &mut dyn RngCore) -> bool {
        sum_aware_guess(ctx, rng)
    }
}

/// Deviates from the protocol: every colluder shares one key pair and sends
/// all-zero masks, then attacks like [`SumAware`].
pub struct MaskInjector;

impl Attacker for MaskInjector {
    fn name(&self) -> &'static str {
        "mask-injector"
    }

    fn inject_keys(
        &self,
        colluders: &[usize],
        _honest_keys: &BTreeMap<usize, PublicKey>,
        scheme: &dyn EncryptionScheme,
        rng: &mut dyn RngCore,
    ) -> Option<std::result::Result<BTreeMap<usize, KeyPair>, CryptoError>> {
        Some(
            scheme
                .keygen(default_security(scheme), rng)
                .map(|kp| colluders.iter().map(|&l| (l, kp.clone())).collect()),
        )
    }

    fn inject_masks(&self, ctx: &AttackerContext<'_>, _rng: &mut dyn RngCore) -> Option<BTreeMap<usize, MaskRow>> {
        let ring = ctx.ring();
        let zero = vec![vec![ring.zero(); ctx.net().alphabet()]; ctx.net().sensors()];
        Some(ctx.colluders().iter().map(|&l| (l, zero.clone())).collect())
    }
}

impl TeaAttacker for MaskInjector {
    fn estimate(&self, ctx: &AttackerContext<'_>, model: &TypeModel, rng: &mut dyn RngCore) -> Vec<QuantizedSqrtType> {
        sum_aware_estimate(ctx, model, rng)
    }
}

impl TdaAttacker for MaskInjector {
    fn guess(&self, ctx: &AttackerContext<'_>, rng: &mut dyn RngCore) -> bool {
        sum_aware_guess(ctx, rng)
    }
}

pub fn tea_suite() -> Vec<Box<dyn TeaAttacker>> {
    vec![Box::new(RandomGuess), Box::new(SumAware), Box::new(MaskInjector)]
}

pub fn tda_suite() -> Vec<Box<dyn TdaAttacker>> {
    vec![Box::new(RandomGuess), Box::new(SumAware), Box::new(MaskInjector)]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    WithinBand,
    AboveBaseline,
    BelowBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameReport {
    pub game: String,
    pub attacker: String,
    pub scheme: String,
    pub params: GameParams,
    pub trials: u64,
    pub win_rate: f64,
    pub baseline_rate: f64,
    pub advantage: f64,
    /// Three standard errors of the advantage.
    pub band: f64,
    pub verdict: Verdict,
}

impl GameReport {
    fn new(game: &str, attacker: &str, scheme: &str, params: &GameParams, win_rate: f64, baseline_rate: f64, band: f64) -> Self {
        let advantage = win_rate - baseline_rate;
        let verdict = if advantage.abs() <= band {
            Verdict::WithinBand
        } else if advantage > 0.0 {
            Verdict::AboveBaseline
        } else {
            Verdict::BelowBaseline
        };
        Self {
            game: game.to_string(),
            attacker: attacker.to_string(),
            scheme: scheme.to_string(),
            params: params.clone(),
            trials: params.trials,
            win_rate,
            baseline_rate,
            advantage,
            band,
            verdict,
        }
    }
}

const LANE_CHALLENGER: u64 = 0;
const LANE_DEFAULT_KEYS: u64 = 1;
const LANE_DEFAULT_MASKS: u64 = 2;
const LANE_BASELINE: u64 = 3;
const LANE_ATTACKER: u64 = 1 << 16;
const LANE_ENCRYPTION: u64 = 1 << 32;

fn lane_rng(seed: u64, lane: u64, trial: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&lane.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(trial);
    rng
}

/// The honest side of one trial, shared by every attacker in it.
struct Challenge<'a> {
    params: &'a GameParams,
    net: NetworkParams,
    scheme: &'a dyn EncryptionScheme,
    model: &'a TypeModel,
    trial: u64,
    honest_types: Vec<Vec<u64>>,
    colluder_types: Vec<Vec<u64>>,
    honest_keys: BTreeMap<usize, KeyPair>,
    honest_rows: Vec<MaskRow>,
    default_keys: OnceCell<BTreeMap<usize, KeyPair>>,
    default_rows: OnceCell<BTreeMap<usize, MaskRow>>,
    candidates: Option<(Vec<QuantizedSqrtType>, Vec<QuantizedSqrtType>)>,
}

impl<'a> Challenge<'a> {
    fn new(
        params: &'a GameParams,
        scheme: &'a dyn EncryptionScheme,
        model: &'a TypeModel,
        trial: u64,
        types: Option<(Vec<Vec<u64>>, Vec<Vec<u64>>)>,
    ) -> Result<Self> {
        let net = params.network()?;
        let honest = params.honest();
        let mut rng = lane_rng(params.seed, LANE_CHALLENGER, trial);
        let security = default_security(scheme);
        let honest_keys = (0..honest)
            .map(|h| Ok((h, scheme.keygen(security, &mut rng)?)))
            .collect::<std::result::Result<BTreeMap<_, _>, CryptoError>>()?;
        let (honest_types, colluder_types) = match types {
            Some(t) => t,
            None => (model.sample_honest(&mut rng), model.sample_colluders(&mut rng)),
        };
        let honest_rows = (0..honest).map(|h| draw_mask_row(h, &net, MaskPolicy::Uniform, &mut rng)).collect();
        Ok(Self {
            params,
            net,
            scheme,
            model,
            trial,
            honest_types,
            colluder_types,
            honest_keys,
            honest_rows,
            default_keys: OnceCell::new(),
            default_rows: OnceCell::new(),
            candidates: None,
        })
    }

    fn colluders(&self) -> Vec<usize> {
        (self.params.honest()..self.params.sensors).collect()
    }

    fn default_keys(&self) -> Result<&BTreeMap<usize, KeyPair>> {
        if let Some(k) = self.default_keys.get() {
            return Ok(k);
        }
        let mut rng = lane_rng(self.params.seed, LANE_DEFAULT_KEYS, self.trial);
        let security = default_security(self.scheme);
        let keys = self
            .colluders()
            .into_iter()
            .map(|l| Ok((l, self.scheme.keygen(security, &mut rng)?)))
            .collect::<std::result::Result<BTreeMap<_, _>, CryptoError>>()?;
        Ok(self.default_keys.get_or_init(|| keys))
    }

    fn default_rows(&self) -> &BTreeMap<usize, MaskRow> {
        self.default_rows.get_or_init(|| {
            let mut rng = lane_rng(self.params.seed, LANE_DEFAULT_MASKS, self.trial);
            self.colluders()
                .into_iter()
                .map(|l| (l, draw_mask_row(l, &self.net, MaskPolicy::Uniform, &mut rng)))
                .collect()
        })
    }

    fn disqualify(attacker: &dyn Attacker, reason: String) -> AdversaryError {
        AdversaryError::Disqualified { attacker: attacker.name().to_string(), reason }
    }

    fn check_keys(&self, attacker: &dyn Attacker, keys: &BTreeMap<usize, KeyPair>) -> Result<()> {
        let colluders = self.colluders();
        if !keys.keys().copied().eq(colluders.iter().copied()) {
            return Err(Self::disqualify(attacker, format!("keys for {:?}, expected {colluders:?}", keys.keys())));
        }
        if let Some((l, _)) = keys.iter().find(|(_, kp)| kp.public.scheme != self.scheme.tag()) {
            return Err(Self::disqualify(attacker, format!("key of sensor {l} is not a {} key", self.scheme.name())));
        }
        Ok(())
    }

    fn check_rows(&self, attacker: &dyn Attacker, rows: &BTreeMap<usize, MaskRow>) -> Result<()> {
        let colluders = self.colluders();
        if !rows.keys().copied().eq(colluders.iter().copied()) {
            return Err(Self::disqualify(attacker, format!("masks for {:?}, expected {colluders:?}", rows.keys())));
        }
        let ring = self.net.ring();
        let (k, size) = (self.net.sensors(), self.net.alphabet());
        for (&l, row) in rows {
            if row.len() != k || row.iter().any(|c| c.len() != size || c.iter().any(|r| r.params() != ring)) {
                return Err(Self::disqualify(attacker, format!("mask row of sensor {l} has the wrong shape")));
            }
            for x in 0..size {
                let total = row.iter().fold(ring.zero(), |acc, c| acc + c[x]);
                if total.ticks() != 0 {
                    return Err(Self::disqualify(
                        attacker,
                        format!("mask row of sensor {l} sums to {total} on symbol {x}, not zero"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Runs key setup, mask exchange and report release against one attacker.
    fn play(&self, attacker: &dyn Attacker, index: usize) -> Result<(AttackerContext<'a>, ChaCha8Rng)> {
        let honest: Vec<usize> = (0..self.params.honest()).collect();
        let colluders = self.colluders();
        let lane = LANE_ATTACKER + index as u64;
        let mut rng = lane_rng(self.params.seed, lane, self.trial);

        let honest_pks: BTreeMap<usize, PublicKey> =
            self.honest_keys.iter().map(|(&h, kp)| (h, kp.public.clone())).collect();
        let own_keys = match attacker.inject_keys(&colluders, &honest_pks, self.scheme, &mut rng) {
            Some(keys) => {
                let keys = keys?;
                self.check_keys(attacker, &keys)?;
                keys
            }
            None => self.default_keys()?.clone(),
        };
        let mut public_keys = honest_pks;
        public_keys.extend(own_keys.iter().map(|(&l, kp)| (l, kp.public.clone())));

        let k = self.net.sensors();
        let mut rows: Vec<Option<MaskRow>> = vec![None; k];
        for (h, row) in self.honest_rows.iter().enumerate() {
            rows[h] = Some(row.clone());
        }
        let mut ctx = AttackerContext {
            net: self.net,
            honest,
            colluders,
            scheme: self.scheme,
            public_keys,
            own_keys,
            own_types: self.model.to_types(&self.colluder_types)?,
            rows,
            ciphertexts: (0..k).map(|_| OnceCell::new()).collect(),
            encryption_lanes: (self.params.seed, LANE_ENCRYPTION + (index as u64) * (k as u64), self.trial),
            reports: BTreeMap::new(),
            candidates: self.candidates.clone(),
        };

        let own_rows = match attacker.inject_masks(&ctx, &mut rng) {
            Some(rows) => {
                self.check_rows(attacker, &rows)?;
                rows
            }
            None => self.default_rows().clone(),
        };
        for (l, row) in own_rows {
            ctx.rows[l] = Some(row);
        }

        let ring = self.net.ring();
        let all_rows: Vec<&MaskRow> = ctx.rows.iter().map(|r| r.as_ref().expect("all rows fixed")).collect();
        let types = self.honest_types.iter().chain(&self.colluder_types);
        for (s, q) in types.enumerate() {
            let report = (0..self.net.alphabet())
                .map(|x| all_rows.iter().fold(ring.element(q[x]).expect("type below one"), |acc, r| acc + r[s][x]))
                .collect();
            ctx.reports.insert(s, report);
        }
        Ok((ctx, rng))
    }
}

fn check_game(params: &GameParams, model: &TypeModel) -> Result<()> {
    params.validate()?;
    let net = params.network()?;
    if model.ring() != net.ring()
        || model.sensors() != params.sensors
        || model.honest() != params.honest()
        || model.alphabet() != params.alphabet
    {
        return Err(AdversaryError::InvalidParams("type model does not match the game parameters".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Default)]
struct Tally {
    wins: u64,
    baseline_wins: u64,
    diff_sq: u64,
}

/// Runs the type estimation game for every attacker on shared challenger
/// randomness. Each attacker is scored against the truth and against a truth
/// resampled from the same coset, the matched independent guesser.
pub fn run_tea(
    params: &GameParams,
    scheme: &dyn EncryptionScheme,
    model: &TypeModel,
    attackers: &[&dyn TeaAttacker],
) -> Result<Vec<GameReport>> {
    check_game(params, model)?;
    let per_trial: Vec<Vec<(bool, bool)>> = (0..params.trials)
        .into_par_iter()
        .map(|trial| {
            let challenge = Challenge::new(params, scheme, model, trial, None)?;
            let truth = model.to_types(&challenge.honest_types)?;
            let sum = model.sum_of(&challenge.honest_types);
            let coset = model.coset(&sum).expect("truth lies in its own coset");
            let mut base_rng = lane_rng(params.seed, LANE_BASELINE, trial);
            let resampled = model.to_types(coset.sample(&mut base_rng))?;
            attackers
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let (ctx, mut rng) = challenge.play(*a, i)?;
                    let estimate = a.estimate(&ctx, model, &mut rng);
                    let invalid = |e: AdversaryError| Challenge::disqualify(*a, format!("invalid estimate: {e}"));
                    let win = neighborhood_contains(&estimate, &truth, params.tau).map_err(invalid)?;
                    let base = neighborhood_contains(&estimate, &resampled, params.tau).map_err(invalid)?;
                    Ok((win, base))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let n = params.trials as f64;
    Ok(attackers
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let t = per_trial.iter().fold(Tally::default(), |mut t, row| {
                let (w, b) = row[i];
                t.wins += w as u64;
                t.baseline_wins += b as u64;
                t.diff_sq += (w != b) as u64;
                t
            });
            let (win, base) = (t.wins as f64 / n, t.baseline_wins as f64 / n);
            // paired differences take values in {-1, 0, 1}
            let mean = win - base;
            let var = (t.diff_sq as f64 / n - mean * mean).max(0.0);
            let band = 3.0 * (var / n).sqrt();
            GameReport::new("tea", a.name(), scheme.name(), params, win, base, band)
        })
        .collect())
}

/// Candidates of a discrimination game: the colluders' own types and two
/// honest configurations with equal modular sums.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TdaInstance {
    pub colluders: Vec<Vec<u64>>,
    pub first: Vec<Vec<u64>>,
    pub second: Vec<Vec<u64>>,
}

impl TdaInstance {
    /// The two most likely members of the heaviest coset that has at least
    /// two members, with the colluders at their most likely types.
    pub fn most_confusable(model: &TypeModel) -> Result<Self> {
        let mut best: Option<(f64, &Vec<u64>, &Coset)> = None;
        for (sum, coset) in model.cosets() {
            if coset.members.len() < 2 {
                continue;
            }
            let mass: f64 = coset
                .members
                .iter()
                .map(|m| m.iter().zip(&model.laws).map(|(q, l)| l.probs[l.support.binary_search(q).unwrap()]).product::<f64>())
                .sum();
            if best.is_none_or(|(b, s, _)| mass > b || (mass == b && sum < s)) {
                best = Some((mass, sum, coset));
            }
        }
        let (_, _, coset) =
            best.ok_or_else(|| AdversaryError::InvalidParams("every coset has a single member".into()))?;
        let mut order: Vec<usize> = (0..coset.members.len()).collect();
        order.sort_by(|&a, &b| coset.probs[b].total_cmp(&coset.probs[a]).then(a.cmp(&b)));
        Ok(Self {
            colluders: model.colluder_modes(),
            first: coset.members[order[0]].clone(),
            second: coset.members[order[1]].clone(),
        })
    }

    pub fn validate(&self, model: &TypeModel) -> Result<()> {
        let shape_ok = |v: &[Vec<u64>], n: usize| {
            v.len() == n && v.iter().all(|q| q.len() == model.alphabet() && q.iter().all(|&t| t < model.ring().one_ticks()))
        };
        if !shape_ok(&self.first, model.honest())
            || !shape_ok(&self.second, model.honest())
            || !shape_ok(&self.colluders, model.sensors() - model.honest())
        {
            return Err(AdversaryError::DimensionMismatch("candidate types do not fit the game".into()));
        }
        if model.sum_of(&self.first) != model.sum_of(&self.second) {
            return Err(AdversaryError::SumMismatch);
        }
        Ok(())
    }
}

/// Runs the type discrimination game for every attacker on shared challenger
/// randomness. The baseline is a fair coin.
pub fn run_tda(
    params: &GameParams,
    scheme: &dyn EncryptionScheme,
    model: &TypeModel,
    instance: &TdaInstance,
    attackers: &[&dyn TdaAttacker],
) -> Result<Vec<GameReport>> {
    check_game(params, model)?;
    instance.validate(model)?;
    let candidates = (model.to_types(&instance.first)?, model.to_types(&instance.second)?);
    let per_trial: Vec<Vec<bool>> = (0..params.trials)
        .into_par_iter()
        .map(|trial| {
            let bit: bool = lane_rng(params.seed, LANE_BASELINE, trial).gen();
            let chosen = if bit { &instance.second } else { &instance.first };
            let types = Some((chosen.clone(), instance.colluders.clone()));
            let mut challenge = Challenge::new(params, scheme, model, trial, types)?;
            challenge.candidates = Some(candidates.clone());
            attackers
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let (ctx, mut rng) = challenge.play(*a, i)?;
                    Ok(a.guess(&ctx, &mut rng) == bit)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let n = params.trials as f64;
    let band = 3.0 * (0.25 / n).sqrt();
    Ok(attackers
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let wins = per_trial.iter().filter(|row| row[i]).count() as f64;
            GameReport::new("tda", a.name(), scheme.name(), params, wins / n, 0.5, band)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UniformityMode {
    Exact,
    Statistical,
    /// Exact when the instance is small enough, statistical otherwise.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformityParams {
    pub sensors: usize,
    pub colluders: usize,
    pub frac_bits: u32,
    pub alphabet: usize,
    /// Ring modulus; `1` gives the ring of `2^m` elements.
    pub modulus: u64,
    pub samples: u64,
    pub seed: u64,
}

impl UniformityParams {
    pub fn new(sensors: usize, colluders: usize, frac_bits: u32, alphabet: usize) -> Self {
        Self { sensors, colluders, frac_bits, alphabet, modulus: sensors as u64 + 1, samples: 1_000_000, seed: 1 }
    }

    pub fn ring(&self) -> Result<RingParams> {
        Ok(RingParams::new(self.modulus, self.frac_bits)?)
    }

    fn honest(&self) -> usize {
        self.sensors - self.colluders
    }

    /// The observed honest sensors, the first two (or the only one).
    fn observed(&self) -> usize {
        self.honest().min(2)
    }

    /// Exponent `e` in the on-coset mass `order^-e`.
    pub fn free_dimension(&self) -> u32 {
        ((self.honest() - 1) * self.alphabet) as u32
    }

    /// Number of equally likely mask draws of the observed rows.
    pub fn exact_draws(&self) -> Option<u128> {
        let order = self.ring().ok()?.order() as u128;
        let entries = (self.observed() * (self.sensors - 1) * self.alphabet) as u32;
        order.checked_pow(entries)
    }

    fn validate(&self) -> Result<()> {
        if self.sensors < 2 || self.colluders >= self.sensors || self.alphabet == 0 {
            return Err(AdversaryError::InvalidParams(format!(
                "{} colluders among {} sensors over {} symbols",
                self.colluders, self.sensors, self.alphabet
            )));
        }
        self.ring()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    pub params: UniformityParams,
    pub mode: UniformityMode,
    pub notice: Option<String>,
    /// Predicted conditional mass of each on-coset value, `order^-e`.
    pub predicted_mass: f64,
    /// Exact mode: mask draws enumerated. Statistical mode: samples drawn.
    pub draws: u128,
    pub constraint_violations: u64,
    pub chi_square: Option<f64>,
    pub degrees_of_freedom: Option<u64>,
    pub p_value: Option<f64>,
    /// The observed law agrees with the predicted coset law.
    pub matches_prediction: bool,
    /// The law is a non-degenerate uniform distribution on its coset.
    pub uniform: bool,
}

/// Checks that, given the masks the observed honest sensors send to the
/// colluders, the honest column sums of those sensors' masks are uniform on
/// the coset fixed by the zero-sum constraint.
pub fn check_mask_uniformity(params: &UniformityParams, mode: UniformityMode) -> Result<UniformityReport> {
    params.validate()?;
    let small = params.exact_draws().is_some_and(|d| d <= MAX_EXACT_DRAWS);
    match mode {
        UniformityMode::Exact if !small => Err(AdversaryError::Capability(format!(
            "exact enumeration needs {} draws, limit {MAX_EXACT_DRAWS}",
            params.exact_draws().map_or("over 2^128".to_string(), |d| d.to_string())
        ))),
        UniformityMode::Exact => exact_uniformity(params),
        UniformityMode::Auto if small => exact_uniformity(params),
        UniformityMode::Auto => {
            let mut report = statistical_uniformity(params)?;
            report.notice = Some(format!(
                "instance too large for exhaustive enumeration (limit {MAX_EXACT_DRAWS} draws); used {} samples",
                params.samples
            ));
            Ok(report)
        }
        UniformityMode::Statistical => statistical_uniformity(params),
    }
}

/// Per-symbol sums over the observed rows of the entries sent to each
/// honest receiver, and the flattened entries sent to colluders.
fn split_observation(rows: &[MaskRow], params: &UniformityParams) -> (Vec<u64>, Vec<u64>) {
    let honest = params.honest();
    let ring = rows[0][0][0].params();
    let mut sums = Vec::with_capacity(honest * params.alphabet);
    for l in 0..honest {
        for x in 0..params.alphabet {
            sums.push(rows.iter().fold(ring.zero(), |acc, r| acc + r[l][x]).ticks());
        }
    }
    let mut to_colluders = Vec::with_capacity(rows.len() * params.colluders * params.alphabet);
    for r in rows {
        for entries in &r[honest..] {
            to_colluders.extend(entries.iter().map(|e| e.ticks()));
        }
    }
    (sums, to_colluders)
}

/// Whether the honest sums and colluder entries satisfy the zero-sum
/// constraint.
fn on_coset(sums: &[u64], to_colluders: &[u64], params: &UniformityParams, order: u64) -> bool {
    (0..params.alphabet).all(|x| {
        let honest: u64 = (0..params.honest()).map(|l| sums[l * params.alphabet + x]).sum();
        let colluders: u64 = to_colluders.chunks(params.alphabet).map(|c| c[x]).sum();
        (honest + colluders) % order == 0
    })
}

fn exact_uniformity(params: &UniformityParams) -> Result<UniformityReport> {
    let ring = params.ring()?;
    let order = ring.order();
    let (k, size, observed) = (params.sensors, params.alphabet, params.observed());
    let free = observed * (k - 1) * size;
    let mut digits = vec![0u64; free];
    let mut joint: HashMap<Vec<u64>, HashMap<Vec<u64>, u64>> = HashMap::new();
    let mut draws: u128 = 0;
    let mut violations = 0u64;
    loop {
        // lay the free digits out as off-diagonal entries
        let mut next = digits.iter();
        let rows: Vec<MaskRow> = (0..observed)
            .map(|s| {
                let mut row = vec![vec![ring.zero(); size]; k];
                for (l, entries) in row.iter_mut().enumerate() {
                    if l != s {
                        for e in entries.iter_mut() {
                            *e = ring.element(*next.next().expect("digit")).expect("digit below order");
                        }
                    }
                }
                for x in 0..size {
                    let off = (0..k).filter(|&l| l != s).fold(ring.zero(), |acc, l| acc + row[l][x]);
                    row[s][x] = -off;
                }
                row
            })
            .collect();
        let (sums, to_colluders) = split_observation(&rows, params);
        if !on_coset(&sums, &to_colluders, params, order) {
            violations += 1;
        }
        *joint.entry(to_colluders).or_default().entry(sums).or_default() += 1;
        draws += 1;

        let mut at = 0;
        while at < free {
            digits[at] += 1;
            if digits[at] < order {
                break;
            }
            digits[at] = 0;
            at += 1;
        }
        if at == free {
            break;
        }
    }

    let e = params.free_dimension();
    let coset_size = (order as u128).pow(e);
    let mut matches = violations == 0;
    for (given, law) in &joint {
        let total: u128 = law.values().map(|&c| c as u128).sum();
        matches &= law.len() as u128 == coset_size;
        for (sums, &count) in law {
            matches &= on_coset(sums, given, params, order) && count as u128 * coset_size == total;
        }
    }
    Ok(UniformityReport {
        params: params.clone(),
        mode: UniformityMode::Exact,
        notice: None,
        predicted_mass: 1.0 / coset_size as f64,
        draws,
        constraint_violations: violations,
        chi_square: None,
        degrees_of_freedom: None,
        p_value: None,
        matches_prediction: matches,
        uniform: matches && e > 0,
    })
}

fn statistical_uniformity(params: &UniformityParams) -> Result<UniformityReport> {
    let net = NetworkParams::new(params.sensors, params.ring()?, params.alphabet)?;
    let order = net.ring().order();
    let size = params.alphabet;
    // free coordinates: honest sums except the last receiver, then the
    // entries sent to colluders; all are uniform and independent under the
    // predicted law
    let free_sums = (params.honest() - 1) * size;
    let coordinates = free_sums + params.observed() * params.colluders * size;
    let max_cells = params.samples / 5;
    let mut prefix = 0usize;
    let mut cells = 1u64;
    while prefix < coordinates && cells.checked_mul(order).is_some_and(|c| c <= max_cells) {
        cells *= order;
        prefix += 1;
    }
    if prefix == 0 {
        return Err(AdversaryError::InvalidParams(format!(
            "{} samples cannot fill {order} cells at five per cell",
            params.samples
        )));
    }

    let mut counts = vec![0u64; cells as usize];
    let mut violations = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for _ in 0..params.samples {
        let rows: Vec<MaskRow> =
            (0..params.observed()).map(|s| draw_mask_row(s, &net, MaskPolicy::Uniform, &mut rng)).collect();
        let (sums, to_colluders) = split_observation(&rows, params);
        if !on_coset(&sums, &to_colluders, params, order) {
            violations += 1;
        }
        let coords = sums[..free_sums].iter().chain(&to_colluders);
        let cell = coords.take(prefix).fold(0u64, |acc, &c| acc * order + c);
        counts[cell as usize] += 1;
    }
    let expected = params.samples as f64 / cells as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let df = cells - 1;
    let p = ChiSquared::new(df as f64)
        .map_err(|e| AdversaryError::InvalidParams(format!("chi-square: {e}")))?
        .sf(stat);
    let e = params.free_dimension();
    let matches = violations == 0 && p > 0.01;
    Ok(UniformityReport {
        params: params.clone(),
        mode: UniformityMode::Statistical,
        notice: None,
        predicted_mass: (order as f64).powi(-(e as i32)),
        draws: params.samples as u128,
        constraint_violations: violations,
        chi_square: Some(stat),
        degrees_of_freedom: Some(df),
        p_value: Some(p),
        matches_prediction: matches,
        uniform: matches && e > 0,
    })
}
