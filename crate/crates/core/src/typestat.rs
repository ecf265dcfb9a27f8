//! Empirical types, quantized square-root types and the Hellinger diameter.

use crate::ring::{RingElement, RingError, RingParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TypeError {
    #[error("alphabet must have at least one symbol")]
    EmptyAlphabet,
    #[error("symbol {symbol} outside alphabet of size {size}")]
    SymbolOutOfRange { symbol: usize, size: usize },
    #[error("sequence must be non-empty")]
    EmptySequence,
    #[error("count vector has length {got}, alphabet has {expected} symbols")]
    WrongLength { expected: usize, got: usize },
    #[error("diameter needs at least two marginals, got {0}")]
    TooFewMarginals(usize),
    #[error("marginal {index} is not a probability distribution")]
    InvalidDistribution { index: usize },
    #[error(transparent)]
    Ring(#[from] RingError),
}

/// Finite measurement alphabet `{0, .., size-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Alphabet {
    size: usize,
}

impl Alphabet {
    pub fn new(size: usize) -> Result<Self, TypeError> {
        if size == 0 {
            return Err(TypeError::EmptyAlphabet);
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

/// Type (empirical distribution) of a finite sequence, held as exact counts.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmpiricalType {
    counts: Vec<u64>,
    length: u64,
}

impl EmpiricalType {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self, TypeError> {
        if counts.is_empty() {
            return Err(TypeError::EmptyAlphabet);
        }
        let length: u64 = counts.iter().sum();
        if length == 0 {
            return Err(TypeError::EmptySequence);
        }
        Ok(Self { counts, length })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn length(&self) -> u64 {
        self.length
    }

    pub fn alphabet_size(&self) -> usize {
        self.counts.len()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let t = self.length as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    /// Type of the concatenation of the two underlying sequences.
    pub fn merge(&self, other: &EmpiricalType) -> Result<EmpiricalType, TypeError> {
        if self.counts.len() != other.counts.len() {
            return Err(TypeError::WrongLength {
                expected: self.counts.len(),
                got: other.counts.len(),
            });
        }
        let counts = self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect();
        EmpiricalType::from_counts(counts)
    }
}

/// Counts symbol occurrences in `sequence`.
pub fn compute_type(sequence: &[usize], alphabet: Alphabet) -> Result<EmpiricalType, TypeError> {
    if sequence.is_empty() {
        return Err(TypeError::EmptySequence);
    }
    let mut counts = vec![0u64; alphabet.size()];
    for &symbol in sequence {
        let slot = counts
            .get_mut(symbol)
            .ok_or(TypeError::SymbolOutOfRange { symbol, size: alphabet.size() })?;
        *slot += 1;
    }
    EmpiricalType::from_counts(counts)
}

/// Per-symbol square root of a type, rounded onto the ring grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QuantizedSqrtType {
    values: Vec<RingElement>,
    source_length: u64,
}

impl QuantizedSqrtType {
    /// Wraps raw ring values, e.g. an attacker's estimate. Values must lie
    /// below one.
    pub fn from_values(values: Vec<RingElement>, source_length: u64) -> Result<Self, TypeError> {
        let first = values.first().ok_or(TypeError::EmptyAlphabet)?;
        let params = first.params();
        for v in &values {
            if v.params() != params {
                return Err(RingError::Mismatch { left: params, right: v.params() }.into());
            }
            if v.ticks() >= params.one_ticks() {
                return Err(RingError::TickOutOfRange { ticks: v.ticks(), order: params.one_ticks() }.into());
            }
        }
        Ok(Self { values, source_length })
    }

    pub fn values(&self) -> &[RingElement] {
        &self.values
    }

    pub fn ticks(&self) -> Vec<u64> {
        self.values.iter().map(|v| v.ticks()).collect()
    }

    pub fn source_length(&self) -> u64 {
        self.source_length
    }

    pub fn params(&self) -> RingParams {
        self.values[0].params()
    }

    pub fn alphabet_size(&self) -> usize {
        self.values.len()
    }

    /// `q(x)^2` as reals; not necessarily a distribution.
    pub fn squared(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.to_f64() * v.to_f64()).collect()
    }
}

/// Nearest-grid quantization of `sqrt(count / t)` with spacing `2^-m`.
///
/// Ties round up; the value `1` is clamped to `1 - 2^-m` so every entry stays
/// strictly below one.
pub fn quantize_sqrt(ty: &EmpiricalType, ring: RingParams) -> QuantizedSqrtType {
    let values = ty
        .counts
        .iter()
        .map(|&c| ring.element(quantized_root_ticks(c, ty.length, ring)).expect("quantized tick below 2^m"))
        .collect();
    QuantizedSqrtType { values, source_length: ty.length }
}

/// Tick count of the quantized root of `count / length`, with the same
/// rounding and clamping as [`quantize_sqrt`].
pub fn quantized_root_ticks(count: u64, length: u64, ring: RingParams) -> u64 {
    nearest_sqrt_ticks(count, length, ring.frac_bits()).min(ring.one_ticks() - 1)
}

/// `floor(2^m * sqrt(c / t) + 1/2)` computed exactly.
///
/// `j` is the answer iff `(2j - 1)^2 t <= 4^(m+1) c < (2j + 1)^2 t`.
fn nearest_sqrt_ticks(count: u64, length: u64, m: u32) -> u64 {
    if count == 0 {
        return 0;
    }
    let rhs = (count as u128) << (2 * m + 2);
    let t = length as u128;
    let fits = |j: u64| -> bool {
        let odd = 2 * j as u128 - 1;
        odd * odd * t <= rhs
    };
    let guess = ((count as f64 / length as f64).sqrt() * (m as f64).exp2() + 0.5).floor() as u64;
    let mut j = guess.max(1);
    while j > 1 && !fits(j) {
        j -= 1;
    }
    while fits(j + 1) {
        j += 1;
    }
    j
}

/// `K` marginal distributions over a common alphabet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalVector {
    marginals: Vec<Vec<f64>>,
}

const DISTRIBUTION_TOL: f64 = 1e-9;

impl MarginalVector {
    pub fn new(marginals: Vec<Vec<f64>>) -> Result<Self, TypeError> {
        let size = marginals.first().map(|m| m.len()).unwrap_or(0);
        for (index, m) in marginals.iter().enumerate() {
            if m.len() != size {
                return Err(TypeError::WrongLength { expected: size, got: m.len() });
            }
            let total: f64 = m.iter().sum();
            if m.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > DISTRIBUTION_TOL {
                return Err(TypeError::InvalidDistribution { index });
            }
        }
        Ok(Self { marginals })
    }

    pub fn from_types(types: &[EmpiricalType]) -> Result<Self, TypeError> {
        Self::new(types.iter().map(|t| t.probabilities()).collect())
    }

    pub fn marginals(&self) -> &[Vec<f64>] {
        &self.marginals
    }

    pub fn len(&self) -> usize {
        self.marginals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marginals.is_empty()
    }

    pub fn alphabet_size(&self) -> usize {
        self.marginals.first().map(|m| m.len()).unwrap_or(0)
    }
}

/// A continuous function on `K` marginals that vanishes exactly when they
/// coincide.
pub trait DiameterMeasure {
    fn diameter(&self, marginals: &MarginalVector) -> Result<f64, TypeError>;
}

/// Sum of all ordered pairwise squared Hellinger distances.
#[derive(Clone, Copy, Debug, Default)]
pub struct Hellinger;

impl DiameterMeasure for Hellinger {
    fn diameter(&self, marginals: &MarginalVector) -> Result<f64, TypeError> {
        hellinger_diameter(marginals)
    }
}

/// `K^2 - sum_x (sum_k sqrt(p_k(x)))^2`.
pub fn hellinger_diameter(marginals: &MarginalVector) -> Result<f64, TypeError> {
    let k = marginals.len();
    if k < 2 {
        return Err(TypeError::TooFewMarginals(k));
    }
    Ok(diameter_from_roots(k, marginals.alphabet_size(), |kk, x| marginals.marginals[kk][x].sqrt()))
}

/// Hellinger diameter computed straight from exact counts.
pub fn hellinger_diameter_of_types(types: &[EmpiricalType]) -> Result<f64, TypeError> {
    let k = types.len();
    if k < 2 {
        return Err(TypeError::TooFewMarginals(k));
    }
    let size = types[0].alphabet_size();
    if let Some(bad) = types.iter().find(|t| t.alphabet_size() != size) {
        return Err(TypeError::WrongLength { expected: size, got: bad.alphabet_size() });
    }
    Ok(diameter_from_roots(k, size, |kk, x| {
        (types[kk].counts[x] as f64 / types[kk].length as f64).sqrt()
    }))
}

fn diameter_from_roots(k: usize, size: usize, root: impl Fn(usize, usize) -> f64) -> f64 {
    let mut overlap = 0.0;
    for x in 0..size {
        let s: f64 = (0..k).map(|kk| root(kk, x)).sum();
        overlap += s * s;
    }
    // clamp float noise; the exact value is non-negative
    ((k * k) as f64 - overlap).max(0.0)
}

/// Squared Hellinger distance `1/2 sum (sqrt p - sqrt q)^2`.
pub fn hellinger_distance_sq(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum::<f64>()
}

/// Upper bound on the Hellinger diameter of `k` marginals over `alphabet_size`
/// symbols.
pub fn diameter_max(k: usize, alphabet_size: usize) -> f64 {
    let (k, a) = (k as i64, alphabet_size as i64);
    (k * (k - 1) - (k / a) * (k - a + k % a)) as f64
}

/// Exact diameter of quantized roots, `K^2 - sum_x (sum_k Q_k(x))^2`.
///
/// The value is held as an integer numerator over `4^m`, so two statistics
/// computed along different routes can be compared bit for bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExactDiameter {
    numerator: i128,
    frac_bits: u32,
}

impl ExactDiameter {
    /// Builds the statistic from per-symbol root sums given in ticks.
    pub fn from_root_sums(k: usize, root_sums: impl IntoIterator<Item = u64>, frac_bits: u32) -> Self {
        let scale = 1i128 << (2 * frac_bits);
        let overlap: i128 = root_sums.into_iter().map(|s| (s as i128) * (s as i128)).sum();
        Self { numerator: (k * k) as i128 * scale - overlap, frac_bits }
    }

    pub fn numerator(&self) -> i128 {
        self.numerator
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn to_f64(&self) -> f64 {
        self.numerator as f64 * (-2.0 * self.frac_bits as f64).exp2()
    }
}

/// Plaintext reference for the fusion statistic: ordinary integer sums of the
/// quantized roots.
pub fn quantized_diameter(types: &[QuantizedSqrtType]) -> Result<ExactDiameter, TypeError> {
    let k = types.len();
    if k < 2 {
        return Err(TypeError::TooFewMarginals(k));
    }
    let size = types[0].alphabet_size();
    let params = types[0].params();
    for t in types {
        if t.alphabet_size() != size {
            return Err(TypeError::WrongLength { expected: size, got: t.alphabet_size() });
        }
        if t.params() != params {
            return Err(RingError::Mismatch { left: params, right: t.params() }.into());
        }
    }
    let sums = (0..size).map(|x| types.iter().map(|t| t.values[x].ticks()).sum::<u64>());
    Ok(ExactDiameter::from_root_sums(k, sums, params.frac_bits()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_distribution(rng: &mut impl Rng, size: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..size).map(|_| rng.gen::<f64>().powi(3)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }

    #[test]
    fn type_counts_symbols() {
        let a = Alphabet::new(2).unwrap();
        let t = compute_type(&[0, 0, 1, 0], a).unwrap();
        assert_eq!(t.counts(), &[3, 1]);
        assert_eq!(t.probabilities(), vec![0.75, 0.25]);
        let point = compute_type(&[1, 1, 1], a).unwrap();
        assert_eq!(point.probabilities(), vec![0.0, 1.0]);
    }

    #[test]
    fn type_rejects_bad_input() {
        let a = Alphabet::new(2).unwrap();
        assert!(matches!(compute_type(&[0, 2], a), Err(TypeError::SymbolOutOfRange { symbol: 2, .. })));
        assert_eq!(compute_type(&[], a), Err(TypeError::EmptySequence));
    }

    #[test]
    fn concatenation_adds_counts() {
        let a = Alphabet::new(3).unwrap();
        let x = [0, 2, 2, 1];
        let y = [1, 1, 0];
        let joined: Vec<usize> = x.iter().chain(&y).copied().collect();
        let merged = compute_type(&x, a).unwrap().merge(&compute_type(&y, a).unwrap()).unwrap();
        assert_eq!(merged, compute_type(&joined, a).unwrap());
    }

    #[test]
    fn quantize_half_half_at_m3() {
        let ring = RingParams::new(3, 3).unwrap();
        let t = EmpiricalType::from_counts(vec![1, 1]).unwrap();
        let q = quantize_sqrt(&t, ring);
        assert_eq!(q.ticks(), vec![6, 6]);
        let err = (0.5f64.sqrt() - 0.75).abs();
        assert!(err <= 1.0 / 16.0);
    }

    #[test]
    fn quantize_point_mass_clamps_below_one() {
        let ring = RingParams::new(3, 5).unwrap();
        let t = EmpiricalType::from_counts(vec![4, 0]).unwrap();
        let q = quantize_sqrt(&t, ring);
        assert_eq!(q.ticks(), vec![31, 0]);
    }

    #[test]
    fn quantize_ties_round_up() {
        // sqrt(1/4) * 2 = 1 exactly, so use m = 2: 0.5 * 4 = 2 (no tie);
        // sqrt(9/64) * 2^2 = 1.5 is a tie and must become 2.
        let ring = RingParams::new(3, 2).unwrap();
        let t = EmpiricalType::from_counts(vec![9, 55]).unwrap();
        assert_eq!(quantize_sqrt(&t, ring).ticks()[0], 2);
    }

    #[test]
    fn quantization_error_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let size = rng.gen_range(2..=16);
            let t_len = rng.gen_range(1..=2000);
            let mut counts = vec![0u64; size];
            for _ in 0..t_len {
                counts[rng.gen_range(0..size)] += 1;
            }
            let ty = EmpiricalType::from_counts(counts).unwrap();
            let ring = RingParams::new(9, 13).unwrap();
            let q = quantize_sqrt(&ty, ring);
            let step = ring.spacing();
            for (p, v) in ty.probabilities().iter().zip(q.values()) {
                assert!(v.ticks() < ring.one_ticks());
                let bound = if *p == 1.0 { step } else { step / 2.0 };
                assert!((p.sqrt() - v.to_f64()).abs() <= bound + 1e-15);
            }
            let mass: f64 = q.squared().iter().sum();
            assert!((mass - 1.0).abs() <= step * size as f64);
        }
    }

    #[test]
    fn quantize_is_idempotent_on_grid_values() {
        let ring = RingParams::new(3, 4).unwrap();
        // roots 1/2, 1/4, 3/4 are grid points
        let t = EmpiricalType::from_counts(vec![16, 4, 36, 8]).unwrap();
        let q1 = quantize_sqrt(&t, ring);
        assert_eq!(&q1.ticks()[..3], &[8, 4, 12]);
        assert_eq!(q1, quantize_sqrt(&t, ring));
    }

    #[test]
    fn identical_marginals_have_zero_diameter() {
        let m = MarginalVector::new(vec![vec![0.2, 0.3, 0.5]; 4]).unwrap();
        assert!(hellinger_diameter(&m).unwrap().abs() < 1e-12);
    }

    #[test]
    fn disjoint_binary_pair_hits_dmax() {
        let m = MarginalVector::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(hellinger_diameter(&m).unwrap(), 2.0);
        assert_eq!(diameter_max(2, 2), 2.0);
    }

    #[test]
    fn binary_pair_closed_form_and_pairwise_sum_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let (q1, q2): (f64, f64) = (rng.gen(), rng.gen());
            let p1 = vec![1.0 - q1, q1];
            let p2 = vec![1.0 - q2, q2];
            let m = MarginalVector::new(vec![p1.clone(), p2.clone()]).unwrap();
            let d = hellinger_diameter(&m).unwrap();
            let closed = 2.0 * (1.0 - (q1 * q2).sqrt() - ((1.0 - q1) * (1.0 - q2)).sqrt());
            let pairwise = 2.0 * hellinger_distance_sq(&p1, &p2);
            assert!((d - closed).abs() < 1e-12);
            assert!((d - pairwise).abs() < 1e-12);
        }
    }

    #[test]
    fn diameter_max_formula_values() {
        assert_eq!(diameter_max(3, 2), 4.0);
        assert_eq!(diameter_max(4, 8), 12.0);
        assert_eq!(diameter_max(8, 128), 56.0);
    }

    #[test]
    fn too_few_marginals_rejected() {
        let m = MarginalVector::new(vec![vec![0.5, 0.5]]).unwrap();
        assert_eq!(hellinger_diameter(&m), Err(TypeError::TooFewMarginals(1)));
        assert!(MarginalVector::new(vec![vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn random_search_never_exceeds_dmax() {
        // random search, biased toward sparse marginals where the bound is tight
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..100_000 {
            let k = rng.gen_range(2..=8);
            let size = rng.gen_range(2..=16);
            let marginals: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        let mut v = vec![0.0; size];
                        v[rng.gen_range(0..size)] = 1.0;
                        v
                    } else {
                        random_distribution(&mut rng, size)
                    }
                })
                .collect();
            let d = hellinger_diameter(&MarginalVector::new(marginals).unwrap()).unwrap();
            assert!(d >= 0.0);
            assert!(d <= diameter_max(k, size) + 1e-9, "k={k} size={size} d={d}");
        }
    }

    #[test]
    fn diameter_perturbation_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let k = rng.gen_range(2..=6);
            let size = rng.gen_range(2..=8);
            let mut marginals: Vec<Vec<f64>> = (0..k).map(|_| random_distribution(&mut rng, size)).collect();
            let d0 = hellinger_diameter(&MarginalVector::new(marginals.clone()).unwrap()).unwrap();
            let eps: f64 = 1e-4;
            // move eps of mass between two symbols of the first marginal
            let from = (0..size).max_by(|&a, &b| marginals[0][a].total_cmp(&marginals[0][b])).unwrap();
            let to = (from + 1) % size;
            let moved = eps.min(marginals[0][from]);
            marginals[0][from] -= moved;
            marginals[0][to] += moved;
            let d1 = hellinger_diameter(&MarginalVector::new(marginals).unwrap()).unwrap();
            assert!((d1 - d0).abs() <= 4.0 * (k * k) as f64 * eps.sqrt());
        }
    }

    #[test]
    fn counts_and_probability_routes_agree() {
        let a = EmpiricalType::from_counts(vec![3, 1, 0]).unwrap();
        let b = EmpiricalType::from_counts(vec![0, 2, 2]).unwrap();
        let via_counts = hellinger_diameter_of_types(&[a.clone(), b.clone()]).unwrap();
        let via_probs = hellinger_diameter(&MarginalVector::from_types(&[a, b]).unwrap()).unwrap();
        assert!((via_counts - via_probs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantized_diameter_tracks_exact(counts in prop::collection::vec(prop::collection::vec(0u64..50, 4), 2..6)) {
            prop_assume!(counts.iter().all(|c| c.iter().sum::<u64>() > 0));
            let ring = RingParams::new(counts.len() as u64 + 1, 13).unwrap();
            let types: Vec<_> = counts.into_iter().map(|c| EmpiricalType::from_counts(c).unwrap()).collect();
            let q: Vec<_> = types.iter().map(|t| quantize_sqrt(t, ring)).collect();
            let exact = hellinger_diameter_of_types(&types).unwrap();
            let quant = quantized_diameter(&q).unwrap().to_f64();
            let k = types.len() as f64;
            prop_assert!((exact - quant).abs() <= ring.spacing() * k * k * 4.0);
        }
    }
}
