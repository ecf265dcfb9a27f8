//! Fixed-point arithmetic on the modulo-`N` ring.
//!
//! A ring is the grid `{ j * 2^-m : 0 <= j < N * 2^m }` with addition and
//! subtraction taken modulo `N`. Elements are stored as integer tick counts so
//! every operation is exact.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::{Add, Neg, Sub};
use thiserror::Error;

/// Largest supported tick count, `N * 2^m <= 2^62`.
const MAX_ORDER_BITS: u32 = 62;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RingError {
    #[error("modulus must be positive")]
    ZeroModulus,
    #[error("ring with modulus {modulus} and {frac_bits} fractional bits exceeds 2^62 ticks")]
    TooLarge { modulus: u64, frac_bits: u32 },
    #[error("tick count {ticks} out of range for ring of order {order}")]
    TickOutOfRange { ticks: u64, order: u64 },
    #[error("mismatched ring parameters: {left} vs {right}")]
    Mismatch { left: RingParams, right: RingParams },
    #[error("modulus {modulus} must exceed the network size {k}")]
    ModulusTooSmall { modulus: u64, k: usize },
    #[error("cannot sum an empty collection")]
    Empty,
    #[error("collections have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("encoded element must be {expected} bytes, got {got}")]
    BadEncoding { expected: usize, got: usize },
}

/// Network-wide ring parameters `(N, m)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RingParams {
    modulus: u64,
    frac_bits: u32,
}

impl fmt::Display for RingParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(N={}, m={})", self.modulus, self.frac_bits)
    }
}

impl RingParams {
    pub fn new(modulus: u64, frac_bits: u32) -> Result<Self, RingError> {
        if modulus == 0 {
            return Err(RingError::ZeroModulus);
        }
        let too_large = RingError::TooLarge { modulus, frac_bits };
        if frac_bits > MAX_ORDER_BITS {
            return Err(too_large);
        }
        match modulus.checked_shl(frac_bits) {
            Some(order) if order >> frac_bits == modulus && order <= 1u64 << MAX_ORDER_BITS => {
                Ok(Self { modulus, frac_bits })
            }
            _ => Err(too_large),
        }
    }

    /// Smallest admissible ring for a network of `k` sensors, `N = k + 1`.
    pub fn for_network(k: usize, frac_bits: u32) -> Result<Self, RingError> {
        Self::new(k as u64 + 1, frac_bits)
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    /// Tick count representing the real value 1.
    pub fn one_ticks(&self) -> u64 {
        1u64 << self.frac_bits
    }

    /// Number of distinct elements, `N * 2^m`.
    pub fn order(&self) -> u64 {
        self.modulus << self.frac_bits
    }

    /// Grid spacing `2^-m`.
    pub fn spacing(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn check_network(&self, k: usize) -> Result<(), RingError> {
        if self.modulus > k as u64 {
            Ok(())
        } else {
            Err(RingError::ModulusTooSmall { modulus: self.modulus, k })
        }
    }

    pub fn element(&self, ticks: u64) -> Result<RingElement, RingError> {
        if ticks < self.order() {
            Ok(RingElement { ticks, params: *self })
        } else {
            Err(RingError::TickOutOfRange { ticks, order: self.order() })
        }
    }

    /// Element with tick count reduced modulo the ring order.
    pub fn element_wrapping(&self, ticks: u64) -> RingElement {
        RingElement { ticks: ticks % self.order(), params: *self }
    }

    pub fn zero(&self) -> RingElement {
        RingElement { ticks: 0, params: *self }
    }

    /// Uniform draw from the ring.
    pub fn uniform(&self, rng: &mut dyn RngCore) -> RingElement {
        let order = self.order();
        // rejection sampling keeps the draw exactly uniform
        let zone = u64::MAX - (u64::MAX % order);
        loop {
            let v = rng.next_u64();
            if v < zone {
                return RingElement { ticks: v % order, params: *self };
            }
        }
    }

    /// Byte width of one serialized element.
    pub fn encoded_width(&self) -> usize {
        let max_tick = self.order() - 1;
        let bits = (64 - max_tick.leading_zeros()).max(1) as usize;
        bits.div_ceil(8)
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<RingElement, RingError> {
        let width = self.encoded_width();
        if bytes.len() != width {
            return Err(RingError::BadEncoding { expected: width, got: bytes.len() });
        }
        let mut buf = [0u8; 8];
        buf[..width].copy_from_slice(bytes);
        self.element(u64::from_le_bytes(buf))
    }
}

/// A value of the ring; the represented real number is `ticks * 2^-m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RingElement {
    ticks: u64,
    params: RingParams,
}

impl RingElement {
    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn params(&self) -> RingParams {
        self.params
    }

    pub fn to_f64(&self) -> f64 {
        self.ticks as f64 * self.params.spacing()
    }

    fn same_ring(&self, other: &RingElement) -> Result<(), RingError> {
        if self.params == other.params {
            Ok(())
        } else {
            Err(RingError::Mismatch { left: self.params, right: other.params })
        }
    }

    /// `self ⊕ other`.
    pub fn add_mod(&self, other: &RingElement) -> Result<RingElement, RingError> {
        self.same_ring(other)?;
        let order = self.params.order();
        // both operands are below 2^62, so the sum cannot overflow
        Ok(RingElement { ticks: (self.ticks + other.ticks) % order, params: self.params })
    }

    /// `self ⊖ other`.
    pub fn sub_mod(&self, other: &RingElement) -> Result<RingElement, RingError> {
        self.same_ring(other)?;
        let order = self.params.order();
        Ok(RingElement {
            ticks: (self.ticks + order - other.ticks) % order,
            params: self.params,
        })
    }

    /// `⊖ self`.
    pub fn neg_mod(&self) -> RingElement {
        let order = self.params.order();
        RingElement { ticks: (order - self.ticks) % order, params: self.params }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.ticks.to_le_bytes()[..self.params.encoded_width()].to_vec()
    }
}

impl fmt::Display for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

// Operator forms panic on mismatched rings; use `add_mod`/`sub_mod` when the
// operands come from untrusted input.
impl Add for RingElement {
    type Output = RingElement;
    fn add(self, rhs: RingElement) -> RingElement {
        self.add_mod(&rhs).expect("ring parameter mismatch")
    }
}

impl Sub for RingElement {
    type Output = RingElement;
    fn sub(self, rhs: RingElement) -> RingElement {
        self.sub_mod(&rhs).expect("ring parameter mismatch")
    }
}

impl Neg for RingElement {
    type Output = RingElement;
    fn neg(self) -> RingElement {
        self.neg_mod()
    }
}

/// Modular sum of a non-empty collection.
pub fn sum_mod<'a, I>(collection: I) -> Result<RingElement, RingError>
where
    I: IntoIterator<Item = &'a RingElement>,
{
    let mut iter = collection.into_iter();
    let first = *iter.next().ok_or(RingError::Empty)?;
    iter.try_fold(first, |acc, x| acc.add_mod(x))
}

/// Elementwise `a ⊕ b`.
pub fn add_elementwise(a: &[RingElement], b: &[RingElement]) -> Result<Vec<RingElement>, RingError> {
    if a.len() != b.len() {
        return Err(RingError::LengthMismatch(a.len(), b.len()));
    }
    a.iter().zip(b).map(|(x, y)| x.add_mod(y)).collect()
}

/// Elementwise `a ⊖ b`.
pub fn sub_elementwise(a: &[RingElement], b: &[RingElement]) -> Result<Vec<RingElement>, RingError> {
    if a.len() != b.len() {
        return Err(RingError::LengthMismatch(a.len(), b.len()));
    }
    a.iter().zip(b).map(|(x, y)| x.sub_mod(y)).collect()
}

/// Elementwise modular sum of equally long collections.
pub fn sum_elementwise(rows: &[Vec<RingElement>]) -> Result<Vec<RingElement>, RingError> {
    let first = rows.first().ok_or(RingError::Empty)?;
    rows[1..].iter().try_fold(first.clone(), |acc, row| add_elementwise(&acc, row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> RingParams {
        RingParams::new(3, 2).unwrap()
    }

    #[test]
    fn add_wraps_at_order() {
        let r = small();
        assert_eq!(r.order(), 12);
        let a = r.element(11).unwrap();
        let b = r.element(3).unwrap();
        assert_eq!(a.add_mod(&b).unwrap().ticks(), 2);
        assert_eq!(a.add_mod(&r.zero()).unwrap(), a);
    }

    #[test]
    fn sub_wraps_below_zero() {
        let r = small();
        let a = r.element(1).unwrap();
        let b = r.element(5).unwrap();
        assert_eq!(a.sub_mod(&b).unwrap().ticks(), 8);
        assert_eq!((r.zero() - b + b), r.zero());
    }

    #[test]
    fn exhaustive_group_laws_small_ring() {
        let r = small();
        let all: Vec<_> = (0..r.order()).map(|t| r.element(t).unwrap()).collect();
        for &a in &all {
            assert_eq!(a + r.zero(), a);
            assert_eq!(a + (-a), r.zero());
            for &b in &all {
                assert_eq!(a + b, b + a);
                assert_eq!((a - b) + b, a);
                assert_eq!((a + b) - b, a);
                for &c in &all {
                    assert_eq!((a + b) + c, a + (b + c));
                }
            }
        }
    }

    #[test]
    fn mismatched_params_rejected() {
        let a = small().zero();
        let b = RingParams::new(4, 2).unwrap().zero();
        assert!(matches!(a.add_mod(&b), Err(RingError::Mismatch { .. })));
        assert!(matches!(a.sub_mod(&b), Err(RingError::Mismatch { .. })));
    }

    #[test]
    fn sum_rejects_empty_and_handles_singleton() {
        assert_eq!(sum_mod(std::iter::empty()), Err(RingError::Empty));
        let a = small().element(7).unwrap();
        assert_eq!(sum_mod([a].iter()).unwrap(), a);
    }

    #[test]
    fn sum_is_permutation_invariant() {
        let r = RingParams::new(9, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut items: Vec<_> = (0..17).map(|_| r.uniform(&mut rng)).collect();
        let reference = sum_mod(items.iter()).unwrap();
        for _ in 0..1000 {
            items.shuffle(&mut rng);
            assert_eq!(sum_mod(items.iter()).unwrap(), reference);
        }
    }

    #[test]
    fn inverse_law_random_pairs() {
        let r = RingParams::new(5, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let a = r.uniform(&mut rng);
            let b = r.uniform(&mut rng);
            assert_eq!(a + b - b, a);
            assert!((a + b).ticks() < r.order());
        }
    }

    #[test]
    fn element_range_checked() {
        let r = small();
        assert!(r.element(12).is_err());
        assert_eq!(r.element_wrapping(13).ticks(), 1);
        assert!(RingParams::new(0, 3).is_err());
        assert!(RingParams::new(4, 62).is_err());
        assert!(r.check_network(3).is_err());
        assert!(r.check_network(2).is_ok());
    }

    #[test]
    fn encoded_width_matches_order() {
        assert_eq!(small().encoded_width(), 1);
        assert_eq!(RingParams::new(9, 13).unwrap().encoded_width(), 3);
        assert_eq!(RingParams::new(2, 7).unwrap().encoded_width(), 1);
        assert_eq!(RingParams::new(2, 8).unwrap().encoded_width(), 2);
    }

    #[test]
    fn elementwise_matches_per_element() {
        let r = RingParams::new(4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<_> = (0..6).map(|_| r.uniform(&mut rng)).collect();
        let b: Vec<_> = (0..6).map(|_| r.uniform(&mut rng)).collect();
        let s = add_elementwise(&a, &b).unwrap();
        let d = sub_elementwise(&s, &b).unwrap();
        for i in 0..6 {
            assert_eq!(s[i], a[i] + b[i]);
        }
        assert_eq!(d, a);
        assert!(add_elementwise(&a, &b[..3]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(modulus in 1u64..64, m in 0u32..20, raw in any::<u64>()) {
            let r = RingParams::new(modulus, m).unwrap();
            let e = r.element_wrapping(raw);
            prop_assert_eq!(r.decode(&e.to_le_bytes()).unwrap(), e);
        }

        #[test]
        fn group_laws_at_m13(n in 2u64..10, a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
            let r = RingParams::new(n, 13).unwrap();
            let (a, b, c) = (r.element_wrapping(a), r.element_wrapping(b), r.element_wrapping(c));
            prop_assert_eq!((a + b) + c, a + (b + c));
            prop_assert_eq!(a + b, b + a);
            prop_assert_eq!(a - b + b, a);
        }
    }
}
