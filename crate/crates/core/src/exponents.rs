//! Error-exponent numerics: KL divergence, the divergences `Δ0`/`Δ1` from the
//! null and alternative sets, and the exponent curves built from them.
//!
//! Two models are provided.
//!
//! * [`BinaryProduct`]: two independent binary sensors, parameterized by
//!   `(q1, q2) = (P[X1 = 1], P[X2 = 1])`, with both hypothesis sets restricted
//!   to product distributions. All four curves are available here.
//! * Joint distributions over `X^K` ([`JointDistribution`], [`delta0`],
//!   [`delta1`]): the unrestricted sets, solved for small `K` and `|X|`.
//!
//! All logarithms are base 2.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, LN_2};
use std::io;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExponentError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("instance too large for the solver: {0}")]
    Capability(String),
}

const DIST_TOL: f64 = 1e-9;

fn check_distribution(p: &[f64]) -> Result<(), ExponentError> {
    if p.is_empty() {
        return Err(ExponentError::InvalidDistribution("empty".into()));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(ExponentError::InvalidDistribution("entries must be finite and non-negative".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > DIST_TOL {
        return Err(ExponentError::InvalidDistribution(format!("sums to {total}")));
    }
    Ok(())
}

/// `D(p || q)` in bits; `+inf` when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, ExponentError> {
    check_distribution(p)?;
    check_distribution(q)?;
    if p.len() != q.len() {
        return Err(ExponentError::InvalidDistribution(format!("lengths {} and {}", p.len(), q.len())));
    }
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            total += a * (a / b).ln();
        }
    }
    (total / LN_2).max(0.0)
}

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |x: f64| if x > 0.0 { -x * x.log2() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// `D(Bern(a) || Bern(b))` in bits.
pub fn binary_kl(a: f64, b: f64) -> f64 {
    let term = |x: f64, y: f64| {
        if x <= 0.0 {
            0.0
        } else if y <= 0.0 {
            f64::INFINITY
        } else {
            x * (x / y).log2()
        }
    };
    (term(a, b) + term(1.0 - a, 1.0 - b)).max(0.0)
}

/// Hellinger diameter of two Bernoulli marginals.
pub fn binary_diameter(q1: f64, q2: f64) -> f64 {
    (2.0 * (1.0 - (q1 * q2).sqrt() - ((1.0 - q1) * (1.0 - q2)).sqrt())).max(0.0)
}

/// Divergence from the equal-marginal product set, in closed form.
pub fn binary_delta0_closed_form(q1: f64, q2: f64) -> f64 {
    (2.0 * binary_entropy((q1 + q2) / 2.0) - binary_entropy(q1) - binary_entropy(q2)).max(0.0)
}

/// Smallest divergence from the equal-marginal product set at diameter at
/// least `gamma`, in closed form.
pub fn binary_alpha_star_closed_form(gamma: f64) -> f64 {
    if gamma > 2.0 {
        return f64::INFINITY;
    }
    let s = gamma * (1.0 - gamma / 4.0);
    (2.0 * binary_entropy(s / 2.0) - binary_entropy(s)).max(0.0)
}

/// Thresholds `0 <= d0 < d1 <= d_max` separating the hypotheses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentProblem {
    pub sensors: usize,
    pub alphabet: usize,
    pub d0: f64,
    pub d1: f64,
}

impl ExponentProblem {
    pub fn new(sensors: usize, alphabet: usize, d0: f64, d1: f64) -> Result<Self, ExponentError> {
        let dmax = crate::typestat::diameter_max(sensors, alphabet);
        if sensors < 2 || alphabet < 2 {
            return Err(ExponentError::InvalidProblem("need K >= 2 and |X| >= 2".into()));
        }
        if !(d0 >= 0.0 && d0 < d1 && d1 <= dmax) {
            return Err(ExponentError::InvalidProblem(format!("need 0 <= d0 < d1 <= {dmax}, got d0={d0}, d1={d1}")));
        }
        Ok(Self { sensors, alphabet, d0, d1 })
    }

    pub fn binary_pair(d0: f64, d1: f64) -> Result<Self, ExponentError> {
        Self::new(2, 2, d0, d1)
    }
}

/// Minimizes `f` over `[0, 1]`: grid search at spacing `1/n`, then golden
/// section search on the bracket around the best grid point.
fn minimize_unit(n: usize, f: &(dyn Fn(f64) -> f64 + Sync)) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=n {
        let u = i as f64 / n as f64;
        let v = f(u);
        if v < best.0 {
            best = (v, u);
        }
    }
    if !best.0.is_finite() {
        return best;
    }
    let h = 1.0 / n as f64;
    let (mut a, mut b) = ((best.1 - h).max(0.0), (best.1 + h).min(1.0));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    for (v, u) in [(fc, c), (fd, d)] {
        if v < best.0 {
            best = (v, u);
        }
    }
    best
}

/// The curve `{(r1, r2) : d(r1, r2) = c}` for two Bernoulli marginals.
///
/// Writing `r = sin^2(θ)`, the diameter is `2(1 - cos(θ1 - θ2))`, so the curve
/// is `|θ1 - θ2| = arccos(1 - c/2)`. It has two branches, `r2 >= r1` and its
/// mirror image, each parameterized by `u ∈ [0, 1]`.
#[derive(Clone, Copy, Debug)]
struct DiameterLevel {
    phi: f64,
}

impl DiameterLevel {
    fn new(c: f64) -> Option<Self> {
        if !(0.0..=2.0 + 1e-12).contains(&c) {
            return None;
        }
        Some(Self { phi: (1.0 - c.min(2.0) / 2.0).clamp(-1.0, 1.0).acos() })
    }

    fn point(&self, u: f64, mirrored: bool) -> (f64, f64) {
        let t1 = u * (FRAC_PI_2 - self.phi).max(0.0);
        let t2 = (t1 + self.phi).min(FRAC_PI_2);
        let (a, b) = (t1.sin().powi(2), t2.sin().powi(2));
        if mirrored {
            (b, a)
        } else {
            (a, b)
        }
    }

    /// Minimum of `f` over both branches, with its location.
    fn minimize(&self, n: usize, f: &(dyn Fn(f64, f64) -> f64 + Sync)) -> (f64, (f64, f64)) {
        let mut best = (f64::INFINITY, (0.0, 0.0));
        for mirrored in [false, true] {
            let (v, u) = minimize_unit(n, &|u| {
                let (a, b) = self.point(u, mirrored);
                f(a, b)
            });
            if v < best.0 {
                best = (v, self.point(u, mirrored));
            }
        }
        best
    }
}

/// Two independent binary sensors with product-restricted hypothesis sets.
#[derive(Clone, Debug)]
pub struct BinaryProduct {
    problem: ExponentProblem,
    step: f64,
    grid: usize,
}

/// Grid step for boundary searches when none is given.
pub const DEFAULT_STEP: f64 = 1e-3;

impl BinaryProduct {
    pub fn new(problem: ExponentProblem, step: f64) -> Result<Self, ExponentError> {
        if problem.sensors != 2 || problem.alphabet != 2 {
            return Err(ExponentError::Capability("the product model covers K = 2, |X| = 2 only".into()));
        }
        if !(step > 0.0 && step <= 0.1) {
            return Err(ExponentError::InvalidProblem(format!("grid step {step} outside (0, 0.1]")));
        }
        Ok(Self { problem, step, grid: (1.0 / step).round() as usize })
    }

    pub fn problem(&self) -> ExponentProblem {
        self.problem
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Same model on a finer grid.
    pub fn refined(&self, factor: usize) -> Self {
        Self { problem: self.problem, step: self.step / factor as f64, grid: self.grid * factor }
    }

    fn divergence_to_level(&self, q1: f64, q2: f64, level: f64) -> f64 {
        match DiameterLevel::new(level) {
            Some(curve) => curve.minimize(self.grid, &|r1, r2| binary_kl(q1, r1) + binary_kl(q2, r2)).0,
            None => f64::INFINITY,
        }
    }

    /// Divergence of the product `(q1, q2)` from the null set `{d <= d0}`.
    pub fn delta0(&self, q1: f64, q2: f64) -> f64 {
        if binary_diameter(q1, q2) <= self.problem.d0 {
            return 0.0;
        }
        if self.problem.d0 == 0.0 {
            // the projection onto equal marginals is the midpoint
            return binary_delta0_closed_form(q1, q2);
        }
        self.divergence_to_level(q1, q2, self.problem.d0)
    }

    /// Divergence of the product `(q1, q2)` from the alternative set
    /// `{d >= d1}`.
    pub fn delta1(&self, q1: f64, q2: f64) -> f64 {
        if binary_diameter(q1, q2) >= self.problem.d1 {
            return 0.0;
        }
        self.divergence_to_level(q1, q2, self.problem.d1)
    }

    /// Smallest null divergence among products with diameter at least `gamma`.
    pub fn alpha_star(&self, gamma: f64) -> f64 {
        if gamma <= self.problem.d0 {
            return 0.0;
        }
        match DiameterLevel::new(gamma) {
            Some(curve) => curve.minimize(self.grid, &|a, b| self.delta0(a, b)).0,
            None => f64::INFINITY,
        }
    }

    /// `inf{γ >= 0 : α*(γ) >= alpha}`, `+inf` when no diameter reaches it.
    pub fn gamma_star(&self, alpha: f64) -> f64 {
        if alpha <= 0.0 {
            return 0.0;
        }
        if self.alpha_star(2.0) < alpha {
            return f64::INFINITY;
        }
        let (mut lo, mut hi) = (self.problem.d0, 2.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.alpha_star(mid) >= alpha {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    /// Exponent achieved by the diameter test: the smallest alternative
    /// divergence over `{d < γ*(α)}`.
    pub fn beta_star_lower(&self, alpha: f64) -> f64 {
        let g = self.gamma_star(alpha);
        if g <= 0.0 {
            return f64::INFINITY;
        }
        if g >= self.problem.d1 {
            return 0.0;
        }
        // the infimum over the open set is attained on its boundary
        let curve = DiameterLevel::new(g).expect("g in (0, d1)");
        curve.minimize(self.grid, &|a, b| self.delta1(a, b)).0
    }

    /// Optimal exponent: the smallest alternative divergence over
    /// `{Δ0 < α}`.
    pub fn beta_star_upper(&self, alpha: f64) -> f64 {
        if alpha <= 0.0 {
            return f64::INFINITY;
        }
        if alpha > self.alpha_star(self.problem.d1) {
            return 0.0;
        }
        // Along q = (s - u, s + u) the null divergence is convex in u and
        // zero at u = 0, so each midpoint s meets the level set at most once.
        let level_point = |s: f64| -> Option<(f64, f64)> {
            let umax = s.min(1.0 - s);
            if self.delta0(s - umax, s + umax) < alpha {
                return None;
            }
            let (mut lo, mut hi) = (0.0, umax);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if self.delta0(s - mid, s + mid) >= alpha {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Some((s - hi, s + hi))
        };
        // the alternative divergence is symmetric in (q1, q2), so one branch
        // of the level set suffices
        minimize_unit(self.grid, &|s| match level_point(s) {
            Some((a, b)) => self.delta1(a, b),
            None => f64::INFINITY,
        })
        .0
    }

    pub fn curve(&self, kind: CurveKind, arguments: &[f64]) -> ExponentCurve {
        let points = arguments
            .par_iter()
            .map(|&x| {
                let y = match kind {
                    CurveKind::AlphaStar => self.alpha_star(x),
                    CurveKind::GammaStar => self.gamma_star(x),
                    CurveKind::BetaLower => self.beta_star_lower(x),
                    CurveKind::BetaUpper => self.beta_star_upper(x),
                };
                (x, y)
            })
            .collect();
        ExponentCurve { kind, step: self.step, points }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveKind {
    AlphaStar,
    GammaStar,
    BetaLower,
    BetaUpper,
}

/// Sampled values of one exponent curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentCurve {
    pub kind: CurveKind,
    pub step: f64,
    pub points: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct CurveRow {
    argument: f64,
    value: f64,
    grid_step: f64,
}

impl ExponentCurve {
    /// Writes `argument,value,grid_step` rows.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        for &(argument, value) in &self.points {
            w.serialize(CurveRow { argument, value, grid_step: self.step })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Checks monotonicity up to `tol`.
    pub fn is_monotone(&self, increasing: bool, tol: f64) -> bool {
        self.points.windows(2).all(|w| {
            let (a, b) = (w[0].1, w[1].1);
            if a.is_infinite() || b.is_infinite() {
                return if increasing { b >= a } else { b <= a };
            }
            if increasing {
                b >= a - tol
            } else {
                b <= a + tol
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GapVerdict {
    /// `β* > β_*` with margin above the tolerance.
    Strict,
    /// The margin does not clear the tolerance.
    Inconclusive,
    /// The point sits at `α -> 0` or `α >= α*(d1)`, where no strict gap is
    /// expected.
    Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub alpha: f64,
    pub gamma_star: f64,
    pub beta_lower: f64,
    pub beta_upper: f64,
    pub margin: f64,
    /// Largest change of either exponent when the grid step is halved.
    pub tolerance: f64,
    pub verdict: GapVerdict,
}

/// Compares the achieved and optimal type-II exponents at each `alpha`.
pub fn verify_gap(model: &BinaryProduct, alphas: &[f64]) -> Vec<GapRow> {
    let fine = model.refined(2);
    let alpha_d1 = model.alpha_star(model.problem.d1);
    alphas
        .par_iter()
        .map(|&alpha| {
            let gamma_star = model.gamma_star(alpha);
            let beta_lower = model.beta_star_lower(alpha);
            let beta_upper = model.beta_star_upper(alpha);
            let margin = beta_upper - beta_lower;
            if alpha <= 0.0 || alpha >= alpha_d1 {
                return GapRow {
                    alpha,
                    gamma_star,
                    beta_lower,
                    beta_upper,
                    margin,
                    tolerance: 0.0,
                    verdict: GapVerdict::Boundary,
                };
            }
            let tolerance = (fine.beta_star_lower(alpha) - beta_lower)
                .abs()
                .max((fine.beta_star_upper(alpha) - beta_upper).abs())
                .max(f64::EPSILON);
            let verdict = if margin > tolerance { GapVerdict::Strict } else { GapVerdict::Inconclusive };
            GapRow { alpha, gamma_star, beta_lower, beta_upper, margin, tolerance, verdict }
        })
        .collect()
}

/// Evenly spaced interior points `α*(d1) * i / (count + 1)`.
pub fn interior_alphas(model: &BinaryProduct, count: usize) -> Vec<f64> {
    let top = model.alpha_star(model.problem.d1);
    (1..=count).map(|i| top * i as f64 / (count + 1) as f64).collect()
}

/// Largest joint instances handled by the joint solvers.
pub const JOINT_MAX_SENSORS: usize = 3;
pub const JOINT_MAX_ALPHABET: usize = 4;

/// A distribution over `X^K`. Cell index `i` encodes the symbols in base
/// `|X|`, sensor 0 in the least significant digit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    sensors: usize,
    alphabet: usize,
    probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(sensors: usize, alphabet: usize, probs: Vec<f64>) -> Result<Self, ExponentError> {
        if sensors < 2 || alphabet < 2 {
            return Err(ExponentError::InvalidProblem("need K >= 2 and |X| >= 2".into()));
        }
        let cells = alphabet.checked_pow(sensors as u32).filter(|&c| c <= 1 << 20);
        if cells != Some(probs.len()) {
            return Err(ExponentError::InvalidDistribution(format!(
                "{} cells for K={sensors}, |X|={alphabet}",
                probs.len()
            )));
        }
        check_distribution(&probs)?;
        Ok(Self { sensors, alphabet, probs })
    }

    /// Product of the given marginals.
    pub fn product(marginals: &[Vec<f64>]) -> Result<Self, ExponentError> {
        let sensors = marginals.len();
        let alphabet = marginals.first().map_or(0, |m| m.len());
        for m in marginals {
            check_distribution(m)?;
            if m.len() != alphabet {
                return Err(ExponentError::InvalidDistribution("marginals of unequal length".into()));
            }
        }
        let cells = alphabet.pow(sensors as u32);
        let probs = (0..cells)
            .map(|i| (0..sensors).map(|k| marginals[k][digit(i, k, alphabet)]).product())
            .collect();
        Self::new(sensors, alphabet, probs)
    }

    /// Two independent Bernoulli sensors with `P[X_k = 1] = q_k`.
    pub fn product_binary(q1: f64, q2: f64) -> Self {
        Self::product(&[vec![1.0 - q1, q1], vec![1.0 - q2, q2]]).expect("valid Bernoulli parameters")
    }

    /// Joint type of `K` aligned sequences.
    pub fn joint_type(sequences: &[Vec<usize>], alphabet: usize) -> Result<Self, ExponentError> {
        let sensors = sequences.len();
        let t = sequences.first().map_or(0, |s| s.len());
        if t == 0 || sequences.iter().any(|s| s.len() != t) {
            return Err(ExponentError::InvalidDistribution("sequences must be non-empty and aligned".into()));
        }
        let mut counts = vec![0u64; alphabet.pow(sensors as u32)];
        for j in 0..t {
            let mut idx = 0;
            for k in (0..sensors).rev() {
                let x = sequences[k][j];
                if x >= alphabet {
                    return Err(ExponentError::InvalidDistribution(format!("symbol {x} out of range")));
                }
                idx = idx * alphabet + x;
            }
            counts[idx] += 1;
        }
        Self::new(sensors, alphabet, counts.iter().map(|&c| c as f64 / t as f64).collect())
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn marginals(&self) -> Vec<Vec<f64>> {
        marginals_of(&self.probs, self.sensors, self.alphabet)
    }

    pub fn diameter(&self) -> f64 {
        diameter_of(&self.probs, self.sensors, self.alphabet)
    }

    fn check_capability(&self) -> Result<(), ExponentError> {
        if self.sensors > JOINT_MAX_SENSORS || self.alphabet > JOINT_MAX_ALPHABET {
            return Err(ExponentError::Capability(format!(
                "joint solver supports K <= {JOINT_MAX_SENSORS}, |X| <= {JOINT_MAX_ALPHABET}; got K={}, |X|={}",
                self.sensors, self.alphabet
            )));
        }
        Ok(())
    }
}

fn digit(cell: usize, sensor: usize, alphabet: usize) -> usize {
    (cell / alphabet.pow(sensor as u32)) % alphabet
}

fn marginals_of(q: &[f64], sensors: usize, alphabet: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; alphabet]; sensors];
    for (i, &v) in q.iter().enumerate() {
        for (k, mk) in m.iter_mut().enumerate() {
            mk[digit(i, k, alphabet)] += v;
        }
    }
    m
}

fn diameter_of(q: &[f64], sensors: usize, alphabet: usize) -> f64 {
    let m = marginals_of(q, sensors, alphabet);
    let overlap: f64 = (0..alphabet)
        .map(|x| {
            let s: f64 = m.iter().map(|mk| mk[x].max(0.0).sqrt()).sum();
            s * s
        })
        .sum();
    ((sensors * sensors) as f64 - overlap).max(0.0)
}

/// Divergence of a joint distribution from the null set
/// `{q ∈ P(X^K) : d(q) <= d0}`.
///
/// For `d0 = 0` the null set is the linear family of joints with equal
/// marginals, and the value is computed through its concave dual. For
/// `d0 > 0` the convex problem is solved through a Lagrangian on the
/// diameter constraint.
pub fn delta0(joint: &JointDistribution, d0: f64) -> Result<f64, ExponentError> {
    if !(d0 >= 0.0) {
        return Err(ExponentError::InvalidProblem(format!("d0 = {d0}")));
    }
    joint.check_capability()?;
    if joint.diameter() <= d0 {
        return Ok(0.0);
    }
    if d0 == 0.0 {
        Ok(equal_marginal_projection(joint))
    } else {
        Ok(lagrangian_projection(joint, d0))
    }
}

/// Rows `a_i` of the equal-marginal constraints `m_k(x) - m_0(x) = 0` for
/// `k >= 1` and all but the last symbol.
fn equal_marginal_constraints(sensors: usize, alphabet: usize) -> Vec<Vec<f64>> {
    let cells = alphabet.pow(sensors as u32);
    (0..cells)
        .map(|i| {
            let x0 = digit(i, 0, alphabet);
            let mut row = Vec::with_capacity((sensors - 1) * (alphabet - 1));
            for k in 1..sensors {
                let xk = digit(i, k, alphabet);
                for x in 0..alphabet - 1 {
                    row.push(f64::from(u8::from(xk == x)) - f64::from(u8::from(x0 == x)));
                }
            }
            row
        })
        .collect()
}

/// Solves `A v = b` for a small symmetric positive definite `A`.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// `max_μ Σ p_i ln(1 + a_i·μ)` subject to `1 + a_i·μ >= 0` for every cell,
/// which equals `min D(p || q)` over joints with equal marginals. Solved with
/// a log-barrier Newton method; every iterate is dual feasible, so the value
/// never exceeds the true minimum.
fn equal_marginal_projection(joint: &JointDistribution) -> f64 {
    let rows = equal_marginal_constraints(joint.sensors, joint.alphabet);
    let p = &joint.probs;
    let dim = rows[0].len();
    let mut mu = vec![0.0; dim];
    let slack = |mu: &[f64], row: &[f64]| 1.0 + row.iter().zip(mu).map(|(a, m)| a * m).sum::<f64>();
    let objective = |mu: &[f64], tau: f64| -> f64 {
        let mut total = 0.0;
        for (row, &pi) in rows.iter().zip(p) {
            let s = slack(mu, row);
            if s <= 0.0 {
                return f64::NEG_INFINITY;
            }
            total += (pi + tau) * s.ln();
        }
        total
    };
    let mut tau = 1.0;
    while tau > 1e-14 {
        for _ in 0..100 {
            let mut grad = vec![0.0; dim];
            let mut hess = vec![vec![0.0; dim]; dim];
            for (row, &pi) in rows.iter().zip(p) {
                let s = slack(&mu, row);
                let w = pi + tau;
                for a in 0..dim {
                    grad[a] += w * row[a] / s;
                    for b in 0..dim {
                        hess[a][b] += w * row[a] * row[b] / (s * s);
                    }
                }
            }
            let Some(dir) = cholesky_solve(&hess, &grad) else { break };
            let decrement: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
            if decrement < 1e-18 {
                break;
            }
            let current = objective(&mu, tau);
            let mut step = 1.0;
            loop {
                let trial: Vec<f64> = mu.iter().zip(&dir).map(|(m, d)| m + step * d).collect();
                let v = objective(&trial, tau);
                if v.is_finite() && v >= current + 0.25 * step * decrement {
                    mu = trial;
                    break;
                }
                step *= 0.5;
                if step < 1e-16 {
                    break;
                }
            }
            if step < 1e-16 {
                break;
            }
        }
        tau *= 0.1;
    }
    let value: f64 = rows.iter().zip(p).filter(|(_, &pi)| pi > 0.0).map(|(row, &pi)| pi * slack(&mu, row).ln()).sum();
    (value / LN_2).max(0.0)
}

/// Gradient of the diameter with respect to the joint cells.
fn diameter_gradient(q: &[f64], sensors: usize, alphabet: usize) -> Vec<f64> {
    let m = marginals_of(q, sensors, alphabet);
    let root_sum: Vec<f64> = (0..alphabet).map(|x| m.iter().map(|mk| mk[x].max(0.0).sqrt()).sum()).collect();
    // ∂d/∂m_k(x) = -S(x) / sqrt(m_k(x))
    let dm: Vec<Vec<f64>> =
        m.iter().map(|mk| (0..alphabet).map(|x| -root_sum[x] / mk[x].max(1e-300).sqrt()).collect()).collect();
    (0..q.len()).map(|i| (0..sensors).map(|k| dm[k][digit(i, k, alphabet)]).sum()).collect()
}

/// Minimizes `D(p || q) + ν d(q)` (nats) over the simplex by exponentiated
/// gradient with an adaptive step, starting from `q`.
fn penalized_projection(p: &[f64], nu: f64, q: &mut Vec<f64>, sensors: usize, alphabet: usize) -> f64 {
    let value = |q: &[f64]| -> f64 {
        let kl: f64 = p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum();
        kl + nu * diameter_of(q, sensors, alphabet)
    };
    let mut current = value(q);
    let mut eta = 1.0;
    for _ in 0..20_000 {
        let dgrad = diameter_gradient(q, sensors, alphabet);
        let grad: Vec<f64> = p.iter().zip(q.iter()).zip(&dgrad).map(|((&a, &b), &g)| -a / b + nu * g).collect();
        let mut improved = false;
        while eta > 1e-12 {
            let mut trial: Vec<f64> = q.iter().zip(&grad).map(|(&b, &g)| b * (-eta * g).clamp(-50.0, 50.0).exp()).collect();
            let z: f64 = trial.iter().sum();
            trial.iter_mut().for_each(|v| *v = (*v / z).max(1e-300));
            let v = value(&trial);
            if v < current {
                let gain = current - v;
                *q = trial;
                current = v;
                eta *= 1.5;
                improved = gain > 1e-15 * current.abs().max(1e-12);
                break;
            }
            eta *= 0.5;
        }
        if !improved {
            break;
        }
    }
    current
}

/// Lagrangian dual of `min D(p || q)` subject to `d(q) <= d0`, maximized over
/// the multiplier by golden section search.
fn lagrangian_projection(joint: &JointDistribution, d0: f64) -> f64 {
    let (sensors, alphabet) = (joint.sensors, joint.alphabet);
    let p = &joint.probs;
    let uniform = 1.0 / p.len() as f64;
    let start: Vec<f64> = p.iter().map(|&v| 0.5 * v + 0.5 * uniform).collect();
    let dual = |nu: f64| -> (f64, f64) {
        let mut q = start.clone();
        let v = penalized_projection(p, nu, &mut q, sensors, alphabet);
        (v - nu * d0, diameter_of(&q, sensors, alphabet))
    };
    let mut hi = 1.0;
    while dual(hi).1 > d0 && hi < 1e6 {
        hi *= 2.0;
    }
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, hi);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (dual(c).0, dual(d).0);
    for _ in 0..50 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = dual(c).0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = dual(d).0;
        }
    }
    (fc.max(fd) / LN_2).max(0.0)
}

/// Divergence of a joint distribution from `{q ∈ P(X^K) : d(q) >= d1}`.
///
/// The feasible set is not convex, so this is a grid search over the joint
/// simplex followed by a local pattern search. Only `K = 2`, `|X| = 2` is
/// supported.
pub fn delta1(joint: &JointDistribution, d1: f64) -> Result<f64, ExponentError> {
    delta1_with_step(joint, d1, 1.0 / 200.0)
}

pub fn delta1_with_step(joint: &JointDistribution, d1: f64, step: f64) -> Result<f64, ExponentError> {
    if joint.sensors != 2 || joint.alphabet != 2 {
        return Err(ExponentError::Capability("the alternative-set solver covers K = 2, |X| = 2 only".into()));
    }
    if !(d1 > 0.0) {
        return Err(ExponentError::InvalidProblem(format!("d1 = {d1}")));
    }
    if joint.diameter() >= d1 {
        return Ok(0.0);
    }
    if d1 > 2.0 {
        return Ok(f64::INFINITY);
    }
    let p = &joint.probs;
    let feasible = |q: &[f64]| diameter_of(q, 2, 2) >= d1;
    let n = (1.0 / step).round() as usize;
    let best = (0..=n)
        .into_par_iter()
        .map(|i| {
            let mut best = (f64::INFINITY, [0.0; 4]);
            for j in 0..=n - i {
                for k in 0..=n - i - j {
                    let q = [i as f64 / n as f64, j as f64 / n as f64, k as f64 / n as f64, (n - i - j - k) as f64 / n as f64];
                    if feasible(&q) {
                        let v = kl_unchecked(p, &q);
                        if v < best.0 {
                            best = (v, q);
                        }
                    }
                }
            }
            best
        })
        .reduce(|| (f64::INFINITY, [0.0; 4]), |a, b| if b.0 < a.0 { b } else { a });
    if !best.0.is_finite() {
        return Ok(f64::INFINITY);
    }
    // pattern search along e_i - e_j, staying feasible
    let (mut value, mut q) = best;
    let mut h = step;
    while h > 1e-12 {
        let mut moved = false;
        for i in 0..4 {
            for j in 0..4 {
                if i == j || q[j] < h {
                    continue;
                }
                let mut trial = q;
                trial[i] += h;
                trial[j] -= h;
                if feasible(&trial) {
                    let v = kl_unchecked(p, &trial);
                    if v < value {
                        value = v;
                        q = trial;
                        moved = true;
                    }
                }
            }
        }
        if !moved {
            h *= 0.5;
        }
    }
    Ok(value)
}

/// Uniformly random distribution on `n` symbols (flat Dirichlet).
pub fn random_distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(d0: f64, d1: f64, step: f64) -> BinaryProduct {
        BinaryProduct::new(ExponentProblem::binary_pair(d0, d1).unwrap(), step).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), f64::INFINITY);
        assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn problem_requires_ordered_thresholds() {
        assert!(ExponentProblem::binary_pair(0.5, 0.5).is_err());
        assert!(ExponentProblem::binary_pair(0.0, 2.5).is_err());
        assert!(ExponentProblem::binary_pair(0.0, 2.0).is_ok());
    }

    #[test]
    fn binary_diameter_matches_level_curve() {
        for c in [0.0, 0.3, 1.0, 1.7, 2.0] {
            let curve = DiameterLevel::new(c).unwrap();
            for i in 0..=20 {
                for mirrored in [false, true] {
                    let (a, b) = curve.point(i as f64 / 20.0, mirrored);
                    assert!((binary_diameter(a, b) - c).abs() < 1e-12, "c={c}");
                }
            }
        }
    }

    #[test]
    fn delta0_closed_form_value() {
        // 2 H(0.5) - 2 H(0.1)
        let expected = 2.0 - 2.0 * binary_entropy(0.1);
        assert!((binary_delta0_closed_form(0.1, 0.9) - expected).abs() < 1e-15);
        assert!((expected - 1.0620).abs() < 1e-4);
    }

    #[test]
    fn delta0_boundary_search_matches_closed_form() {
        // search the equal-marginal boundary directly instead of using the midpoint
        let m = model(0.0, 1.0, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
            let searched = m.divergence_to_level(a, b, 0.0);
            assert!((searched - binary_delta0_closed_form(a, b)).abs() < 1e-6);
        }
    }

    #[test]
    fn alpha_star_zero_below_d0() {
        let m = model(0.3, 1.0, 1e-2);
        assert_eq!(m.alpha_star(0.2), 0.0);
        assert_eq!(m.alpha_star(0.3), 0.0);
        assert!(m.alpha_star(0.5) > 0.0);
    }

    #[test]
    fn alpha_star_closed_form_at_two() {
        assert!((binary_alpha_star_closed_form(2.0) - 2.0).abs() < 1e-12);
        let m = model(0.0, 1.0, 1e-3);
        assert!((m.alpha_star(2.0) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn alpha_star_search_matches_closed_form() {
        let m = model(0.0, 1.0, 1e-3);
        for i in 1..20 {
            let g = 2.0 * i as f64 / 20.0;
            assert!((m.alpha_star(g) - binary_alpha_star_closed_form(g)).abs() < 1e-3, "gamma={g}");
        }
    }

    #[test]
    fn gamma_star_inverts_alpha_star() {
        let m = model(0.0, 1.0, 1e-2);
        for a in [0.05, 0.3, 1.0, 1.9] {
            let g = m.gamma_star(a);
            assert!(m.alpha_star(g) >= a - 1e-9);
            assert!(m.alpha_star(g - 1e-6) < a + 1e-6);
        }
        assert_eq!(m.gamma_star(0.0), 0.0);
        assert_eq!(m.gamma_star(2.5), f64::INFINITY);
    }

    #[test]
    fn beta_boundary_cases() {
        let m = model(0.0, 0.5, 1e-2);
        assert_eq!(m.beta_star_upper(0.0), f64::INFINITY);
        assert_eq!(m.beta_star_lower(0.0), f64::INFINITY);
        let top = m.alpha_star(0.5);
        assert_eq!(m.beta_star_lower(top * 1.01), 0.0);
        assert_eq!(m.beta_star_upper(top * 1.01), 0.0);
    }

    #[test]
    fn gap_at_half_matches_reference_table() {
        // reference values from an independent root-finding boundary search
        let reference = [
            (0.0878, 0.3545, 0.2851),
            (0.1757, 0.2131, 0.1430),
            (0.2635, 0.1218, 0.0675),
            (0.3514, 0.0492, 0.0261),
            (0.4392, 0.0113, 0.0058),
        ];
        let m = model(0.0, 0.5, 1e-3);
        let top = m.alpha_star(0.5);
        assert!((top - 0.52706).abs() < 1e-4);
        for (i, &(alpha, upper, lower)) in reference.iter().enumerate() {
            let a = top * (i + 1) as f64 / 6.0;
            assert!((a - alpha).abs() < 1e-4);
            assert!((m.beta_star_upper(a) - upper).abs() < 2e-3, "upper at {a}");
            assert!((m.beta_star_lower(a) - lower).abs() < 2e-3, "lower at {a}");
        }
    }

    #[test]
    fn curves_are_monotone_and_ordered() {
        let m = model(0.0, 0.8, 1e-2);
        let alphas: Vec<f64> = (1..12).map(|i| i as f64 * 0.06).collect();
        let lower = m.curve(CurveKind::BetaLower, &alphas);
        let upper = m.curve(CurveKind::BetaUpper, &alphas);
        assert!(lower.is_monotone(false, 1e-6));
        assert!(upper.is_monotone(false, 1e-6));
        for (l, u) in lower.points.iter().zip(&upper.points) {
            assert!(l.1 <= u.1 + 1e-6);
        }
        let gammas: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
        assert!(m.curve(CurveKind::AlphaStar, &gammas).is_monotone(true, 1e-9));
        assert!(m.curve(CurveKind::GammaStar, &alphas).is_monotone(true, 1e-9));
    }

    #[test]
    fn halving_grid_step_barely_moves_curves() {
        let coarse = model(0.0, 0.5, 1e-2);
        let fine = coarse.refined(2);
        for a in [0.1, 0.2, 0.3, 0.4, 0.45] {
            assert!((coarse.beta_star_upper(a) - fine.beta_star_upper(a)).abs() < 1e-2);
            assert!((coarse.beta_star_lower(a) - fine.beta_star_lower(a)).abs() < 1e-2);
        }
        for g in [0.2, 0.7, 1.2, 1.5, 1.9] {
            assert!((coarse.alpha_star(g) - fine.alpha_star(g)).abs() < 1e-2);
        }
    }

    #[test]
    fn verify_gap_flags_boundary_points() {
        let m = model(0.0, 0.5, 1e-2);
        let top = m.alpha_star(0.5);
        let rows = verify_gap(&m, &[0.0, top * 0.5, top]);
        assert_eq!(rows[0].verdict, GapVerdict::Boundary);
        assert_eq!(rows[1].verdict, GapVerdict::Strict);
        assert_eq!(rows[2].verdict, GapVerdict::Boundary);
        assert!(rows[2].beta_lower.abs() < 1e-12);
    }

    #[test]
    fn positive_d0_delta0_against_grid() {
        let m = model(0.2, 1.0, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
            // brute force over a product grid of the null set
            let n = 400;
            let mut best = f64::INFINITY;
            for i in 0..=n {
                for j in 0..=n {
                    let (r1, r2) = (i as f64 / n as f64, j as f64 / n as f64);
                    if binary_diameter(r1, r2) <= 0.2 {
                        best = best.min(binary_kl(a, r1) + binary_kl(b, r2));
                    }
                }
            }
            let v = m.delta0(a, b);
            assert!(v <= best + 1e-9 && v >= best - 1e-2, "{v} vs grid {best}");
        }
    }

    #[test]
    fn joint_product_is_consistent() {
        let j = JointDistribution::product_binary(0.1, 0.9);
        assert!((j.diameter() - binary_diameter(0.1, 0.9)).abs() < 1e-12);
        let seqs = vec![vec![0, 1, 1, 0], vec![1, 1, 0, 0]];
        let t = JointDistribution::joint_type(&seqs, 2).unwrap();
        assert_eq!(t.probs(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn joint_delta0_known_values() {
        // a point mass on (0, 1) must spread half its mass to (1, 0)
        let j = JointDistribution::new(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((delta0(&j, 0.0).unwrap() - 1.0).abs() < 1e-6);
        // equal marginals are already in the null set
        let j = JointDistribution::new(2, 2, vec![0.1, 0.3, 0.3, 0.3]).unwrap();
        assert_eq!(delta0(&j, 0.0).unwrap(), 0.0);
        // over the full joint simplex the projection averages the off-diagonal
        // cells: p0 = (p00, (p01 + p10)/2, (p01 + p10)/2, p11)
        let j = JointDistribution::product_binary(0.1, 0.9);
        let p = j.probs();
        let avg = 0.5 * (p[1] + p[2]);
        let expected = kl_divergence(p, &[p[0], avg, avg, p[3]]).unwrap();
        assert!((delta0(&j, 0.0).unwrap() - expected).abs() < 1e-7);
        assert!(expected < binary_delta0_closed_form(0.1, 0.9));
    }

    #[test]
    fn joint_delta0_lagrangian_meets_dual_at_small_d0() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, x) in [(2, 2), (2, 3), (3, 2)] {
            let p = random_distribution(&mut rng, usize::pow(x, k as u32));
            let j = JointDistribution::new(k, x, p).unwrap();
            let exact = delta0(&j, 0.0).unwrap();
            let relaxed = delta0(&j, 1e-7).unwrap();
            assert!(relaxed <= exact + 1e-6 && relaxed >= exact - 1e-3, "{relaxed} vs {exact}");
        }
    }

    #[test]
    fn joint_delta0_against_simplex_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 120;
        for d0 in [0.05, 0.3] {
            let p = random_distribution(&mut rng, 4);
            let j = JointDistribution::new(2, 2, p.clone()).unwrap();
            if j.diameter() <= d0 {
                continue;
            }
            let mut best = f64::INFINITY;
            for a in 0..=n {
                for b in 0..=n - a {
                    for c in 0..=n - a - b {
                        let q = [a, b, c, n - a - b - c].map(|v| v as f64 / n as f64);
                        if diameter_of(&q, 2, 2) <= d0 {
                            best = best.min(kl_unchecked(&p, &q));
                        }
                    }
                }
            }
            let v = delta0(&j, d0).unwrap();
            assert!(v <= best + 1e-6 && v >= best - 2e-2, "d0={d0}: {v} vs {best}");
        }
    }

    #[test]
    fn joint_solvers_reject_large_instances() {
        let j = JointDistribution::product(&vec![vec![0.5, 0.5]; 4]).unwrap();
        assert!(matches!(delta0(&j, 0.0), Err(ExponentError::Capability(_))));
        let j = JointDistribution::product(&vec![vec![0.5, 0.5]; 3]).unwrap();
        assert!(matches!(delta1(&j, 0.5), Err(ExponentError::Capability(_))));
    }

    #[test]
    fn joint_delta1_examples() {
        let j = JointDistribution::product_binary(0.5, 0.5);
        // only the two off-diagonal point masses reach diameter 2
        assert_eq!(delta1(&j, 2.0).unwrap(), f64::INFINITY);
        let j = JointDistribution::new(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(delta1(&j, 2.0).unwrap(), 0.0);
        let j = JointDistribution::product_binary(0.2, 0.3);
        assert_eq!(delta1(&JointDistribution::product_binary(0.0, 1.0), 1.0).unwrap(), 0.0);
        assert!(delta1(&j, 1.0).unwrap() > 0.0);
    }

    #[test]
    fn joint_delta1_monotone_in_d1() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let j = JointDistribution::new(2, 2, random_distribution(&mut rng, 4)).unwrap();
            let a = delta1_with_step(&j, 0.4, 0.05).unwrap();
            let b = delta1_with_step(&j, 0.9, 0.05).unwrap();
            assert!(b >= a - 1e-4, "{a} > {b}");
        }
    }

    proptest! {
        #[test]
        fn product_divergences_non_negative(q1 in 0.0f64..=1.0, q2 in 0.0f64..=1.0) {
            let m = model(0.1, 0.7, 1e-2);
            let (a, b) = (m.delta0(q1, q2), m.delta1(q1, q2));
            prop_assert!(a >= 0.0 && b >= 0.0);
            let d = binary_diameter(q1, q2);
            prop_assert_eq!(a == 0.0, d <= 0.1);
            prop_assert_eq!(b == 0.0, d >= 0.7);
        }

        #[test]
        fn closed_form_alpha_star_is_non_decreasing(g in 0.0f64..1.99) {
            prop_assert!(binary_alpha_star_closed_form(g + 0.01) >= binary_alpha_star_closed_form(g));
        }
    }
}
