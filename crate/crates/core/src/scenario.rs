//! Spectrum-sensing Monte Carlo study.
//!
//! A single transmitter sits uniformly in a disk of radius 2 km and `K`
//! energy-detecting sensors sit uniformly in a concentric disk of radius 1 km.
//! Each sensor measures received power over `t` slots, quantizes it to a
//! uniform dBm grid and reports the type of its level sequence. The study
//! estimates worst-case error rates of the diameter test over random
//! placements.
//!
//! Received linear power is `theta * S * 10^(-L(d)/10) + N * E` with `E` a
//! unit-mean exponential (a chi-square with two degrees of freedom scaled by
//! one half). Path loss `L(d)` is free space up to a short-range breakpoint,
//! log-linear interpolation up to the model seam and a Hata-style urban model
//! beyond. The environment offset shifts the Hata branch.

use crate::crypto::{default_security, Identity};
use crate::detection::{
    calibrate_worst_case, exceedance_rate, miss_rate, DetectionError, Hypothesis, StatisticSample,
};
use crate::protocol::{run_protocol, MaskPolicy, NetworkParams, ProtocolConfig, ProtocolError};
use crate::ring::{RingError, RingParams};
use crate::typestat::{quantized_root_ticks, EmpiricalType, ExactDiameter, TypeError};
use rand::distributions::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rand_distr::{Exp1, WeightedAliasIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("distance must be positive, got {0} km")]
    NonPositiveDistance(f64),
    #[error("sensor index {index} out of range for {sensors} sensors")]
    SensorIndex { index: usize, sensors: usize },
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config encode: {0}")]
    Encode(#[from] toml::ser::Error),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathLossModel {
    /// Free space, interpolated to the Hata branch between the short-range
    /// breakpoint and the seam, Hata beyond the seam.
    Combined,
    Hata,
    FreeSpace,
}

/// How trial statistics are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticPath {
    /// Floating-point diameter of the plaintext types.
    Exact,
    /// Diameter of the quantized roots, identical to what the fusion center
    /// computes.
    Quantized,
    /// Full protocol run per trial under the identity scheme.
    Protocol,
}

/// Hata environment corrections relative to the urban formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HataEnvironment {
    Urban,
    Suburban,
    Open,
}

impl HataEnvironment {
    pub fn offset_db(self, carrier_mhz: f64) -> f64 {
        let lf = carrier_mhz.log10();
        match self {
            HataEnvironment::Urban => 0.0,
            HataEnvironment::Suburban => -2.0 * (carrier_mhz / 28.0).log10().powi(2) - 5.4,
            HataEnvironment::Open => -4.78 * lf * lf + 18.33 * lf - 40.94,
        }
    }
}

pub const DEFAULT_ENVIRONMENT_OFFSET_DB: f64 = -19.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub source_region_radius_km: f64,
    pub sensor_region_radius_km: f64,
    pub sensors: usize,
    pub lengths: Vec<usize>,
    pub carrier_mhz: f64,
    pub source_antenna_m: f64,
    pub sensor_antenna_m: f64,
    pub source_power_dbm: f64,
    pub noise_power_dbm: f64,
    pub quantizer_levels: usize,
    pub quantizer_min_dbm: f64,
    pub quantizer_max_dbm: f64,
    pub frac_bits: u32,
    pub path_loss: PathLossModel,
    /// Added to the urban Hata loss; see [`HataEnvironment::offset_db`].
    pub environment_offset_db: f64,
    pub short_range_km: f64,
    pub model_seam_km: f64,
    pub seed: u64,
    pub placements: usize,
    pub trials: usize,
    pub lambda_targets: Vec<f64>,
    pub roc_length: usize,
    pub roc_sensors: Vec<usize>,
    pub roc_lambdas: Vec<f64>,
    pub statistic: StatisticPath,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            source_region_radius_km: 2.0,
            sensor_region_radius_km: 1.0,
            sensors: 8,
            lengths: vec![360, 420, 480, 540, 600],
            carrier_mhz: 3625.0,
            source_antenna_m: 20.0,
            sensor_antenna_m: 1.5,
            source_power_dbm: 25.0,
            noise_power_dbm: -103.0,
            quantizer_levels: 128,
            quantizer_min_dbm: -130.0,
            quantizer_max_dbm: -60.0,
            frac_bits: 13,
            path_loss: PathLossModel::Combined,
            environment_offset_db: DEFAULT_ENVIRONMENT_OFFSET_DB,
            short_range_km: 0.1,
            model_seam_km: 1.0,
            seed: 1,
            placements: 10,
            trials: 10_000,
            lambda_targets: vec![5e-3, 5e-4],
            roc_length: 500,
            roc_sensors: vec![7, 8],
            roc_lambdas: vec![1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 0.1, 0.2, 0.3, 0.5],
            statistic: StatisticPath::Quantized,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ScenarioError> {
        Ok(toml::to_string(self)?)
    }

    pub fn quantizer(&self) -> Quantizer {
        Quantizer { levels: self.quantizer_levels, min_dbm: self.quantizer_min_dbm, max_dbm: self.quantizer_max_dbm }
    }

    pub fn noise_mw(&self) -> f64 {
        dbm_to_mw(self.noise_power_dbm)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: String| Err(ScenarioError::InvalidConfig(msg));
        let positive = [
            ("source_region_radius_km", self.source_region_radius_km),
            ("sensor_region_radius_km", self.sensor_region_radius_km),
            ("carrier_mhz", self.carrier_mhz),
            ("source_antenna_m", self.source_antenna_m),
            ("sensor_antenna_m", self.sensor_antenna_m),
            ("short_range_km", self.short_range_km),
            ("model_seam_km", self.model_seam_km),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("source_power_dbm", self.source_power_dbm),
            ("noise_power_dbm", self.noise_power_dbm),
            ("environment_offset_db", self.environment_offset_db),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.sensors < 2 {
            return bad(format!("need at least 2 sensors, got {}", self.sensors));
        }
        RingParams::for_network(self.sensors, self.frac_bits)?;
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return bad("lengths must be a non-empty list of positive values".into());
        }
        if self.quantizer_levels < 2 || self.quantizer_levels > u16::MAX as usize {
            return bad(format!("quantizer_levels must lie in [2, 65535], got {}", self.quantizer_levels));
        }
        if !(self.quantizer_min_dbm < self.quantizer_max_dbm) {
            return bad("quantizer_min_dbm must be below quantizer_max_dbm".into());
        }
        if self.placements == 0 || self.trials == 0 {
            return bad("placements and trials must be positive".into());
        }
        for &l in self.lambda_targets.iter().chain(&self.roc_lambdas) {
            if !(l > 0.0 && l < 1.0) {
                return bad(format!("error targets must lie in (0, 1), got {l}"));
            }
        }
        if !self.roc_sensors.is_empty() {
            if self.roc_length == 0 {
                return bad("roc_length must be positive".into());
            }
            if let Some(&k) = self.roc_sensors.iter().find(|&&k| k < 2 || k > self.sensors) {
                return bad(format!("roc sensor count {k} must lie in [2, {}]", self.sensors));
            }
        }
        if self.short_range_km >= self.model_seam_km {
            return bad("short_range_km must be below model_seam_km".into());
        }
        if free_space_loss_db(self.short_range_km, self.carrier_mhz) >= hata_loss_db(self.model_seam_km, self) {
            return bad("Hata loss at the seam must exceed free-space loss at the short-range breakpoint".into());
        }
        if hata_slope_db_per_decade(self) <= 0.0 {
            return bad("Hata slope must be positive; lower source_antenna_m".into());
        }
        Ok(())
    }
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

fn free_space_loss_db(d_km: f64, carrier_mhz: f64) -> f64 {
    20.0 * d_km.log10() + 20.0 * carrier_mhz.log10() + 32.45
}

pub fn hata_slope_db_per_decade(config: &ScenarioConfig) -> f64 {
    44.9 - 6.55 * config.source_antenna_m.log10()
}

fn hata_loss_db(d_km: f64, config: &ScenarioConfig) -> f64 {
    let lf = config.carrier_mhz.log10();
    let hm = config.sensor_antenna_m;
    let mobile = (1.1 * lf - 0.7) * hm - (1.56 * lf - 0.8);
    69.55 + 26.16 * lf - 13.82 * config.source_antenna_m.log10() - mobile
        + config.environment_offset_db
        + hata_slope_db_per_decade(config) * d_km.log10()
}

/// Path loss in dB at `distance_km` under `model`.
pub fn path_loss_db(distance_km: f64, model: PathLossModel, config: &ScenarioConfig) -> Result<f64, ScenarioError> {
    if !(distance_km > 0.0) {
        return Err(ScenarioError::NonPositiveDistance(distance_km));
    }
    let f = config.carrier_mhz;
    Ok(match model {
        PathLossModel::FreeSpace => free_space_loss_db(distance_km, f),
        PathLossModel::Hata => hata_loss_db(distance_km, config),
        PathLossModel::Combined => {
            let (near, seam) = (config.short_range_km, config.model_seam_km);
            if distance_km <= near {
                free_space_loss_db(distance_km, f)
            } else if distance_km < seam {
                let a = free_space_loss_db(near, f);
                let b = hata_loss_db(seam, config);
                let w = (distance_km / near).log10() / (seam / near).log10();
                a + (b - a) * w
            } else {
                hata_loss_db(distance_km, config)
            }
        }
    })
}

/// Uniform dBm grid; a power maps to its nearest level, clamped at both ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantizer {
    pub levels: usize,
    pub min_dbm: f64,
    pub max_dbm: f64,
}

impl Quantizer {
    pub fn step_db(&self) -> f64 {
        (self.max_dbm - self.min_dbm) / (self.levels - 1) as f64
    }

    pub fn level_dbm(&self, level: usize) -> f64 {
        self.min_dbm + level as f64 * self.step_db()
    }

    pub fn level_of(&self, dbm: f64) -> usize {
        if dbm.is_nan() {
            return 0;
        }
        let x = ((dbm - self.min_dbm) / self.step_db()).round();
        x.clamp(0.0, (self.levels - 1) as f64) as usize
    }

    pub fn level_of_mw(&self, mw: f64) -> usize {
        if mw <= 0.0 {
            return 0;
        }
        self.level_of(mw_to_dbm(mw))
    }

    /// Level distribution of `signal + noise * E` with `E` unit-mean
    /// exponential.
    pub fn level_probabilities(&self, signal_mw: f64, noise_mw: f64) -> Vec<f64> {
        let cdf = |edge_dbm: f64| {
            let x = (dbm_to_mw(edge_dbm) - signal_mw) / noise_mw;
            if x <= 0.0 {
                0.0
            } else {
                -(-x).exp_m1()
            }
        };
        let step = self.step_db();
        let mut probs = Vec::with_capacity(self.levels);
        let mut below = 0.0;
        for j in 0..self.levels {
            let upto = if j + 1 == self.levels { 1.0 } else { cdf(self.level_dbm(j) + step / 2.0) };
            probs.push((upto - below).max(0.0));
            below = upto;
        }
        probs
    }
}

/// Planar positions in km, source and sensors sharing the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub source: [f64; 2],
    pub sensors: Vec<[f64; 2]>,
}

fn uniform_in_disk(radius: f64, rng: &mut impl Rng) -> [f64; 2] {
    let r = radius * rng.gen::<f64>().sqrt();
    let phi = std::f64::consts::TAU * rng.gen::<f64>();
    [r * phi.cos(), r * phi.sin()]
}

impl Placement {
    pub fn random(config: &ScenarioConfig, rng: &mut impl Rng) -> Self {
        let source = uniform_in_disk(config.source_region_radius_km, rng);
        let sensors = (0..config.sensors).map(|_| uniform_in_disk(config.sensor_region_radius_km, rng)).collect();
        Self { source, sensors }
    }

    pub fn custom(source: [f64; 2], sensors: Vec<[f64; 2]>) -> Self {
        Self { source, sensors }
    }

    pub fn distance_km(&self, sensor: usize) -> Result<f64, ScenarioError> {
        let s = self
            .sensors
            .get(sensor)
            .ok_or(ScenarioError::SensorIndex { index: sensor, sensors: self.sensors.len() })?;
        Ok((s[0] - self.source[0]).hypot(s[1] - self.source[1]))
    }

    /// Mean received source power at `sensor`, in mW.
    pub fn signal_mw(&self, sensor: usize, config: &ScenarioConfig) -> Result<f64, ScenarioError> {
        let loss = path_loss_db(self.distance_km(sensor)?, config.path_loss, config)?;
        Ok(dbm_to_mw(config.source_power_dbm - loss))
    }
}

/// One draw of linear received power in mW.
pub fn received_power_mw(
    theta: bool,
    placement: &Placement,
    sensor: usize,
    config: &ScenarioConfig,
    rng: &mut impl Rng,
) -> Result<f64, ScenarioError> {
    let signal = if theta { placement.signal_mw(sensor, config)? } else {
        placement.distance_km(sensor)?;
        0.0
    };
    let e: f64 = rng.sample(Exp1);
    Ok(signal + config.noise_mw() * e)
}

/// One quantized power level drawn directly from the channel model.
pub fn sample_power(
    theta: bool,
    placement: &Placement,
    sensor: usize,
    config: &ScenarioConfig,
    rng: &mut impl Rng,
) -> Result<usize, ScenarioError> {
    Ok(config.quantizer().level_of_mw(received_power_mw(theta, placement, sensor, config, rng)?))
}

/// Per-sensor level samplers for one placement and hypothesis, built from
/// exact level probabilities.
pub struct ChannelSampler {
    tables: Vec<WeightedAliasIndex<f64>>,
    probabilities: Vec<Vec<f64>>,
}

impl ChannelSampler {
    pub fn new(theta: bool, placement: &Placement, config: &ScenarioConfig) -> Result<Self, ScenarioError> {
        let q = config.quantizer();
        let noise = config.noise_mw();
        let mut tables = Vec::with_capacity(placement.sensors.len());
        let mut probabilities = Vec::with_capacity(placement.sensors.len());
        for k in 0..placement.sensors.len() {
            let signal = if theta { placement.signal_mw(k, config)? } else { 0.0 };
            let p = q.level_probabilities(signal, noise);
            tables.push(
                WeightedAliasIndex::new(p.clone())
                    .map_err(|e| ScenarioError::InvalidConfig(format!("level distribution: {e}")))?,
            );
            probabilities.push(p);
        }
        Ok(Self { tables, probabilities })
    }

    pub fn sensors(&self) -> usize {
        self.tables.len()
    }

    pub fn probabilities(&self, sensor: usize) -> &[f64] {
        &self.probabilities[sensor]
    }

    pub fn sample(&self, sensor: usize, rng: &mut impl Rng) -> usize {
        self.tables[sensor].sample(rng)
    }
}

/// One Monte Carlo detection trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config_id: usize,
    pub theta: u8,
    pub t: usize,
    pub sequences: Vec<Vec<u16>>,
    pub statistic: f64,
    pub decision: Hypothesis,
}

/// Stream key for one (length, placement, hypothesis) cell.
fn cell_key(seed: u64, t: usize, placement: usize, theta: bool) -> [u8; 32] {
    let mut root = ChaCha20Rng::seed_from_u64(seed);
    root.set_stream(((t as u64) << 32) | ((placement as u64) << 1) | theta as u64);
    let mut key = [0u8; 32];
    root.fill_bytes(&mut key);
    key
}

fn trial_rng(seed: u64, t: usize, placement: usize, theta: bool, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(cell_key(seed, t, placement, theta));
    rng.set_stream(trial as u64);
    rng
}

pub fn placement_rng(seed: u64, placement: usize) -> ChaCha8Rng {
    let mut root = ChaCha20Rng::seed_from_u64(seed);
    root.set_stream(u64::MAX - placement as u64);
    let mut key = [0u8; 32];
    root.fill_bytes(&mut key);
    ChaCha8Rng::from_seed(key)
}

pub fn generate_placements(config: &ScenarioConfig) -> Vec<Placement> {
    (0..config.placements).map(|p| Placement::random(config, &mut placement_rng(config.seed, p))).collect()
}

/// Precomputed per-count roots for one sequence length.
struct RootTables {
    ticks: Vec<u64>,
    roots: Vec<f64>,
}

impl RootTables {
    fn new(t: usize, ring: RingParams) -> Self {
        let ticks = (0..=t as u64).map(|c| quantized_root_ticks(c, t as u64, ring)).collect();
        let roots = (0..=t).map(|c| (c as f64 / t as f64).sqrt()).collect();
        Self { ticks, roots }
    }
}

struct StatisticEngine<'a> {
    config: &'a ScenarioConfig,
    tables: RootTables,
}

impl<'a> StatisticEngine<'a> {
    fn new(config: &'a ScenarioConfig, t: usize) -> Result<Self, ScenarioError> {
        let ring = RingParams::for_network(config.sensors, config.frac_bits)?;
        Ok(Self { config, tables: RootTables::new(t, ring) })
    }

    fn exact(&self, counts: &[Vec<u32>], k: usize) -> f64 {
        let levels = self.config.quantizer_levels;
        let overlap: f64 = (0..levels)
            .map(|x| {
                let s: f64 = counts[..k].iter().map(|c| self.tables.roots[c[x] as usize]).sum();
                s * s
            })
            .sum();
        (k * k) as f64 - overlap
    }

    fn quantized(&self, counts: &[Vec<u32>], k: usize) -> f64 {
        let levels = self.config.quantizer_levels;
        let sums = (0..levels).map(|x| counts[..k].iter().map(|c| self.tables.ticks[c[x] as usize]).sum::<u64>());
        ExactDiameter::from_root_sums(k, sums, self.config.frac_bits).to_f64()
    }

    fn protocol(&self, counts: &[Vec<u32>], k: usize, seed: u64) -> Result<f64, ScenarioError> {
        let net = NetworkParams::with_default_modulus(k, self.config.frac_bits, self.config.quantizer_levels)?;
        let types = counts[..k]
            .iter()
            .map(|c| EmpiricalType::from_counts(c.iter().map(|&v| v as u64).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        let pc = ProtocolConfig { net, scheme: Arc::new(Identity), security: default_security(&Identity), seed, mask_policy: MaskPolicy::Uniform };
        Ok(run_protocol(&pc, &types, 0.0)?.statistic.to_f64())
    }

    fn statistic(&self, counts: &[Vec<u32>], k: usize, seed: u64) -> Result<f64, ScenarioError> {
        match self.config.statistic {
            StatisticPath::Exact => Ok(self.exact(counts, k)),
            StatisticPath::Quantized => Ok(self.quantized(counts, k)),
            StatisticPath::Protocol => self.protocol(counts, k, seed),
        }
    }
}

fn draw_counts(sampler: &ChannelSampler, t: usize, levels: usize, rng: &mut impl Rng) -> Vec<Vec<u32>> {
    (0..sampler.sensors())
        .map(|k| {
            let mut c = vec![0u32; levels];
            for _ in 0..t {
                c[sampler.sample(k, rng)] += 1;
            }
            c
        })
        .collect()
}

fn protocol_seed(rng: &mut impl Rng) -> u64 {
    rng.next_u64()
}

/// Replays one trial of the study with its full level sequences.
pub fn simulate_trial(
    config: &ScenarioConfig,
    placement: &Placement,
    config_id: usize,
    theta: bool,
    t: usize,
    trial: usize,
    threshold: f64,
) -> Result<TrialRecord, ScenarioError> {
    let sampler = ChannelSampler::new(theta, placement, config)?;
    let mut rng = trial_rng(config.seed, t, config_id, theta, trial);
    let mut sequences = vec![Vec::with_capacity(t); sampler.sensors()];
    let mut counts = vec![vec![0u32; config.quantizer_levels]; sampler.sensors()];
    for (k, seq) in sequences.iter_mut().enumerate() {
        for _ in 0..t {
            let level = sampler.sample(k, &mut rng);
            counts[k][level] += 1;
            seq.push(level as u16);
        }
    }
    let seed = protocol_seed(&mut rng);
    let engine = StatisticEngine::new(config, t)?;
    let statistic = engine.statistic(&counts, sampler.sensors(), seed)?;
    Ok(TrialRecord {
        config_id,
        theta: theta as u8,
        t,
        sequences,
        statistic,
        decision: Hypothesis::from_statistic(statistic, threshold),
    })
}

/// Statistics of every trial in one (length, placement, hypothesis) cell, for
/// each studied network size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStatistics {
    /// Statistic along the configured path, indexed `[size][trial]`.
    pub statistic: Vec<Vec<f64>>,
    /// Floating-point plaintext diameter, indexed `[size][trial]`.
    pub plaintext: Vec<Vec<f64>>,
}

fn simulate_cell(
    config: &ScenarioConfig,
    placement: &Placement,
    placement_id: usize,
    theta: bool,
    t: usize,
    sizes: &[usize],
) -> Result<CellStatistics, ScenarioError> {
    let sampler = ChannelSampler::new(theta, placement, config)?;
    let engine = StatisticEngine::new(config, t)?;
    let rows = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(config.seed, t, placement_id, theta, i);
            let counts = draw_counts(&sampler, t, config.quantizer_levels, &mut rng);
            let seed = protocol_seed(&mut rng);
            sizes
                .iter()
                .map(|&k| Ok((engine.statistic(&counts, k, seed)?, engine.exact(&counts, k))))
                .collect::<Result<Vec<_>, ScenarioError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut cell = CellStatistics {
        statistic: vec![Vec::with_capacity(config.trials); sizes.len()],
        plaintext: vec![Vec::with_capacity(config.trials); sizes.len()],
    };
    for row in rows {
        for (j, (s, p)) in row.into_iter().enumerate() {
            cell.statistic[j].push(s);
            cell.plaintext[j].push(p);
        }
    }
    Ok(cell)
}

/// Worst-case error rates at one calibrated threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub lambda_target: f64,
    pub gamma: f64,
    /// Largest false-alarm rate over placements.
    pub mu: f64,
    /// Largest miss rate over placements.
    pub lambda: f64,
    pub per_placement_mu: Vec<f64>,
    pub per_placement_lambda: Vec<f64>,
}

fn operating_point(h0: &[Vec<f64>], h1: &[Vec<f64>], target: f64) -> Result<OperatingPoint, ScenarioError> {
    let gamma = calibrate_worst_case(h1, target)?;
    let per_placement_mu: Vec<f64> = h0.iter().map(|s| exceedance_rate(s, gamma)).collect();
    let per_placement_lambda: Vec<f64> = h1.iter().map(|s| miss_rate(s, gamma)).collect();
    Ok(OperatingPoint {
        lambda_target: target,
        gamma,
        mu: per_placement_mu.iter().copied().fold(0.0, f64::max),
        lambda: per_placement_lambda.iter().copied().fold(0.0, f64::max),
        per_placement_mu,
        per_placement_lambda,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentRow {
    pub t: usize,
    pub lambda_target: f64,
    pub gamma: f64,
    /// `-log2(mu) / t`; when no false alarm was observed, the value at
    /// `mu = 1 / trials` is reported and `censored` is set.
    pub exponent_estimate: f64,
    pub mu: f64,
    pub lambda: f64,
    pub std_error: f64,
    pub censored: bool,
    pub per_placement_mu: Vec<f64>,
}

impl ExponentRow {
    fn new(t: usize, trials: usize, point: OperatingPoint) -> Self {
        let n = trials as f64;
        let tt = t as f64;
        let mu = point.mu;
        let (exponent_estimate, std_error, censored) = if mu > 0.0 {
            let se = (mu * (1.0 - mu) / n).sqrt() / (mu * tt * std::f64::consts::LN_2);
            (-mu.log2() / tt, se, false)
        } else {
            (n.log2() / tt, 0.0, true)
        };
        Self {
            t,
            lambda_target: point.lambda_target,
            gamma: point.gamma,
            exponent_estimate,
            mu,
            lambda: point.lambda,
            std_error,
            censored,
            per_placement_mu: point.per_placement_mu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub sensors: usize,
    pub lambda_target: f64,
    pub gamma: f64,
    pub mu: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub config: ScenarioConfig,
    pub placements: Vec<Placement>,
    pub exponents: Vec<ExponentRow>,
    pub roc: Vec<RocPoint>,
    /// Trials whose decision differs from the plaintext diameter test by more
    /// than the quantization band, over every reported threshold.
    pub band_violations: usize,
    pub decision_disagreements: usize,
    pub samples: Vec<StatisticSample>,
}

struct LengthCells {
    t: usize,
    sizes: Vec<usize>,
    // [placement]
    h0: Vec<CellStatistics>,
    h1: Vec<CellStatistics>,
}

impl LengthCells {
    fn column(&self, theta: bool, j: usize, plaintext: bool) -> Vec<Vec<f64>> {
        let cells = if theta { &self.h1 } else { &self.h0 };
        cells.iter().map(|c| if plaintext { c.plaintext[j].clone() } else { c.statistic[j].clone() }).collect()
    }

    fn size_index(&self, k: usize) -> usize {
        self.sizes.iter().position(|&s| s == k).expect("size simulated")
    }
}

fn count_disagreements(cells: &LengthCells, j: usize, gamma: f64, band: f64) -> (usize, usize) {
    let mut disagree = 0;
    let mut violations = 0;
    for cell in cells.h0.iter().chain(&cells.h1) {
        for (s, p) in cell.statistic[j].iter().zip(&cell.plaintext[j]) {
            if Hypothesis::from_statistic(*s, gamma) != Hypothesis::from_statistic(*p, gamma) {
                disagree += 1;
                if (p - gamma).abs() > band {
                    violations += 1;
                }
            }
        }
    }
    (disagree, violations)
}

/// Runs the study over freshly drawn placements.
pub fn run_study(config: &ScenarioConfig) -> Result<StudyOutput, ScenarioError> {
    config.validate()?;
    let placements = generate_placements(config);
    run_study_with_placements(config, placements)
}

/// Runs the study over the given placements. Each placement must have
/// exactly `config.sensors` sensors.
pub fn run_study_with_placements(
    config: &ScenarioConfig,
    placements: Vec<Placement>,
) -> Result<StudyOutput, ScenarioError> {
    config.validate()?;
    if placements.is_empty() {
        return Err(ScenarioError::InvalidConfig("no placements".into()));
    }
    if let Some(p) = placements.iter().find(|p| p.sensors.len() != config.sensors) {
        return Err(ScenarioError::InvalidConfig(format!(
            "placement has {} sensors, config expects {}",
            p.sensors.len(),
            config.sensors
        )));
    }
    let mut exponents = Vec::new();
    let mut roc = Vec::new();
    let mut samples = Vec::new();
    let mut band_violations = 0;
    let mut decision_disagreements = 0;
    let mut lengths = config.lengths.clone();
    let with_roc = !config.roc_sensors.is_empty();
    if with_roc && !lengths.contains(&config.roc_length) {
        lengths.push(config.roc_length);
    }
    for &t in &lengths {
        let in_study = config.lengths.contains(&t);
        let in_roc = with_roc && t == config.roc_length;
        let mut sizes = vec![config.sensors];
        if in_roc {
            for &k in &config.roc_sensors {
                if !sizes.contains(&k) {
                    sizes.push(k);
                }
            }
        }
        let simulate = |theta: bool| -> Result<Vec<CellStatistics>, ScenarioError> {
            placements.iter().enumerate().map(|(p, pl)| simulate_cell(config, pl, p, theta, t, &sizes)).collect()
        };
        let cells = LengthCells { t, h0: simulate(false)?, h1: simulate(true)?, sizes: sizes.clone() };

        let mut check = |cells: &LengthCells, j: usize, gamma: f64| {
            let band = NetworkParams::with_default_modulus(cells.sizes[j], config.frac_bits, config.quantizer_levels)
                .map(|n| n.perturbation_band())
                .unwrap_or(0.0);
            let (d, v) = count_disagreements(cells, j, gamma, band);
            decision_disagreements += d;
            band_violations += v;
        };

        if in_study {
            let h0 = cells.column(false, 0, false);
            let h1 = cells.column(true, 0, false);
            for &target in &config.lambda_targets {
                let point = operating_point(&h0, &h1, target)?;
                check(&cells, 0, point.gamma);
                exponents.push(ExponentRow::new(cells.t, config.trials, point));
            }
            for (theta, col) in [(0u8, &h0), (1u8, &h1)] {
                for (p, s) in col.iter().enumerate() {
                    samples.extend(s.iter().map(|&statistic| StatisticSample { config_id: p, theta, t, statistic }));
                }
            }
        }
        if in_roc {
            for &k in &config.roc_sensors {
                let j = cells.size_index(k);
                let h0 = cells.column(false, j, false);
                let h1 = cells.column(true, j, false);
                for &target in &config.roc_lambdas {
                    let point = operating_point(&h0, &h1, target)?;
                    check(&cells, j, point.gamma);
                    roc.push(RocPoint {
                        sensors: k,
                        lambda_target: target,
                        gamma: point.gamma,
                        mu: point.mu,
                        lambda: point.lambda,
                    });
                }
            }
        }
    }
    Ok(StudyOutput {
        config: config.clone(),
        placements,
        exponents,
        roc,
        band_violations,
        decision_disagreements,
        samples,
    })
}

pub fn write_exponents_csv<W: io::Write>(writer: W, rows: &[ExponentRow]) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "lambda_target", "gamma", "exponent_estimate", "mu", "lambda", "std_error", "censored"])?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.lambda_target.to_string(),
            r.gamma.to_string(),
            r.exponent_estimate.to_string(),
            r.mu.to_string(),
            r.lambda.to_string(),
            r.std_error.to_string(),
            r.censored.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_roc_csv<W: io::Write>(writer: W, points: &[RocPoint]) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["K", "lambda_target", "gamma", "mu", "lambda"])?;
    for p in points {
        w.write_record([
            p.sensors.to_string(),
            p.lambda_target.to_string(),
            p.gamma.to_string(),
            p.mu.to_string(),
            p.lambda.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Consecutive lengths whose exponent estimates drop by more than `sigmas`
/// combined standard errors, per error target. A censored estimate at the
/// longer length is only a lower bound and never counts as a drop.
pub fn exponent_trend_violations(rows: &[ExponentRow], sigmas: f64) -> Vec<(f64, usize, usize)> {
    let mut targets: Vec<f64> = rows.iter().map(|r| r.lambda_target).collect();
    targets.sort_by(|a, b| b.total_cmp(a));
    targets.dedup();
    let mut out = Vec::new();
    for target in targets {
        let mut series: Vec<&ExponentRow> = rows.iter().filter(|r| r.lambda_target == target).collect();
        series.sort_by_key(|r| r.t);
        for w in series.windows(2) {
            let se = (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
            if !w[1].censored && w[1].exponent_estimate < w[0].exponent_estimate - sigmas * se {
                out.push((target, w[0].t, w[1].t));
            }
        }
    }
    out
}

/// Error targets at which the larger network's worst-case false-alarm rate
/// exceeds the smaller one's.
pub fn roc_dominance_violations(points: &[RocPoint], larger: usize, smaller: usize) -> Vec<f64> {
    points
        .iter()
        .filter(|p| p.sensors == larger)
        .filter_map(|big| {
            let small = points.iter().find(|q| q.sensors == smaller && q.lambda_target == big.lambda_target)?;
            (big.mu > small.mu).then_some(big.lambda_target)
        })
        .collect()
}
