//! `zmsdetect`: reproducible experiments for privacy-preserving distributed
//! event detection.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use thiserror::Error;
use zms_detect::adversary::{
    check_mask_uniformity, run_tda, run_tea, tda_suite, tea_suite, AdversaryError, GameParams, GameReport,
    TdaAttacker, TdaInstance, TeaAttacker, UniformityMode, UniformityParams, UniformityReport, Verdict,
};
use zms_detect::crypto::{cpa_suite, default_security, run_cpa_experiment, scheme_by_name, CpaReport, CryptoError};
use zms_detect::detection::{DetectionError, Hypothesis};
use zms_detect::exponents::{
    binary_alpha_star_closed_form, interior_alphas, verify_gap, BinaryProduct, ExponentError, ExponentProblem,
    GapVerdict, DEFAULT_STEP,
};
use zms_detect::protocol::{run_protocol, MaskPolicy, NetworkParams, ProtocolConfig, ProtocolError};
use zms_detect::ring::{RingError, RingParams};
use zms_detect::scenario::{
    exponent_trend_violations, generate_placements, roc_dominance_violations, run_study, simulate_trial,
    write_exponents_csv, write_roc_csv, ScenarioConfig, ScenarioError,
};
use zms_detect::typestat::{
    compute_type, hellinger_diameter_of_types, quantize_sqrt, quantized_diameter, Alphabet, TypeError,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CAPABILITY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "zmsdetect", version, about = "Privacy-preserving distributed event detection experiments")]
struct Cli {
    /// Scenario config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Each command writes into its own subdirectory of this directory.
    #[arg(long, global = true, default_value = "zmsdetect-out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the three-phase protocol once on simulated scenario data.
    ProtocolDemo(DemoArgs),
    /// Monte Carlo study of worst-case error exponents and the ROC.
    Study,
    /// Two-sensor binary exponent curves.
    Exponents(ExponentArgs),
    /// Gap between the achieved and the optimal type-II exponents.
    Gap(GapArgs),
    /// Type estimation and discrimination games against colluding sensors.
    PrivacyGames(GameArgs),
    /// Chosen-plaintext game against an encryption scheme.
    CpaCheck(CpaArgs),
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[arg(long, default_value = "elgamal")]
    scheme: String,
    /// 1 when the source is transmitting.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    theta: u8,
    /// Sequence length; the config's ROC length when omitted.
    #[arg(long)]
    length: Option<usize>,
    /// Placement index among the config's placements.
    #[arg(long, default_value_t = 0)]
    placement: usize,
    /// Decision threshold on the fused statistic.
    #[arg(long, default_value_t = 2.0)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct ExponentArgs {
    #[arg(long, default_value_t = 0.0)]
    d0: f64,
    #[arg(long, default_value_t = 0.5)]
    d1: f64,
    /// Grid step of the boundary searches.
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    /// Number of points per curve.
    #[arg(long, default_value_t = 20)]
    points: usize,
}

#[derive(Args, Debug)]
struct GapArgs {
    #[arg(long, default_value_t = 0.0)]
    d0: f64,
    #[arg(long, default_value_t = 0.5)]
    d1: f64,
    /// Number of evenly spaced interior false-alarm exponents.
    #[arg(long, default_value_t = 5)]
    alphas: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Game {
    Tea,
    Tda,
    Both,
}

#[derive(Args, Debug)]
struct GameArgs {
    #[arg(long, default_value = "elgamal")]
    scheme: String,
    #[arg(long, value_enum, default_value_t = Game::Both)]
    game: Game,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, default_value_t = 3)]
    sensors: usize,
    /// Colluding sensors, taken from the end.
    #[arg(long, default_value_t = 1)]
    colluders: usize,
    #[arg(long, default_value_t = 2)]
    alphabet: usize,
    #[arg(long, default_value_t = 3)]
    frac_bits: u32,
    #[arg(long, default_value_t = 8)]
    length: u64,
    /// Neighborhood radius for a successful estimate.
    #[arg(long, default_value_t = 0.02)]
    tau: f64,
    /// Also check the conditional uniformity of the honest mask sums.
    #[arg(long)]
    uniformity: bool,
}

#[derive(Args, Debug)]
struct CpaArgs {
    #[arg(long, default_value = "elgamal")]
    scheme: String,
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    /// Network size fixing the ring modulus `N = K + 1`.
    #[arg(long, default_value_t = 8)]
    sensors: usize,
    #[arg(long, default_value_t = 13)]
    frac_bits: u32,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Capability(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Capability(_) => EXIT_CAPABILITY,
            CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

fn ring_error(e: RingError) -> CliError {
    CliError::Usage(e.to_string())
}

fn crypto_error(e: CryptoError) -> CliError {
    match e {
        CryptoError::RingTooLarge(_) | CryptoError::UnsupportedSecurity { .. } => CliError::Capability(e.to_string()),
        CryptoError::Ring(r) => ring_error(r),
        e => CliError::Failed(e.to_string()),
    }
}

fn protocol_error(e: ProtocolError) -> CliError {
    match e {
        ProtocolError::Network(_) | ProtocolError::InvalidThreshold(_) => CliError::Usage(e.to_string()),
        ProtocolError::Crypto(c) => crypto_error(c),
        ProtocolError::Ring(r) => ring_error(r),
        e => CliError::Failed(e.to_string()),
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::InvalidConfig(_) | ScenarioError::Parse(_) => CliError::Usage(e.to_string()),
            ScenarioError::Detection(d) => d.into(),
            ScenarioError::Protocol(p) => protocol_error(p),
            ScenarioError::Ring(r) => ring_error(r),
            e => CliError::Failed(e.to_string()),
        }
    }
}

impl From<DetectionError> for CliError {
    fn from(e: DetectionError) -> Self {
        match e {
            DetectionError::Unattainable { .. } => CliError::Capability(e.to_string()),
            DetectionError::InvalidTarget { .. } | DetectionError::InvalidThreshold(_) => {
                CliError::Usage(e.to_string())
            }
            e => CliError::Failed(e.to_string()),
        }
    }
}

impl From<AdversaryError> for CliError {
    fn from(e: AdversaryError) -> Self {
        match e {
            AdversaryError::Capability(_) => CliError::Capability(e.to_string()),
            AdversaryError::InvalidParams(_) | AdversaryError::SumMismatch | AdversaryError::DimensionMismatch(_) => {
                CliError::Usage(e.to_string())
            }
            AdversaryError::Crypto(c) => crypto_error(c),
            AdversaryError::Protocol(p) => protocol_error(p),
            AdversaryError::Ring(r) => ring_error(r),
            e => CliError::Failed(e.to_string()),
        }
    }
}

impl From<ExponentError> for CliError {
    fn from(e: ExponentError) -> Self {
        match e {
            ExponentError::Capability(_) => CliError::Capability(e.to_string()),
            e => CliError::Usage(e.to_string()),
        }
    }
}

impl From<CryptoError> for CliError {
    fn from(e: CryptoError) -> Self {
        crypto_error(e)
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        protocol_error(e)
    }
}

impl From<RingError> for CliError {
    fn from(e: RingError) -> Self {
        ring_error(e)
    }
}

impl From<TypeError> for CliError {
    fn from(e: TypeError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

struct Run {
    config: ScenarioConfig,
    seed: u64,
    dir: PathBuf,
}

impl Run {
    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.file(name), text)?;
        Ok(())
    }
}

fn scheme(name: &str) -> CliResult<Arc<dyn zms_detect::crypto::EncryptionScheme>> {
    scheme_by_name(name)
        .ok_or_else(|| CliError::Usage(format!("unknown scheme {name:?}; expected elgamal, identity or fixed-pad")))
}

#[derive(Serialize)]
struct DemoSummary {
    scheme: String,
    sensors: usize,
    alphabet: usize,
    length: usize,
    theta: u8,
    placement: usize,
    threshold: f64,
    statistic: f64,
    plaintext_statistic: f64,
    unquantized_diameter: f64,
    band: f64,
    decision: Hypothesis,
    plaintext_decision: Hypothesis,
    messages: usize,
}

fn protocol_demo(run: &Run, args: &DemoArgs) -> CliResult<String> {
    let config = &run.config;
    let scheme = scheme(&args.scheme)?;
    let t = args.length.unwrap_or(config.roc_length);
    if t == 0 {
        return Err(CliError::Usage("sequence length must be positive".into()));
    }
    let placements = generate_placements(config);
    let placement = placements.get(args.placement).ok_or_else(|| {
        CliError::Usage(format!("placement {} out of range for {} placements", args.placement, placements.len()))
    })?;
    let record = simulate_trial(config, placement, args.placement, args.theta == 1, t, 0, args.threshold)?;
    let alphabet = Alphabet::new(config.quantizer_levels)?;
    let types = record
        .sequences
        .iter()
        .map(|s| compute_type(&s.iter().map(|&v| v as usize).collect::<Vec<_>>(), alphabet))
        .collect::<Result<Vec<_>, _>>()?;

    let net = NetworkParams::with_default_modulus(config.sensors, config.frac_bits, config.quantizer_levels)?;
    let security = default_security(scheme.as_ref());
    let pc = ProtocolConfig { net, scheme: scheme.clone(), security, seed: run.seed, mask_policy: MaskPolicy::Uniform };
    let outcome = run_protocol(&pc, &types, args.threshold)?;

    let ring = net.ring();
    let quantized: Vec<_> = types.iter().map(|ty| quantize_sqrt(ty, ring)).collect();
    let plaintext = quantized_diameter(&quantized)?.to_f64();
    let summary = DemoSummary {
        scheme: scheme.name().to_string(),
        sensors: config.sensors,
        alphabet: config.quantizer_levels,
        length: t,
        theta: args.theta,
        placement: args.placement,
        threshold: args.threshold,
        statistic: outcome.statistic.to_f64(),
        plaintext_statistic: plaintext,
        unquantized_diameter: hellinger_diameter_of_types(&types)?,
        band: net.perturbation_band(),
        decision: outcome.decision,
        plaintext_decision: Hypothesis::from_statistic(plaintext, args.threshold),
        messages: outcome.transcript.len(),
    };
    fs::write(run.file("transcript.jsonl"), outcome.transcript.to_jsonl())?;
    run.write_json("summary.json", &summary)?;
    Ok(format!(
        "protocol-demo: scheme={} K={} t={} theta={} statistic={:.6} plaintext={:.6} decision={:?} messages={}",
        summary.scheme,
        summary.sensors,
        t,
        args.theta,
        summary.statistic,
        summary.plaintext_statistic,
        summary.decision,
        summary.messages
    ))
}

#[derive(Serialize)]
struct StudySummary {
    seed: u64,
    placements: usize,
    trials: usize,
    trend_violations: Vec<(f64, usize, usize)>,
    dominance_violations: Vec<f64>,
    band_violations: usize,
    decision_disagreements: usize,
}

fn study(run: &Run) -> CliResult<String> {
    let out = run_study(&run.config)?;
    write_exponents_csv(fs::File::create(run.file("exponents.csv"))?, &out.exponents)?;
    write_roc_csv(fs::File::create(run.file("roc.csv"))?, &out.roc)?;
    let (larger, smaller) = roc_pair(&run.config);
    let summary = StudySummary {
        seed: run.config.seed,
        placements: out.placements.len(),
        trials: run.config.trials,
        trend_violations: exponent_trend_violations(&out.exponents, 2.0),
        dominance_violations: roc_dominance_violations(&out.roc, larger, smaller),
        band_violations: out.band_violations,
        decision_disagreements: out.decision_disagreements,
    };
    run.write_json("study.json", &summary)?;
    Ok(format!(
        "study: {} exponent rows, {} roc points, {} trend violations, {} dominance violations, {} band violations",
        out.exponents.len(),
        out.roc.len(),
        summary.trend_violations.len(),
        summary.dominance_violations.len(),
        summary.band_violations
    ))
}

fn roc_pair(config: &ScenarioConfig) -> (usize, usize) {
    let larger = config.roc_sensors.iter().copied().max().unwrap_or(config.sensors);
    let smaller = config.roc_sensors.iter().copied().min().unwrap_or(config.sensors);
    (larger, smaller)
}

#[derive(Serialize)]
struct AlphaRow {
    gamma: f64,
    alpha_star: f64,
    closed_form: Option<f64>,
}

#[derive(Serialize)]
struct BetaRow {
    alpha: f64,
    gamma_star: f64,
    beta_lower: f64,
    beta_upper: f64,
}

fn exponents(run: &Run, args: &ExponentArgs) -> CliResult<String> {
    if args.points == 0 {
        return Err(CliError::Usage("need at least one point".into()));
    }
    let model = BinaryProduct::new(ExponentProblem::binary_pair(args.d0, args.d1)?, args.step)?;
    let n = args.points;
    let gammas: Vec<f64> = (1..=n).map(|i| args.d0 + (2.0 - args.d0) * i as f64 / n as f64).collect();
    let mut w = csv::Writer::from_path(run.file("alpha_star.csv"))?;
    for &gamma in &gammas {
        let closed_form = (args.d0 == 0.0).then(|| binary_alpha_star_closed_form(gamma));
        w.serialize(AlphaRow { gamma, alpha_star: model.alpha_star(gamma), closed_form })?;
    }
    w.flush()?;

    let alphas = interior_alphas(&model, n);
    let mut w = csv::Writer::from_path(run.file("beta.csv"))?;
    for &alpha in &alphas {
        w.serialize(BetaRow {
            alpha,
            gamma_star: model.gamma_star(alpha),
            beta_lower: model.beta_star_lower(alpha),
            beta_upper: model.beta_star_upper(alpha),
        })?;
    }
    w.flush()?;
    Ok(format!("exponents: d0={} d1={} step={} {} points per curve", args.d0, args.d1, args.step, n))
}

fn gap(run: &Run, args: &GapArgs) -> CliResult<String> {
    let model = BinaryProduct::new(ExponentProblem::binary_pair(args.d0, args.d1)?, args.step)?;
    let rows = verify_gap(&model, &interior_alphas(&model, args.alphas));
    let mut w = csv::Writer::from_path(run.file("gap.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let strict = rows.iter().filter(|r| r.verdict == GapVerdict::Strict).count();
    Ok(format!("gap: d1={} strict gap at {strict}/{} interior alphas", args.d1, rows.len()))
}

#[derive(Serialize)]
struct GamesOutput {
    reports: Vec<GameReport>,
    tda_instance: Option<TdaInstance>,
}

fn privacy_games(run: &Run, args: &GameArgs) -> CliResult<String> {
    let scheme = scheme(&args.scheme)?;
    let params = GameParams {
        sensors: args.sensors,
        colluders: args.colluders,
        alphabet: args.alphabet,
        frac_bits: args.frac_bits,
        length: args.length,
        tau: args.tau,
        trials: args.trials,
        seed: run.seed,
        distributions: Vec::new(),
    };
    let model = params.model()?;
    let mut reports = Vec::new();
    let mut tda_instance = None;
    if args.game != Game::Tda {
        let suite = tea_suite();
        let refs: Vec<&dyn TeaAttacker> = suite.iter().map(|a| a.as_ref()).collect();
        reports.extend(run_tea(&params, scheme.as_ref(), &model, &refs)?);
    }
    if args.game != Game::Tea {
        let instance = TdaInstance::most_confusable(&model)?;
        let suite = tda_suite();
        let refs: Vec<&dyn TdaAttacker> = suite.iter().map(|a| a.as_ref()).collect();
        reports.extend(run_tda(&params, scheme.as_ref(), &model, &instance, &refs)?);
        tda_instance = Some(instance);
    }
    let within = reports.iter().filter(|r| r.verdict == Verdict::WithinBand).count();
    let total = reports.len();
    run.write_json("games.json", &GamesOutput { reports, tda_instance })?;

    let mut line = format!(
        "privacy-games: scheme={} K={} L={} trials={} {within}/{total} attackers within band of baseline",
        scheme.name(),
        args.sensors,
        args.colluders,
        args.trials
    );
    if args.uniformity {
        let uparams = UniformityParams {
            seed: run.seed,
            ..UniformityParams::new(args.sensors, args.colluders, args.frac_bits, args.alphabet)
        };
        let report: UniformityReport = check_mask_uniformity(&uparams, UniformityMode::Auto)?;
        if let Some(notice) = &report.notice {
            eprintln!("note: {notice}");
        }
        line.push_str(&format!(", mask sums uniform: {}", report.uniform));
        run.write_json("uniformity.json", &report)?;
    }
    Ok(line)
}

fn cpa_check(run: &Run, args: &CpaArgs) -> CliResult<String> {
    let scheme = scheme(&args.scheme)?;
    let ring = RingParams::for_network(args.sensors, args.frac_bits)?;
    let security = default_security(scheme.as_ref());
    let reports = cpa_suite()
        .iter()
        .map(|a| run_cpa_experiment(scheme.as_ref(), security, ring, a.as_ref(), args.trials, run.seed))
        .collect::<Result<Vec<CpaReport>, _>>()?;
    run.write_json("cpa.json", &reports)?;
    let best = reports
        .iter()
        .max_by(|a, b| a.advantage.abs().total_cmp(&b.advantage.abs()))
        .expect("non-empty suite");
    Ok(format!(
        "cpa-check: scheme={} trials={} best advantage {:.4} ({}), {}/{} attackers within 3 sigma",
        scheme.name(),
        args.trials,
        best.advantage,
        best.attacker,
        reports.iter().filter(|r| r.within_3_sigma).count(),
        reports.len()
    ))
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::ProtocolDemo(_) => "protocol-demo",
        Command::Study => "study",
        Command::Exponents(_) => "exponents",
        Command::Gap(_) => "gap",
        Command::PrivacyGames(_) => "privacy-games",
        Command::CpaCheck(_) => "cpa-check",
    }
}

fn execute(cli: &Cli) -> CliResult<String> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(format!("worker pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    let dir = cli.out_dir.join(command_name(&cli.command));
    fs::create_dir_all(&dir)?;
    let run = Run { seed: config.seed, config, dir };
    match &cli.command {
        Command::ProtocolDemo(args) => protocol_demo(&run, args),
        Command::Study => study(&run),
        Command::Exponents(args) => exponents(&run, args),
        Command::Gap(args) => gap(&run, args),
        Command::PrivacyGames(args) => privacy_games(&run, args),
        Command::CpaCheck(args) => cpa_check(&run, args),
    }
}

fn report_dir(path: &Path) -> String {
    path.display().to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(line) => {
            println!("{line} -> {}", report_dir(&cli.out_dir.join(command_name(&cli.command))));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("zmsdetect: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    const TINY: &str = r#"
sensors = 3
lengths = [40, 60]
placements = 2
trials = 200
lambda_targets = [0.1]
roc_length = 60
roc_sensors = [2, 3]
roc_lambdas = [0.1, 0.5]
"#;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("zmsdetect").chain(args.iter().copied()))
    }

    fn run_in(dir: &Path, args: &[&str]) -> CliResult<String> {
        let out = dir.to_str().unwrap();
        let mut full = vec!["--out-dir", out];
        full.extend_from_slice(args);
        execute(&parse(&full).expect("valid arguments"))
    }

    fn tiny_config(dir: &Path) -> String {
        let path = dir.join("tiny.toml");
        fs::write(&path, TINY).unwrap();
        path.to_str().unwrap().to_string()
    }

    fn json(path: PathBuf) -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
    }

    #[test]
    fn bad_flags_are_usage_errors() {
        for args in [&["bogus"][..], &["gap", "--alphas", "x"], &["protocol-demo", "--theta", "2"], &[]] {
            let err = parse(args).unwrap_err();
            assert_eq!(err.exit_code(), EXIT_USAGE as i32, "{args:?}");
        }
    }

    #[test]
    fn unknown_scheme_and_zero_workers_exit_with_usage() {
        let dir = TempDir::new().unwrap();
        let err = run_in(dir.path(), &["cpa-check", "--scheme", "rot13", "--trials", "10"]).unwrap_err();
        assert_eq!(err.code(), EXIT_USAGE);
        let err = run_in(dir.path(), &["--workers", "0", "gap"]).unwrap_err();
        assert_eq!(err.code(), EXIT_USAGE);
    }

    #[test]
    fn oversized_game_is_a_capability_error() {
        let dir = TempDir::new().unwrap();
        let args = ["privacy-games", "--sensors", "8", "--alphabet", "16", "--length", "600", "--trials", "10"];
        let err = run_in(dir.path(), &args).unwrap_err();
        assert_eq!(err.code(), EXIT_CAPABILITY, "{err}");
    }

    #[test]
    fn invalid_config_is_a_usage_error() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "sensorz = 3\n").unwrap();
        let err = run_in(dir.path(), &["--config", path.to_str().unwrap(), "study"]).unwrap_err();
        assert_eq!(err.code(), EXIT_USAGE);
    }

    #[test]
    fn study_is_reproducible_for_a_seed() {
        let dir = TempDir::new().unwrap();
        let config = tiny_config(dir.path());
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let c = dir.path().join("c");
        run_in(&a, &["--config", &config, "study"]).unwrap();
        run_in(&b, &["--config", &config, "study"]).unwrap();
        run_in(&c, &["--config", &config, "--seed", "99", "study"]).unwrap();
        let read = |d: &Path, f: &str| fs::read(d.join("study").join(f)).unwrap();
        for file in ["exponents.csv", "roc.csv", "study.json"] {
            assert_eq!(read(&a, file), read(&b, file), "{file}");
        }
        assert_ne!(read(&a, "exponents.csv"), read(&c, "exponents.csv"));
        assert_eq!(json(c.join("study").join("study.json"))["seed"], 99);
    }

    #[test]
    fn protocol_demo_matches_plaintext() {
        let dir = TempDir::new().unwrap();
        let config = tiny_config(dir.path());
        let line = run_in(dir.path(), &["--config", &config, "protocol-demo", "--scheme", "identity"]).unwrap();
        assert!(line.starts_with("protocol-demo: scheme=identity K=3 t=60"), "{line}");
        let out = dir.path().join("protocol-demo");
        let summary = json(out.join("summary.json"));
        assert_eq!(summary["statistic"], summary["plaintext_statistic"]);
        assert_eq!(summary["decision"], summary["plaintext_decision"]);
        let transcript = fs::read_to_string(out.join("transcript.jsonl")).unwrap();
        assert_eq!(transcript.lines().count() as u64, summary["messages"].as_u64().unwrap());
    }

    #[test]
    fn protocol_demo_rejects_missing_placement() {
        let dir = TempDir::new().unwrap();
        let config = tiny_config(dir.path());
        let err = run_in(dir.path(), &["--config", &config, "protocol-demo", "--placement", "5"]).unwrap_err();
        assert_eq!(err.code(), EXIT_USAGE);
    }

    #[test]
    fn exponents_follow_the_closed_form() {
        let dir = TempDir::new().unwrap();
        run_in(dir.path(), &["exponents", "--points", "5", "--step", "2e-3"]).unwrap();
        let mut rows = csv::Reader::from_path(dir.path().join("exponents").join("alpha_star.csv")).unwrap();
        let mut n = 0;
        for row in rows.records() {
            let row = row.unwrap();
            let grid: f64 = row[1].parse().unwrap();
            let closed: f64 = row[2].parse().unwrap();
            assert!((grid - closed).abs() < 1e-3, "{row:?}");
            n += 1;
        }
        assert_eq!(n, 5);
        let beta = fs::read_to_string(dir.path().join("exponents").join("beta.csv")).unwrap();
        assert_eq!(beta.lines().count(), 6);
    }

    #[test]
    fn gap_is_strict_at_interior_alphas() {
        let dir = TempDir::new().unwrap();
        let line = run_in(dir.path(), &["gap", "--step", "2e-3"]).unwrap();
        assert!(line.contains("strict gap at 5/5"), "{line}");
        let csv = fs::read_to_string(dir.path().join("gap").join("gap.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn cpa_check_breaks_identity() {
        let dir = TempDir::new().unwrap();
        let line = run_in(dir.path(), &["cpa-check", "--scheme", "identity", "--trials", "200"]).unwrap();
        assert!(line.contains("best advantage 0.5000"), "{line}");
        let reports = json(dir.path().join("cpa-check").join("cpa.json"));
        assert_eq!(reports.as_array().unwrap().len(), 4);
    }

    #[test]
    fn privacy_games_write_reports_per_command() {
        let dir = TempDir::new().unwrap();
        let args = ["privacy-games", "--scheme", "identity", "--trials", "300", "--uniformity"];
        let line = run_in(dir.path(), &args).unwrap();
        assert!(line.contains("mask sums uniform: true"), "{line}");
        let out = dir.path().join("privacy-games");
        let games = json(out.join("games.json"));
        assert_eq!(games["reports"].as_array().unwrap().len(), 6);
        assert!(games["tda_instance"].is_object());
        assert!(json(out.join("uniformity.json"))["uniform"].as_bool().unwrap());
        let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(entries, vec![std::ffi::OsString::from("privacy-games")]);
    }
}
