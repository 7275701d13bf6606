//! Command-line front end: config parsing, subcommand dispatch, CSV output.
//!
//! Every CSV starts with a block of `#` comment lines (tool version, config
//! hash, seed, then the effective config with all defaults filled in),
//! followed by a header row and the data rows. Column sets per file:
//!
//! | file | columns |
//! |---|---|
//! | `sweep_power.csv`, `sweep_samples.csv`, `sweep_samples_coarse.csv`, `end_to_end.csv` | `length_km,power_dbm,polls,trials,successes,estimate,stderr,seed` |
//! | `validate_noise.csv` | `kind,ratio,n_windows,trials,successes,estimate,stderr,analytic,seed` |
//! | `residual_histogram.csv` | `bin_start_ps,count` |
//! | `sync_run.csv` | `t_alice_ps,t_bob_ps,delta_ps,residual_ps,interference_ok,recalibrations,messages_exchanged,seed` |
//!
//! `sync-run` also writes `transcript.txt`, one message per line as
//! `index kind payload`: durations in integer picoseconds, `ok`/`fail` for
//! InterferenceResult, and the attempt number for Recalibrate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 experiment failure. On
//! failure a single `error kind=<kind> message=<text>` line goes to stderr.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{ChannelParams, Dbm, DriftModel};
use crate::detector::DetectorParams;
use crate::experiments::{
    end_to_end, sweep_power, sweep_sample_size, validate_false_alarm, EndToEndPlan,
    ExperimentError, ExperimentKind, ExperimentSpec, FalseAlarmPlan, Polls, Scenario, POLL_CAP,
};
use crate::protocol::{
    run_sync, CharlieConfig, InterferenceGate, ProtocolError, StationConfig, StationName,
    SyncParams,
};
use crate::timing::{choose_period_for_window, Picos, TimingGrid};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TimingSection {
    /// Explicit period; when absent it is chosen from `max_length_km`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period_ps: Option<Picos>,
    pub max_length_km: f64,
    pub guard_ps: Picos,
    pub pulse_width_ps: Picos,
    pub window_width_ps: Picos,
}

impl Default for TimingSection {
    fn default() -> Self {
        TimingSection {
            period_ps: None,
            max_length_km: 100.0,
            guard_ps: Picos::from_us(1),
            pulse_width_ps: Picos::from_ns(1),
            window_width_ps: Picos::from_ns(2),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub attenuation_db_per_km: f64,
    pub connector_count: u32,
    pub connector_loss_db: f64,
    pub tap_ratio: f64,
    pub group_index: f64,
    pub mirror_reflectivity: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        let c = ChannelParams::default();
        ChannelSection {
            attenuation_db_per_km: c.attenuation_db_per_km,
            connector_count: c.connector_count,
            connector_loss_db: c.connector_loss_db,
            tap_ratio: c.tap_ratio,
            group_index: c.group_index,
            mirror_reflectivity: c.mirror_reflectivity,
        }
    }
}

impl ChannelSection {
    fn params(&self, length_km: f64) -> ChannelParams {
        ChannelParams {
            length_km,
            attenuation_db_per_km: self.attenuation_db_per_km,
            connector_count: self.connector_count,
            connector_loss_db: self.connector_loss_db,
            tap_ratio: self.tap_ratio,
            group_index: self.group_index,
            mirror_reflectivity: self.mirror_reflectivity,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub noise_sigma: f64,
    pub threshold: f64,
    pub quantum_efficiency: f64,
    pub dead_time_ps: Picos,
    pub gain: f64,
    pub noiseless: bool,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorParams::default();
        DetectorSection {
            noise_sigma: d.noise_sigma,
            threshold: d.threshold,
            quantum_efficiency: d.quantum_efficiency,
            dead_time_ps: d.dead_time,
            gain: d.gain,
            noiseless: d.noiseless,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DriftSection {
    pub linear_rate_ps_per_s: f64,
    pub jitter_sigma_ps: f64,
}

impl Default for DriftSection {
    fn default() -> Self {
        DriftSection {
            linear_rate_ps_per_s: 0.0,
            jitter_sigma_ps: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub max_periods: u64,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection { max_periods: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct StationSection {
    pub length_km: f64,
    pub launch_dbm: f64,
    pub activation_offset_ps: Picos,
}

impl Default for StationSection {
    fn default() -> Self {
        StationSection {
            length_km: 50.0,
            launch_dbm: -15.0,
            activation_offset_ps: Picos::ZERO,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Compensator {
    Alice,
    Bob,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CharlieSection {
    pub internal_delay_ps: Picos,
    pub gate_width_ps: Picos,
    pub gating_span_ps: Picos,
    pub fine_adjust_span_ps: Picos,
    pub fine_adjust_step_ps: Picos,
    pub interference_tolerance_ps: Picos,
    pub verify_polls: u32,
    pub verify_rounds: u32,
    pub compensating: Compensator,
    pub classical_latency_ps: Picos,
    pub interference: InterferenceGate,
}

impl Default for CharlieSection {
    fn default() -> Self {
        let c = CharlieConfig::default();
        CharlieSection {
            internal_delay_ps: c.internal_delay,
            gate_width_ps: c.gate_width,
            gating_span_ps: c.gating_span,
            fine_adjust_span_ps: c.fine_adjust_span,
            fine_adjust_step_ps: c.fine_adjust_step,
            interference_tolerance_ps: c.interference_tolerance,
            verify_polls: c.verify_polls,
            verify_rounds: c.verify_rounds,
            compensating: Compensator::Bob,
            classical_latency_ps: c.classical_latency,
            interference: c.interference_gate,
        }
    }
}

impl CharlieSection {
    pub fn config(&self) -> CharlieConfig {
        CharlieConfig {
            internal_delay: self.internal_delay_ps,
            gate_width: self.gate_width_ps,
            gating_span: self.gating_span_ps,
            fine_adjust_span: self.fine_adjust_span_ps,
            fine_adjust_step: self.fine_adjust_step_ps,
            interference_tolerance: self.interference_tolerance_ps,
            interference_gate: self.interference,
            verify_polls: self.verify_polls,
            verify_rounds: self.verify_rounds,
            compensating: match self.compensating {
                Compensator::Alice => StationName::Alice,
                Compensator::Bob => StationName::Bob,
            },
            classical_latency: self.classical_latency_ps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SyncSection {
    pub polls: u32,
    pub max_recalibrations: u32,
    pub stage_gap_ps: Picos,
}

impl Default for SyncSection {
    fn default() -> Self {
        SyncSection {
            polls: 100,
            max_recalibrations: 3,
            stage_gap_ps: Picos::ZERO,
        }
    }
}

fn default_lengths() -> Vec<f64> {
    vec![10.0, 25.0, 50.0, 75.0, 100.0]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepPowerSection {
    pub lengths_km: Vec<f64>,
    pub powers_dbm: Vec<f64>,
    pub trials: u32,
    pub polls: u32,
}

impl Default for SweepPowerSection {
    fn default() -> Self {
        SweepPowerSection {
            lengths_km: default_lengths(),
            powers_dbm: vec![-25.0, -22.5, -20.0, -17.7, -15.0, -12.5, -10.0],
            trials: 10_000,
            polls: 10_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSamplesSection {
    pub lengths_km: Vec<f64>,
    pub power_dbm: f64,
    pub trials: u32,
    pub target_probability: f64,
    pub poll_cap: u32,
}

impl Default for SweepSamplesSection {
    fn default() -> Self {
        SweepSamplesSection {
            lengths_km: default_lengths(),
            power_dbm: -15.0,
            trials: 1000,
            target_probability: 0.99,
            poll_cap: POLL_CAP,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateNoiseSection {
    pub ratios: Vec<f64>,
    pub window_samples: u64,
    pub periods: u64,
    pub period_windows: u64,
}

impl Default for ValidateNoiseSection {
    fn default() -> Self {
        let plan = FalseAlarmPlan::default();
        ValidateNoiseSection {
            ratios: vec![0.0, 1.0, 2.0, 3.0],
            window_samples: plan.window_samples,
            periods: plan.periods,
            period_windows: plan.period_windows,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EndToEndSection {
    pub min_length_km: f64,
    pub max_length_km: f64,
    pub powers_dbm: Vec<f64>,
    pub trials: u32,
    pub polls: u32,
}

impl Default for EndToEndSection {
    fn default() -> Self {
        EndToEndSection {
            min_length_km: 0.0,
            max_length_km: 100.0,
            powers_dbm: vec![-15.0],
            trials: 1000,
            polls: 100,
        }
    }
}

/// The whole configuration file. Only `seed` is mandatory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub timing: TimingSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub drift: DriftSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub alice: StationSection,
    #[serde(default)]
    pub bob: StationSection,
    #[serde(default)]
    pub charlie: CharlieSection,
    #[serde(default)]
    pub sync: SyncSection,
    #[serde(default)]
    pub sweep_power: SweepPowerSection,
    #[serde(default)]
    pub sweep_samples: SweepSamplesSection,
    #[serde(default)]
    pub validate_noise: ValidateNoiseSection,
    #[serde(default)]
    pub end_to_end: EndToEndSection,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Validation(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.resolve()?;
        Ok(config)
    }

    /// Fills in the period and checks every section.
    fn resolve(&mut self) -> Result<(), ConfigError> {
        let t = &self.timing;
        if self.timing.period_ps.is_none() {
            let period = choose_period_for_window(
                t.max_length_km,
                self.channel.group_index,
                t.guard_ps,
                t.window_width_ps,
            )
            .map_err(invalid)?;
            self.timing.period_ps = Some(period);
        }
        let grid = self.grid()?;
        self.channel.params(0.0).validate().map_err(invalid)?;
        self.detector_params().validate().map_err(invalid)?;
        self.drift_model().validate().map_err(invalid)?;
        self.charlie.config().validate().map_err(invalid)?;
        if self.search.max_periods == 0 {
            return Err(invalid("search.max_periods must be at least 1"));
        }
        if grid.period() - grid.window_width() < self.detector.dead_time_ps {
            return Err(invalid("detector.dead_time_ps exceeds the pulse spacing"));
        }
        for (name, s) in [("alice", &self.alice), ("bob", &self.bob)] {
            let st = self.station(name, s, grid.period());
            st.validate().map_err(|e| invalid(format!("{name}: {e}")))?;
        }
        if self.sync.polls == 0 || self.sync.max_recalibrations == 0 {
            return Err(invalid(
                "sync.polls and sync.max_recalibrations must be at least 1",
            ));
        }
        if self.sweep_samples.poll_cap == 0 {
            return Err(invalid("sweep_samples.poll_cap must be at least 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimingGrid, ConfigError> {
        let period = self
            .timing
            .period_ps
            .ok_or_else(|| invalid("timing.period_ps unresolved"))?;
        TimingGrid::new(
            period,
            self.timing.pulse_width_ps,
            self.timing.window_width_ps,
        )
        .map_err(invalid)
    }

    pub fn detector_params(&self) -> DetectorParams {
        let d = &self.detector;
        DetectorParams {
            noise_sigma: d.noise_sigma,
            threshold: d.threshold,
            quantum_efficiency: d.quantum_efficiency,
            dead_time: d.dead_time_ps,
            gain: d.gain,
            noiseless: d.noiseless,
        }
    }

    pub fn drift_model(&self) -> DriftModel {
        DriftModel {
            linear_rate_ps_per_s: self.drift.linear_rate_ps_per_s,
            jitter_sigma_ps: self.drift.jitter_sigma_ps,
        }
    }

    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        Ok(Scenario {
            grid: self.grid()?,
            channel: self.channel.params(0.0),
            detector: self.detector_params(),
            drift: self.drift_model(),
            max_periods: self.search.max_periods,
        })
    }

    fn station(&self, name: &str, s: &StationSection, period: Picos) -> StationConfig {
        let name = if name == "alice" {
            StationName::Alice
        } else {
            StationName::Bob
        };
        StationConfig {
            laser_activation_offset: s.activation_offset_ps,
            ..StationConfig::new(
                name,
                self.channel.params(s.length_km),
                Dbm(s.launch_dbm),
                period,
            )
        }
    }

    pub fn stations(&self) -> Result<(StationConfig, StationConfig), ConfigError> {
        let period = self.grid()?.period();
        Ok((
            self.station("alice", &self.alice, period),
            self.station("bob", &self.bob, period),
        ))
    }

    pub fn sync_params(&self) -> SyncParams {
        SyncParams {
            polls: self.sync.polls,
            max_periods: self.search.max_periods,
            max_recalibrations: self.sync.max_recalibrations,
            stage_gap: self.sync.stage_gap_ps,
        }
    }

    /// The effective configuration, defaults included, as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_toml(&text)
}

#[derive(Debug, Parser)]
#[command(
    name = "picosync",
    version,
    about = "Picosecond fiber synchronization simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Configuration file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "./out")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the trial count of the chosen experiment.
    #[arg(long)]
    pub trials: Option<u32>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full-search success against launch power for each fiber length.
    SweepPower(CommonArgs),
    /// Minimal polls per subinterval reaching the target success rate.
    SweepSamples(CommonArgs),
    /// Empirical false-alarm rates against the analytic expressions.
    ValidateNoise(CommonArgs),
    /// One synchronization run with its message transcript.
    SyncRun(CommonArgs),
    /// Synchronization accuracy over random asymmetric links.
    EndToEnd(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::SweepPower(a)
            | Command::SweepSamples(a)
            | Command::ValidateNoise(a)
            | Command::SyncRun(a)
            | Command::EndToEnd(a) => a,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(ExperimentError),
    #[error("{0}")]
    SyncFailed(String),
    #[error("output error: {0}")]
    Io(#[from] io::Error),
    #[error("output error: {0}")]
    Csv(#[from] csv::Error),
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(msg) => CliError::Config(ConfigError::Validation(msg)),
            ExperimentError::Search(e) if !e.is_search_failure() => {
                CliError::Config(ConfigError::Validation(e.to_string()))
            }
            ExperimentError::Protocol(e) if is_protocol_config_error(&e) => {
                CliError::Config(ConfigError::Validation(e.to_string()))
            }
            e => CliError::Experiment(e),
        }
    }
}

fn is_protocol_config_error(e: &ProtocolError) -> bool {
    match e {
        ProtocolError::PeriodMismatch { .. }
        | ProtocolError::InvalidParameter { .. }
        | ProtocolError::Channel(_) => true,
        ProtocolError::Search(s) => !s.is_search_failure(),
        _ => false,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(ConfigError::Io { .. }) => "config-io",
            CliError::Config(ConfigError::Parse(_)) => "parse-error",
            CliError::Config(ConfigError::Validation(_)) => "validation-error",
            CliError::Experiment(ExperimentError::UnreachableTarget { .. }) => "unreachable-target",
            CliError::Experiment(_) => "experiment-failure",
            CliError::SyncFailed(_) => "sync-failed",
            CliError::Io(_) | CliError::Csv(_) => "output-error",
        }
    }
}

/// Output file with the comment header block already written.
struct Output {
    writer: BufWriter<File>,
}

impl Output {
    fn create(dir: &Path, name: &str, config: &RunConfig) -> Result<Self, CliError> {
        let mut writer = BufWriter::new(File::create(dir.join(name))?);
        writeln!(writer, "# picosync {VERSION}")?;
        writeln!(writer, "# config_hash: {}", config.hash())?;
        writeln!(writer, "# seed: {}", config.seed)?;
        for line in config.to_toml().lines() {
            if line.is_empty() {
                writeln!(writer, "#")?;
            } else {
                writeln!(writer, "# {line}")?;
            }
        }
        Ok(Output { writer })
    }

    fn rows<T: Serialize>(self, rows: &[T]) -> Result<(), CliError> {
        let mut csv = csv::Writer::from_writer(self.writer);
        for r in rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct SyncRow {
    t_alice_ps: i64,
    t_bob_ps: i64,
    delta_ps: i64,
    residual_ps: i64,
    interference_ok: bool,
    recalibrations: u32,
    messages_exchanged: u32,
    seed: u64,
}

#[derive(Serialize)]
struct HistogramRow {
    bin_start_ps: i64,
    count: u64,
}

fn apply_overrides(config: &mut RunConfig, command: &Command) {
    let args = command.common();
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(trials) = args.trials {
        match command {
            Command::SweepPower(_) => config.sweep_power.trials = trials,
            Command::SweepSamples(_) => config.sweep_samples.trials = trials,
            Command::ValidateNoise(_) => {
                config.validate_noise.window_samples = trials as u64;
                config.validate_noise.periods = trials as u64;
            }
            Command::EndToEnd(_) => config.end_to_end.trials = trials,
            Command::SyncRun(_) => {}
        }
    }
}

fn spec(
    config: &RunConfig,
    kind: ExperimentKind,
    lengths: &[f64],
    powers: &[f64],
    trials: u32,
    polls: Polls,
) -> ExperimentSpec {
    ExperimentSpec {
        kind,
        lengths: lengths.to_vec(),
        powers: powers.to_vec(),
        trials,
        polls,
        seed: config.seed,
        target_probability: config.sweep_samples.target_probability,
    }
}

fn execute(command: &Command, config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scenario = config.scenario()?;
    match command {
        Command::SweepPower(_) => {
            let s = &config.sweep_power;
            let spec = spec(
                config,
                ExperimentKind::PowerSweep,
                &s.lengths_km,
                &s.powers_dbm,
                s.trials,
                Polls::Fixed(s.polls),
            );
            let rows = sweep_power(&spec, &scenario)?;
            Output::create(out, "sweep_power.csv", config)?.rows(&rows)
        }
        Command::SweepSamples(_) => {
            let s = &config.sweep_samples;
            let spec = spec(
                config,
                ExperimentKind::SampleSizeSweep,
                &s.lengths_km,
                &[s.power_dbm],
                s.trials,
                Polls::Fixed(s.poll_cap),
            );
            let report = sweep_sample_size(&spec, &scenario)?;
            Output::create(out, "sweep_samples.csv", config)?.rows(&report.refinement)?;
            Output::create(out, "sweep_samples_coarse.csv", config)?.rows(&report.coarse)
        }
        Command::ValidateNoise(_) => {
            let s = &config.validate_noise;
            let spec = spec(
                config,
                ExperimentKind::FalseAlarmValidation,
                &[],
                &[],
                1,
                Polls::Fixed(1),
            );
            let plan = FalseAlarmPlan {
                window_samples: s.window_samples,
                periods: s.periods,
                period_windows: s.period_windows,
            };
            let rows = validate_false_alarm(&spec, &s.ratios, &plan)?;
            Output::create(out, "validate_noise.csv", config)?.rows(&rows)
        }
        Command::EndToEnd(_) => {
            let s = &config.end_to_end;
            let spec = spec(
                config,
                ExperimentKind::EndToEnd,
                &[s.max_length_km],
                &s.powers_dbm,
                s.trials,
                Polls::Fixed(s.polls),
            );
            let plan = EndToEndPlan {
                charlie: config.charlie.config(),
                sync: config.sync_params(),
                min_length_km: s.min_length_km,
                max_length_km: s.max_length_km,
            };
            let report = end_to_end(&spec, &scenario, &plan)?;
            Output::create(out, "end_to_end.csv", config)?.rows(&report.rows)?;
            let bins: Vec<HistogramRow> = report
                .histogram
                .iter()
                .map(|&(bin_start_ps, count)| HistogramRow {
                    bin_start_ps,
                    count,
                })
                .collect();
            Output::create(out, "residual_histogram.csv", config)?.rows(&bins)
        }
        Command::SyncRun(_) => {
            let (alice, bob) = config.stations()?;
            let mut rng = crate::experiments::trial_rng(config.seed, 0, 0);
            let result = run_sync(
                &alice,
                &bob,
                &config.charlie.config(),
                &scenario.grid,
                &scenario.detector,
                &scenario.drift,
                &config.sync_params(),
                &mut rng,
            );
            let (run, failed) = match result {
                Ok(run) => (run, false),
                Err(ProtocolError::SyncFailed(run)) => (*run, true),
                Err(e) if is_protocol_config_error(&e) => {
                    return Err(ConfigError::Validation(e.to_string()).into())
                }
                Err(e) => return Err(CliError::Experiment(e.into())),
            };
            fs::write(out.join("transcript.txt"), run.transcript.to_string())?;
            let o = run.outcome;
            Output::create(out, "sync_run.csv", config)?.rows(&[SyncRow {
                t_alice_ps: o.t_alice.0,
                t_bob_ps: o.t_bob.0,
                delta_ps: o.delta.0,
                residual_ps: o.residual_offset.0,
                interference_ok: o.interference_ok,
                recalibrations: o.recalibrations,
                messages_exchanged: o.messages_exchanged,
                seed: config.seed,
            }])?;
            if failed {
                return Err(CliError::SyncFailed(format!(
                    "synchronization failed after {} recalibrations",
                    o.recalibrations
                )));
            }
            Ok(())
        }
    }
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    let args = command.common();
    let mut config = parse_config(&args.config)?;
    apply_overrides(&mut config, command);
    config.resolve()?;
    fs::create_dir_all(&args.out).map_err(|source| ConfigError::Io {
        path: args.out.clone(),
        source,
    })?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| invalid(format!("threads: {e}")))?;
    pool.install(|| execute(command, &config, &args.out))
}

/// Parses arguments, runs the subcommand, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={:?}", e.kind(), message);
            e.exit_code()
        }
    }
}
