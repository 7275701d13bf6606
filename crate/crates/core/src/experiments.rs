//! Monte Carlo harness: power sweeps, minimal sample size per fiber length,
//! false-alarm validation, and end-to-end synchronization accuracy.
//!
//! Every trial draws from its own ChaCha8 stream: the experiment seed keys
//! the generator and `(cell << 32) | trial` selects the stream, where `cell`
//! indexes the parameter point. Outcomes therefore do not depend on how
//! trials are scheduled across threads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelParams, Dbm, DriftModel};
use crate::detector::{
    false_alarm_per_period, q_function, sample_window, DetectorError, DetectorParams,
};
use crate::protocol::{
    run_sync, CharlieConfig, ProtocolError, StationConfig, StationName, SyncParams,
};
use crate::search::{
    coarse_search_past_false_alarms, echo_amplitude, full_search_traced, ground_truth_round_trip,
    is_accurate, SearchError, SearchParams,
};
use crate::timing::{Picos, TimingGrid};

/// Largest poll count the sample-size sweep will try.
pub const POLL_CAP: u32 = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error("unreachable target {target} at {length_km} km even with {cap} polls")]
    UnreachableTarget {
        length_km: f64,
        target: f64,
        cap: u32,
    },
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PowerSweep,
    SampleSizeSweep,
    FalseAlarmValidation,
    EndToEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polls {
    Fixed(u32),
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub lengths: Vec<f64>,
    pub powers: Vec<f64>,
    pub trials: u32,
    pub polls: Polls,
    pub seed: u64,
    pub target_probability: f64,
}

impl ExperimentSpec {
    pub fn validate(&self, kind: ExperimentKind) -> Result<(), ExperimentError> {
        let bad = |msg: &str| Err(ExperimentError::Config(msg.to_string()));
        if self.kind != kind {
            return bad("experiment kind does not match the operation");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if kind != ExperimentKind::FalseAlarmValidation
            && (self.lengths.is_empty() || self.powers.is_empty())
        {
            return bad("lengths and powers must be nonempty");
        }
        if self.lengths.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return bad("lengths must be finite and nonnegative");
        }
        if self.powers.iter().any(|p| !p.is_finite()) {
            return bad("powers must be finite");
        }
        if self.polls == Polls::Fixed(0) {
            return bad("polls must be at least 1");
        }
        if !(self.target_probability > 0.0 && self.target_probability <= 1.0) {
            return bad("target_probability must lie in (0, 1]");
        }
        Ok(())
    }

    fn fixed_polls(&self) -> Result<u32, ExperimentError> {
        match self.polls {
            Polls::Fixed(p) => Ok(p),
            Polls::Auto => Err(ExperimentError::Config(
                "this experiment needs a fixed poll count".into(),
            )),
        }
    }
}

/// Fixed physics shared by every trial: timing grid, link template, detector,
/// drift, and the coarse-scan budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub grid: TimingGrid,
    /// Link parameters; each cell overrides the length.
    pub channel: ChannelParams,
    pub detector: DetectorParams,
    pub drift: DriftModel,
    pub max_periods: u64,
}

impl Scenario {
    fn channel(&self, length_km: f64) -> ChannelParams {
        ChannelParams {
            length_km,
            ..self.channel
        }
    }

    fn search(&self, polls: u32) -> SearchParams {
        SearchParams {
            polls,
            max_periods: self.max_periods,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResultRow {
    pub length_km: f64,
    pub power_dbm: f64,
    pub polls: u32,
    pub trials: u32,
    pub successes: u32,
    pub estimate: f64,
    pub stderr: f64,
    pub seed: u64,
}

impl ResultRow {
    pub fn new(
        length_km: f64,
        power_dbm: f64,
        polls: u32,
        trials: u32,
        successes: u32,
        seed: u64,
    ) -> Self {
        let (estimate, stderr) = binomial_estimate(successes as u64, trials as u64);
        ResultRow {
            length_km,
            power_dbm,
            polls,
            trials,
            successes,
            estimate,
            stderr,
            seed,
        }
    }
}

/// Success fraction and its binomial standard error.
pub fn binomial_estimate(successes: u64, trials: u64) -> (f64, f64) {
    let p = successes as f64 / trials as f64;
    (p, (p * (1.0 - p) / trials as f64).sqrt())
}

/// Random stream of one trial.
pub fn trial_rng(seed: u64, cell: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((cell << 32) | (trial & 0xffff_ffff));
    rng
}

fn count_parallel<F>(trials: u32, f: F) -> Result<u32, ExperimentError>
where
    F: Fn(u64) -> Result<bool, ExperimentError> + Sync,
{
    let hits = (0..trials as u64)
        .into_par_iter()
        .map(&f)
        .collect::<Result<Vec<bool>, _>>()?;
    Ok(hits.into_iter().filter(|&h| h).count() as u32)
}

/// One full-search trial: success iff the search completes and lands within a
/// subinterval of the ground truth.
pub fn search_trial<R: Rng + ?Sized>(
    scenario: &Scenario,
    length_km: f64,
    launch: Dbm,
    polls: u32,
    rng: &mut R,
) -> Result<bool, ExperimentError> {
    let (truth, outcome) = full_search_traced(
        &scenario.channel(length_km),
        launch,
        &scenario.grid,
        &scenario.detector,
        &scenario.search(polls),
        &scenario.drift,
        Picos::ZERO,
        rng,
    )?;
    Ok(matches!(outcome, Ok(r) if is_accurate(r.round_trip_estimate, truth, &scenario.grid)))
}

fn success_count(
    scenario: &Scenario,
    length_km: f64,
    power_dbm: f64,
    polls: u32,
    trials: u32,
    seed: u64,
    cell: u64,
) -> Result<u32, ExperimentError> {
    count_parallel(trials, |t| {
        let mut rng = trial_rng(seed, cell, t);
        search_trial(scenario, length_km, Dbm(power_dbm), polls, &mut rng)
    })
}

fn sorted_cells(lengths: &[f64], powers: &[f64]) -> Vec<(f64, f64)> {
    let mut cells: Vec<(f64, f64)> = lengths
        .iter()
        .flat_map(|&l| powers.iter().map(move |&p| (l, p)))
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    cells.dedup();
    cells
}

/// Full-search success fraction for every (length, power) cell.
pub fn sweep_power(
    spec: &ExperimentSpec,
    scenario: &Scenario,
) -> Result<Vec<ResultRow>, ExperimentError> {
    spec.validate(ExperimentKind::PowerSweep)?;
    let polls = spec.fixed_polls()?;
    sorted_cells(&spec.lengths, &spec.powers)
        .into_iter()
        .enumerate()
        .map(|(cell, (length, power))| {
            let hits = success_count(
                scenario,
                length,
                power,
                polls,
                spec.trials,
                spec.seed,
                cell as u64,
            )?;
            Ok(ResultRow::new(
                length,
                power,
                polls,
                spec.trials,
                hits,
                spec.seed,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSizeReport {
    /// Minimal polls per length, with the success count reached there.
    pub refinement: Vec<ResultRow>,
    /// Single-analysis coarse-stage success per length.
    pub coarse: Vec<ResultRow>,
}

/// Coarse-stage success: stepping past false-alarm captures, the scan locks
/// a window holding signal energy during its first pass over the period,
/// so a single analysis of that window sufficed.
fn coarse_trial<R: Rng + ?Sized>(
    scenario: &Scenario,
    length_km: f64,
    launch: Dbm,
    rng: &mut R,
) -> Result<bool, ExperimentError> {
    let channel = scenario.channel(length_km);
    let truth =
        ground_truth_round_trip(&channel, &scenario.grid, &scenario.drift, Picos::ZERO, rng)?;
    let amplitude = echo_amplitude(&channel, launch, &scenario.detector)?;
    let grid = &scenario.grid;
    match coarse_search_past_false_alarms(
        truth,
        grid,
        &scenario.detector,
        amplitude,
        rng,
        scenario.max_periods,
    ) {
        Ok((lock, _)) => Ok(lock.pulses_used <= grid.num_windows()),
        Err(e) if e.is_search_failure() => Ok(false),
        Err(e) => Err(e.into()),
    }
}

/// Smallest `polls` in `1..=cap` with `succeeds(polls)`, by doubling then
/// bisection. Assumes success is monotone in polls.
pub fn minimal_polls<F>(cap: u32, mut succeeds: F) -> Result<Option<u32>, ExperimentError>
where
    F: FnMut(u32) -> Result<bool, ExperimentError>,
{
    let mut lo = 0u32;
    let mut hi = 1u32;
    loop {
        if succeeds(hi)? {
            break;
        }
        if hi >= cap {
            return Ok(None);
        }
        lo = hi;
        hi = (hi * 2).min(cap);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if succeeds(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

/// Minimal polls per fiber length reaching the target success fraction at a
/// fixed launch power. Every poll count reuses the same trial streams.
pub fn sweep_sample_size(
    spec: &ExperimentSpec,
    scenario: &Scenario,
) -> Result<SampleSizeReport, ExperimentError> {
    spec.validate(ExperimentKind::SampleSizeSweep)?;
    if spec.powers.len() != 1 {
        return Err(ExperimentError::Config(
            "sample-size sweep takes exactly one power".into(),
        ));
    }
    let power = spec.powers[0];
    let cap = match spec.polls {
        Polls::Fixed(p) => p,
        Polls::Auto => POLL_CAP,
    };
    let mut lengths = spec.lengths.clone();
    lengths.sort_by(f64::total_cmp);
    lengths.dedup();
    let mut report = SampleSizeReport {
        refinement: Vec::new(),
        coarse: Vec::new(),
    };
    for (cell, &length) in lengths.iter().enumerate() {
        let cell = cell as u64;
        let mut counts = BTreeMap::new();
        let needed = (spec.target_probability * spec.trials as f64).ceil() as u32;
        let found = minimal_polls(cap, |polls| {
            let hits = success_count(scenario, length, power, polls, spec.trials, spec.seed, cell)?;
            counts.insert(polls, hits);
            Ok(hits >= needed)
        })?;
        let Some(polls) = found else {
            return Err(ExperimentError::UnreachableTarget {
                length_km: length,
                target: spec.target_probability,
                cap,
            });
        };
        report.refinement.push(ResultRow::new(
            length,
            power,
            polls,
            spec.trials,
            counts[&polls],
            spec.seed,
        ));
        let coarse_hits = count_parallel(spec.trials, |t| {
            let mut rng = trial_rng(spec.seed, cell | 1 << 31, t);
            coarse_trial(scenario, length, Dbm(power), &mut rng)
        })?;
        report.coarse.push(ResultRow::new(
            length,
            power,
            1,
            spec.trials,
            coarse_hits,
            spec.seed,
        ));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmScope {
    /// Single signal-absent windows.
    Window,
    /// Periods of `n_windows` signal-absent windows; success is at least one alarm.
    Period,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FalseAlarmRow {
    pub kind: AlarmScope,
    pub ratio: f64,
    pub n_windows: u64,
    pub trials: u64,
    pub successes: u64,
    pub estimate: f64,
    pub stderr: f64,
    pub analytic: f64,
    pub seed: u64,
}

impl FalseAlarmRow {
    /// Distance from the analytic value in standard errors. Exact agreement
    /// with a degenerate estimate counts as zero.
    pub fn z_score(&self) -> f64 {
        let diff = (self.estimate - self.analytic).abs();
        let se = (self.analytic * (1.0 - self.analytic) / self.trials as f64).sqrt();
        if diff == 0.0 {
            0.0
        } else {
            diff / se
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FalseAlarmPlan {
    pub window_samples: u64,
    pub periods: u64,
    pub period_windows: u64,
}

impl Default for FalseAlarmPlan {
    fn default() -> Self {
        FalseAlarmPlan {
            window_samples: 1_000_000,
            periods: 10_000,
            period_windows: 1000,
        }
    }
}

const CHUNK: u64 = 4096;

/// Counts trials in `0..trials` for which `hit` returns true, splitting the
/// range into fixed chunks each with its own stream.
fn count_chunked<F>(trials: u64, seed: u64, cell: u64, hit: F) -> u64
where
    F: Fn(&mut ChaCha8Rng) -> bool + Sync,
{
    let chunks = trials.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = trial_rng(seed, cell, c);
            let n = CHUNK.min(trials - c * CHUNK);
            (0..n).filter(|_| hit(&mut rng)).count() as u64
        })
        .sum()
}

/// Empirical window and per-period false-alarm rates against the analytic
/// expressions, one pair of rows per `q/σ` ratio.
pub fn validate_false_alarm(
    spec: &ExperimentSpec,
    ratios: &[f64],
    plan: &FalseAlarmPlan,
) -> Result<Vec<FalseAlarmRow>, ExperimentError> {
    spec.validate(ExperimentKind::FalseAlarmValidation)?;
    if ratios.is_empty() || ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(ExperimentError::Config(
            "ratios must be finite and nonnegative".into(),
        ));
    }
    if plan.window_samples == 0 || plan.periods == 0 || plan.period_windows == 0 {
        return Err(ExperimentError::Config(
            "sample counts must be positive".into(),
        ));
    }
    let mut rows = Vec::new();
    for (i, &ratio) in ratios.iter().enumerate() {
        let detector = DetectorParams {
            noise_sigma: 1.0,
            threshold: ratio,
            ..DetectorParams::default()
        };
        let p = q_function(ratio);
        let cell = 2 * i as u64;
        let hits = count_chunked(plan.window_samples, spec.seed, cell, |rng| {
            sample_window(false, 0.0, &detector, rng)
        });
        let (estimate, stderr) = binomial_estimate(hits, plan.window_samples);
        rows.push(FalseAlarmRow {
            kind: AlarmScope::Window,
            ratio,
            n_windows: 1,
            trials: plan.window_samples,
            successes: hits,
            estimate,
            stderr,
            analytic: p,
            seed: spec.seed,
        });
        let n = plan.period_windows;
        let hits = count_chunked(plan.periods, spec.seed, cell + 1, |rng| {
            (0..n).any(|_| sample_window(false, 0.0, &detector, rng))
        });
        let (estimate, stderr) = binomial_estimate(hits, plan.periods);
        rows.push(FalseAlarmRow {
            kind: AlarmScope::Period,
            ratio,
            n_windows: n,
            trials: plan.periods,
            successes: hits,
            estimate,
            stderr,
            analytic: false_alarm_per_period(p, n)?,
            seed: spec.seed,
        });
    }
    Ok(rows)
}

/// Protocol-level settings for end-to-end runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndToEndPlan {
    pub charlie: CharlieConfig,
    pub sync: SyncParams,
    /// Station lengths are drawn uniformly from this range, independently.
    pub min_length_km: f64,
    pub max_length_km: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndToEndReport {
    pub rows: Vec<ResultRow>,
    /// `(bin_start_ps, count)` over every trial that produced an outcome.
    pub histogram: Vec<(i64, u64)>,
    /// Largest |residual| among successful runs.
    pub worst_success_residual: Picos,
    /// Trials that needed at least one Recalibrate.
    pub recalibrated: u32,
}

#[derive(Debug, Clone, Copy)]
struct SyncTrial {
    ok: bool,
    residual: Option<Picos>,
    recalibrations: u32,
}

fn sync_trial<R: Rng + ?Sized>(
    scenario: &Scenario,
    plan: &EndToEndPlan,
    power: f64,
    rng: &mut R,
) -> Result<SyncTrial, ExperimentError> {
    let period = scenario.grid.period();
    let draw_length = |rng: &mut R| {
        if plan.max_length_km > plan.min_length_km {
            rng.random_range(plan.min_length_km..=plan.max_length_km)
        } else {
            plan.min_length_km
        }
    };
    let alice_km = draw_length(rng);
    let bob_km = draw_length(rng);
    let alice = StationConfig::new(
        StationName::Alice,
        scenario.channel(alice_km),
        Dbm(power),
        period,
    );
    let bob = StationConfig::new(
        StationName::Bob,
        scenario.channel(bob_km),
        Dbm(power),
        period,
    );
    let sync = SyncParams {
        max_periods: scenario.max_periods,
        ..plan.sync
    };
    let run = match run_sync(
        &alice,
        &bob,
        &plan.charlie,
        &scenario.grid,
        &scenario.detector,
        &scenario.drift,
        &sync,
        rng,
    ) {
        Ok(run) => run,
        Err(ProtocolError::SyncFailed(run)) => *run,
        Err(e) => return Err(e.into()),
    };
    let o = run.outcome;
    let ok = o.interference_ok && o.residual_offset.abs() <= plan.charlie.interference_tolerance;
    Ok(SyncTrial {
        ok,
        residual: Some(o.residual_offset),
        recalibrations: o.recalibrations,
    })
}

/// Synchronization runs over random asymmetric link lengths: interference
/// success fraction per launch power and the residual histogram in 1 ps bins.
pub fn end_to_end(
    spec: &ExperimentSpec,
    scenario: &Scenario,
    plan: &EndToEndPlan,
) -> Result<EndToEndReport, ExperimentError> {
    spec.validate(ExperimentKind::EndToEnd)?;
    if !(plan.min_length_km >= 0.0) || !(plan.max_length_km >= plan.min_length_km) {
        return Err(ExperimentError::Config(
            "length range must satisfy 0 <= min <= max".into(),
        ));
    }
    let polls = spec.fixed_polls()?;
    let mut plan = *plan;
    plan.sync.polls = polls;
    let mut powers = spec.powers.clone();
    powers.sort_by(f64::total_cmp);
    powers.dedup();
    let mut rows = Vec::new();
    let mut histogram = BTreeMap::new();
    let mut worst = Picos::ZERO;
    let mut recalibrated = 0;
    for (cell, &power) in powers.iter().enumerate() {
        let trials = (0..spec.trials as u64)
            .into_par_iter()
            .map(|t| {
                let mut rng = trial_rng(spec.seed, cell as u64, t);
                sync_trial(scenario, &plan, power, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let successes = trials.iter().filter(|t| t.ok).count() as u32;
        for t in &trials {
            if let Some(r) = t.residual {
                *histogram.entry(r.0).or_insert(0u64) += 1;
                if t.ok {
                    worst = worst.max(r.abs());
                }
            }
            if t.recalibrations > 0 {
                recalibrated += 1;
            }
        }
        rows.push(ResultRow::new(
            plan.max_length_km,
            power,
            polls,
            spec.trials,
            successes,
            spec.seed,
        ));
    }
    Ok(EndToEndReport {
        rows,
        histogram: histogram.into_iter().collect(),
        worst_success_residual: worst,
        recalibrated,
    })
}

/// Smallest detector gain, to a relative resolution of `tolerance`, for
/// which full-search success over `trials` reaches `target`. Searches in log
/// space between `lo` and `hi`, reusing the same trial streams throughout.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_gain(
    scenario: &Scenario,
    length_km: f64,
    power_dbm: f64,
    polls: u32,
    target: f64,
    trials: u32,
    seed: u64,
    (mut lo, mut hi): (f64, f64),
    tolerance: f64,
) -> Result<f64, ExperimentError> {
    let needed = (target * trials as f64).ceil() as u32;
    let reaches = |gain: f64| -> Result<bool, ExperimentError> {
        let s = Scenario {
            detector: DetectorParams {
                gain,
                ..scenario.detector
            },
            ..*scenario
        };
        Ok(success_count(&s, length_km, power_dbm, polls, trials, seed, 0)? >= needed)
    };
    if !reaches(hi)? {
        return Err(ExperimentError::UnreachableTarget {
            length_km,
            target,
            cap: polls,
        });
    }
    while hi / lo > 1.0 + tolerance {
        let mid = (lo * hi).sqrt();
        if reaches(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timing::{choose_period, DEFAULT_GUARD};

    fn scenario(gain: f64) -> Scenario {
        let period = choose_period(100.0, 1.468, DEFAULT_GUARD).unwrap();
        Scenario {
            grid: TimingGrid::with_period(period).unwrap(),
            channel: ChannelParams::default(),
            detector: DetectorParams {
                gain,
                ..DetectorParams::default()
            },
            drift: DriftModel::default(),
            max_periods: 4,
        }
    }

    fn spec(kind: ExperimentKind) -> ExperimentSpec {
        ExperimentSpec {
            kind,
            lengths: vec![50.0, 10.0],
            powers: vec![-10.0, -30.0],
            trials: 40,
            polls: Polls::Fixed(50),
            seed: 7,
            target_probability: 0.9,
        }
    }

    #[test]
    fn result_row_formula() {
        let r = ResultRow::new(1.0, 2.0, 3, 100, 99, 5);
        assert_eq!(r.estimate, 0.99);
        assert_eq!(r.stderr, (0.99f64 * (1.0 - 0.99) / 100.0).sqrt());
        let r = ResultRow::new(1.0, 2.0, 3, 10, 10, 5);
        assert_eq!((r.estimate, r.stderr), (1.0, 0.0));
    }

    #[test]
    fn trial_streams_are_distinct_and_stable() {
        let a: u64 = trial_rng(1, 0, 0).random();
        let b: u64 = trial_rng(1, 0, 1).random();
        let c: u64 = trial_rng(1, 1, 0).random();
        let d: u64 = trial_rng(2, 0, 0).random();
        assert!(a != b && a != c && a != d && b != c);
        assert_eq!(a, trial_rng(1, 0, 0).random::<u64>());
    }

    #[test]
    fn minimal_polls_search() {
        for target in [1u32, 2, 3, 7, 64, 65, 100, 9999, 10_000] {
            let got = minimal_polls(POLL_CAP, |p| Ok(p >= target)).unwrap();
            assert_eq!(got, Some(target));
        }
        assert_eq!(minimal_polls(POLL_CAP, |p| Ok(p > POLL_CAP)).unwrap(), None);
    }

    #[test]
    fn power_sweep_rows_are_sorted_and_deterministic() {
        let s = scenario(1.5e13);
        let rows = sweep_power(&spec(ExperimentKind::PowerSweep), &s).unwrap();
        let keys: Vec<_> = rows.iter().map(|r| (r.length_km, r.power_dbm)).collect();
        assert_eq!(
            keys,
            vec![(10.0, -30.0), (10.0, -10.0), (50.0, -30.0), (50.0, -10.0)]
        );
        assert_eq!(
            rows,
            sweep_power(&spec(ExperimentKind::PowerSweep), &s).unwrap()
        );
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.estimate));
            assert_eq!(r.seed, 7);
        }
        assert_eq!(rows[3].successes, 40);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let s = scenario(1.5e13);
        let sp = spec(ExperimentKind::PowerSweep);
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = one.install(|| sweep_power(&sp, &s)).unwrap();
        let b = four.install(|| sweep_power(&sp, &s)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_kind_is_a_config_error() {
        let s = scenario(1.0);
        assert!(matches!(
            sweep_power(&spec(ExperimentKind::EndToEnd), &s),
            Err(ExperimentError::Config(_))
        ));
        let mut sp = spec(ExperimentKind::PowerSweep);
        sp.trials = 0;
        assert!(matches!(
            sweep_power(&sp, &s),
            Err(ExperimentError::Config(_))
        ));
    }

    #[test]
    fn hopeless_power_never_succeeds() {
        let s = scenario(1.5e13);
        let sp = ExperimentSpec {
            lengths: vec![30.0],
            powers: vec![-200.0],
            ..spec(ExperimentKind::PowerSweep)
        };
        let rows = sweep_power(&sp, &s).unwrap();
        assert_eq!(rows[0].successes, 0);
    }

    #[test]
    fn short_links_need_one_poll() {
        let s = scenario(1.5e13);
        let sp = ExperimentSpec {
            lengths: vec![1.0],
            powers: vec![-15.0],
            polls: Polls::Auto,
            trials: 200,
            target_probability: 0.99,
            ..spec(ExperimentKind::SampleSizeSweep)
        };
        let report = sweep_sample_size(&sp, &s).unwrap();
        assert_eq!(report.refinement[0].polls, 1);
        assert_eq!(report.coarse[0].successes, 200);
    }

    #[test]
    fn unreachable_target_is_reported() {
        let s = scenario(1.5e13);
        let sp = ExperimentSpec {
            lengths: vec![100.0],
            powers: vec![-60.0],
            polls: Polls::Fixed(64),
            trials: 20,
            ..spec(ExperimentKind::SampleSizeSweep)
        };
        assert!(matches!(
            sweep_sample_size(&sp, &s),
            Err(ExperimentError::UnreachableTarget { cap: 64, .. })
        ));
    }

    #[test]
    fn false_alarm_rows_agree_with_analytic_values() {
        let sp = ExperimentSpec {
            kind: ExperimentKind::FalseAlarmValidation,
            ..spec(ExperimentKind::FalseAlarmValidation)
        };
        let plan = FalseAlarmPlan {
            window_samples: 200_000,
            periods: 2000,
            period_windows: 1000,
        };
        let rows = validate_false_alarm(&sp, &[0.0, 3.0], &plan).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].analytic, 0.5);
        assert!((rows[3].analytic - 0.740969629813133).abs() < 1e-9);
        for r in &rows {
            assert!(r.z_score() < 4.0, "{r:?}");
        }
    }

    #[test]
    fn zero_length_noiseless_runs_have_zero_residual() {
        let s = Scenario {
            detector: DetectorParams {
                noiseless: true,
                gain: 1e15,
                ..DetectorParams::default()
            },
            ..scenario(1.0)
        };
        let plan = EndToEndPlan {
            charlie: CharlieConfig::default(),
            sync: SyncParams::new(1),
            min_length_km: 0.0,
            max_length_km: 0.0,
        };
        let sp = ExperimentSpec {
            powers: vec![-15.0],
            polls: Polls::Fixed(1),
            trials: 16,
            ..spec(ExperimentKind::EndToEnd)
        };
        let report = end_to_end(&sp, &s, &plan).unwrap();
        assert_eq!(report.rows[0].successes, 16);
        assert_eq!(report.histogram, vec![(0, 16)]);
    }

    #[test]
    fn drift_drives_recalibration() {
        let s = Scenario {
            drift: DriftModel {
                linear_rate_ps_per_s: 100.0,
                jitter_sigma_ps: 0.0,
            },
            ..scenario(1.5e13)
        };
        let plan = EndToEndPlan {
            charlie: CharlieConfig::default(),
            sync: SyncParams {
                stage_gap: Picos::from_secs(1),
                ..SyncParams::new(100)
            },
            min_length_km: 0.0,
            max_length_km: 100.0,
        };
        let sp = ExperimentSpec {
            powers: vec![-15.0],
            polls: Polls::Fixed(100),
            trials: 20,
            ..spec(ExperimentKind::EndToEnd)
        };
        let report = end_to_end(&sp, &s, &plan).unwrap();
        assert!(report.recalibrated > 10);
    }
}
