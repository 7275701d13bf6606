//! Two-stage window search: a coarse scan that analyzes one 2 ns window per
//! emitted pulse and stops at the first detection, followed by a refinement
//! that polls every 10 ps subinterval around the locked window.

use rand::Rng;
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::channel::{
    apply_drift, received_power_roundtrip, round_trip_time, ChannelError, ChannelParams, Dbm,
    DriftModel,
};
use crate::detector::{
    mean_amplitude_from_power, poll_count, sample_window, DetectorError, DetectorParams,
};
use crate::timing::{Picos, TimingError, TimingGrid};

/// Family-wise probability that noise alone lifts some scanned gate above the floor.
pub const FLOOR_ALPHA: f64 = 1e-3;

/// Standard deviations above the expected noise count required by the floor.
pub const FLOOR_SIGMAS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("search exhausted after {pulses} pulses without a detection")]
    Exhausted { pulses: u64 },
    #[error("ambiguous refinement: best count {max_count} does not exceed noise floor {floor:.3}")]
    Ambiguous { max_count: u32, floor: f64 },
    #[error("invalid search parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: u64 },
    #[error("pulse spacing {spacing} is shorter than the detector dead time {dead_time}")]
    DeadTime { spacing: Picos, dead_time: Picos },
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

impl SearchError {
    /// True for outcomes that a noisy search can legitimately produce, as
    /// opposed to parameter errors.
    pub fn is_search_failure(&self) -> bool {
        matches!(
            self,
            SearchError::Exhausted { .. } | SearchError::Ambiguous { .. }
        )
    }
}

/// A returning pulse as seen at the detector: a boxcar of `pulse_width`
/// starting at `arrival`, periodic in `period`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Echo {
    arrival: Picos,
    pulse_width: Picos,
    period: Picos,
    amplitude: f64,
}

impl Echo {
    pub fn new(arrival: Picos, grid: &TimingGrid, amplitude: f64) -> Self {
        Echo {
            arrival: arrival.phase(grid.period()),
            pulse_width: grid.pulse_width(),
            period: grid.period(),
            amplitude,
        }
    }

    pub fn arrival(&self) -> Picos {
        self.arrival
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Fraction of the pulse energy inside the gate `[start, start + width)`,
    /// taken modulo the period.
    pub fn energy_fraction(&self, start: Picos, width: Picos) -> f64 {
        let t = self.period.0;
        let s = start.phase(self.period).0;
        let (a, b) = (self.arrival.0, self.arrival.0 + self.pulse_width.0);
        let overlap: i64 = [-t, 0, t]
            .iter()
            .map(|shift| {
                let (lo, hi) = (s + shift, s + shift + width.0);
                (hi.min(b) - lo.max(a)).max(0)
            })
            .sum();
        overlap.min(self.pulse_width.0) as f64 / self.pulse_width.0 as f64
    }

    /// Mean detector output of a gate.
    pub fn mean_in(&self, start: Picos, width: Picos) -> f64 {
        self.amplitude * self.energy_fraction(start, width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Refine,
    Done,
}

/// Progress of one search: the current detection delay Z and the pulses spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanState {
    pub delay: Picos,
    pub pulses_sent: u64,
    pub stage: Stage,
}

impl ScanState {
    pub fn new() -> Self {
        ScanState {
            delay: Picos::ZERO,
            pulses_sent: 0,
            stage: Stage::Coarse,
        }
    }

    /// True when the delay sits on the lattice of the current stage.
    pub fn is_aligned(&self, grid: &TimingGrid) -> bool {
        let step = match self.stage {
            Stage::Coarse => grid.window_width(),
            Stage::Refine | Stage::Done => grid.subinterval_width(),
        };
        self.delay.0 % step.0 == 0
    }
}

impl Default for ScanState {
    fn default() -> Self {
        Self::new()
    }
}

/// First window of the coarse scan whose sample crossed the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoarseLock {
    pub window: u64,
    /// Pulses emitted since the start of the scan, the locking pulse included.
    pub pulses_used: u64,
    /// The locked window holds no signal energy. Only known in simulation.
    pub false_alarm_capture: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchResult {
    pub coarse_window: u64,
    /// Leading-edge position within the scanned span.
    pub subinterval: u32,
    pub round_trip_estimate: Picos,
    /// Pulses spent over both stages, including retries after false locks.
    pub pulses_used: u64,
    pub polls_per_subinterval: u32,
    pub false_locks: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchParams {
    pub polls: u32,
    /// Coarse budget in whole periods.
    pub max_periods: u64,
}

impl SearchParams {
    pub fn new(polls: u32) -> Self {
        SearchParams {
            polls,
            max_periods: 4,
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.polls == 0 {
            return Err(SearchError::InvalidParameter {
                name: "polls",
                value: 0,
            });
        }
        if self.max_periods == 0 {
            return Err(SearchError::InvalidParameter {
                name: "max_periods",
                value: 0,
            });
        }
        Ok(())
    }
}

/// Number of failures before the first success in Bernoulli(p) trials,
/// drawn by inversion so that vanishing `p` stays exact and cheap.
fn geometric_failures<R: Rng + ?Sized>(p: f64, rng: &mut R) -> u64 {
    if p >= 1.0 {
        return 0;
    }
    if p <= 0.0 {
        return u64::MAX;
    }
    let u: f64 = rng.random();
    let g = (1.0 - u).ln() / (-p).ln_1p();
    if g >= u64::MAX as f64 {
        u64::MAX
    } else {
        g.floor() as u64
    }
}

fn check_schedule(grid: &TimingGrid, detector: &DetectorParams) -> Result<(), SearchError> {
    let spacing = grid.period() - grid.window_width();
    if spacing < detector.dead_time {
        return Err(SearchError::DeadTime {
            spacing,
            dead_time: detector.dead_time,
        });
    }
    Ok(())
}

/// Windows that receive any energy from the echo.
fn lit_windows(echo: &Echo, grid: &TimingGrid) -> Vec<u64> {
    let n = grid.num_windows();
    let w = grid.window_width();
    let mut lit = Vec::with_capacity(2);
    for edge in [echo.arrival, echo.arrival + echo.pulse_width - Picos(1)] {
        let window = (edge.phase(grid.period()).0 / w.0) as u64;
        if window < n
            && !lit.contains(&window)
            && echo.energy_fraction(grid.window_start(window), w) > 0.0
        {
            lit.push(window);
        }
    }
    lit
}

/// Coarse scan over pulses `first_pulse..end_pulse`, pulse `k` analyzing
/// window `k mod N`. Runs of empty windows are skipped with a single
/// geometric draw, which is exact in distribution.
fn coarse_scan<R: Rng + ?Sized>(
    echo: &Echo,
    grid: &TimingGrid,
    detector: &DetectorParams,
    first_pulse: u64,
    end_pulse: u64,
    rng: &mut R,
) -> Option<CoarseLock> {
    let n = grid.num_windows();
    let lit = lit_windows(echo, grid);
    let p_false = detector.false_alarm();
    let mut k = first_pulse;
    while k < end_pulse {
        let next_lit = lit
            .iter()
            .map(|&w| k + (w + n - k % n) % n)
            .min()
            .unwrap_or(u64::MAX);
        let stretch_end = next_lit.min(end_pulse);
        if stretch_end > k {
            let failures = geometric_failures(p_false, rng);
            if failures < stretch_end - k {
                let pulse = k + failures;
                return Some(CoarseLock {
                    window: pulse % n,
                    pulses_used: pulse + 1,
                    false_alarm_capture: true,
                });
            }
            k = stretch_end;
            if k == end_pulse {
                break;
            }
        }
        let window = k % n;
        let mean = echo.mean_in(grid.window_start(window), grid.window_width());
        if sample_window(true, mean, detector, rng) {
            return Some(CoarseLock {
                window,
                pulses_used: k + 1,
                false_alarm_capture: false,
            });
        }
        k += 1;
    }
    None
}

/// Stage one: analyze windows 0, 1, 2, ... one per pulse until a sample
/// crosses the threshold.
pub fn coarse_search<R: Rng + ?Sized>(
    ground_truth_delay: Picos,
    grid: &TimingGrid,
    detector: &DetectorParams,
    mean_amplitude: f64,
    rng: &mut R,
    max_periods: u64,
) -> Result<CoarseLock, SearchError> {
    detector.validate()?;
    check_schedule(grid, detector)?;
    if max_periods == 0 {
        return Err(SearchError::InvalidParameter {
            name: "max_periods",
            value: 0,
        });
    }
    let echo = Echo::new(ground_truth_delay, grid, mean_amplitude);
    let budget = max_periods.saturating_mul(grid.num_windows());
    coarse_scan(&echo, grid, detector, 0, budget, rng)
        .ok_or(SearchError::Exhausted { pulses: budget })
}

/// Coarse scan that steps past every false-alarm capture and stops at the
/// first lock on a lit window. Uses simulation truth to recognize false
/// captures, so it serves validation statistics only. Returns the lock and
/// the number of false captures skipped.
pub fn coarse_search_past_false_alarms<R: Rng + ?Sized>(
    ground_truth_delay: Picos,
    grid: &TimingGrid,
    detector: &DetectorParams,
    mean_amplitude: f64,
    rng: &mut R,
    max_periods: u64,
) -> Result<(CoarseLock, u32), SearchError> {
    detector.validate()?;
    check_schedule(grid, detector)?;
    let echo = Echo::new(ground_truth_delay, grid, mean_amplitude);
    let budget = max_periods.saturating_mul(grid.num_windows());
    let mut next = 0;
    let mut skipped = 0;
    loop {
        let lock = coarse_scan(&echo, grid, detector, next, budget, rng)
            .ok_or(SearchError::Exhausted { pulses: budget })?;
        if !lock.false_alarm_capture {
            return Ok((lock, skipped));
        }
        skipped += 1;
        next = lock.pulses_used;
    }
}

/// Count threshold a gate must exceed to be taken as lit. The larger of the
/// Gaussian band `polls·p + 5·sqrt(polls·p·(1-p))` and the binomial quantile
/// that keeps the chance of any of `positions` empty gates exceeding it
/// below [`FLOOR_ALPHA`].
pub fn noise_floor(p_false: f64, polls: u32, positions: usize) -> f64 {
    let n = polls as f64;
    let gaussian = n * p_false + FLOOR_SIGMAS * (n * p_false * (1.0 - p_false)).sqrt();
    if p_false <= 0.0 || polls == 0 {
        return gaussian.max(0.0);
    }
    if p_false >= 1.0 {
        return n;
    }
    let dist = Binomial::new(p_false, polls as u64).expect("p in (0, 1)");
    let positions = positions.max(1) as f64;
    let mut level = 0u64;
    while level < polls as u64 && positions * dist.sf(level) > FLOOR_ALPHA {
        level += 1;
    }
    gaussian.max(level as f64)
}

/// Leading edge of the lit plateau: anchor on the earliest count within one of
/// the maximum, then walk back while the preceding gate stays above the floor.
pub fn locate_leading_edge(counts: &[u32], floor: f64) -> Result<usize, SearchError> {
    let max_count = counts.iter().copied().max().unwrap_or(0);
    if max_count as f64 <= floor {
        return Err(SearchError::Ambiguous { max_count, floor });
    }
    let lit = |c: u32| c as f64 > floor;
    let mut edge = counts
        .iter()
        .position(|&c| c + 1 >= max_count && lit(c))
        .expect("the maximum itself qualifies");
    while edge > 0 && lit(counts[edge - 1]) {
        edge -= 1;
    }
    Ok(edge)
}

/// Polls each gate `[start + i·step, start + i·step + width)` for
/// `i in 0..positions` and returns the detection counts.
#[allow(clippy::too_many_arguments)]
pub fn scan_gates<R: Rng + ?Sized>(
    echo: &Echo,
    start: Picos,
    step: Picos,
    width: Picos,
    positions: usize,
    detector: &DetectorParams,
    polls: u32,
    rng: &mut R,
) -> Vec<u32> {
    (0..positions)
        .map(|i| {
            let gate = start + step * i as i64;
            let p = detector.fire_probability(echo.mean_in(gate, width));
            poll_count(p, polls, rng)
        })
        .collect()
}

fn refine_echo<R: Rng + ?Sized>(
    coarse_window: u64,
    echo: &Echo,
    grid: &TimingGrid,
    detector: &DetectorParams,
    polls: u32,
    rng: &mut R,
) -> Result<SearchResult, SearchError> {
    let lo = coarse_window.saturating_sub(1);
    let hi = (coarse_window + 1).min(grid.num_windows() - 1);
    let positions = ((hi - lo + 1) * crate::timing::SUBINTERVALS_PER_WINDOW as u64) as usize;
    let sub = grid.subinterval_width();
    let start = grid.window_start(lo);
    let counts = scan_gates(echo, start, sub, sub, positions, detector, polls, rng);
    let floor = noise_floor(detector.false_alarm(), polls, positions);
    let edge = locate_leading_edge(&counts, floor)?;
    Ok(SearchResult {
        coarse_window,
        subinterval: edge as u32,
        round_trip_estimate: start + sub * edge as i64,
        pulses_used: positions as u64 * polls as u64,
        polls_per_subinterval: polls,
        false_locks: 0,
    })
}

/// Stage two: poll every subinterval of windows `N_ws-1..=N_ws+1` (clamped to
/// the grid) `polls` times and locate the leading edge of the pulse.
pub fn refine<R: Rng + ?Sized>(
    coarse_window: u64,
    ground_truth_delay: Picos,
    grid: &TimingGrid,
    detector: &DetectorParams,
    mean_amplitude: f64,
    polls: u32,
    rng: &mut R,
) -> Result<SearchResult, SearchError> {
    detector.validate()?;
    if polls == 0 {
        return Err(SearchError::InvalidParameter {
            name: "polls",
            value: 0,
        });
    }
    if coarse_window >= grid.num_windows() {
        return Err(SearchError::InvalidParameter {
            name: "coarse_window",
            value: coarse_window,
        });
    }
    let echo = Echo::new(ground_truth_delay, grid, mean_amplitude);
    refine_echo(coarse_window, &echo, grid, detector, polls, rng)
}

/// Coarse scan and refinement against a known echo. An ambiguous refinement
/// counts as a false lock and the scan resumes with the next pulse.
pub fn search_echo<R: Rng + ?Sized>(
    echo: &Echo,
    grid: &TimingGrid,
    detector: &DetectorParams,
    params: &SearchParams,
    rng: &mut R,
) -> Result<SearchResult, SearchError> {
    detector.validate()?;
    params.validate()?;
    check_schedule(grid, detector)?;
    let budget = params.max_periods.saturating_mul(grid.num_windows());
    let mut state = ScanState::new();
    let mut false_locks = 0u32;
    let mut refine_pulses = 0u64;
    loop {
        let lock = coarse_scan(echo, grid, detector, state.pulses_sent, budget, rng)
            .ok_or(SearchError::Exhausted { pulses: budget })?;
        state.pulses_sent = lock.pulses_used;
        state.delay = grid.window_start(lock.window);
        state.stage = Stage::Refine;
        match refine_echo(lock.window, echo, grid, detector, params.polls, rng) {
            Ok(mut result) => {
                state.stage = Stage::Done;
                result.pulses_used += state.pulses_sent + refine_pulses;
                result.false_locks = false_locks;
                return Ok(result);
            }
            Err(SearchError::Ambiguous { .. }) => {
                false_locks += 1;
                refine_pulses +=
                    3 * crate::timing::SUBINTERVALS_PER_WINDOW as u64 * params.polls as u64;
                state.stage = Stage::Coarse;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Ground-truth round trip for a channel: fiber delay plus drift, as a phase
/// of the period.
pub fn ground_truth_round_trip<R: Rng + ?Sized>(
    channel: &ChannelParams,
    grid: &TimingGrid,
    drift: &DriftModel,
    elapsed: Picos,
    rng: &mut R,
) -> Result<Picos, SearchError> {
    channel.validate()?;
    drift.validate()?;
    let rtt = round_trip_time(channel);
    grid.check_round_trip(rtt)?;
    Ok(apply_drift(rtt, elapsed, drift, rng).phase(grid.period()))
}

/// Mean full-pulse amplitude of the echo returning over `channel`.
pub fn echo_amplitude(
    channel: &ChannelParams,
    launch: Dbm,
    detector: &DetectorParams,
) -> Result<f64, SearchError> {
    let received = received_power_roundtrip(launch, channel)?;
    Ok(mean_amplitude_from_power(received, detector))
}

/// Full search that also hands back the ground truth it was run against, so
/// a validation layer can score the estimate.
#[allow(clippy::too_many_arguments)]
pub fn full_search_traced<R: Rng + ?Sized>(
    channel: &ChannelParams,
    launch: Dbm,
    grid: &TimingGrid,
    detector: &DetectorParams,
    params: &SearchParams,
    drift: &DriftModel,
    elapsed: Picos,
    rng: &mut R,
) -> Result<(Picos, Result<SearchResult, SearchError>), SearchError> {
    let truth = ground_truth_round_trip(channel, grid, drift, elapsed, rng)?;
    let amplitude = echo_amplitude(channel, launch, detector)?;
    let echo = Echo::new(truth, grid, amplitude);
    match search_echo(&echo, grid, detector, params, rng) {
        Err(e) if !e.is_search_failure() => Err(e),
        outcome => Ok((truth, outcome)),
    }
}

/// Measures the round trip over `channel`: ground truth from the channel and
/// drift models, then coarse search and refinement.
#[allow(clippy::too_many_arguments)]
pub fn full_search<R: Rng + ?Sized>(
    channel: &ChannelParams,
    launch: Dbm,
    grid: &TimingGrid,
    detector: &DetectorParams,
    params: &SearchParams,
    drift: &DriftModel,
    elapsed: Picos,
    rng: &mut R,
) -> Result<SearchResult, SearchError> {
    full_search_traced(channel, launch, grid, detector, params, drift, elapsed, rng)?.1
}

/// Whether an estimate lies within one subinterval of the truth, measured
/// around the period.
pub fn is_accurate(estimate: Picos, truth: Picos, grid: &TimingGrid) -> bool {
    estimate.circular_diff(truth, grid.period()).abs() <= grid.subinterval_width()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::one_way_delay;
    use crate::timing::{choose_period, DEFAULT_GUARD};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(windows: i64) -> TimingGrid {
        TimingGrid::with_period(Picos::from_ns(2) * windows).unwrap()
    }

    fn oracle() -> DetectorParams {
        DetectorParams {
            noiseless: true,
            dead_time: Picos::ZERO,
            ..DetectorParams::default()
        }
    }

    #[test]
    fn energy_fraction_is_overlap_over_pulse_width() {
        let g = grid(10);
        let echo = Echo::new(Picos(1500), &g, 1.0);
        assert_eq!(echo.energy_fraction(Picos(0), Picos(2000)), 0.5);
        assert_eq!(echo.energy_fraction(Picos(2000), Picos(2000)), 0.5);
        assert_eq!(echo.energy_fraction(Picos(1500), Picos(10)), 0.01);
        assert_eq!(echo.energy_fraction(Picos(1495), Picos(10)), 0.005);
        assert_eq!(echo.energy_fraction(Picos(2500), Picos(10)), 0.0);
        assert_eq!(echo.energy_fraction(Picos(4000), Picos(2000)), 0.0);
    }

    #[test]
    fn energy_fraction_wraps_around_the_period() {
        let g = grid(10);
        let echo = Echo::new(Picos(19_500), &g, 1.0);
        assert_eq!(echo.energy_fraction(Picos(18_000), Picos(2000)), 0.5);
        assert_eq!(echo.energy_fraction(Picos(0), Picos(2000)), 0.5);
        assert_eq!(echo.energy_fraction(Picos(-500), Picos(1000)), 1.0);
    }

    #[test]
    fn noiseless_coarse_search_returns_truth_window() {
        let g = grid(50);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lock = coarse_search(Picos(7 * 2000 + 300), &g, &oracle(), 1e4, &mut rng, 1).unwrap();
        assert_eq!(lock.window, 7);
        assert_eq!(lock.pulses_used, 8);
        assert!(!lock.false_alarm_capture);
    }

    #[test]
    fn straddling_pulse_locks_the_first_lit_window() {
        let g = grid(50);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lock = coarse_search(Picos(3 * 2000 + 1990), &g, &oracle(), 1e4, &mut rng, 1).unwrap();
        assert_eq!(lock.window, 3);
    }

    #[test]
    fn empty_scan_exhausts_budget() {
        let g = grid(50);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = coarse_search(Picos(100), &g, &oracle(), 0.0, &mut rng, 3).unwrap_err();
        assert_eq!(err, SearchError::Exhausted { pulses: 150 });
    }

    #[test]
    fn no_signal_exhaustion_rate_matches_composition_law() {
        // (1 - Q(5))^500000 from a log-space mpmath evaluation.
        let expected = 0.866471720799563;
        let g = grid(500_000);
        let det = DetectorParams {
            dead_time: Picos::ZERO,
            ..DetectorParams::default()
        };
        let trials = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let exhausted = (0..trials)
            .filter(|_| coarse_search(Picos(0), &g, &det, 0.0, &mut rng, 1).is_err())
            .count();
        let est = exhausted as f64 / trials as f64;
        let se = (expected * (1.0 - expected) / trials as f64).sqrt();
        assert!((est - expected).abs() < 4.0 * se, "{est}");
    }

    #[test]
    fn false_alarm_capture_is_flagged() {
        let g = grid(1000);
        let det = DetectorParams {
            threshold: 1.0,
            dead_time: Picos::ZERO,
            ..DetectorParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lock = coarse_search(Picos(999 * 2000), &g, &det, 0.0, &mut rng, 1).unwrap();
        assert!(lock.false_alarm_capture);
        assert!(lock.pulses_used <= 1000);
        let (lock, skipped) =
            coarse_search_past_false_alarms(Picos(999 * 2000), &g, &det, 50.0, &mut rng, 1)
                .unwrap();
        assert_eq!(lock.window, 999);
        assert!(skipped > 50);
    }

    #[test]
    fn geometric_skip_matches_per_window_sampling() {
        // Window of the first alarm is geometric; compare its mean with 1/p - 1.
        let p: f64 = 0.01;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| geometric_failures(p, &mut rng) as f64)
            .sum::<f64>()
            / n as f64;
        let expected = (1.0 - p) / p;
        let se = ((1.0 - p).sqrt() / p) / (n as f64).sqrt();
        assert!((mean - expected).abs() < 4.0 * se, "{mean}");
        assert_eq!(geometric_failures(0.0, &mut rng), u64::MAX);
        assert_eq!(geometric_failures(1.0, &mut rng), 0);
        assert!(geometric_failures(1e-30, &mut rng) > 1_000_000_000_000);
    }

    #[test]
    fn dead_time_schedule_is_enforced() {
        let g = grid(10);
        let det = DetectorParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            coarse_search(Picos(0), &g, &det, 1.0, &mut rng, 1),
            Err(SearchError::DeadTime { .. })
        ));
    }

    #[test]
    fn noiseless_refine_hits_truth() {
        let g = grid(50);
        let truth = Picos(2000 + 55);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = refine(1, truth, &g, &oracle(), 1e6, 1, &mut rng).unwrap();
        assert!(is_accurate(r.round_trip_estimate, truth, &g));
        assert_eq!(r.round_trip_estimate, Picos(2050));
    }

    #[test]
    fn refine_clamps_at_grid_edges() {
        let g = grid(50);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = refine(0, Picos(0), &g, &oracle(), 1e6, 1, &mut rng).unwrap();
        assert_eq!(r.round_trip_estimate, Picos(0));
        assert_eq!(r.pulses_used, 400);
        let truth = Picos(49 * 2000 + 900);
        let r = refine(49, truth, &g, &oracle(), 1e6, 1, &mut rng).unwrap();
        assert_eq!(r.pulses_used, 400);
        assert!(is_accurate(r.round_trip_estimate, truth, &g));
    }

    #[test]
    fn refine_without_signal_is_ambiguous() {
        let g = grid(50);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = refine(10, Picos(40_000), &g, &oracle(), 1e6, 5, &mut rng).unwrap_err();
        assert!(matches!(err, SearchError::Ambiguous { max_count: 0, .. }));
    }

    #[test]
    fn noise_floor_examples() {
        // No noise: a single count is enough.
        assert_eq!(noise_floor(0.0, 100, 600), 0.0);
        // Gaussian band dominates for common alarms.
        let f = noise_floor(0.5, 100, 600);
        assert!((75.0..100.0).contains(&f));
        // Rare alarms: 600 * P(Bin(1e4, Q(5)) > 2) ~ 2.3e-6 while > 1 gives ~2.4e-3.
        let q5 = crate::detector::q_function(5.0);
        assert_eq!(noise_floor(q5, 10_000, 600), 2.0);
        assert_eq!(noise_floor(q5, 100, 600), 1.0);
        assert_eq!(noise_floor(q5, 1, 600), q5 + 5.0 * (q5 * (1.0 - q5)).sqrt());
    }

    #[test]
    fn leading_edge_rule() {
        let counts = [0, 0, 1, 3, 9, 10, 9, 10, 3, 0];
        assert_eq!(locate_leading_edge(&counts, 1.5), Ok(3));
        // A dip below the floor splits the plateau.
        let counts = [0, 5, 0, 9, 10, 0];
        assert_eq!(locate_leading_edge(&counts, 1.0), Ok(3));
        assert!(locate_leading_edge(&[1, 1, 0], 1.0).is_err());
        assert!(locate_leading_edge(&[], 0.0).is_err());
    }

    #[test]
    fn zero_length_channel_estimates_zero() {
        let g = grid(1000);
        let ch = ChannelParams::with_length(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let det = DetectorParams {
            gain: 1e15,
            ..oracle()
        };
        let r = full_search(
            &ch,
            Dbm(0.0),
            &g,
            &det,
            &SearchParams::new(1),
            &DriftModel::default(),
            Picos::ZERO,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.round_trip_estimate, Picos(0));
        assert_eq!(r.coarse_window, 0);
    }

    #[test]
    fn fifty_km_estimate_within_one_subinterval() {
        let ch = ChannelParams::with_length(50.0);
        let period = choose_period(100.0, ch.group_index, DEFAULT_GUARD).unwrap();
        let g = TimingGrid::with_period(period).unwrap();
        let det = DetectorParams {
            gain: 1e15,
            ..DetectorParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (truth, r) = full_search_traced(
            &ch,
            Dbm(-10.0),
            &g,
            &det,
            &SearchParams::new(20),
            &DriftModel::default(),
            Picos::ZERO,
            &mut rng,
        )
        .unwrap();
        assert_eq!(truth, Picos(489_672_092));
        assert_eq!(truth, one_way_delay(&ch) * 2);
        let r = r.unwrap();
        assert!((r.round_trip_estimate - truth).abs() <= Picos(10));
    }

    #[test]
    fn false_lock_resumes_scan() {
        let g = grid(2000);
        let det = DetectorParams {
            threshold: 3.0,
            dead_time: Picos::ZERO,
            ..DetectorParams::default()
        };
        let truth = Picos(1900 * 2000 + 400);
        let echo = Echo::new(truth, &g, 3000.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut locks = 0;
        for _ in 0..50 {
            let r = search_echo(&echo, &g, &det, &SearchParams::new(200), &mut rng).unwrap();
            assert!(is_accurate(r.round_trip_estimate, truth, &g));
            locks += r.false_locks;
            assert!(r.pulses_used >= 1901);
        }
        // Q(3) * 1900 windows ~ 2.6 false locks per search.
        assert!(locks > 50);
    }

    proptest! {
        #[test]
        fn noiseless_search_is_exact(windows in 3i64..400, frac in 0.0f64..1.0) {
            let g = grid(windows);
            let span = g.period().0 - g.pulse_width().0;
            let truth = Picos((frac * span as f64) as i64);
            let mut rng = ChaCha8Rng::seed_from_u64(windows as u64);
            let echo = Echo::new(truth, &g, 1e6);
            let lock = coarse_search(truth, &g, &oracle(), 1e6, &mut rng, 1).unwrap();
            prop_assert_eq!(lock.window, (truth.0 / 2000) as u64);
            prop_assert_eq!(lock.pulses_used, lock.window + 1);
            let r = search_echo(&echo, &g, &oracle(), &SearchParams::new(1), &mut rng).unwrap();
            prop_assert!(is_accurate(r.round_trip_estimate, truth, &g));
            prop_assert!(r.round_trip_estimate <= truth);
        }

        #[test]
        fn energy_fraction_sums_to_one_over_windows(arrival in 0i64..20_000) {
            let g = grid(10);
            let echo = Echo::new(Picos(arrival), &g, 1.0);
            let total: f64 = (0..10).map(|w| echo.energy_fraction(g.window_start(w), Picos(2000))).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn scan_state_alignment(windows in 0i64..1000, subs in 0i64..200) {
            let g = grid(1000);
            let coarse = ScanState { delay: Picos(windows * 2000), pulses_sent: 0, stage: Stage::Coarse };
            prop_assert!(coarse.is_aligned(&g));
            let fine = ScanState { delay: Picos(windows * 2000 + subs * 10), pulses_sent: 0, stage: Stage::Refine };
            prop_assert!(fine.is_aligned(&g));
        }
    }
}
