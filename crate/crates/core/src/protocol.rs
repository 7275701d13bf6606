//! Three-node synchronization: Alice and Bob range their links to the central
//! node, the central node (Charlie) gates its detector on each station's
//! pulses, computes the arrival delta, and drives compensation until the two
//! pulse trains interfere.
//!
//! Station and Charlie logic only ever see measured values. The [`World`]
//! holds the simulated ground truth and answers physical queries.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    apply_drift, one_way_delay, received_power_oneway, ChannelError, ChannelParams, Dbm, DriftModel,
};
use crate::detector::{mean_amplitude_from_power, DetectorParams};
use crate::search::{
    echo_amplitude, locate_leading_edge, noise_floor, scan_gates, search_echo, Echo, SearchError,
    SearchParams,
};
use crate::timing::{Picos, TimingGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StationName {
    Alice,
    Bob,
}

impl StationName {
    fn index(self) -> usize {
        match self {
            StationName::Alice => 0,
            StationName::Bob => 1,
        }
    }
}

impl fmt::Display for StationName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StationName::Alice => "alice",
            StationName::Bob => "bob",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationConfig {
    pub name: StationName,
    pub channel: ChannelParams,
    pub launch_power: Dbm,
    /// Delay applied to laser activation, in `[0, period)`.
    pub laser_activation_offset: Picos,
    pub period: Picos,
}

impl StationConfig {
    pub fn new(
        name: StationName,
        channel: ChannelParams,
        launch_power: Dbm,
        period: Picos,
    ) -> Self {
        StationConfig {
            name,
            channel,
            launch_power,
            laser_activation_offset: Picos::ZERO,
            period,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        self.channel.validate()?;
        let o = self.laser_activation_offset;
        if o.0 < 0 || o >= self.period {
            return Err(ProtocolError::InvalidParameter {
                name: "laser_activation_offset",
                value: o.0,
            });
        }
        Ok(())
    }
}

/// How the final interference test judges a residual misalignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InterferenceGate {
    /// Passes iff `|residual| <= tolerance`.
    Tolerance,
    /// Passes iff `exp(-r^2 / 2 sigma_c^2) >= threshold`.
    Visibility { coherence_ps: f64, threshold: f64 },
}

impl InterferenceGate {
    pub fn passes(&self, residual: Picos, tolerance: Picos) -> bool {
        match *self {
            InterferenceGate::Tolerance => interference_check(residual, tolerance),
            InterferenceGate::Visibility {
                coherence_ps,
                threshold,
            } => {
                let r = residual.0 as f64;
                (-r * r / (2.0 * coherence_ps * coherence_ps)).exp() >= threshold
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharlieConfig {
    /// SPD activation delay after beam-splitter arrival; equal arms assumed.
    pub internal_delay: Picos,
    pub gate_width: Picos,
    /// Half-width of the gating scan around the provisional gate.
    pub gating_span: Picos,
    pub fine_adjust_span: Picos,
    pub fine_adjust_step: Picos,
    pub interference_tolerance: Picos,
    pub interference_gate: InterferenceGate,
    /// Polls per gate during the alternating-output verification.
    pub verify_polls: u32,
    pub verify_rounds: u32,
    /// Station that receives DeltaReport and shifts its laser.
    pub compensating: StationName,
    /// Fixed one-way latency of the classical channel.
    pub classical_latency: Picos,
}

impl Default for CharlieConfig {
    fn default() -> Self {
        CharlieConfig {
            internal_delay: Picos::ZERO,
            gate_width: Picos(10),
            gating_span: Picos::from_ns(2),
            fine_adjust_span: Picos(60),
            fine_adjust_step: Picos(10),
            interference_tolerance: Picos(10),
            interference_gate: InterferenceGate::Tolerance,
            verify_polls: 10,
            verify_rounds: 3,
            compensating: StationName::Bob,
            classical_latency: Picos::ZERO,
        }
    }
}

impl CharlieConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |name, value| Err(ProtocolError::InvalidParameter { name, value });
        if self.internal_delay.0 < 0 {
            return bad("internal_delay", self.internal_delay.0);
        }
        if self.gate_width.0 <= 0 {
            return bad("gate_width", self.gate_width.0);
        }
        if self.gating_span.0 <= 0 || self.gating_span.0 % self.gate_width.0 != 0 {
            return bad("gating_span", self.gating_span.0);
        }
        if self.fine_adjust_span.0 < 0 {
            return bad("fine_adjust_span", self.fine_adjust_span.0);
        }
        if self.fine_adjust_step.0 <= 0 {
            return bad("fine_adjust_step", self.fine_adjust_step.0);
        }
        if self.interference_tolerance.0 <= 0 {
            return bad("interference_tolerance", self.interference_tolerance.0);
        }
        if self.verify_polls == 0 {
            return bad("verify_polls", 0);
        }
        if self.classical_latency.0 < 0 {
            return bad("classical_latency", self.classical_latency.0);
        }
        if let InterferenceGate::Visibility {
            coherence_ps,
            threshold,
        } = self.interference_gate
        {
            if !(coherence_ps > 0.0) || !(threshold > 0.0 && threshold <= 1.0) {
                return bad("interference_gate", 0);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    PeriodReport,
    ActivateSpd,
    DeltaReport,
    AdjustCommand,
    InterferenceResult,
    Recalibrate,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::PeriodReport => "PeriodReport",
            MessageKind::ActivateSpd => "ActivateSPD",
            MessageKind::DeltaReport => "DeltaReport",
            MessageKind::AdjustCommand => "AdjustCommand",
            MessageKind::InterferenceResult => "InterferenceResult",
            MessageKind::Recalibrate => "Recalibrate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    Duration(Picos),
    Verdict(bool),
    Count(u32),
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::Duration(p) => write!(f, "{}", p.0),
            Payload::Verdict(true) => f.write_str("ok"),
            Payload::Verdict(false) => f.write_str("fail"),
            Payload::Count(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncMessage {
    pub kind: MessageKind,
    pub payload: Payload,
}

impl SyncMessage {
    fn duration(kind: MessageKind, value: Picos) -> Self {
        SyncMessage {
            kind,
            payload: Payload::Duration(value),
        }
    }
}

/// Ordered record of every classical message of a run. One line per
/// message: `index kind payload`, with durations in integer picoseconds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub messages: Vec<SyncMessage>,
}

impl Transcript {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn last(&self) -> Option<&SyncMessage> {
        self.messages.last()
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, m) in self.messages.iter().enumerate() {
            writeln!(f, "{i} {} {}", m.kind.as_str(), m.payload)?;
        }
        Ok(())
    }
}

impl FromStr for Transcript {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut messages = Vec::new();
        for (line_no, line) in s.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || ProtocolError::Transcript {
                line: line_no + 1,
                text: line.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [index, kind, payload] = fields[..] else {
                return Err(bad());
            };
            if index.parse::<usize>().ok() != Some(messages.len()) {
                return Err(bad());
            }
            let kind = match kind {
                "PeriodReport" => MessageKind::PeriodReport,
                "ActivateSPD" => MessageKind::ActivateSpd,
                "DeltaReport" => MessageKind::DeltaReport,
                "AdjustCommand" => MessageKind::AdjustCommand,
                "InterferenceResult" => MessageKind::InterferenceResult,
                "Recalibrate" => MessageKind::Recalibrate,
                _ => return Err(bad()),
            };
            let payload = match kind {
                MessageKind::InterferenceResult => match payload {
                    "ok" => Payload::Verdict(true),
                    "fail" => Payload::Verdict(false),
                    _ => return Err(bad()),
                },
                MessageKind::Recalibrate => Payload::Count(payload.parse().map_err(|_| bad())?),
                _ => Payload::Duration(Picos(payload.parse().map_err(|_| bad())?)),
            };
            messages.push(SyncMessage { kind, payload });
        }
        Ok(Transcript { messages })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SyncOutcome {
    /// Measured arrival phases at Charlie's detector.
    pub t_alice: Picos,
    pub t_bob: Picos,
    /// Signed arrival difference, positive when Bob arrives later.
    pub delta: Picos,
    /// Final true misalignment, Bob minus Alice.
    pub residual_offset: Picos,
    pub interference_ok: bool,
    pub recalibrations: u32,
    pub messages_exchanged: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncRun {
    pub outcome: SyncOutcome,
    pub transcript: Transcript,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("period mismatch: alice {alice}, bob {bob}, grid {grid}")]
    PeriodMismatch {
        alice: Picos,
        bob: Picos,
        grid: Picos,
    },
    #[error("invalid protocol parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: i64 },
    #[error("fine adjustment found no passing offset")]
    FineAdjustFailed,
    #[error("alternating-output verification did not converge")]
    VerificationFailed,
    #[error("synchronization failed after {} recalibrations", .0.outcome.recalibrations)]
    SyncFailed(Box<SyncRun>),
    #[error("malformed transcript line {line}: {text:?}")]
    Transcript { line: usize, text: String },
    #[error("replay diverged at message {index}")]
    ReplayDiverged { index: usize },
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Signed minimal phase difference `t_bob - t_alice`, in `[-T/2, T/2)`.
pub fn compute_delta(t_alice: Picos, t_bob: Picos, period: Picos) -> Picos {
    t_bob.circular_diff(t_alice, period)
}

/// Shifts the station's laser activation `delta` earlier, modulo the period.
pub fn apply_compensation(station: StationConfig, delta: Picos) -> StationConfig {
    StationConfig {
        laser_activation_offset: (station.laser_activation_offset - delta).phase(station.period),
        ..station
    }
}

/// Tolerance gate on the residual misalignment, boundary inclusive.
pub fn interference_check(residual: Picos, tolerance: Picos) -> bool {
    residual.abs() <= tolerance
}

/// Scans offsets outward from zero (0, +step, -step, +2 step, ...) within
/// `±span` and returns the first one the oracle accepts.
pub fn fine_adjust(
    mut passes: impl FnMut(Picos) -> bool,
    span: Picos,
    step: Picos,
) -> Result<Picos, ProtocolError> {
    if passes(Picos::ZERO) {
        return Ok(Picos::ZERO);
    }
    let mut k = step;
    while k <= span && step.0 > 0 {
        for o in [k, -k] {
            if passes(o) {
                return Ok(o);
            }
        }
        k += step;
    }
    Err(ProtocolError::FineAdjustFailed)
}

/// Charlie's cyclic adjustment: polls 10 ps gates across `±gating_span`
/// around the provisional gate and returns the arrival phase of the pulse's
/// leading edge. An edge at the very first gate is not bracketed by the scan
/// and is reported as ambiguous.
#[allow(clippy::too_many_arguments)]
pub fn charlie_gating_adjust<R: Rng + ?Sized>(
    reported_period: Picos,
    provisional_gate: Picos,
    echo: &Echo,
    grid: &TimingGrid,
    detector: &DetectorParams,
    charlie: &CharlieConfig,
    polls: u32,
    rng: &mut R,
) -> Result<Picos, ProtocolError> {
    if reported_period != grid.period() {
        return Err(ProtocolError::PeriodMismatch {
            alice: reported_period,
            bob: reported_period,
            grid: grid.period(),
        });
    }
    let step = charlie.gate_width;
    let positions = (2 * charlie.gating_span.0 / step.0 + 1) as usize;
    let start = provisional_gate - charlie.gating_span;
    let counts = scan_gates(echo, start, step, step, positions, detector, polls, rng);
    let floor = noise_floor(detector.false_alarm(), polls, positions);
    let edge = locate_leading_edge(&counts, floor)?;
    if edge == 0 {
        return Err(SearchError::Ambiguous {
            max_count: counts[0],
            floor,
        }
        .into());
    }
    Ok((start + step * edge as i64).phase(grid.period()))
}

/// Simulated ground truth: fiber delays, drift, the stations' current laser
/// offsets, and the state of each mirror output.
#[derive(Debug, Clone)]
pub struct World {
    grid: TimingGrid,
    channels: [ChannelParams; 2],
    launch: [Dbm; 2],
    offsets: [Picos; 2],
    mirror_open: [bool; 2],
    drift: DriftModel,
    internal_delay: Picos,
    /// Logical time since the start of the run.
    pub clock: Picos,
}

impl World {
    pub fn new(
        alice: &StationConfig,
        bob: &StationConfig,
        grid: &TimingGrid,
        drift: DriftModel,
        internal_delay: Picos,
    ) -> Self {
        World {
            grid: *grid,
            channels: [alice.channel, bob.channel],
            launch: [alice.launch_power, bob.launch_power],
            offsets: [alice.laser_activation_offset, bob.laser_activation_offset],
            mirror_open: [true; 2],
            drift,
            internal_delay,
            clock: Picos::ZERO,
        }
    }

    fn drift_for(&self, s: StationName) -> DriftModel {
        match s {
            StationName::Alice => DriftModel {
                linear_rate_ps_per_s: 0.0,
                ..self.drift
            },
            StationName::Bob => self.drift,
        }
    }

    /// One-way fiber delay of a station at the current logical time. Linear
    /// drift acts on Bob's fiber, so it shows up as inter-station skew;
    /// jitter acts on both.
    pub fn fiber_delay<R: Rng + ?Sized>(&self, s: StationName, rng: &mut R) -> Picos {
        let base = one_way_delay(&self.channels[s.index()]);
        apply_drift(base, self.clock, &self.drift_for(s), rng)
    }

    /// Beam-splitter arrival phase of a station's pulses.
    pub fn arrival<R: Rng + ?Sized>(&self, s: StationName, rng: &mut R) -> Picos {
        (self.offsets[s.index()] + self.fiber_delay(s, rng)).phase(self.grid.period())
    }

    /// Arrival phase without jitter, used to score outcomes.
    pub fn mean_arrival(&self, s: StationName) -> Picos {
        let model = self.drift_for(s);
        let base = one_way_delay(&self.channels[s.index()]).0 as f64;
        let drifted = base + model.linear_rate_ps_per_s * self.clock.as_secs_f64();
        let delay = Picos((drifted.round() as i64).max(0));
        (self.offsets[s.index()] + delay).phase(self.grid.period())
    }

    /// Echo seen by the station's own photodetector, relative to its emission.
    pub fn ranging_echo<R: Rng + ?Sized>(
        &self,
        s: StationName,
        detector: &DetectorParams,
        rng: &mut R,
    ) -> Result<Echo, ProtocolError> {
        let mut channel = self.channels[s.index()];
        if !self.mirror_open[s.index()] {
            channel.mirror_reflectivity = 0.0;
        }
        let amplitude = echo_amplitude(&channel, self.launch[s.index()], detector)?;
        let rtt = self.fiber_delay(s, rng) * 2;
        Ok(Echo::new(rtt, &self.grid, amplitude))
    }

    /// Pulse train at Charlie's detector, internal delay included.
    pub fn charlie_echo<R: Rng + ?Sized>(
        &self,
        s: StationName,
        detector: &DetectorParams,
        rng: &mut R,
    ) -> Result<Echo, ProtocolError> {
        let power = received_power_oneway(self.launch[s.index()], &self.channels[s.index()])?;
        let amplitude = mean_amplitude_from_power(power, detector);
        let t = self.arrival(s, rng) + self.internal_delay;
        Ok(Echo::new(t, &self.grid, amplitude))
    }

    pub fn set_offset(&mut self, s: StationName, offset: Picos) {
        self.offsets[s.index()] = offset;
    }

    pub fn set_mirror(&mut self, s: StationName, open: bool) {
        self.mirror_open[s.index()] = open;
    }

    /// True misalignment at the beam splitter, Bob minus Alice.
    pub fn residual(&self) -> Picos {
        compute_delta(
            self.mean_arrival(StationName::Alice),
            self.mean_arrival(StationName::Bob),
            self.grid.period(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncParams {
    /// Polls per subinterval for ranging and per gate for Charlie's scan.
    pub polls: u32,
    pub max_periods: u64,
    pub max_recalibrations: u32,
    /// Logical time between protocol stages, during which drift acts.
    pub stage_gap: Picos,
}

impl SyncParams {
    pub fn new(polls: u32) -> Self {
        SyncParams {
            polls,
            max_periods: 4,
            max_recalibrations: 3,
            stage_gap: Picos::ZERO,
        }
    }
}

/// Logical sequencing of one run: the world, both stations, and the
/// classical channel transcript.
struct Session<'a, R: Rng + ?Sized> {
    world: World,
    stations: [StationConfig; 2],
    charlie: &'a CharlieConfig,
    grid: &'a TimingGrid,
    detector: &'a DetectorParams,
    params: &'a SyncParams,
    transcript: Transcript,
    rng: &'a mut R,
}

enum Attempt {
    Synced(SyncOutcome),
    Failed(SyncOutcome),
}

impl<R: Rng + ?Sized> Session<'_, R> {
    fn send(&mut self, message: SyncMessage) {
        self.transcript.messages.push(message);
        self.world.clock += self.charlie.classical_latency;
    }

    fn advance(&mut self) {
        self.world.clock += self.params.stage_gap;
    }

    fn set_offset(&mut self, s: StationName, station: StationConfig) {
        self.stations[s.index()] = station;
        self.world.set_offset(s, station.laser_activation_offset);
    }

    /// Blocks 1-8 for one station: ranging, period report, SPD activation,
    /// and Charlie's gating scan. Returns Charlie's arrival estimate.
    fn calibrate_station(&mut self, s: StationName) -> Result<Picos, ProtocolError> {
        let station = self.stations[s.index()];
        let search = SearchParams {
            polls: self.params.polls,
            max_periods: self.params.max_periods,
        };
        let echo = self.world.ranging_echo(s, self.detector, self.rng)?;
        let ranging = search_echo(&echo, self.grid, self.detector, &search, self.rng);
        self.advance();
        let tau = Picos(ranging?.round_trip_estimate.0 / 2);
        self.send(SyncMessage::duration(
            MessageKind::PeriodReport,
            station.period,
        ));
        self.send(SyncMessage::duration(MessageKind::ActivateSpd, tau));
        let provisional = station.laser_activation_offset + tau + self.charlie.internal_delay;
        let echo = self.world.charlie_echo(s, self.detector, self.rng)?;
        let arrival = charlie_gating_adjust(
            station.period,
            provisional,
            &echo,
            self.grid,
            self.detector,
            self.charlie,
            self.params.polls,
            self.rng,
        );
        self.world.set_mirror(s, false);
        self.advance();
        arrival
    }

    fn remeasure(&mut self, s: StationName, provisional: Picos) -> Result<Picos, ProtocolError> {
        let echo = self.world.charlie_echo(s, self.detector, self.rng)?;
        charlie_gating_adjust(
            self.grid.period(),
            provisional,
            &echo,
            self.grid,
            self.detector,
            self.charlie,
            self.charlie.verify_polls,
            self.rng,
        )
    }

    /// DeltaReport to the compensating station, which shifts its laser.
    fn compensate(&mut self, delta: Picos) {
        self.send(SyncMessage::duration(MessageKind::DeltaReport, delta));
        let s = self.charlie.compensating;
        let signed = match s {
            StationName::Bob => delta,
            StationName::Alice => -delta,
        };
        let updated = apply_compensation(self.stations[s.index()], signed);
        self.set_offset(s, updated);
    }

    fn attempt(&mut self, outcome: &mut SyncOutcome) -> Result<(), ProtocolError> {
        let period = self.grid.period();
        self.world.set_mirror(StationName::Alice, true);
        self.world.set_mirror(StationName::Bob, true);
        let t_alice = self.calibrate_station(StationName::Alice)?;
        outcome.t_alice = t_alice;
        let t_bob = self.calibrate_station(StationName::Bob)?;
        outcome.t_bob = t_bob;
        let delta = compute_delta(t_alice, t_bob, period);
        outcome.delta = delta;
        self.compensate(delta);
        self.advance();

        // Alternating outputs: each source alone, both on Alice's gate lattice.
        let mut verified = false;
        for _ in 0..self.charlie.verify_rounds {
            let a = self.remeasure(StationName::Alice, t_alice)?;
            let b = self.remeasure(StationName::Bob, t_alice)?;
            let again = compute_delta(a, b, period);
            if again.abs() <= self.charlie.interference_tolerance {
                verified = true;
                break;
            }
            self.compensate(again);
        }
        if !verified && self.charlie.verify_rounds > 0 {
            return Err(ProtocolError::VerificationFailed);
        }
        self.advance();

        // Both outputs open: interference, with Charlie's fine adjustment.
        let s = self.charlie.compensating;
        let sign = if s == StationName::Bob { 1 } else { -1 };
        let residual = self.world.residual();
        let gate = self.charlie.interference_gate;
        let tol = self.charlie.interference_tolerance;
        let adjust = fine_adjust(
            |o| gate.passes(residual + o, tol),
            self.charlie.fine_adjust_span,
            self.charlie.fine_adjust_step,
        );
        outcome.residual_offset = residual;
        match adjust {
            Ok(o) => {
                if o != Picos::ZERO {
                    self.send(SyncMessage::duration(MessageKind::AdjustCommand, o));
                    let station = self.stations[s.index()];
                    let shifted = apply_compensation(station, o * -sign);
                    self.set_offset(s, shifted);
                }
                outcome.residual_offset = self.world.residual();
                outcome.interference_ok = gate.passes(outcome.residual_offset, tol);
                self.send(SyncMessage {
                    kind: MessageKind::InterferenceResult,
                    payload: Payload::Verdict(outcome.interference_ok),
                });
                Ok(())
            }
            Err(e) => {
                outcome.interference_ok = false;
                self.send(SyncMessage {
                    kind: MessageKind::InterferenceResult,
                    payload: Payload::Verdict(false),
                });
                Err(e)
            }
        }
    }

    fn run(&mut self) -> Attempt {
        let mut recalibrations = 0u32;
        loop {
            let mut outcome = SyncOutcome {
                recalibrations,
                ..SyncOutcome::default()
            };
            let result = self.attempt(&mut outcome);
            outcome.messages_exchanged = self.transcript.len() as u32;
            match result {
                Ok(()) if outcome.interference_ok => return Attempt::Synced(outcome),
                _ if recalibrations >= self.params.max_recalibrations => {
                    return Attempt::Failed(outcome)
                }
                _ => {
                    recalibrations += 1;
                    self.send(SyncMessage {
                        kind: MessageKind::Recalibrate,
                        payload: Payload::Count(recalibrations),
                    });
                    self.advance();
                }
            }
        }
    }
}

/// Runs the full synchronization sequence. Stage failures trigger a
/// Recalibrate and a fresh pass from ranging, up to `max_recalibrations`.
#[allow(clippy::too_many_arguments)]
pub fn run_sync<R: Rng + ?Sized>(
    alice: &StationConfig,
    bob: &StationConfig,
    charlie: &CharlieConfig,
    grid: &TimingGrid,
    detector: &DetectorParams,
    drift: &DriftModel,
    params: &SyncParams,
    rng: &mut R,
) -> Result<SyncRun, ProtocolError> {
    if alice.period != bob.period || alice.period != grid.period() {
        return Err(ProtocolError::PeriodMismatch {
            alice: alice.period,
            bob: bob.period,
            grid: grid.period(),
        });
    }
    if alice.name != StationName::Alice || bob.name != StationName::Bob {
        return Err(ProtocolError::InvalidParameter {
            name: "station name",
            value: 0,
        });
    }
    if params.max_recalibrations == 0 {
        return Err(ProtocolError::InvalidParameter {
            name: "max_recalibrations",
            value: 0,
        });
    }
    alice.validate()?;
    bob.validate()?;
    charlie.validate()?;
    drift.validate()?;
    detector.validate().map_err(SearchError::from)?;
    SearchParams {
        polls: params.polls,
        max_periods: params.max_periods,
    }
    .validate()?;
    for s in [alice, bob] {
        grid.check_round_trip(crate::channel::round_trip_time(&s.channel))
            .map_err(SearchError::from)?;
    }
    let mut session = Session {
        world: World::new(alice, bob, grid, *drift, charlie.internal_delay),
        stations: [*alice, *bob],
        charlie,
        grid,
        detector,
        params,
        transcript: Transcript::default(),
        rng,
    };
    let attempt = session.run();
    let transcript = session.transcript;
    match attempt {
        Attempt::Synced(outcome) => Ok(SyncRun {
            outcome,
            transcript,
        }),
        Attempt::Failed(outcome) => Err(ProtocolError::SyncFailed(Box::new(SyncRun {
            outcome,
            transcript,
        }))),
    }
}

/// Re-executes a run under a freshly seeded stream and checks that it emits
/// the recorded transcript message for message.
#[allow(clippy::too_many_arguments)]
pub fn replay<R: Rng + ?Sized>(
    recorded: &Transcript,
    alice: &StationConfig,
    bob: &StationConfig,
    charlie: &CharlieConfig,
    grid: &TimingGrid,
    detector: &DetectorParams,
    drift: &DriftModel,
    params: &SyncParams,
    rng: &mut R,
) -> Result<SyncOutcome, ProtocolError> {
    let run = match run_sync(alice, bob, charlie, grid, detector, drift, params, rng) {
        Ok(run) => run,
        Err(ProtocolError::SyncFailed(run)) => *run,
        Err(e) => return Err(e),
    };
    let fresh = &run.transcript.messages;
    if let Some(index) =
        (0..recorded.len().max(fresh.len())).find(|&i| recorded.messages.get(i) != fresh.get(i))
    {
        return Err(ProtocolError::ReplayDiverged { index });
    }
    Ok(run.outcome)
}
