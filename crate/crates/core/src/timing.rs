//! Temporal discretization of the pulse repetition period.
//!
//! All durations are carried as integer picoseconds ([`Picos`]). A period is
//! cut into `num_windows` gating windows of `window_width`, and each window is
//! cut into [`SUBINTERVALS_PER_WINDOW`] refinement subintervals.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::SPEED_OF_LIGHT_M_PER_S;

/// Number of refinement subintervals per gating window.
pub const SUBINTERVALS_PER_WINDOW: i64 = 200;

pub const DEFAULT_PULSE_WIDTH: Picos = Picos::from_ns(1);
pub const DEFAULT_WINDOW_WIDTH: Picos = Picos::from_ns(2);
pub const DEFAULT_GUARD: Picos = Picos::from_us(1);

/// A signed duration in whole picoseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Picos(pub i64);

impl Picos {
    pub const ZERO: Picos = Picos(0);

    pub const fn from_ps(ps: i64) -> Self {
        Picos(ps)
    }

    pub const fn from_ns(ns: i64) -> Self {
        Picos(ns * 1_000)
    }

    pub const fn from_us(us: i64) -> Self {
        Picos(us * 1_000_000)
    }

    pub const fn from_ms(ms: i64) -> Self {
        Picos(ms * 1_000_000_000)
    }

    pub const fn from_secs(s: i64) -> Self {
        Picos(s * 1_000_000_000_000)
    }

    pub const fn as_ps(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-12
    }

    pub const fn abs(self) -> Self {
        Picos(self.0.abs())
    }

    /// Phase of `self` within a period, in `[0, period)`.
    pub const fn phase(self, period: Picos) -> Self {
        Picos(self.0.rem_euclid(period.0))
    }

    /// Signed distance from `other` to `self` on a circle of circumference `period`,
    /// in `[-period/2, period/2)`.
    pub fn circular_diff(self, other: Picos, period: Picos) -> Picos {
        let half = period.0 / 2;
        Picos((self.0 - other.0 + half).rem_euclid(period.0) - half)
    }
}

impl fmt::Display for Picos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ps", self.0)
    }
}

impl Add for Picos {
    type Output = Picos;
    fn add(self, rhs: Picos) -> Picos {
        Picos(self.0 + rhs.0)
    }
}

impl Sub for Picos {
    type Output = Picos;
    fn sub(self, rhs: Picos) -> Picos {
        Picos(self.0 - rhs.0)
    }
}

impl Neg for Picos {
    type Output = Picos;
    fn neg(self) -> Picos {
        Picos(-self.0)
    }
}

impl Mul<i64> for Picos {
    type Output = Picos;
    fn mul(self, rhs: i64) -> Picos {
        Picos(self.0 * rhs)
    }
}

impl AddAssign for Picos {
    fn add_assign(&mut self, rhs: Picos) {
        self.0 += rhs.0;
    }
}

impl SubAssign for Picos {
    fn sub_assign(&mut self, rhs: Picos) {
        self.0 -= rhs.0;
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimingError {
    #[error("invalid duration for {name}: {value}")]
    InvalidDuration { name: &'static str, value: Picos },
    #[error("degenerate grid: period {period} holds no window of {window_width}")]
    DegenerateGrid { period: Picos, window_width: Picos },
    #[error("window width {0} is not divisible into {SUBINTERVALS_PER_WINDOW} whole-picosecond subintervals")]
    IndivisibleWindow(Picos),
    #[error("pulse width {pulse} exceeds window width {window}")]
    PulseWiderThanWindow { pulse: Picos, window: Picos },
    #[error("invalid parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("offset {offset} outside the window grid of period {period}")]
    OutOfRange { offset: Picos, period: Picos },
    #[error("period {period} does not exceed the round-trip time {round_trip}")]
    PeriodTooShort { period: Picos, round_trip: Picos },
}

/// Number of whole windows in a period: `floor(period / window_width)`.
pub fn num_windows(period: Picos, window_width: Picos) -> Result<u64, TimingError> {
    if period.0 <= 0 {
        return Err(TimingError::InvalidDuration {
            name: "period",
            value: period,
        });
    }
    if window_width.0 <= 0 {
        return Err(TimingError::InvalidDuration {
            name: "window_width",
            value: window_width,
        });
    }
    let n = period.0 / window_width.0;
    if n == 0 {
        return Err(TimingError::DegenerateGrid {
            period,
            window_width,
        });
    }
    Ok(n as u64)
}

/// Smallest multiple of the default window width that is at least the round trip
/// over `max_length_km` plus `guard`, and strictly longer than the round trip.
pub fn choose_period(
    max_length_km: f64,
    group_index: f64,
    guard: Picos,
) -> Result<Picos, TimingError> {
    choose_period_for_window(max_length_km, group_index, guard, DEFAULT_WINDOW_WIDTH)
}

pub fn choose_period_for_window(
    max_length_km: f64,
    group_index: f64,
    guard: Picos,
    window_width: Picos,
) -> Result<Picos, TimingError> {
    if !(max_length_km > 0.0) || !max_length_km.is_finite() {
        return Err(TimingError::InvalidParameter {
            name: "max_length_km",
            value: max_length_km,
        });
    }
    if !(group_index >= 1.0) || !group_index.is_finite() {
        return Err(TimingError::InvalidParameter {
            name: "group_index",
            value: group_index,
        });
    }
    if guard.0 < 0 {
        return Err(TimingError::InvalidDuration {
            name: "guard",
            value: guard,
        });
    }
    if window_width.0 <= 0 {
        return Err(TimingError::InvalidDuration {
            name: "window_width",
            value: window_width,
        });
    }
    // Unrounded round trip in ps: 2 * L[m] * n / c * 1e12.
    let round_trip = 2.0 * max_length_km * 1e3 * group_index / SPEED_OF_LIGHT_M_PER_S * 1e12;
    let need = round_trip + guard.0 as f64;
    let w = window_width.0 as f64;
    let mut windows = (need / w).ceil() as i64;
    if (windows * window_width.0) as f64 <= round_trip {
        windows += 1;
    }
    Ok(window_width * windows.max(1))
}

/// The period/window/subinterval lattice shared by every stage of a search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingGrid {
    period: Picos,
    pulse_width: Picos,
    window_width: Picos,
    subinterval_width: Picos,
    num_windows: u64,
}

impl TimingGrid {
    pub fn new(
        period: Picos,
        pulse_width: Picos,
        window_width: Picos,
    ) -> Result<Self, TimingError> {
        if pulse_width.0 <= 0 {
            return Err(TimingError::InvalidDuration {
                name: "pulse_width",
                value: pulse_width,
            });
        }
        let num_windows = num_windows(period, window_width)?;
        if window_width.0 % SUBINTERVALS_PER_WINDOW != 0 {
            return Err(TimingError::IndivisibleWindow(window_width));
        }
        if pulse_width > window_width {
            return Err(TimingError::PulseWiderThanWindow {
                pulse: pulse_width,
                window: window_width,
            });
        }
        Ok(TimingGrid {
            period,
            pulse_width,
            window_width,
            subinterval_width: Picos(window_width.0 / SUBINTERVALS_PER_WINDOW),
            num_windows,
        })
    }

    /// Grid with the default 1 ns pulse and 2 ns window.
    pub fn with_period(period: Picos) -> Result<Self, TimingError> {
        Self::new(period, DEFAULT_PULSE_WIDTH, DEFAULT_WINDOW_WIDTH)
    }

    pub fn period(&self) -> Picos {
        self.period
    }

    pub fn pulse_width(&self) -> Picos {
        self.pulse_width
    }

    pub fn window_width(&self) -> Picos {
        self.window_width
    }

    pub fn subinterval_width(&self) -> Picos {
        self.subinterval_width
    }

    pub fn num_windows(&self) -> u64 {
        self.num_windows
    }

    pub fn window_start(&self, window: u64) -> Picos {
        self.window_width * window as i64
    }

    /// Fails unless the period is long enough that the echo of one pulse cannot
    /// overlap the next emission.
    pub fn check_round_trip(&self, round_trip: Picos) -> Result<(), TimingError> {
        if self.period <= round_trip {
            return Err(TimingError::PeriodTooShort {
                period: self.period,
                round_trip,
            });
        }
        Ok(())
    }

    /// Reconstructs the offset of the start of `(window, subinterval)`.
    pub fn offset_of(&self, window: u64, subinterval: u32) -> Picos {
        self.window_start(window) + self.subinterval_width * subinterval as i64
    }
}

/// Zero-based `(window, subinterval)` containing `offset`.
pub fn window_of_offset(offset: Picos, grid: &TimingGrid) -> Result<(u64, u32), TimingError> {
    let covered = grid.window_width * grid.num_windows as i64;
    if offset.0 < 0 || offset >= grid.period || offset >= covered {
        return Err(TimingError::OutOfRange {
            offset,
            period: grid.period,
        });
    }
    let window = offset.0 / grid.window_width.0;
    let sub = (offset.0 % grid.window_width.0) / grid.subinterval_width.0;
    Ok((window as u64, sub as u32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn num_windows_examples() {
        assert_eq!(
            num_windows(Picos::from_ms(1), Picos::from_ns(2)).unwrap(),
            500_000
        );
        assert_eq!(
            num_windows(Picos::from_ns(2), Picos::from_ns(2)).unwrap(),
            1
        );
        assert_eq!(
            num_windows(Picos::from_ms(1) + Picos::from_ns(1), Picos::from_ns(2)).unwrap(),
            500_000
        );
    }

    #[test]
    fn num_windows_errors() {
        assert!(matches!(
            num_windows(Picos(0), Picos(2000)),
            Err(TimingError::InvalidDuration { .. })
        ));
        assert!(matches!(
            num_windows(Picos(2000), Picos(-1)),
            Err(TimingError::InvalidDuration { .. })
        ));
        assert!(matches!(
            num_windows(Picos(1999), Picos(2000)),
            Err(TimingError::DegenerateGrid { .. })
        ));
    }

    // Expected periods come from mpmath at 50 digits:
    //   2 * 1e5 m * 1.468 / c = 979_344_183.50 ps
    //   2 * 0.3 m * 1.0  / c =       2_001.38 ps
    //   2 * 5e4 m * 1.468 / c = 489_672_091.75 ps
    #[test]
    fn choose_period_examples() {
        assert_eq!(
            choose_period(100.0, 1.468, Picos::ZERO).unwrap(),
            Picos(979_346_000)
        );
        assert_eq!(
            choose_period(0.0003, 1.0, Picos::ZERO).unwrap(),
            Picos(4_000)
        );
        assert_eq!(
            choose_period(50.0, 1.468, Picos::from_us(10)).unwrap(),
            Picos(499_674_000)
        );
    }

    #[test]
    fn choose_period_rejects_bad_input() {
        assert!(choose_period(0.0, 1.468, Picos::ZERO).is_err());
        assert!(choose_period(-3.0, 1.468, Picos::ZERO).is_err());
        assert!(choose_period(10.0, 0.9, Picos::ZERO).is_err());
        assert!(choose_period(10.0, 1.468, Picos(-1)).is_err());
    }

    #[test]
    fn window_of_offset_examples() {
        let grid = TimingGrid::with_period(Picos::from_us(1)).unwrap();
        assert_eq!(window_of_offset(Picos(0), &grid).unwrap(), (0, 0));
        assert_eq!(
            window_of_offset(Picos::from_ns(2) + Picos(10), &grid).unwrap(),
            (1, 1)
        );
        assert_eq!(
            window_of_offset(Picos::from_ns(4) - Picos(1), &grid).unwrap(),
            (1, 199)
        );
        assert!(window_of_offset(Picos::from_us(1), &grid).is_err());
        assert!(window_of_offset(Picos(-1), &grid).is_err());
    }

    #[test]
    fn grid_invariants() {
        let grid = TimingGrid::with_period(Picos::from_ms(1)).unwrap();
        assert_eq!(grid.subinterval_width(), Picos(10));
        assert_eq!(grid.subinterval_width().0 * 200, grid.window_width().0);
        assert!(grid.period().0 >= grid.num_windows() as i64 * grid.window_width().0);
        assert!(TimingGrid::new(Picos::from_us(1), Picos(3000), Picos(2000)).is_err());
        assert!(matches!(
            TimingGrid::new(Picos::from_us(1), Picos(100), Picos(2001)),
            Err(TimingError::IndivisibleWindow(_))
        ));
    }

    #[test]
    fn circular_diff_wraps() {
        let t = Picos(1_000_000);
        assert_eq!(Picos(10).circular_diff(Picos(999_990), t), Picos(20));
        assert_eq!(Picos(999_990).circular_diff(Picos(10), t), Picos(-20));
        assert_eq!(Picos(350).circular_diff(Picos(100), t), Picos(250));
    }

    proptest! {
        #[test]
        fn offset_round_trips_within_one_subinterval(ps in 0i64..1_000_000_000) {
            let grid = TimingGrid::with_period(Picos::from_ms(1)).unwrap();
            let (w, s) = window_of_offset(Picos(ps), &grid).unwrap();
            let back = grid.offset_of(w, s);
            prop_assert!(back <= Picos(ps));
            prop_assert!(Picos(ps) - back < grid.subinterval_width());
        }

        #[test]
        fn window_of_offset_is_monotone(a in 0i64..1_000_000_000, b in 0i64..1_000_000_000) {
            let grid = TimingGrid::with_period(Picos::from_ms(1)).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(window_of_offset(Picos(lo), &grid).unwrap()
                <= window_of_offset(Picos(hi), &grid).unwrap());
        }

        #[test]
        fn chosen_period_exceeds_round_trip(
            len in 0.001f64..200.0,
            n in 1.0f64..2.0,
            guard in 0i64..10_000_000,
        ) {
            let p = choose_period(len, n, Picos(guard)).unwrap();
            let rt = 2.0 * len * 1e3 * n / SPEED_OF_LIGHT_M_PER_S * 1e12;
            prop_assert!(p.0 as f64 > rt);
            prop_assert!(p.0 as f64 >= rt + guard as f64);
            prop_assert_eq!(p.0 % 2000, 0);
            prop_assert!(((p.0 - 2000) as f64) < rt + guard as f64 || (p.0 - 2000) as f64 <= rt);
        }

        #[test]
        fn picos_seconds_round_trip(ps in -1_000_000_000_000i64..1_000_000_000_000) {
            let s = Picos(ps).as_secs_f64();
            prop_assert_eq!((s * 1e12).round() as i64, ps);
        }
    }
}
