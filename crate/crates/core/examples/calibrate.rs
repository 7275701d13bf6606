//! Finds the detector gain at which the 100 km / -17.7 dBm full search just
//! reaches the target success rate, then reports what that gain implies for
//! the minimal poll count at -15 dBm.
//!
//! cargo run --release --example calibrate -- [polls] [target] [trials]

use picosync::channel::{ChannelParams, DriftModel};
use picosync::detector::DetectorParams;
use picosync::experiments::{
    calibrate_gain, sweep_power, sweep_sample_size, ExperimentKind, ExperimentSpec, Polls, Scenario,
};
use picosync::timing::{choose_period, TimingGrid, DEFAULT_GUARD};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let polls: u32 = args.first().map_or(10_000, |s| s.parse().expect("polls"));
    let target: f64 = args.get(1).map_or(0.993, |s| s.parse().expect("target"));
    let trials: u32 = args.get(2).map_or(20_000, |s| s.parse().expect("trials"));

    let period = choose_period(100.0, 1.468, DEFAULT_GUARD).expect("period");
    let scenario = Scenario {
        grid: TimingGrid::with_period(period).expect("grid"),
        channel: ChannelParams::default(),
        detector: DetectorParams::default(),
        drift: DriftModel::default(),
        max_periods: 4,
    };
    let gain = calibrate_gain(
        &scenario,
        100.0,
        -17.7,
        polls,
        target,
        trials,
        0xCA11,
        (1e11, 1e15),
        0.002,
    )
    .expect("calibration");
    println!("gain = {gain:.6e}");

    let calibrated = Scenario {
        detector: DetectorParams {
            gain,
            ..scenario.detector
        },
        ..scenario
    };
    let check = ExperimentSpec {
        kind: ExperimentKind::PowerSweep,
        lengths: vec![50.0, 100.0],
        powers: vec![-17.7, -15.0, -10.0],
        trials: 10_000,
        polls: Polls::Fixed(polls),
        seed: 1,
        target_probability: 0.99,
    };
    for r in sweep_power(&check, &calibrated).expect("sweep") {
        println!(
            "{:>5} km {:>6} dBm  {:.4} ± {:.4}",
            r.length_km, r.power_dbm, r.estimate, r.stderr
        );
    }
    let samples = ExperimentSpec {
        kind: ExperimentKind::SampleSizeSweep,
        lengths: vec![1.0, 10.0, 25.0, 50.0, 75.0, 100.0],
        powers: vec![-15.0],
        polls: Polls::Auto,
        trials: 1000,
        ..check
    };
    let report = sweep_sample_size(&samples, &calibrated).expect("sample sweep");
    for (r, c) in report.refinement.iter().zip(&report.coarse) {
        println!(
            "{:>5} km  minimal polls {:>5}  coarse {:.4}",
            r.length_km, r.polls, c.estimate
        );
    }
}
