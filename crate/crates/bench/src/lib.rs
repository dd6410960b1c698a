//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use uavtype_core::features::{assemble_features, RawSeries};
use uavtype_core::synth::{generate_flight, write_ulog, SynthSpec};
use uavtype_core::{FeatureSubset, VehicleType};

/// Encoded log of a synthetic flight of `duration_s` seconds at 5 Hz.
pub fn flight_bytes(duration_s: f64) -> Vec<u8> {
    let spec = SynthSpec {
        duration_s: Some(duration_s),
        ..SynthSpec::new(VehicleType::Quadrotor, 1)
    };
    write_ulog(&generate_flight(&spec).expect("valid spec")).expect("encodable")
}

/// Baseline feature series of a synthetic flight.
pub fn flight_series(duration_s: f64) -> Vec<RawSeries> {
    let spec = SynthSpec {
        duration_s: Some(duration_s),
        ..SynthSpec::new(VehicleType::FixedWing, 2)
    };
    let log = generate_flight(&spec).expect("valid spec");
    assemble_features(&log, &FeatureSubset::baseline()).expect("baseline features present")
}

/// `batch` deterministic `[steps × features]` inputs.
pub fn inputs(batch: usize, steps: usize, features: usize) -> Vec<Array2<f64>> {
    (0..batch)
        .map(|b| Array2::from_shape_fn((steps, features), |(t, f)| ((b * 31 + t * 7 + f * 3) % 17) as f64 / 8.0 - 1.0))
        .collect()
}
