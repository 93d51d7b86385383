//! Benchmark fixtures shared by the criterion targets.

use homtom_core::calibration::{simulate_joint, CalibrationSetup, JointRecord};
use homtom_core::{sample_quadratures, DetectorModel, QuadratureSample, StateModel};
use num_complex::Complex64;

pub const SETUP: CalibrationSetup = CalibrationSetup { xi: 0.88, eta: 0.8, nbar: 1.0, eta_h: 0.9 };

pub fn coherent_samples(count: usize, eta: f64) -> Vec<QuadratureSample> {
    let state = StateModel::coherent(Complex64::new(1.0, 0.0));
    sample_quadratures(&state, &DetectorModel::new(eta).expect("valid efficiency"), count, 1).expect("sampling")
}

pub fn joint_records(count: usize) -> Vec<JointRecord> {
    simulate_joint(&SETUP, count, 1, None).expect("simulation")
}
