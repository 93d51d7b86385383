use homtom_core::calibration::*;
use homtom_core::kernels::KernelEvaluator;
use homtom_core::quadrature::integrate_real;
use homtom_core::states::{DetectorModel, FockDensityMatrix, QuadratureDensity};
use homtom_core::TomoError;
use nalgebra::DMatrix;
use num_complex::Complex64;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

#[test]
fn series_matches_two_mode_construction() {
    for &eta in &[1.0, 0.8] {
        for &nbar in &[0.0, 1.0] {
            let table = beam_splitter_response(eta, nbar, 4, 8).unwrap();
            for n in 0..=4 {
                for m in 0..8 {
                    let v = theoretical_povm(eta, nbar, n, m).unwrap();
                    assert!(
                        (v - table[n][m]).abs() < 1e-8,
                        "eta={eta} nbar={nbar} n={n} m={m}: {v} vs {}",
                        table[n][m]
                    );
                }
            }
        }
    }
}

#[test]
fn single_entry_oracle_agrees_with_table() {
    let t = beam_splitter_response(0.8, 1.0, 3, 6).unwrap();
    assert!((beam_splitter_povm(0.8, 1.0, 3, 5).unwrap() - t[3][5]).abs() < 1e-15);
}

#[test]
fn invalid_response_parameters() {
    assert!(theoretical_povm(0.0, 0.0, 0, 0).is_err());
    assert!(theoretical_povm(1.2, 0.0, 0, 0).is_err());
    assert!(theoretical_povm(0.8, -1.0, 0, 0).is_err());
}

#[test]
fn faithfulness_examples() {
    for d in [2, 3, 5] {
        let f = faithfulness_check(&BipartiteState::maximally_entangled(d)).unwrap();
        assert!(f.faithful);
        assert!((f.condition_number - 1.0).abs() < 1e-10, "{}", f.condition_number);
    }

    let zero = [c(1.0), c(0.0), c(0.0)];
    let f = faithfulness_check(&BipartiteState::product(&zero, &zero).unwrap()).unwrap();
    assert!(!f.faithful);

    let xi = 0.88;
    let tb = TwinBeam { xi: c(xi), truncation: 12 };
    let f = faithfulness_check(&tb.state()).unwrap();
    assert!(f.faithful);
    let expected = xi.powi(-2 * 11);
    assert!((f.condition_number / expected - 1.0).abs() < 1e-8, "{} vs {expected}", f.condition_number);

    let full = TwinBeam::new(c(xi), None).unwrap();
    assert_eq!(full.truncation, 28);
    assert!(faithfulness_check(&full.state()).unwrap().faithful);
}

#[test]
fn faithfulness_rejects_oversized_inputs() {
    let tb = TwinBeam { xi: c(0.5), truncation: 40 };
    assert!(matches!(faithfulness_check(&tb.state()), Err(TomoError::InvalidParameter(_))));
}

#[test]
fn bipartite_validation() {
    let bad = DMatrix::from_diagonal_element(4, 4, c(0.5));
    assert!(BipartiteState::new(2, 2, bad).is_err());
    let neg = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.2), c(-0.2), c(0.0), c(0.0)]));
    assert!(BipartiteState::new(2, 2, neg).is_err());
}

#[test]
fn trace_formula_matches_closed_form_conditionals() {
    let xi = 0.88;
    for trunc in [4, 8, 12] {
        let tb = TwinBeam { xi: c(xi), truncation: trunc };
        let state = tb.state();
        let norm = 1.0 - xi.powi(2 * trunc as i32);
        let table = beam_splitter_response(0.8, 1.0, 5, trunc).unwrap();
        for row in &table {
            let pi = DMatrix::from_fn(trunc, trunc, |i, j| if i == j { c(row[i]) } else { c(0.0) });
            let y = state.conditional(&pi);
            for j in 0..trunc {
                for k in 0..trunc {
                    let want = if j == k { tb.weight(j) * row[j] / norm } else { 0.0 };
                    assert!((y[(j, k)] - c(want)).norm() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn general_inverse_recovers_dense_operator() {
    let d = 3;
    let tb = TwinBeam { xi: Complex64::new(0.5, 0.3), truncation: d };
    let state = tb.state();
    let pi = DMatrix::from_fn(d, d, |i, j| {
        let v = Complex64::new(0.1 * (i + 2 * j) as f64, 0.05 * (i as f64 - j as f64));
        if i == j {
            c(0.2 + 0.1 * i as f64)
        } else {
            v
        }
    });
    let pi = (&pi + pi.adjoint()) * c(0.5);
    let y = state.conditional(&pi);
    let back = inverse_map(&state, &y).unwrap();
    assert!((back - &pi).norm() < 1e-10);

    let zero = [c(1.0), c(0.0)];
    let product = BipartiteState::product(&zero, &zero).unwrap();
    assert!(inverse_map(&product, &DMatrix::identity(2, 2)).is_err());
}

#[test]
fn noiseless_inverse_map_round_trip() {
    let (xi, eta, nbar, eta_h) = (0.88, 0.8, 1.0, 0.9);
    let tb = TwinBeam::new(c(xi), None).unwrap();
    let d = tb.truncation;
    let truth = beam_splitter_response(eta, nbar, 4, d).unwrap();
    let det = DetectorModel::new(eta_h).unwrap();
    for (n, row) in truth.iter().enumerate() {
        let joint: Vec<f64> = (0..d).map(|m| tb.weight(m) * row[m]).collect();
        let p_n: f64 = joint.iter().sum();
        let rho = FockDensityMatrix::diagonal(&joint.iter().map(|v| v / p_n).collect::<Vec<_>>()).unwrap();
        let density = QuadratureDensity::new(&rho, &det);
        let diag: Vec<f64> = (0..8)
            .map(|m| {
                let k = KernelEvaluator::new(m, m, eta_h).unwrap();
                integrate_real(|x| density.pdf(0.0, x) * k.eval(x, 0.0).re, -14.0, 14.0, 1e-13, 1e-12, 4000).unwrap()
            })
            .collect();
        let p = invert_twin_beam_diagonal(p_n, &diag, xi);
        for m in 0..8 {
            let want = row[m] * (1.0 - xi.powi(2 * d as i32)).recip() * (1.0 - xi.powi(2 * d as i32));
            assert!((p[m] - want).abs() < 1e-6, "n={n} m={m}: {} vs {want}", p[m]);
        }
    }
}

#[test]
fn perfect_counter_marginal_is_geometric() {
    let setup = CalibrationSetup { xi: 0.5, eta: 1.0, nbar: 0.0, eta_h: 1.0 };
    let count = 100_000;
    let records = simulate_joint(&setup, count, 7, None).unwrap();
    assert_eq!(records.len(), count);
    for n in 0..4 {
        let freq = records.iter().filter(|r| r.n == n).count() as f64 / count as f64;
        let p = 0.75 * 0.25f64.powi(n as i32);
        let sigma = (p * (1.0 - p) / count as f64).sqrt();
        assert!((freq - p).abs() < 3.0 * sigma, "n={n}: {freq} vs {p}");
    }
}

#[test]
fn vanishing_gain_sees_vacuum() {
    let setup = CalibrationSetup { xi: 0.0, eta: 0.8, nbar: 1.0, eta_h: 1.0 };
    let count = 50_000;
    let records = simulate_joint(&setup, count, 3, None).unwrap();
    let var = records.iter().map(|r| r.x * r.x).sum::<f64>() / count as f64;
    assert!((var - 0.25).abs() < 0.01, "{var}");
    let p0 = theoretical_povm(0.8, 1.0, 0, 0).unwrap();
    let freq = records.iter().filter(|r| r.n == 0).count() as f64 / count as f64;
    assert!((freq - p0).abs() < 3.0 * (p0 * (1.0 - p0) / count as f64).sqrt());
}

#[test]
fn simulation_is_seeded() {
    let setup = CalibrationSetup { xi: 0.7, eta: 0.8, nbar: 1.0, eta_h: 0.9 };
    let a = simulate_joint(&setup, 10_000, 11, None).unwrap();
    let b = simulate_joint(&setup, 10_000, 11, None).unwrap();
    let other = simulate_joint(&setup, 10_000, 12, None).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, other);
}

#[test]
fn simulation_rejects_bad_input() {
    let setup = CalibrationSetup { xi: 0.88, eta: 0.8, nbar: 1.0, eta_h: 0.9 };
    assert!(matches!(simulate_joint(&setup, 10, 0, Some(10)), Err(TomoError::Truncation { .. })));
    assert!(simulate_joint(&CalibrationSetup { xi: 1.0, ..setup }, 10, 0, None).is_err());
    assert!(simulate_joint(&setup, 0, 0, None).is_err());
}

#[test]
fn averaging_checks_its_inputs() {
    let setup = CalibrationSetup { xi: 0.5, eta: 1.0, nbar: 0.0, eta_h: 1.0 };
    let records = simulate_joint(&setup, 2000, 1, None).unwrap();
    assert!(matches!(calibrate_averaging(&records, 0.5, 0.5, 2, 4), Err(TomoError::EfficiencyTooLow { .. })));
    assert!(matches!(calibrate_averaging(&records, 0.5, 1.0, 30, 4), Err(TomoError::EmptyOutcomeBin(_))));
}

#[test]
fn averaging_recovers_perfect_counter() {
    let setup = CalibrationSetup { xi: 0.6, eta: 1.0, nbar: 0.0, eta_h: 1.0 };
    let records = simulate_joint(&setup, 300_000, 5, None).unwrap();
    let povm = calibrate_averaging(&records, 0.6, 1.0, 3, 4).unwrap();
    let err = povm.errors.as_ref().unwrap();
    for n in 0..=3 {
        for m in 0..4 {
            let want = if n == m { 1.0 } else { 0.0 };
            assert!((povm.p[n][m] - want).abs() < 3.5 * err[n][m], "n={n} m={m}: {} ± {}", povm.p[n][m], err[n][m]);
        }
    }
}

#[test]
fn ml_degenerate_detector() {
    let records: Vec<JointRecord> =
        (0..500).map(|i| JointRecord { n: 0, phi: 0.01 * i as f64, x: ((i % 17) as f64 - 8.0) / 10.0 }).collect();
    let (povm, report) = calibrate_ml(&records, 0.5, 0.9, 0, 6, &CalibrationMlConfig::default()).unwrap();
    assert!(report.converged);
    for m in 0..6 {
        assert!((povm.p[0][m] - 1.0).abs() < 1e-9);
        assert!((povm.column_sum(m) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn ml_is_complete_monotone_and_start_independent() {
    let setup = CalibrationSetup { xi: 0.7, eta: 0.8, nbar: 0.5, eta_h: 0.9 };
    let records = simulate_joint(&setup, 20_000, 21, Some(12)).unwrap();
    let mut lls = Vec::new();
    for start in [None, Some(0), Some(1)] {
        let config = CalibrationMlConfig { random_start: start, ..Default::default() };
        let (povm, report) = calibrate_ml(&records, 0.7, 0.9, 4, 8, &config).unwrap();
        assert!(report.converged);
        let em = &report.history[..=report.em_iters];
        assert!(em.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs()));
        for m in 0..8 {
            assert!((povm.column_sum(m) - 1.0).abs() < 1e-9);
            assert!(povm.p.iter().all(|r| r[m] >= -1e-10));
        }
        lls.push(report.loglik);
    }
    for ll in &lls {
        assert!((ll - lls[0]).abs() < 1e-6, "{lls:?}");
    }
}
