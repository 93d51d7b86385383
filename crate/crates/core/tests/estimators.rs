use homtom_core::adaptive::{reconstruct_density_matrix_adaptive, FitMode, NullBasis, NullTerm};
use homtom_core::averaging::{bootstrap_std, chi2_normality_check, estimate_expectation, reconstruct_density_matrix};
use homtom_core::{sample_quadratures, DetectorModel, KernelBank, StateModel, TomoError};
use num_complex::Complex64;

#[test]
fn analytic_error_bar_matches_bootstrap() {
    let samples = sample_quadratures(&StateModel::thermal(0.5), &DetectorModel::ideal(), 20_000, 3).unwrap();
    let f = |x: f64, _: f64| Complex64::new(x * x, 0.0);
    let est = estimate_expectation(&samples, f).unwrap();
    // <x²> = (2 nbar + 1) / 4
    assert!((est.mean.re - 0.5).abs() < 3.0 * est.std_error);
    let boot = bootstrap_std(&samples, f, 200, 9).unwrap();
    assert!((boot / est.std_error - 1.0).abs() < 0.15, "{boot} vs {}", est.std_error);
}

#[test]
fn block_normality_is_reported() {
    let samples = sample_quadratures(&StateModel::vacuum(), &DetectorModel::ideal(), 50_000, 4).unwrap();
    let est = reconstruct_density_matrix(&samples, 3, 1.0).unwrap();
    assert!(est.diagonal_chi2.iter().all(|p| p.is_some_and(|p| p > 1e-4)));
    let few = reconstruct_density_matrix(&samples[..150], 3, 1.0).unwrap();
    assert!(few.diagonal_chi2.iter().all(Option::is_none));
    assert!(chi2_normality_check(&[1.0; 10], 20).is_err());
}

#[test]
fn estimate_is_hermitian_and_traced() {
    let state = StateModel::coherent(Complex64::new(0.4, -0.7));
    let samples = sample_quadratures(&state, &DetectorModel::new(0.9).unwrap(), 40_000, 5).unwrap();
    let est = reconstruct_density_matrix(&samples, 6, 0.9).unwrap();
    for n in 0..6 {
        assert_eq!(est.get(n, n).im, 0.0);
        for m in 0..6 {
            assert_eq!(est.get(n, m), est.get(m, n).conj());
            assert_eq!(est.error(n, m), est.error(m, n));
        }
    }
    let trace: f64 = est.diagonal().iter().sum();
    let bar = est.diagonal_errors().iter().map(|e| e * e).sum::<f64>().sqrt();
    assert!((trace - 1.0).abs() < 3.0 * bar + 0.01, "{trace}");
    let (clipped, rho) = est.hermitized_and_clipped().unwrap();
    assert!(clipped.hermitized);
    assert!(rho.min_eigenvalue() >= -1e-12);
    assert!((rho.trace() - 1.0).abs() < 1e-12);
}

#[test]
fn bank_cache_does_not_change_values() {
    let samples = sample_quadratures(&StateModel::fock(1), &DetectorModel::new(0.95).unwrap(), 5000, 6).unwrap();
    let plain = KernelBank::new(4, 0.95).unwrap();
    let cached = KernelBank::new(4, 0.95).unwrap().with_cache(64);
    let a = homtom_core::averaging::reconstruct_with_bank(&samples, &plain).unwrap();
    let b = homtom_core::averaging::reconstruct_with_bank(&samples, &cached).unwrap();
    assert_eq!(a.matrix, b.matrix);
}

#[test]
fn input_checks() {
    let samples = sample_quadratures(&StateModel::vacuum(), &DetectorModel::ideal(), 99, 1).unwrap();
    assert!(matches!(reconstruct_density_matrix(&samples, 3, 1.0), Err(TomoError::InsufficientData(_))));
    assert!(matches!(reconstruct_density_matrix(&samples, 3, 1.5), Err(TomoError::InvalidParameter(_))));
    assert!(NullTerm::new(1, 0, 0).is_err());
}

#[test]
fn adaptive_matrix_reduces_spread() {
    let state = StateModel::coherent(Complex64::new(0.9, 0.0));
    let eta = 0.85;
    let truth = state.clone().with_truncation(14).expand().unwrap();
    let samples = sample_quadratures(&state, &DetectorModel::new(eta).unwrap(), 40_000, 7).unwrap();
    let basis = NullBasis::default();
    assert_eq!(basis.len(), 40);
    let plain = reconstruct_density_matrix(&samples[samples.len() / 2..], 4, eta).unwrap();
    let (adapted, reports) =
        reconstruct_density_matrix_adaptive(&samples, 4, eta, &basis, FitMode::SplitSample).unwrap();
    assert_eq!(reports.len(), 10);
    assert!(reports.iter().all(|r| r.adapted_variance <= r.base_variance));
    let mut shrunk = 0;
    for n in 0..4 {
        for m in n..4 {
            let z = (adapted.get(n, m) - truth.get(n, m)).norm() / adapted.error(n, m);
            assert!(z < 4.0, "({n},{m}) {z}");
            shrunk += (adapted.error(n, m) < plain.error(n, m)) as usize;
        }
    }
    assert!(shrunk >= 8, "{shrunk}/10 bars shrank");
}
