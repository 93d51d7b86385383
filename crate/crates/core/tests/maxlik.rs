use homtom_core::maxlik::{default_truncation, ml_bootstrap, ml_reconstruct, Likelihood, MlConfig, MlStart, Optimizer};
use homtom_core::{sample_quadratures, DetectorModel, FockDensityMatrix, StateModel, TomoError};
use num_complex::Complex64;

fn qubit(r: [f64; 3]) -> Vec<Complex64> {
    let [x, y, z] = r;
    vec![
        Complex64::new((1.0 + z) / 2.0, 0.0),
        Complex64::new(x / 2.0, -y / 2.0),
        Complex64::new(x / 2.0, y / 2.0),
        Complex64::new((1.0 - z) / 2.0, 0.0),
    ]
}

/// Best Bloch vector on a cubic grid of the given spacing around `centre`.
fn grid_search(lk: &Likelihood, centre: [f64; 3], half: i32, step: f64) -> ([f64; 3], f64) {
    let mut best = (centre, f64::NEG_INFINITY);
    for i in -half..=half {
        for j in -half..=half {
            for k in -half..=half {
                let r = [centre[0] + i as f64 * step, centre[1] + j as f64 * step, centre[2] + k as f64 * step];
                if r.iter().map(|v| v * v).sum::<f64>() > 1.0 {
                    continue;
                }
                let l = lk.loglik(&qubit(r));
                if l > best.1 {
                    best = (r, l);
                }
            }
        }
    }
    best
}

#[test]
fn qubit_estimate_matches_grid_maximum() {
    let truth = FockDensityMatrix::new(2, qubit([0.3, 0.2, 0.4])).unwrap();
    let eta = 0.9;
    let samples = sample_quadratures(&StateModel::matrix(truth), &DetectorModel::new(eta).unwrap(), 3000, 4).unwrap();
    let lk = Likelihood::new(&samples, 2, eta).unwrap();
    let (coarse, _) = grid_search(&lk, [0.0; 3], 15, 1.0 / 15.0);
    let (fine, grid_max) = grid_search(&lk, coarse, 10, 0.01);

    let (est, report) = ml_reconstruct(&samples, &MlConfig::new(2, eta)).unwrap();
    assert!(report.converged);
    assert!(report.loglik >= grid_max - 1e-9, "{} < {grid_max}", report.loglik);
    let r = [2.0 * est.get(0, 1).re, -2.0 * est.get(0, 1).im, est.get(0, 0).re - est.get(1, 1).re];
    for (a, b) in r.iter().zip(&fine) {
        assert!((a - b).abs() <= 0.011, "{r:?} vs grid {fine:?}");
    }
}

#[test]
fn optimizers_reach_the_same_maximum() {
    let samples = sample_quadratures(
        &StateModel::coherent(Complex64::new(0.5, 0.3)),
        &DetectorModel::new(0.85).unwrap(),
        4000,
        8,
    )
    .unwrap();
    let base = MlConfig::new(3, 0.85);
    let (_, em) = ml_reconstruct(&samples, &base).unwrap();
    for optimizer in [Optimizer::DownhillSimplex, Optimizer::ProjectedGradient] {
        let cfg = MlConfig { optimizer, max_iters: 200_000, ..base.clone() };
        let (_, rep) = ml_reconstruct(&samples, &cfg).unwrap();
        assert!((rep.loglik - em.loglik).abs() < 1e-3, "{optimizer:?}: {} vs {}", rep.loglik, em.loglik);
        assert!(rep.loglik <= em.loglik + 1e-6);
    }
}

#[test]
fn estimate_is_a_state_from_any_start() {
    let samples = sample_quadratures(&StateModel::thermal(0.6), &DetectorModel::new(0.7).unwrap(), 5000, 2).unwrap();
    let q: f64 = 0.6 / 1.6;
    let weights: Vec<f64> = (0..5).map(|k| q.powi(k)).collect();
    let total: f64 = weights.iter().sum();
    let truth_start = FockDensityMatrix::diagonal(&weights.iter().map(|w| w / total).collect::<Vec<_>>()).unwrap();
    for start in [MlStart::MaximallyMixed, MlStart::Random(3), MlStart::Given(truth_start)] {
        let (est, rep) = ml_reconstruct(&samples, &MlConfig { start, ..MlConfig::new(5, 0.7) }).unwrap();
        assert!(rep.converged);
        let rho = FockDensityMatrix::new(5, est.matrix.clone()).unwrap();
        assert!((rho.trace() - 1.0).abs() < 1e-12);
        assert!(rho.min_eigenvalue() > -1e-12);
    }
}

#[test]
fn configuration_is_validated() {
    let samples = sample_quadratures(&StateModel::vacuum(), &DetectorModel::ideal(), 200, 1).unwrap();
    let bad = [
        MlConfig::new(0, 1.0),
        MlConfig::new(3, 0.0),
        MlConfig::new(3, 1.2),
        MlConfig { tol: 0.0, ..MlConfig::new(3, 1.0) },
        MlConfig { max_iters: 0, ..MlConfig::new(3, 1.0) },
        MlConfig { start: MlStart::Given(FockDensityMatrix::vacuum(2)), ..MlConfig::new(3, 1.0) },
    ];
    for cfg in bad {
        assert!(ml_reconstruct(&samples, &cfg).is_err(), "{cfg:?}");
    }
    assert!(matches!(ml_reconstruct(&[], &MlConfig::new(3, 1.0)), Err(TomoError::InsufficientData(_))));
}

#[test]
fn low_efficiency_is_allowed() {
    // the forward model has no deconvolution bound
    let samples = sample_quadratures(&StateModel::vacuum(), &DetectorModel::new(0.4).unwrap(), 5000, 6).unwrap();
    let d = default_truncation(&samples, 0.4, 0.999).unwrap();
    assert!((2..=6).contains(&d), "{d}");
    let (est, rep) = ml_reconstruct(&samples, &MlConfig::new(d, 0.4)).unwrap();
    assert!(rep.converged);
    assert!(est.get(0, 0).re > 0.9);
}

#[test]
fn truncation_follows_the_photon_number() {
    let det = DetectorModel::new(0.9).unwrap();
    let small = sample_quadratures(&StateModel::vacuum(), &det, 20_000, 1).unwrap();
    let large = sample_quadratures(&StateModel::coherent(Complex64::new(1.5, 0.0)), &det, 20_000, 1).unwrap();
    let ds = default_truncation(&small, 0.9, 0.999).unwrap();
    let dl = default_truncation(&large, 0.9, 0.999).unwrap();
    assert!(ds < dl, "{ds} vs {dl}");
    assert!((7..=12).contains(&dl), "{dl}");
}

#[test]
fn bootstrap_spread_is_plausible() {
    let samples = sample_quadratures(&StateModel::vacuum(), &DetectorModel::new(0.9).unwrap(), 2000, 5).unwrap();
    let cfg = MlConfig::new(3, 0.9);
    assert!(ml_bootstrap(&samples, &cfg, 5, 0).is_err());
    let boot = ml_bootstrap(&samples, &cfg, 20, 0).unwrap();
    assert_eq!(boot.used + boot.failed, 20);
    assert_eq!(boot.errors.len(), 9);
    // the vacuum population is pinned near 1, so its spread is small
    assert!(boot.errors[0] > 0.0 && boot.errors[0] < 0.05, "{}", boot.errors[0]);
    assert!(boot.mean_photon_std > 0.0);
}
