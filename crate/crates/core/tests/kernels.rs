use homtom_core::kernels::{fock_projector, kernel_fock, kernel_oracle, phase_average};
use homtom_core::quadrature::integrate;
use homtom_core::states::QuadratureDensity;
use homtom_core::{DetectorModel, FockDensityMatrix, StateModel};
use nalgebra::DMatrix;
use num_complex::Complex64;

const XS: [f64; 5] = [-3.0, -1.5, 0.0, 0.7, 2.4];
const PHIS: [f64; 3] = [0.0, 0.9, 2.2];

#[test]
fn closed_form_agrees_with_oracle_on_grid() {
    let mut worst = 0.0f64;
    for &eta in &[1.0, 0.85] {
        for n in 0..=6 {
            for m in 0..=6 {
                let a = fock_projector(m, n, 7);
                for &x in &XS {
                    for &phi in &PHIS {
                        let closed = kernel_fock(n, m, x, phi, eta).unwrap();
                        let oracle = kernel_oracle(&a, x, phi, eta).unwrap();
                        worst = worst.max((closed - oracle).norm());
                    }
                }
            }
        }
    }
    assert!(worst < 1e-6, "max deviation {worst:e}");
}

#[test]
fn oracle_kernel_of_identity_is_one_on_average() {
    // the kernel of the identity integrates to 1 against any density
    let id = DMatrix::from_fn(8, 8, |i, j| if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) });
    let rho = StateModel::vacuum().with_truncation(4).expand().unwrap();
    let dens = QuadratureDensity::new(&rho, &DetectorModel::ideal());
    let v =
        integrate(|x| kernel_oracle(&id, x, 0.0, 1.0).unwrap() * dens.pdf(0.0, x), -4.0, 4.0, 1e-8, 1e-8, 200).unwrap();
    assert!((v.re - 1.0).abs() < 1e-5, "{v}");
}

#[test]
fn exact_unbiasedness_for_a_mixed_state() {
    let amps: Vec<Complex64> = (0..6).map(|k| Complex64::from_polar(1.0 / (1.0 + k as f64), 0.7 * k as f64)).collect();
    let rho = FockDensityMatrix::pure(&amps);
    for &eta in &[1.0, 0.8] {
        let det = DetectorModel::new(eta).unwrap();
        let dens = QuadratureDensity::new(&rho, &det);
        for &(n, m) in &[(0, 0), (1, 3), (4, 4), (5, 2)] {
            let est = phase_average(16, |phi| {
                integrate(|x| kernel_fock(n, m, x, phi, eta).unwrap() * dens.pdf(phi, x), -9.0, 9.0, 1e-10, 1e-10, 400)
                    .unwrap()
            });
            assert!((est - rho.get(n, m)).norm() < 1e-5, "({n},{m}) eta {eta}: {est} vs {}", rho.get(n, m));
        }
    }
}
