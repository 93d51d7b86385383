//! Tomographic kernels (pattern functions) for Fock matrix elements, with
//! optional deconvolution of detector efficiency, and a slow numerical oracle
//! for arbitrary operators.
//!
//! For `m >= n`, `d = m - n` and `c = 2 sqrt(eta / (2 eta - 1))` the kernel is
//!
//! ```text
//! K_nm(x, phi) = -e^{-i d phi} 2^{-(d+1)} sqrt(n!/m!)
//!                Σ_{v=0}^{n} C(m, n-v) / (v! 4^v) c^{k+2} (k+1)! a_{k+2}(c x),   k = d + 2v
//! ```
//!
//! where `a_p(y)` is the real part of `i^p exp(-y²/4) D_{-p}(iy)` that survives
//! the `r`-integral. The other triangle follows from `K_mn = conj(K_nm)`.
//! `K_nm` is the kernel of the operator `|m><n|`, so its average over the data
//! is `<n|rho|m>`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{check_eta_deconvolution, Result, TomoError};
use crate::quadrature;
use crate::special::{binomial, dawson_part_into, ln_factorial};

/// Kernel for the matrix element `<n|rho|m>` at efficiency `eta`.
#[derive(Debug, Clone)]
pub struct KernelEvaluator {
    n: usize,
    m: usize,
    lo: usize,
    hi: usize,
    eta: f64,
    c: f64,
    weights: Vec<f64>,
}

impl KernelEvaluator {
    pub fn new(n: usize, m: usize, eta: f64) -> Result<Self> {
        check_eta_deconvolution(eta)?;
        let (lo, hi) = (n.min(m), n.max(m));
        Ok(Self { n, m, lo, hi, eta, c: scale_factor(eta), weights: radial_weights(lo, hi, eta) })
    }

    pub fn indices(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Highest `p` of `a_p` the radial sum touches.
    fn p_max(&self) -> usize {
        self.hi - self.lo + 2 + 2 * self.lo
    }

    /// Phase-free part `K_nm(x, 0)`, which is real.
    pub fn radial(&self, x: f64) -> f64 {
        let mut a = vec![0.0; self.p_max() + 1];
        dawson_part_into(self.c * x, &mut a);
        radial_sum(&self.weights, self.hi - self.lo, &a)
    }

    pub fn eval(&self, x: f64, phi: f64) -> Complex64 {
        let d = self.hi as f64 - self.lo as f64;
        let sign = if self.m >= self.n { -1.0 } else { 1.0 };
        Complex64::from_polar(self.radial(x), sign * d * phi)
    }
}

/// `c = 2 / sqrt((2 eta - 1) / eta)`.
fn scale_factor(eta: f64) -> f64 {
    2.0 / ((2.0 * eta - 1.0) / eta).sqrt()
}

/// Positive weights `w_v` with `K_nm(x, 0) = -Σ_v w_v a_{d+2+2v}(c x)`.
fn radial_weights(n: usize, m: usize, eta: f64) -> Vec<f64> {
    let d = m - n;
    let ln_c = scale_factor(eta).ln();
    let base = 0.5 * (ln_factorial(n) - ln_factorial(m)) - (d + 1) as f64 * std::f64::consts::LN_2;
    (0..=n)
        .map(|v| {
            let k = d + 2 * v;
            let ln_w = base + binomial(m, n - v).ln() - ln_factorial(v) - 2.0 * v as f64 * std::f64::consts::LN_2
                + (k + 2) as f64 * ln_c
                + ln_factorial(k + 1);
            ln_w.exp()
        })
        .collect()
}

fn radial_sum(weights: &[f64], d: usize, a: &[f64]) -> f64 {
    -weights.iter().enumerate().map(|(v, w)| w * a[d + 2 + 2 * v]).sum::<f64>()
}

/// `K_nm(x, phi; eta)`, the unbiased estimator of `<n|rho|m>` from one homodyne datum.
pub fn kernel_fock(n: usize, m: usize, x: f64, phi: f64, eta: f64) -> Result<Complex64> {
    Ok(KernelEvaluator::new(n, m, eta)?.eval(x, phi))
}

/// All kernels `K_nm` with `n <= m < dim` for one efficiency, sharing one
/// `a_p` sequence per datum.
#[derive(Debug)]
pub struct KernelBank {
    dim: usize,
    eta: f64,
    c: f64,
    // weights for pair (n, m), indexed by n * dim + m for n <= m
    weights: Vec<Vec<f64>>,
    cache: Option<RadialCache>,
}

impl KernelBank {
    pub fn new(dim: usize, eta: f64) -> Result<Self> {
        check_eta_deconvolution(eta)?;
        if dim == 0 {
            return Err(TomoError::InvalidParameter("dimension must be positive".into()));
        }
        let mut weights = vec![Vec::new(); dim * dim];
        for n in 0..dim {
            for m in n..dim {
                weights[n * dim + m] = radial_weights(n, m, eta);
            }
        }
        Ok(Self { dim, eta, c: scale_factor(eta), weights, cache: None })
    }

    /// Enables memoization of radial tables for repeated `x` values, keyed by
    /// `x` rounded to 1e-9. At most `capacity` entries are kept.
    pub fn with_cache(mut self, capacity: usize) -> Self {
        self.cache = Some(RadialCache::new(capacity));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Length of the scratch buffer `radial_into` needs.
    pub fn scratch_len(&self) -> usize {
        2 * self.dim + 1
    }

    /// Radial kernel values `K_nm(x, 0)` for `n <= m`, written to
    /// `out[n * dim + m]`; entries below the diagonal are left untouched.
    pub fn radial_into(&self, x: f64, scratch: &mut [f64], out: &mut [f64]) {
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(x) {
                out.copy_from_slice(&hit);
                return;
            }
        }
        let d = self.dim;
        dawson_part_into(self.c * x, &mut scratch[..2 * d + 1]);
        for n in 0..d {
            for m in n..d {
                out[n * d + m] = radial_sum(&self.weights[n * d + m], m - n, scratch);
            }
        }
        if let Some(cache) = &self.cache {
            cache.insert(x, out);
        }
    }

    /// Diagonal kernels `K_mm(x)` only, which carry no phase.
    pub fn diagonal_into(&self, x: f64, scratch: &mut [f64], out: &mut [f64]) {
        let d = self.dim;
        dawson_part_into(self.c * x, &mut scratch[..2 * d + 1]);
        for m in 0..d {
            out[m] = radial_sum(&self.weights[m * d + m], 0, scratch);
        }
    }

    pub fn eval(&self, n: usize, m: usize, x: f64, phi: f64) -> Result<Complex64> {
        if n >= self.dim || m >= self.dim {
            return Err(TomoError::Index(format!("element ({n}, {m}) outside dimension {}", self.dim)));
        }
        let (lo, hi) = (n.min(m), n.max(m));
        let mut a = vec![0.0; 2 * hi + 3];
        dawson_part_into(self.c * x, &mut a);
        let r = radial_sum(&self.weights[lo * self.dim + hi], hi - lo, &a);
        Ok(Complex64::from_polar(r, (n as f64 - m as f64) * phi))
    }
}

#[derive(Debug)]
struct RadialCache {
    capacity: usize,
    map: Mutex<HashMap<i64, Arc<Vec<f64>>>>,
}

impl RadialCache {
    fn new(capacity: usize) -> Self {
        Self { capacity, map: Mutex::new(HashMap::new()) }
    }

    fn key(x: f64) -> i64 {
        (x * 1e9).round() as i64
    }

    fn get(&self, x: f64) -> Option<Arc<Vec<f64>>> {
        self.map.lock().expect("cache lock").get(&Self::key(x)).cloned()
    }

    fn insert(&self, x: f64, values: &[f64]) {
        let mut map = self.map.lock().expect("cache lock");
        if map.len() < self.capacity {
            map.insert(Self::key(x), Arc::new(values.to_vec()));
        }
    }
}

/// Maximum operator dimension the oracle accepts.
pub const ORACLE_MAX_DIM: usize = 30;

// r-integrand envelope at the cutoff relative to its peak, as exp(-ORACLE_TAIL)
const ORACLE_TAIL: f64 = 38.0;

fn quadrature_eigensystem(dim: usize) -> Arc<SymmetricEigen<f64, nalgebra::Dyn>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<SymmetricEigen<f64, nalgebra::Dyn>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(e) = cache.lock().expect("eigen cache").get(&dim) {
        return e.clone();
    }
    // X_0 = (a + a†)/2 in the truncated Fock basis
    let x0 =
        DMatrix::from_fn(dim, dim, |i, j| if i + 1 == j || j + 1 == i { (i.max(j) as f64).sqrt() / 2.0 } else { 0.0 });
    let eig = Arc::new(x0.symmetric_eigen());
    cache.lock().expect("eigen cache").insert(dim, eig.clone());
    eig
}

/// Numerical kernel of an arbitrary operator `A` given in the Fock basis:
/// `∫ dr |r|/4 exp(r² Δ²/2) Tr[A exp(i r (X_phi - x))]`.
///
/// The trace is evaluated by diagonalizing `X_0` in a Fock space truncated well
/// beyond `A` (so that the characteristic function is exact on the integration
/// range) and the `r`-integral by adaptive Gauss–Kronrod quadrature.
pub fn kernel_oracle(a: &DMatrix<Complex64>, x: f64, phi: f64, eta: f64) -> Result<Complex64> {
    check_eta_deconvolution(eta)?;
    let d = a.nrows();
    if d != a.ncols() || d == 0 || d > ORACLE_MAX_DIM {
        return Err(TomoError::InvalidParameter(format!(
            "oracle operator must be square with dimension 1..={ORACLE_MAX_DIM}"
        )));
    }
    let s = (2.0 * eta - 1.0) / eta;
    let delta2 = (1.0 - eta) / (4.0 * eta);
    // the integrand envelope is r^{2d+1} exp(-s r²/8)
    let mut r_max = 4.0;
    while s * r_max * r_max / 8.0 - (2 * d + 1) as f64 * r_max.ln() < ORACLE_TAIL {
        r_max += 0.5;
    }
    // Fock components reached by exp(i r X) at r <= r_max are confined below
    // roughly (r/2)² photons; the guard is rounded to share eigensystems
    let half = r_max / 2.0;
    let guard = (half * half + 8.0 * half) as usize + d + 40;
    let dim = guard.div_ceil(16) * 16;
    let eig = quadrature_eigensystem(dim);

    let mut rotated = a.clone();
    for j in 0..d {
        for k in 0..d {
            rotated[(j, k)] *= Complex64::from_polar(1.0, (k as f64 - j as f64) * phi);
        }
    }
    let mut weights = Vec::new();
    for l in 0..dim {
        let mut w = Complex64::new(0.0, 0.0);
        for j in 0..d {
            for k in 0..d {
                w += rotated[(j, k)] * eig.eigenvectors[(k, l)] * eig.eigenvectors[(j, l)];
            }
        }
        weights.push((eig.eigenvalues[l] - x, w));
    }
    let wmax = weights.iter().fold(0.0f64, |m, (_, w)| m.max(w.norm()));
    weights.retain(|(_, w)| w.norm() > 1e-20 * wmax);

    let integrand = |r: f64| -> Complex64 {
        let sum: Complex64 = weights.iter().map(|(lam, w)| w * (r * lam).cos()).sum();
        sum * (r / 2.0 * (r * r * delta2 / 2.0).exp())
    };
    // Beyond the point where the characteristic function sinks into rounding
    // noise, its true value is smaller still while exp(r² Δ²/2) keeps
    // amplifying the noise; stop there.
    let scale: f64 = weights.iter().map(|(_, w)| w.norm()).sum();
    let floor = 1e-13 * scale;
    let characteristic = |r: f64| -> f64 {
        let (mut plus, mut minus) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
        for (lam, w) in &weights {
            let e = Complex64::from_polar(1.0, r * lam);
            plus += w * e;
            minus += w * e.conj();
        }
        plus.norm().max(minus.norm())
    };
    let step = 0.25;
    let mut cutoff = r_max;
    while cutoff > step && characteristic(cutoff - step) < floor {
        cutoff -= step;
    }
    let pieces = cutoff.ceil() as usize;
    let mut total = Complex64::new(0.0, 0.0);
    for i in 0..pieces {
        let lo = cutoff * i as f64 / pieces as f64;
        let hi = cutoff * (i + 1) as f64 / pieces as f64;
        total += quadrature::integrate(integrand, lo, hi, 1e-11, 1e-11, 500)?;
    }
    Ok(total)
}

/// `|n><m|` as a `dim × dim` matrix, for use with the oracle.
pub fn fock_projector(n: usize, m: usize, dim: usize) -> DMatrix<Complex64> {
    let mut a = DMatrix::from_element(dim, dim, Complex64::new(0.0, 0.0));
    a[(n, m)] = Complex64::new(1.0, 0.0);
    a
}

/// Phase average `(1/pi) ∫_0^pi f(phi) dphi` by the trapezoidal rule, exact
/// for `pi`-periodic trigonometric polynomials of degree below `2 * points`.
pub fn phase_average<F: FnMut(f64) -> Complex64>(points: usize, mut f: F) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..points {
        acc += f(PI * j as f64 / points as f64);
    }
    acc / points as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn vacuum_kernel_at_origin() {
        assert_relative_eq!(kernel_fock(0, 0, 0.0, 0.3, 1.0).unwrap().re, 2.0, max_relative = 1e-14);
        // large-|x| tail of the unit-efficiency vacuum kernel is -1/(2x²)
        let k = kernel_fock(0, 0, 30.0, 0.0, 1.0).unwrap().re;
        assert_relative_eq!(k, -1.0 / 1800.0, max_relative = 1e-2);
    }

    #[test]
    fn hermitian_pairing_and_phase() {
        for &(n, m) in &[(0, 1), (2, 5), (3, 3), (6, 1)] {
            for &x in &[-2.2, 0.0, 0.7, 4.1] {
                let a = kernel_fock(n, m, x, 0.9, 0.85).unwrap();
                let b = kernel_fock(m, n, x, 0.9, 0.85).unwrap();
                assert_eq!(a, b.conj());
                let zero = kernel_fock(n, m, x, 0.0, 0.85).unwrap();
                let rot = Complex64::from_polar(1.0, (n as f64 - m as f64) * 0.9);
                assert!((a - zero * rot).norm() <= 1e-15 * zero.norm());
            }
        }
    }

    #[test]
    fn efficiency_bound() {
        assert!(matches!(kernel_fock(0, 0, 0.0, 0.0, 0.5), Err(TomoError::EfficiencyTooLow { .. })));
        assert!(matches!(kernel_fock(0, 0, 0.0, 0.0, 0.45), Err(TomoError::EfficiencyTooLow { .. })));
        assert!(kernel_fock(0, 0, 0.0, 0.0, 1.01).is_err());
    }

    #[test]
    fn bank_matches_single_evaluator() {
        let bank = KernelBank::new(7, 0.8).unwrap();
        let mut scratch = vec![0.0; bank.scratch_len()];
        let mut out = vec![0.0; 49];
        for &x in &[-3.3, -0.2, 1.9] {
            bank.radial_into(x, &mut scratch, &mut out);
            for n in 0..7 {
                for m in n..7 {
                    let k = KernelEvaluator::new(n, m, 0.8).unwrap().radial(x);
                    assert_eq!(out[n * 7 + m], k);
                }
            }
        }
        assert!(matches!(bank.eval(7, 0, 0.0, 0.0), Err(TomoError::Index(_))));
    }

    #[test]
    fn oracle_matches_closed_form_spot_checks() {
        for &(n, m, x, phi, eta) in &[(0, 0, 0.5, 0.0, 1.0), (2, 5, 1.1, 0.7, 1.0), (1, 1, -1.5, 0.0, 0.85)] {
            let want = kernel_fock(n, m, x, phi, eta).unwrap();
            let got = kernel_oracle(&fock_projector(m, n, 6), x, phi, eta).unwrap();
            assert!((got - want).norm() < 1e-7, "({n},{m},{x}) oracle {got} closed {want}");
        }
    }
}
