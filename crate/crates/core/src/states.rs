//! Single-mode states in the truncated Fock basis, quadrature densities and
//! the homodyne sampler.
//!
//! Quadratures follow `X_phi = (a† e^{i phi} + a e^{-i phi}) / 2`, so the vacuum
//! has variance 1/4. A detector of efficiency `eta` smears the ideal quadrature
//! density with a Gaussian of variance `(1 - eta) / (4 eta)`.

use crate::linalg::hermitian_eigen;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_eta_forward, Result, TomoError};
use crate::rng::{self, StreamLabel, CHUNK};
use crate::special::binomial;

/// Trace that an analytic state may lose to truncation.
pub const TRUNCATION_TOLERANCE: f64 = 1e-8;

const HERMITIAN_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

/// Truncated density matrix `elements[n * dim + m] = <n|rho|m>`.
#[derive(Debug, Clone, PartialEq)]
pub struct FockDensityMatrix {
    dim: usize,
    elements: Vec<Complex64>,
}

impl FockDensityMatrix {
    /// Validates hermiticity, unit trace and positivity, then stores the
    /// exactly hermitian part.
    pub fn new(dim: usize, elements: Vec<Complex64>) -> Result<Self> {
        if dim == 0 || elements.len() != dim * dim {
            return Err(TomoError::InvalidState(format!(
                "expected {} elements for dimension {dim}, got {}",
                dim * dim,
                elements.len()
            )));
        }
        for n in 0..dim {
            for m in n..dim {
                let a = elements[n * dim + m];
                let b = elements[m * dim + n].conj();
                if (a - b).norm() > HERMITIAN_TOL {
                    return Err(TomoError::InvalidState(format!("matrix not hermitian at ({n}, {m})")));
                }
            }
        }
        let rho = Self::hermitian_part(dim, elements);
        let tr = rho.trace();
        if (tr - 1.0).abs() > TRACE_TOL {
            return Err(TomoError::InvalidState(format!("trace {tr} differs from 1")));
        }
        let min_ev = rho.min_eigenvalue();
        if min_ev < -PSD_TOL {
            return Err(TomoError::InvalidState(format!("matrix not positive semidefinite (eigenvalue {min_ev:e})")));
        }
        Ok(rho)
    }

    /// Normalizes a positive semidefinite matrix by its trace; used for
    /// constructions that are PSD by design.
    pub(crate) fn from_unnormalized(dim: usize, elements: Vec<Complex64>) -> Self {
        let mut rho = Self::hermitian_part(dim, elements);
        let tr = rho.trace();
        for e in rho.elements.iter_mut() {
            *e /= tr;
        }
        rho
    }

    fn hermitian_part(dim: usize, mut elements: Vec<Complex64>) -> Self {
        for n in 0..dim {
            elements[n * dim + n].im = 0.0;
            for m in n + 1..dim {
                let v = 0.5 * (elements[n * dim + m] + elements[m * dim + n].conj());
                elements[n * dim + m] = v;
                elements[m * dim + n] = v.conj();
            }
        }
        Self { dim, elements }
    }

    pub fn from_dmatrix(m: &DMatrix<Complex64>) -> Result<Self> {
        let dim = m.nrows();
        let elements = (0..dim * dim).map(|i| m[(i / dim, i % dim)]).collect();
        Self::new(dim, elements)
    }

    pub fn to_dmatrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.dim, self.dim, |n, m| self.get(n, m))
    }

    pub fn vacuum(dim: usize) -> Self {
        Self::fock(0, dim)
    }

    pub fn fock(n: usize, dim: usize) -> Self {
        assert!(n < dim, "Fock state |{n}> outside dimension {dim}");
        let mut elements = vec![Complex64::new(0.0, 0.0); dim * dim];
        elements[n * dim + n] = Complex64::new(1.0, 0.0);
        Self { dim, elements }
    }

    /// Diagonal state from photon-number probabilities (renormalized).
    pub fn diagonal(probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(TomoError::InvalidState("negative or non-finite probability".into()));
        }
        let dim = probs.len();
        let mut elements = vec![Complex64::new(0.0, 0.0); dim * dim];
        for (n, p) in probs.iter().enumerate() {
            elements[n * dim + n] = Complex64::new(*p, 0.0);
        }
        Ok(Self::from_unnormalized(dim, elements))
    }

    /// Pure state from (unnormalized) Fock amplitudes.
    pub fn pure(amplitudes: &[Complex64]) -> Self {
        let dim = amplitudes.len();
        let mut elements = vec![Complex64::new(0.0, 0.0); dim * dim];
        for n in 0..dim {
            for m in 0..dim {
                elements[n * dim + m] = amplitudes[n] * amplitudes[m].conj();
            }
        }
        Self::from_unnormalized(dim, elements)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, n: usize, m: usize) -> Complex64 {
        self.elements[n * self.dim + m]
    }

    pub fn elements(&self) -> &[Complex64] {
        &self.elements
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|n| self.elements[n * self.dim + n].re).sum()
    }

    pub fn diagonal_probabilities(&self) -> Vec<f64> {
        (0..self.dim).map(|n| self.get(n, n).re).collect()
    }

    pub fn mean_photon_number(&self) -> f64 {
        (0..self.dim).map(|n| n as f64 * self.get(n, n).re).sum()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = hermitian_eigen(self.to_dmatrix()).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// Trace distance `||a - b||_1 / 2`; the smaller matrix is zero-padded.
    pub fn trace_distance(&self, other: &Self) -> f64 {
        let dim = self.dim.max(other.dim);
        let pick = |r: &Self, n: usize, m: usize| {
            if n < r.dim && m < r.dim {
                r.get(n, m)
            } else {
                Complex64::new(0.0, 0.0)
            }
        };
        let diff = DMatrix::from_fn(dim, dim, |n, m| pick(self, n, m) - pick(other, n, m));
        0.5 * hermitian_eigen(diff).eigenvalues.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Embeds into a larger truncation, padding with zeros.
    pub fn padded(&self, dim: usize) -> Self {
        assert!(dim >= self.dim);
        let mut elements = vec![Complex64::new(0.0, 0.0); dim * dim];
        for n in 0..self.dim {
            for m in 0..self.dim {
                elements[n * dim + m] = self.get(n, m);
            }
        }
        Self { dim, elements }
    }

    /// State after a pure-loss channel of transmissivity `eta`.
    pub fn after_loss(&self, eta: f64) -> Self {
        if eta == 1.0 {
            return self.clone();
        }
        let d = self.dim;
        let mut elements = vec![Complex64::new(0.0, 0.0); d * d];
        for n in 0..d {
            for m in 0..d {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..d - n.max(m) {
                    let w = (binomial(n + k, k) * binomial(m + k, k)).sqrt()
                        * eta.powf((n + m) as f64 / 2.0)
                        * (1.0 - eta).powi(k as i32);
                    acc += w * self.get(n + k, m + k);
                }
                elements[n * d + m] = acc;
            }
        }
        Self { dim: d, elements }
    }
}

/// Analytic or explicit single-mode state together with its Fock truncation.
#[derive(Debug, Clone, PartialEq)]
pub enum StateKind {
    Fock { n: usize },
    Coherent { alpha: Complex64 },
    Thermal { nbar: f64 },
    Matrix(FockDensityMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateModel {
    pub kind: StateKind,
    pub truncation: usize,
}

impl StateModel {
    pub fn fock(n: usize) -> Self {
        Self { kind: StateKind::Fock { n }, truncation: n + 1 }
    }

    pub fn vacuum() -> Self {
        Self::fock(0)
    }

    /// Default truncation `max(20, ceil(|alpha|² + 6|alpha| + 10))`.
    pub fn coherent(alpha: Complex64) -> Self {
        let a = alpha.norm();
        let truncation = 20usize.max((a * a + 6.0 * a + 10.0).ceil() as usize);
        Self { kind: StateKind::Coherent { alpha }, truncation }
    }

    /// Default truncation keeps all but 1e-10 of the geometric tail.
    pub fn thermal(nbar: f64) -> Self {
        let q = nbar / (1.0 + nbar);
        let truncation = if q <= 0.0 { 1 } else { ((1e-10f64).ln() / q.ln()).ceil().max(1.0) as usize };
        Self { kind: StateKind::Thermal { nbar }, truncation: truncation.max(20) }
    }

    pub fn matrix(rho: FockDensityMatrix) -> Self {
        let truncation = rho.dim();
        Self { kind: StateKind::Matrix(rho), truncation }
    }

    pub fn with_truncation(mut self, truncation: usize) -> Self {
        self.truncation = truncation;
        self
    }

    /// Expands to a density matrix of dimension `truncation`, failing if more
    /// than `TRUNCATION_TOLERANCE` of the trace would be lost.
    pub fn expand(&self) -> Result<FockDensityMatrix> {
        let d = self.truncation;
        if d == 0 {
            return Err(TomoError::InvalidState("truncation must be positive".into()));
        }
        let fail = |kept: f64| TomoError::Truncation { dim: d, kept, required: 1.0 - TRUNCATION_TOLERANCE };
        match &self.kind {
            StateKind::Fock { n } => {
                if *n >= d {
                    return Err(fail(0.0));
                }
                Ok(FockDensityMatrix::fock(*n, d))
            }
            StateKind::Coherent { alpha } => {
                let mut amps = Vec::with_capacity(d);
                let mut c = Complex64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
                for n in 0..d {
                    if n > 0 {
                        c = c * alpha / (n as f64).sqrt();
                    }
                    amps.push(c);
                }
                let kept: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
                if kept < 1.0 - TRUNCATION_TOLERANCE {
                    return Err(fail(kept));
                }
                Ok(FockDensityMatrix::pure(&amps))
            }
            StateKind::Thermal { nbar } => {
                if *nbar < 0.0 || !nbar.is_finite() {
                    return Err(TomoError::InvalidState(format!("mean photon number {nbar}")));
                }
                let q = nbar / (1.0 + nbar);
                let probs: Vec<f64> = (0..d).map(|n| (1.0 - q) * q.powi(n as i32)).collect();
                let kept: f64 = probs.iter().sum();
                if kept < 1.0 - TRUNCATION_TOLERANCE {
                    return Err(fail(kept));
                }
                FockDensityMatrix::diagonal(&probs)
            }
            StateKind::Matrix(rho) => {
                if rho.dim() <= d {
                    Ok(rho.padded(d))
                } else {
                    let kept: f64 = (0..d).map(|n| rho.get(n, n).re).sum();
                    if kept < 1.0 - TRUNCATION_TOLERANCE {
                        return Err(fail(kept));
                    }
                    let elements = (0..d * d).map(|i| rho.get(i / d, i % d)).collect();
                    Ok(FockDensityMatrix::from_unnormalized(d, elements))
                }
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: StateSpec = serde_json::from_str(text)?;
        spec.try_into()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&StateSpec::from(self)).expect("state spec serializes")
    }
}

/// JSON form of a state: `{"type": "coherent", "alpha": [re, im], "truncation": d}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StateSpec {
    Fock {
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truncation: Option<usize>,
    },
    Coherent {
        alpha: [f64; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truncation: Option<usize>,
    },
    Thermal {
        nbar: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truncation: Option<usize>,
    },
    Matrix {
        rho: Vec<Vec<[f64; 2]>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truncation: Option<usize>,
    },
}

impl TryFrom<StateSpec> for StateModel {
    type Error = TomoError;

    fn try_from(spec: StateSpec) -> Result<Self> {
        let (model, truncation) = match spec {
            StateSpec::Fock { n, truncation } => (StateModel::fock(n), truncation),
            StateSpec::Coherent { alpha, truncation } => {
                (StateModel::coherent(Complex64::new(alpha[0], alpha[1])), truncation)
            }
            StateSpec::Thermal { nbar, truncation } => {
                if nbar < 0.0 {
                    return Err(TomoError::InvalidState(format!("mean photon number {nbar}")));
                }
                (StateModel::thermal(nbar), truncation)
            }
            StateSpec::Matrix { rho, truncation } => {
                let dim = rho.len();
                if rho.iter().any(|row| row.len() != dim) {
                    return Err(TomoError::InvalidState("density matrix must be square".into()));
                }
                let elements = rho.iter().flat_map(|row| row.iter().map(|c| Complex64::new(c[0], c[1]))).collect();
                (StateModel::matrix(FockDensityMatrix::new(dim, elements)?), truncation)
            }
        };
        Ok(match truncation {
            Some(d) => model.with_truncation(d),
            None => model,
        })
    }
}

impl From<&StateModel> for StateSpec {
    fn from(model: &StateModel) -> Self {
        let truncation = Some(model.truncation);
        match &model.kind {
            StateKind::Fock { n } => StateSpec::Fock { n: *n, truncation },
            StateKind::Coherent { alpha } => StateSpec::Coherent { alpha: [alpha.re, alpha.im], truncation },
            StateKind::Thermal { nbar } => StateSpec::Thermal { nbar: *nbar, truncation },
            StateKind::Matrix(rho) => StateSpec::Matrix {
                rho: (0..rho.dim())
                    .map(|n| (0..rho.dim()).map(|m| [rho.get(n, m).re, rho.get(n, m).im]).collect())
                    .collect(),
                truncation,
            },
        }
    }
}

/// Homodyne detector of quantum efficiency `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    eta: f64,
    delta2: f64,
}

impl DetectorModel {
    pub fn new(eta: f64) -> Result<Self> {
        check_eta_forward(eta)?;
        Ok(Self { eta, delta2: (1.0 - eta) / (4.0 * eta) })
    }

    pub fn ideal() -> Self {
        Self { eta: 1.0, delta2: 0.0 }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Variance of the Gaussian smearing, `(1 - eta) / (4 eta)`.
    pub fn delta2(&self) -> f64 {
        self.delta2
    }
}

/// One homodyne datum, phase normalized into `[0, pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSample {
    pub phi: f64,
    pub x: f64,
}

impl QuadratureSample {
    /// Uses `X_{phi + pi} = -X_phi` to bring the phase into `[0, pi)`.
    pub fn new(phi: f64, x: f64) -> Self {
        let mut phi = phi.rem_euclid(2.0 * PI);
        let mut x = x;
        if phi >= PI {
            phi -= PI;
            x = -x;
        }
        if phi >= PI {
            // rem_euclid can round up to exactly 2 pi
            phi = 0.0;
        }
        Self { phi, x }
    }
}

/// Quadrature eigenfunction `psi_n(x) = (2/pi)^{1/4} (2^n n!)^{-1/2} H_n(sqrt2 x) exp(-x²)`.
pub fn fock_wavefunction(n: usize, x: f64) -> f64 {
    let mut buf = vec![0.0; n + 1];
    fock_wavefunctions_into(x, &mut buf);
    buf[n]
}

/// Fills `out[n] = psi_n(x)` by the normalized upward recurrence
/// `psi_{n+1} = (2x psi_n - sqrt(n) psi_{n-1}) / sqrt(n+1)`.
pub fn fock_wavefunctions_into(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    let norm0 = (2.0 / PI).powf(0.25);
    out[0] = norm0 * (-x * x).exp();
    if out.len() > 1 {
        out[1] = 2.0 * x * out[0];
    }
    for n in 1..out.len().saturating_sub(1) {
        let nf = n as f64;
        out[n + 1] = (2.0 * x * out[n] - nf.sqrt() * out[n - 1]) / (nf + 1.0).sqrt();
    }
}

/// Noisy quadrature density `p_eta(x, phi)` of a fixed density matrix.
///
/// Gaussian smearing of variance `(1-eta)/(4 eta)` equals a pure-loss channel of
/// transmissivity `eta` followed by rescaling `x -> sqrt(eta) x`, so the
/// density is evaluated analytically from the loss-evolved matrix.
#[derive(Debug, Clone)]
pub struct QuadratureDensity {
    lossy: FockDensityMatrix,
    sqrt_eta: f64,
}

impl QuadratureDensity {
    pub fn new(rho: &FockDensityMatrix, det: &DetectorModel) -> Self {
        Self { lossy: rho.after_loss(det.eta()), sqrt_eta: det.eta().sqrt() }
    }

    pub fn dim(&self) -> usize {
        self.lossy.dim()
    }

    /// Density clamped below at zero.
    pub fn pdf(&self, phi: f64, x: f64) -> f64 {
        let mut psi = vec![0.0; self.dim()];
        self.pdf_with_buffer(phi, x, &mut psi)
    }

    pub(crate) fn pdf_with_buffer(&self, phi: f64, x: f64, psi: &mut [f64]) -> f64 {
        let d = self.dim();
        fock_wavefunctions_into(self.sqrt_eta * x, psi);
        let rot = Complex64::from_polar(1.0, phi);
        let mut total = 0.0;
        for n in 0..d {
            total += self.lossy.get(n, n).re * psi[n] * psi[n];
            let mut phase = Complex64::new(1.0, 0.0);
            let mut off = 0.0;
            for m in n + 1..d {
                phase *= rot;
                off += (self.lossy.get(n, m) * phase).re * psi[m];
            }
            total += 2.0 * psi[n] * off;
        }
        (self.sqrt_eta * total).max(0.0)
    }
}

/// `p_eta(x, phi)` for a state model.
pub fn quadrature_pdf(state: &StateModel, phi: f64, x: f64, det: &DetectorModel) -> Result<f64> {
    let rho = state.expand()?;
    Ok(QuadratureDensity::new(&rho, det).pdf(phi, x))
}

/// Smeared products `g_nm(x) = G_eta[psi_n psi_m](x)`, the Fock matrix of the
/// noisy quadrature POVM density: `p_eta(x, phi) = Σ rho_nm e^{i(m-n)phi} g_nm(x)`.
#[derive(Debug, Clone)]
pub struct SmearedBasis {
    dim: usize,
    sqrt_eta: f64,
    // for each (n, m) with n <= m, the list of (k, weight)
    terms: Vec<Vec<(usize, f64)>>,
}

impl SmearedBasis {
    pub fn new(dim: usize, eta: f64) -> Self {
        let mut terms = Vec::with_capacity(dim * (dim + 1) / 2);
        for n in 0..dim {
            for m in n..dim {
                let list = (0..=n)
                    .map(|k| {
                        let w = (binomial(n, k) * binomial(m, k)).sqrt()
                            * eta.powf((n + m) as f64 / 2.0 - k as f64)
                            * (1.0 - eta).powi(k as i32);
                        (k, w)
                    })
                    .filter(|(k, w)| *k == 0 || *w != 0.0)
                    .collect();
                terms.push(list);
            }
        }
        Self { dim, sqrt_eta: eta.sqrt(), terms }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Full symmetric `dim × dim` table, row-major, into `out`; `psi` is scratch
    /// of length `dim`.
    pub fn eval_into(&self, x: f64, psi: &mut [f64], out: &mut [f64]) {
        let d = self.dim;
        fock_wavefunctions_into(self.sqrt_eta * x, psi);
        let mut idx = 0;
        for n in 0..d {
            for m in n..d {
                let mut acc = 0.0;
                for &(k, w) in &self.terms[idx] {
                    acc += w * psi[n - k] * psi[m - k];
                }
                let v = self.sqrt_eta * acc;
                out[n * d + m] = v;
                out[m * d + n] = v;
                idx += 1;
            }
        }
    }

    /// Diagonal entries `g_mm(x)`, the phase-averaged density of Fock state `m`.
    pub fn diagonal_into(&self, x: f64, psi: &mut [f64], out: &mut [f64]) {
        let d = self.dim;
        fock_wavefunctions_into(self.sqrt_eta * x, psi);
        let mut idx = 0;
        for n in 0..d {
            for m in n..d {
                if m == n {
                    let mut acc = 0.0;
                    for &(k, w) in &self.terms[idx] {
                        acc += w * psi[n - k] * psi[n - k];
                    }
                    out[n] = self.sqrt_eta * acc;
                }
                idx += 1;
            }
        }
    }
}

pub const SAMPLER_GRID_POINTS: usize = 4096;

/// Inverse-CDF sampler for the ideal quadrature density, with detector noise
/// added afterwards as an explicit Gaussian shift.
///
/// The density is a trigonometric polynomial in `phi`, so the CDF is stored as
/// cumulative Fourier components on a fixed grid; evaluating it at a phase costs
/// `O(dim)` per grid point touched by the bisection.
#[derive(Debug, Clone)]
pub struct HomodyneSampler {
    dim: usize,
    x0: f64,
    h: f64,
    // cumulative trapezoid of each harmonic, [j * dim + k]
    cumulative: Vec<Complex64>,
    noise_sd: f64,
}

impl HomodyneSampler {
    pub fn new(rho: &FockDensityMatrix, det: &DetectorModel) -> Self {
        let d = rho.dim();
        let half = (d as f64).sqrt() + 5.0;
        let npts = SAMPLER_GRID_POINTS;
        let h = 2.0 * half / (npts - 1) as f64;
        let mut harmonics = vec![Complex64::new(0.0, 0.0); npts * d];
        let mut psi = vec![0.0; d];
        for j in 0..npts {
            let x = -half + j as f64 * h;
            fock_wavefunctions_into(x, &mut psi);
            let row = &mut harmonics[j * d..(j + 1) * d];
            for n in 0..d {
                row[0] += rho.get(n, n).re * psi[n] * psi[n];
                for m in n + 1..d {
                    row[m - n] += 2.0 * rho.get(n, m) * psi[n] * psi[m];
                }
            }
        }
        let mut cumulative = vec![Complex64::new(0.0, 0.0); npts * d];
        for j in 1..npts {
            for k in 0..d {
                cumulative[j * d + k] =
                    cumulative[(j - 1) * d + k] + 0.5 * h * (harmonics[(j - 1) * d + k] + harmonics[j * d + k]);
            }
        }
        Self { dim: d, x0: -half, h, cumulative, noise_sd: det.delta2().sqrt() }
    }

    fn cdf_at(&self, j: usize, phases: &[Complex64]) -> f64 {
        let row = &self.cumulative[j * self.dim..(j + 1) * self.dim];
        row.iter().zip(phases).map(|(c, p)| (c * p).re).sum()
    }

    /// Ideal (noise-free) quadrature value at phase `phi` for a uniform draw `u`.
    pub fn invert(&self, phi: f64, u: f64, phases: &mut [Complex64]) -> f64 {
        let rot = Complex64::from_polar(1.0, phi);
        let mut p = Complex64::new(1.0, 0.0);
        for ph in phases.iter_mut() {
            *ph = p;
            p *= rot;
        }
        let last = SAMPLER_GRID_POINTS - 1;
        let total = self.cdf_at(last, phases);
        let target = u * total;
        let (mut lo, mut hi) = (0usize, last);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cdf_at(mid, phases) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let f_lo = self.cdf_at(lo, phases);
        let f_hi = self.cdf_at(hi, phases);
        let frac = if f_hi > f_lo { ((target - f_lo) / (f_hi - f_lo)).clamp(0.0, 1.0) } else { 0.5 };
        self.x0 + (lo as f64 + frac) * self.h
    }

    pub fn sample_at_phase<R: Rng + ?Sized>(&self, phi: f64, rng: &mut R) -> f64 {
        let mut phases = vec![Complex64::new(0.0, 0.0); self.dim];
        let x = self.invert(phi, rng.random::<f64>(), &mut phases);
        x + self.noise(rng)
    }

    fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.noise_sd > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            self.noise_sd * z
        } else {
            0.0
        }
    }

    /// Uniform phase in `[0, pi)`, ideal quadrature by inversion, then noise.
    pub fn sample_chunk<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<QuadratureSample> {
        let mut phases = vec![Complex64::new(0.0, 0.0); self.dim];
        (0..count)
            .map(|_| {
                let phi = rng.random::<f64>() * PI;
                let u = rng.random::<f64>();
                let x = self.invert(phi, u, &mut phases) + self.noise(rng);
                QuadratureSample { phi, x }
            })
            .collect()
    }

    /// `count` samples split into seeded chunks of `CHUNK`, one stream each.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<QuadratureSample> {
        let chunks = count.div_ceil(CHUNK);
        let parts: Vec<Vec<QuadratureSample>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = rng::stream(seed, StreamLabel::Sampler, c as u64);
                let len = CHUNK.min(count - c * CHUNK);
                self.sample_chunk(len, &mut rng)
            })
            .collect();
        parts.into_iter().flatten().collect()
    }
}

/// Seeded homodyne data for a state measured through `det`.
pub fn sample_quadratures(
    state: &StateModel,
    det: &DetectorModel,
    count: usize,
    seed: u64,
) -> Result<Vec<QuadratureSample>> {
    if count == 0 {
        return Err(TomoError::InvalidParameter("sample count must be at least 1".into()));
    }
    let rho = state.expand()?;
    Ok(HomodyneSampler::new(&rho, det).sample(count, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn wavefunction_trivial_values() {
        assert_relative_eq!(fock_wavefunction(0, 0.0), 0.8932438417380023, max_relative = 1e-15);
        assert_eq!(fock_wavefunction(1, 0.0), 0.0);
    }

    // (n, x, psi_n(x)) from mpmath with exact rational Hermite coefficients at 50 digits.
    #[test]
    fn wavefunction_high_order_reference() {
        for (n, x, want) in WAVEFUNCTION_REFERENCE {
            let got = fock_wavefunction(n, x);
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    const WAVEFUNCTION_REFERENCE: [(usize, f64, f64); 4] = [
        (25, 1.3, 0.1465705395498204),
        (7, -0.4, 0.3957583640763015),
        (40, 2.9, -0.17118174849599132),
        (60, 0.05, 0.20382198881280418),
    ];

    #[test]
    fn phase_normalization() {
        let s = QuadratureSample::new(PI + 0.3, 1.5);
        assert_relative_eq!(s.phi, 0.3, max_relative = 1e-14);
        assert_eq!(s.x, -1.5);
        let s = QuadratureSample::new(-0.2, 0.7);
        assert_relative_eq!(s.phi, PI - 0.2, max_relative = 1e-14);
        assert_eq!(s.x, -0.7);
        let s = QuadratureSample::new(2.0 * PI, 0.7);
        assert!(s.phi >= 0.0 && s.phi < PI);
    }

    #[test]
    fn detector_delta() {
        assert_eq!(DetectorModel::new(1.0).unwrap().delta2(), 0.0);
        assert_relative_eq!(DetectorModel::new(0.8).unwrap().delta2(), 0.0625);
        assert!(DetectorModel::new(0.0).is_err());
        assert!(DetectorModel::new(1.2).is_err());
    }

    #[test]
    fn vacuum_density_is_gaussian() {
        let state = StateModel::vacuum();
        for &x in &[-1.0, 0.0, 0.37, 2.0] {
            let p = quadrature_pdf(&state, 0.4, x, &DetectorModel::ideal()).unwrap();
            let want = (2.0 / PI).sqrt() * (-2.0 * x * x).exp();
            assert_relative_eq!(p, want, max_relative = 1e-13);
        }
        assert_eq!(quadrature_pdf(&StateModel::fock(1), 1.1, 0.0, &DetectorModel::ideal()).unwrap(), 0.0);
    }

    #[test]
    fn noisy_vacuum_variance() {
        let det = DetectorModel::new(0.7).unwrap();
        let var = 0.25 + det.delta2();
        for &x in &[-1.5, 0.0, 0.8] {
            let p = quadrature_pdf(&StateModel::vacuum(), 0.0, x, &det).unwrap();
            let want = (-x * x / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
            assert_relative_eq!(p, want, max_relative = 1e-13);
        }
    }

    #[test]
    fn coherent_truncation_error() {
        let s = StateModel::coherent(Complex64::new(3.0, 0.0)).with_truncation(5);
        assert!(matches!(s.expand(), Err(TomoError::Truncation { .. })));
        let rho = StateModel::coherent(Complex64::new(3.0, 0.0)).expand().unwrap();
        assert!((rho.trace() - 1.0).abs() < 1e-12);
        assert!(StateModel::fock(3).with_truncation(3).expand().is_err());
    }

    #[test]
    fn state_json_round_trip() {
        let s = StateModel::coherent(Complex64::new(1.0, -0.5)).with_truncation(12);
        let back = StateModel::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        let m = StateModel::from_json(r#"{"type":"matrix","rho":[[[0.5,0],[0,0.5]],[[0,-0.5],[0.5,0]]]}"#).unwrap();
        assert_eq!(m.truncation, 2);
        let bad = StateModel::from_json(r#"{"type":"matrix","rho":[[[0.5,0],[0.2,0]],[[0,0],[0.5,0]]]}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn invalid_matrices_rejected() {
        let c = |re: f64| Complex64::new(re, 0.0);
        assert!(FockDensityMatrix::new(2, vec![c(0.6), c(0.0), c(0.0), c(0.6)]).is_err());
        assert!(FockDensityMatrix::new(2, vec![c(1.2), c(0.0), c(0.0), c(-0.2)]).is_err());
        assert!(FockDensityMatrix::new(2, vec![c(0.5), c(0.5), c(0.5), c(0.5)]).is_ok());
    }

    #[test]
    fn smeared_basis_matches_density() {
        let rho = StateModel::coherent(Complex64::new(0.6, 0.3)).with_truncation(10).expand().unwrap();
        let det = DetectorModel::new(0.75).unwrap();
        let dens = QuadratureDensity::new(&rho, &det);
        let basis = SmearedBasis::new(10, 0.75);
        let mut psi = vec![0.0; 10];
        let mut g = vec![0.0; 100];
        for &(phi, x) in &[(0.0, 0.3), (1.2, -0.9), (2.9, 1.7)] {
            basis.eval_into(x, &mut psi, &mut g);
            let mut p = 0.0;
            for n in 0..10 {
                for m in 0..10 {
                    let ph = Complex64::from_polar(1.0, (m as f64 - n as f64) * phi);
                    p += (rho.get(n, m) * ph).re * g[n * 10 + m];
                }
            }
            assert_relative_eq!(p, dens.pdf(phi, x), max_relative = 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let det = DetectorModel::new(0.9).unwrap();
        let a = sample_quadratures(&StateModel::fock(2), &det, 10_000, 11).unwrap();
        let b = sample_quadratures(&StateModel::fock(2), &det, 10_000, 11).unwrap();
        assert_eq!(a, b);
        let c = sample_quadratures(&StateModel::fock(2), &det, 10_000, 12).unwrap();
        assert_ne!(a, c);
        assert!(a.iter().all(|s| s.phi >= 0.0 && s.phi < PI));
    }
}
