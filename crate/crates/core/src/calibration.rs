//! Detector calibration with a twin-beam probe: theoretical POVM of an
//! inefficient counter with dark counts, faithfulness of bipartite inputs,
//! joint-data simulation and POVM reconstruction by inverse-map averaging
//! and by maximum likelihood.

use crate::linalg::hermitian_eigen;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::averaging::Moments;
use crate::error::{check_eta_deconvolution, check_eta_forward, Result, TomoError};
use crate::kernels::KernelBank;
use crate::rng::{self, StreamLabel, CHUNK};
use crate::special::binomial;
use crate::states::{DetectorModel, FockDensityMatrix, HomodyneSampler, SmearedBasis};

/// Twin-beam mass that the default truncation must capture.
pub const TWIN_BEAM_MASS: f64 = 0.999;
const SERIES_LIMIT: usize = 10_000;
const SERIES_TOL: f64 = 1e-14;
const SERIES_ACCURACY: f64 = 1e-9;
const INTERIOR_GAP: f64 = 1e-9;
const INTERIOR_RESIDUAL: f64 = 1e-10;
const WARM_EM_ITERS: usize = 20;

fn check_response(eta: f64, nbar: f64) -> Result<()> {
    check_eta_forward(eta)?;
    if !(nbar >= 0.0) || !nbar.is_finite() {
        return Err(TomoError::InvalidParameter(format!("dark-count mean must be >= 0, got {nbar}")));
    }
    Ok(())
}

/// `<m|Π_n|m>` of a counter with efficiency `eta` whose idle port carries a
/// thermal state of mean `nbar`.
///
/// Evaluated by the double series with the generalized binomial
/// `C(-n-1, k) = (-1)^k C(n+k, k)` and `μ = (1-η) n̄`:
/// `Σ_k C(-n-1,k) Σ_j C(m,j) C(k+n,j) η^j μ^{k+n-j}`.
/// The k-series converges only for `μ < 1`; for `μ = 0` it is a finite sum.
/// The alternating terms cancel heavily for large `n` or `m`; when the
/// largest term leaves less than 1e-9 absolute accuracy a Numerical error is
/// returned, and [`beam_splitter_povm`] should be used instead.
pub fn theoretical_povm(eta: f64, nbar: f64, n: usize, m: usize) -> Result<f64> {
    check_response(eta, nbar)?;
    let mu = (1.0 - eta) * nbar;
    let inner = |k: usize| -> f64 {
        let top = m.min(k + n);
        (0..=top)
            .map(|j| {
                let e = (k + n - j) as i32;
                binomial(m, j) * binomial(k + n, j) * eta.powi(j as i32) * if e == 0 { 1.0 } else { mu.powi(e) }
            })
            .sum()
    };
    let mut total = 0.0;
    let mut coef = 1.0; // C(-n-1, k)
    let mut prev = f64::INFINITY;
    let mut largest = 0.0f64;
    let checked = |total: f64, largest: f64| {
        if largest * f64::EPSILON > SERIES_ACCURACY {
            Err(TomoError::Numerical(format!("POVM series for n = {n}, m = {m} cancels terms of size {largest:.1e}")))
        } else {
            Ok(total)
        }
    };
    for k in 0..SERIES_LIMIT {
        if k > 0 {
            coef *= -((n + k) as f64) / k as f64;
        }
        if mu == 0.0 && k + n > m {
            return checked(total, largest);
        }
        let term = coef * inner(k);
        total += term;
        let mag = term.abs();
        largest = largest.max(mag);
        if mu > 0.0 && k > n + m && mag <= prev && mag <= SERIES_TOL * total.abs().max(1e-300) {
            return checked(total, largest);
        }
        prev = mag;
    }
    Err(TomoError::Convergence(format!(
        "POVM series for n = {n}, m = {m} did not converge in {SERIES_LIMIT} terms (mu = {mu})"
    )))
}

/// Beam-splitter unitary restricted to `T` total photons, `U[i][p]` with
/// `i` photons left in the counted mode. Built from the eigensystem of the
/// real symmetric tridiagonal form of the generator.
fn beam_splitter_sector(total: usize, eta: f64) -> Vec<Vec<f64>> {
    let size = total + 1;
    let theta = eta.sqrt().acos();
    let mut s = DMatrix::<f64>::zeros(size, size);
    for l in 0..total {
        let c = (((l + 1) * (total - l)) as f64).sqrt();
        s[(l + 1, l)] = c;
        s[(l, l + 1)] = c;
    }
    let eig = s.symmetric_eigen();
    let phases: Vec<Complex64> = eig.eigenvalues.iter().map(|l| Complex64::from_polar(1.0, -theta * l)).collect();
    let mut prob = vec![vec![0.0; size]; size];
    for i in 0..size {
        for p in 0..size {
            let mut a = Complex64::new(0.0, 0.0);
            for (l, ph) in phases.iter().enumerate() {
                a += ph * (eig.eigenvectors[(i, l)] * eig.eigenvectors[(p, l)]);
            }
            prob[i][p] = a.norm_sqr();
        }
    }
    prob
}

/// Thermal weights `n̄^k / (1+n̄)^{k+1}` until the tail falls below 1e-17.
fn thermal_weights(nbar: f64) -> Vec<f64> {
    if nbar == 0.0 {
        return vec![1.0];
    }
    let q = nbar / (1.0 + nbar);
    // the mass beyond k terms is q^k
    let terms = ((1e-17f64).ln() / q.ln()).ceil().max(1.0) as usize;
    (0..terms).map(|k| q.powi(k as i32) / (1.0 + nbar)).collect()
}

/// Brute-force response table `P[n][m]` for `n <= n_max`, `m < dim`: Fock
/// `m` and a thermal ancilla meet on a beam splitter of transmissivity
/// `eta`, and the transmitted mode is counted.
pub fn beam_splitter_response(eta: f64, nbar: f64, n_max: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    check_response(eta, nbar)?;
    let weights = thermal_weights(nbar);
    let mut table = vec![vec![0.0; dim]; n_max + 1];
    let sectors: Vec<Vec<Vec<f64>>> =
        (0..dim + weights.len()).into_par_iter().map(|t| beam_splitter_sector(t, eta)).collect();
    for m in 0..dim {
        for (k, w) in weights.iter().enumerate() {
            let u = &sectors[m + k];
            for (n, row) in table.iter_mut().enumerate() {
                if n <= m + k {
                    row[m] += w * u[n][m];
                }
            }
        }
    }
    Ok(table)
}

/// Single entry of [`beam_splitter_response`].
pub fn beam_splitter_povm(eta: f64, nbar: f64, n: usize, m: usize) -> Result<f64> {
    Ok(beam_splitter_response(eta, nbar, n, m + 1)?[n][m])
}

/// Diagonal POVM `P[n][m] = <m|Π_n|m>` for `n <= n_max`, `m < dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalPOVM {
    pub n_max: usize,
    pub dim: usize,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "err", default, skip_serializing_if = "Option::is_none")]
    pub errors: Option<Vec<Vec<f64>>>,
    /// Pooled outcomes above `n_max`, when estimated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overflow: Option<Vec<f64>>,
    pub method: String,
}

impl DiagonalPOVM {
    /// Exact response of a lossy counter with thermal dark counts, from the
    /// two-mode construction (stable at any size).
    pub fn theoretical(eta: f64, nbar: f64, n_max: usize, dim: usize) -> Result<Self> {
        let p = beam_splitter_response(eta, nbar, n_max, dim)?;
        Ok(Self { n_max, dim, p, errors: None, overflow: None, method: "theory".into() })
    }

    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.p[n][m]
    }

    pub fn error(&self, n: usize, m: usize) -> Option<f64> {
        self.errors.as_ref().map(|e| e[n][m])
    }

    /// `Σ_n P[n][m]`, overflow row included.
    pub fn column_sum(&self, m: usize) -> f64 {
        self.p.iter().map(|r| r[m]).sum::<f64>() + self.overflow.as_ref().map_or(0.0, |o| o[m])
    }
}

/// Density matrix on `A ⊗ B`, index `a * dim_b + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteState {
    dim_a: usize,
    dim_b: usize,
    matrix: DMatrix<Complex64>,
}

impl BipartiteState {
    pub fn new(dim_a: usize, dim_b: usize, matrix: DMatrix<Complex64>) -> Result<Self> {
        let d = dim_a * dim_b;
        if matrix.nrows() != d || matrix.ncols() != d || d == 0 {
            return Err(TomoError::InvalidState(format!(
                "expected a {d}×{d} matrix, got {}×{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if (&matrix - matrix.adjoint()).iter().any(|v| v.norm() > 1e-10) {
            return Err(TomoError::InvalidState("matrix is not Hermitian".into()));
        }
        if (matrix.trace().re - 1.0).abs() > 1e-10 {
            return Err(TomoError::InvalidState(format!("trace {} differs from 1", matrix.trace().re)));
        }
        let h = (&matrix + matrix.adjoint()) * Complex64::new(0.5, 0.0);
        if hermitian_eigen(h).eigenvalues.iter().any(|v| *v < -1e-10) {
            return Err(TomoError::InvalidState("matrix is not positive semidefinite".into()));
        }
        Ok(Self { dim_a, dim_b, matrix })
    }

    /// Pure state from (unnormalized) amplitudes.
    pub fn pure(dim_a: usize, dim_b: usize, amplitudes: &[Complex64]) -> Result<Self> {
        let v = DVector::from_column_slice(amplitudes);
        let norm = v.norm();
        if norm == 0.0 {
            return Err(TomoError::InvalidState("zero vector".into()));
        }
        if v.len() != dim_a * dim_b || dim_a * dim_b == 0 {
            return Err(TomoError::InvalidState(format!("expected {} amplitudes, got {}", dim_a * dim_b, v.len())));
        }
        let v = v / Complex64::new(norm, 0.0);
        // rank one and unit trace by construction
        Ok(Self { dim_a, dim_b, matrix: &v * v.adjoint() })
    }

    pub fn maximally_entangled(dim: usize) -> Self {
        let mut amp = vec![Complex64::new(0.0, 0.0); dim * dim];
        for i in 0..dim {
            amp[i * dim + i] = Complex64::new(1.0, 0.0);
        }
        Self::pure(dim, dim, &amp).expect("valid by construction")
    }

    pub fn product(a: &[Complex64], b: &[Complex64]) -> Result<Self> {
        let amp: Vec<Complex64> = a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect();
        Self::pure(a.len(), b.len(), &amp)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim_a, self.dim_b)
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    fn at(&self, a: usize, b: usize, a2: usize, b2: usize) -> Complex64 {
        self.matrix[(a * self.dim_b + b, a2 * self.dim_b + b2)]
    }

    /// `Tr_A[(Π ⊗ 1) R]`, the unnormalized conditional state of B.
    pub fn conditional(&self, pi: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let (da, db) = (self.dim_a, self.dim_b);
        DMatrix::from_fn(db, db, |j, k| {
            let mut s = Complex64::new(0.0, 0.0);
            for l in 0..da {
                for i in 0..da {
                    s += pi[(l, i)] * self.at(i, j, l, k);
                }
            }
            s
        })
    }

    /// Matrix of the linear map `Π -> Tr_A[(Π ⊗ 1) R]` with rows `(j, k)` of
    /// B and columns `(l, i)` of A; entrywise the partial transpose
    /// `R^{T_A}_{(l j),(i k)}`.
    pub fn transfer_matrix(&self) -> DMatrix<Complex64> {
        let (da, db) = (self.dim_a, self.dim_b);
        DMatrix::from_fn(db * db, da * da, |row, col| {
            let (j, k) = (row / db, row % db);
            let (l, i) = (col / da, col % da);
            self.at(i, j, l, k)
        })
    }
}

/// `sqrt(1-|ξ|²) Σ_m ξ^m |m>|m>`, truncated to `m < truncation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwinBeam {
    pub xi: Complex64,
    pub truncation: usize,
}

impl TwinBeam {
    pub fn new(xi: Complex64, truncation: Option<usize>) -> Result<Self> {
        if !(xi.norm() < 1.0) {
            return Err(TomoError::InvalidParameter(format!("twin-beam gain |xi| must be < 1, got {}", xi.norm())));
        }
        let truncation = truncation.unwrap_or_else(|| twin_beam_truncation(xi.norm()));
        let kept = 1.0 - xi.norm_sqr().powi(truncation as i32);
        if kept < TWIN_BEAM_MASS {
            return Err(TomoError::Truncation { dim: truncation, kept, required: TWIN_BEAM_MASS });
        }
        Ok(Self { xi, truncation })
    }

    /// `(1-|ξ|²) |ξ|^{2m}`.
    pub fn weight(&self, m: usize) -> f64 {
        let q = self.xi.norm_sqr();
        (1.0 - q) * q.powi(m as i32)
    }

    /// Normalized bipartite state on the truncated space.
    pub fn state(&self) -> BipartiteState {
        let d = self.truncation;
        let mut amp = vec![Complex64::new(0.0, 0.0); d * d];
        let s = (1.0 - self.xi.norm_sqr()).sqrt();
        for m in 0..d {
            amp[m * d + m] = s * self.xi.powi(m as i32);
        }
        BipartiteState::pure(d, d, &amp).expect("nonzero")
    }
}

/// Smallest `d` with `(1-|ξ|²) Σ_{m<d} |ξ|^{2m} >= 0.999`.
pub fn twin_beam_truncation(xi_abs: f64) -> usize {
    if xi_abs == 0.0 {
        return 1;
    }
    ((1.0 - TWIN_BEAM_MASS).ln() / (xi_abs * xi_abs).ln()).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Faithfulness {
    pub faithful: bool,
    pub condition_number: f64,
}

/// Invertibility of the calibration map of `state`, from the singular values
/// of its transfer matrix (smallest above 1e-10 of the largest).
pub fn faithfulness_check(state: &BipartiteState) -> Result<Faithfulness> {
    let (da, db) = state.dims();
    if da + db > 64 {
        return Err(TomoError::InvalidParameter(format!(
            "faithfulness check limited to 64 total dimensions, got {}",
            da + db
        )));
    }
    let m = state.transfer_matrix();
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let injective = db >= da;
    let faithful = injective && max > 0.0 && min > 1e-10 * max;
    let condition_number = if min > 0.0 { max / min } else { f64::INFINITY };
    Ok(Faithfulness { faithful, condition_number })
}

/// Solves `Tr_A[(Π ⊗ 1) R] = Y` for `Π`.
pub fn inverse_map(state: &BipartiteState, y: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let (da, db) = state.dims();
    if y.nrows() != db || y.ncols() != db {
        return Err(TomoError::InvalidParameter(format!("expected a {db}×{db} operator on B")));
    }
    let f = faithfulness_check(state)?;
    if !f.faithful {
        return Err(TomoError::SingularBasis("input state is not faithful".into()));
    }
    let m = state.transfer_matrix();
    let rhs = DVector::from_fn(db * db, |r, _| y[(r / db, r % db)]);
    let x = m.svd(true, true).solve(&rhs, 1e-12).map_err(|e| TomoError::Numerical(e.to_string()))?;
    Ok(DMatrix::from_fn(da, da, |l, i| x[l * da + i]))
}

/// Twin-beam inverse map on the diagonal:
/// `P[n][m] = p(n) ρ^{(n)}_mm / ((1-|ξ|²)|ξ|^{2m})`.
pub fn invert_twin_beam_diagonal(p_n: f64, rho_diag: &[f64], xi_abs: f64) -> Vec<f64> {
    let q = xi_abs * xi_abs;
    rho_diag.iter().enumerate().map(|(m, r)| p_n * r / ((1.0 - q) * q.powi(m as i32))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointRecord {
    pub n: usize,
    pub phi: f64,
    pub x: f64,
}

/// Physical configuration of a calibration run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSetup {
    pub xi: f64,
    pub eta: f64,
    pub nbar: f64,
    pub eta_h: f64,
}

impl CalibrationSetup {
    pub fn validate(&self) -> Result<()> {
        check_response(self.eta, self.nbar)?;
        check_eta_forward(self.eta_h)?;
        if !(self.xi.abs() < 1.0) {
            return Err(TomoError::InvalidParameter(format!("|xi| must be < 1, got {}", self.xi)));
        }
        Ok(())
    }
}

fn cdf(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w.max(0.0) / total;
            acc
        })
        .collect()
}

fn draw(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|c| *c <= u).min(cdf.len() - 1)
}

/// Seeded joint records: a twin-beam photon number `m` is drawn, the
/// detector answers `n` with probability `P[n][m]`, and B records a
/// quadrature of Fock state `m` at a uniform phase through efficiency `eta_h`.
pub fn simulate_joint(
    setup: &CalibrationSetup,
    count: usize,
    seed: u64,
    truncation: Option<usize>,
) -> Result<Vec<JointRecord>> {
    setup.validate()?;
    if count == 0 {
        return Err(TomoError::InvalidParameter("record count must be at least 1".into()));
    }
    let tb = TwinBeam::new(Complex64::new(setup.xi, 0.0), truncation)?;
    let d = tb.truncation;
    let mu = (1.0 - setup.eta) * setup.nbar;
    let tail = if mu > 0.0 { ((1e-15f64).ln() / (mu / (1.0 + mu)).ln()).ceil() as usize } else { 0 };
    let n_cap = (d - 1 + tail).min(d + 400);
    let response = beam_splitter_response(setup.eta, setup.nbar, n_cap, d)?;
    let pair_cdf = cdf(&(0..d).map(|m| tb.weight(m)).collect::<Vec<_>>());
    let count_cdf: Vec<Vec<f64>> =
        (0..d).map(|m| cdf(&response.iter().map(|row| row[m]).collect::<Vec<_>>())).collect();
    let det = DetectorModel::new(setup.eta_h)?;
    let samplers: Vec<HomodyneSampler> = (0..d)
        .into_par_iter()
        .map(|m| HomodyneSampler::new(&FockDensityMatrix::fock(m, m + 1), &DetectorModel::ideal()))
        .collect();
    let noise_sd = det.delta2().sqrt();
    let chunks = count.div_ceil(CHUNK);
    let parts: Vec<Vec<JointRecord>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(seed, StreamLabel::Calibration, c as u64);
            let mut phases = vec![Complex64::new(0.0, 0.0); d];
            let len = CHUNK.min(count - c * CHUNK);
            (0..len)
                .map(|_| {
                    let m = draw(&pair_cdf, rng.random());
                    let n = draw(&count_cdf[m], rng.random());
                    let phi = rng.random::<f64>() * PI;
                    let mut x = samplers[m].invert(phi, rng.random(), &mut phases[..m + 1]);
                    if noise_sd > 0.0 {
                        let z: f64 = rng.sample(rand_distr::StandardNormal);
                        x += noise_sd * z;
                    }
                    JointRecord { n, phi, x }
                })
                .collect()
        })
        .collect();
    Ok(parts.into_iter().flatten().collect())
}

/// Wilson score half-width at `z = 1`.
fn wilson_halfwidth(p: f64, total: f64) -> f64 {
    let z2 = 1.0;
    (p * (1.0 - p) / total + z2 / (4.0 * total * total)).sqrt() / (1.0 + z2 / total)
}

/// Inverse-map reconstruction: frequency of each outcome, kernel-averaged
/// diagonal of B's conditional state (deconvolving `eta_h`), then the
/// twin-beam diagonal inverse. Errors combine both in quadrature.
pub fn calibrate_averaging(
    records: &[JointRecord],
    xi: f64,
    eta_h: f64,
    n_max: usize,
    dim: usize,
) -> Result<DiagonalPOVM> {
    check_eta_deconvolution(eta_h)?;
    if !(xi.abs() < 1.0) || xi == 0.0 {
        return Err(TomoError::InvalidParameter(format!("need 0 < |xi| < 1, got {xi}")));
    }
    if records.is_empty() {
        return Err(TomoError::InsufficientData("no records".into()));
    }
    let total = records.len() as f64;
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); n_max + 1];
    for r in records {
        if r.n <= n_max {
            groups[r.n].push(r.x);
        }
    }
    if let Some(n) = groups.iter().position(|g| g.is_empty()) {
        return Err(TomoError::EmptyOutcomeBin(n));
    }
    let bank = KernelBank::new(dim, eta_h)?;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = groups
        .par_iter()
        .map(|xs| {
            let parts: Vec<Vec<Moments>> = xs
                .par_chunks(CHUNK)
                .map(|ch| {
                    let mut acc = vec![Moments::default(); dim];
                    let mut scratch = vec![0.0; bank.scratch_len()];
                    let mut diag = vec![0.0; dim];
                    for x in ch {
                        bank.diagonal_into(*x, &mut scratch, &mut diag);
                        acc.iter_mut().zip(&diag).for_each(|(a, v)| a.push(*v));
                    }
                    acc
                })
                .collect();
            let mut acc = vec![Moments::default(); dim];
            for p in &parts {
                acc.iter_mut().zip(p).for_each(|(a, b)| a.merge(b));
            }
            (acc.iter().map(|a| a.mean).collect(), acc.iter().map(|a| a.std_error()).collect())
        })
        .collect();
    let q = xi * xi;
    let mut p = vec![vec![0.0; dim]; n_max + 1];
    let mut err = vec![vec![0.0; dim]; n_max + 1];
    for (n, (rho, rho_err)) in rows.iter().enumerate() {
        let pn = groups[n].len() as f64 / total;
        let pn_err = wilson_halfwidth(pn, total);
        p[n] = invert_twin_beam_diagonal(pn, rho, xi.abs());
        for m in 0..dim {
            let w = (1.0 - q) * q.powi(m as i32);
            err[n][m] = (pn * rho_err[m]).hypot(rho[m] * pn_err) / w;
        }
    }
    Ok(DiagonalPOVM { n_max, dim, p, errors: Some(err), overflow: None, method: "averaging".into() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationMlConfig {
    /// Expectation-maximization iterations before the constrained Newton refinement.
    pub em_iters: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// `None` starts from the uniform response; `Some(i)` from random
    /// columns drawn on optimizer stream `i`.
    pub random_start: Option<u64>,
    pub refine: bool,
}

impl Default for CalibrationMlConfig {
    fn default() -> Self {
        Self { em_iters: 50, max_iters: 2000, tol: 1e-10, seed: 0, random_start: None, refine: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMlReport {
    pub iters: usize,
    pub em_iters: usize,
    pub loglik: f64,
    pub converged: bool,
    #[serde(skip)]
    pub history: Vec<f64>,
}

/// Per-record mixture weights `(1-|ξ|²)|ξ|^{2m} q_m(x)` grouped by outcome.
struct CalibrationData {
    dim: usize,
    rows: usize,
    // per outcome row: flattened [record][m]
    weights: Vec<Vec<f64>>,
}

impl CalibrationData {
    fn new(records: &[JointRecord], xi: f64, eta_h: f64, n_max: usize, dim: usize) -> Self {
        let basis = SmearedBasis::new(dim, eta_h);
        let q = xi * xi;
        let w: Vec<f64> = (0..dim).map(|m| (1.0 - q) * q.powi(m as i32)).collect();
        let rows = n_max + 2;
        let mut xs: Vec<Vec<f64>> = vec![Vec::new(); rows];
        for r in records {
            xs[r.n.min(n_max + 1)].push(r.x);
        }
        let weights = xs
            .par_iter()
            .map(|list| {
                let mut psi = vec![0.0; dim];
                let mut g = vec![0.0; dim];
                let mut out = Vec::with_capacity(list.len() * dim);
                for x in list {
                    basis.diagonal_into(*x, &mut psi, &mut g);
                    out.extend(g.iter().zip(&w).map(|(a, b)| (a * b).max(0.0)));
                }
                out
            })
            .collect();
        Self { dim, rows, weights }
    }

    fn loglik(&self, p: &[Vec<f64>]) -> f64 {
        let d = self.dim;
        let parts: Vec<f64> = (0..self.rows)
            .into_par_iter()
            .map(|n| {
                self.weights[n]
                    .chunks(d)
                    .map(|a| a.iter().zip(&p[n]).map(|(x, y)| x * y).sum::<f64>().max(1e-300).ln())
                    .sum()
            })
            .collect();
        parts.iter().sum()
    }

    fn em_step(&self, p: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = self.dim;
        let counts: Vec<Vec<f64>> = (0..self.rows)
            .into_par_iter()
            .map(|n| {
                let mut c = vec![0.0; d];
                for a in self.weights[n].chunks(d) {
                    let f: f64 = a.iter().zip(&p[n]).map(|(x, y)| x * y).sum::<f64>().max(1e-300);
                    for m in 0..d {
                        c[m] += a[m] * p[n][m] / f;
                    }
                }
                c
            })
            .collect();
        let mut out = counts;
        for m in 0..d {
            let s: f64 = out.iter().map(|r| r[m]).sum();
            if s > 0.0 {
                out.iter_mut().for_each(|r| r[m] /= s);
            } else {
                out.iter_mut().zip(p).for_each(|(r, old)| r[m] = old[m]);
            }
        }
        out
    }

    /// Gradient and per-outcome Hessian blocks of the log-likelihood.
    fn derivatives(&self, p: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<DMatrix<f64>>) {
        let d = self.dim;
        (0..self.rows)
            .into_par_iter()
            .map(|n| {
                let mut g = vec![0.0; d];
                let mut h = DMatrix::<f64>::zeros(d, d);
                for a in self.weights[n].chunks(d) {
                    let f: f64 = a.iter().zip(&p[n]).map(|(x, y)| x * y).sum::<f64>().max(1e-300);
                    let inv = 1.0 / f;
                    for i in 0..d {
                        let ai = a[i] * inv;
                        g[i] += ai;
                        if ai != 0.0 {
                            for j in i..d {
                                h[(i, j)] -= ai * a[j] * inv;
                            }
                        }
                    }
                }
                for i in 0..d {
                    for j in 0..i {
                        h[(i, j)] = h[(j, i)];
                    }
                }
                (g, h)
            })
            .unzip()
    }
}

fn initial_response(rows: usize, dim: usize, config: &CalibrationMlConfig) -> Vec<Vec<f64>> {
    match config.random_start {
        None => vec![vec![1.0 / rows as f64; dim]; rows],
        Some(i) => {
            let mut r = rng::stream(config.seed, StreamLabel::Optimizer, i);
            let mut p: Vec<Vec<f64>> =
                (0..rows).map(|_| (0..dim).map(|_| -(1.0 - r.random::<f64>()).ln()).collect()).collect();
            for m in 0..dim {
                let s: f64 = p.iter().map(|row| row[m]).sum();
                p.iter_mut().for_each(|row| row[m] /= s);
            }
            p
        }
    }
}

/// Primal-dual interior-point refinement of
/// `max L(P)` subject to `P >= 0` and `Σ_n P[n][m] = 1`.
///
/// The Hessian of `L` is block diagonal over outcomes, so each Newton step
/// reduces to one `dim × dim` Schur-complement solve for the multipliers.
fn refine_interior(
    data: &CalibrationData,
    mut p: Vec<Vec<f64>>,
    tracker: &mut (Vec<f64>, usize),
    config: &CalibrationMlConfig,
) -> (Vec<Vec<f64>>, bool) {
    let d = data.dim;
    let rows = data.rows;
    let vars = (rows * d) as f64;
    for m in 0..d {
        for row in p.iter_mut() {
            row[m] = row[m].max(1e-10);
        }
        let s: f64 = p.iter().map(|r| r[m]).sum();
        p.iter_mut().for_each(|r| r[m] /= s);
    }
    let (g0, _) = data.derivatives(&p);
    // multipliers from the current point: ν_m = Σ_n P[n][m] g[n][m]
    let mut nu: Vec<f64> = (0..d).map(|m| (0..rows).map(|n| p[n][m] * g0[n][m]).sum()).collect();
    let scale = nu.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mu0 = 1e-6 * scale;
    let mut z: Vec<Vec<f64>> =
        (0..rows).map(|n| (0..d).map(|m| (nu[m] - g0[n][m]).max(mu0 / p[n][m])).collect()).collect();
    loop {
        if tracker.1 >= config.max_iters {
            return (p, false);
        }
        let (g, h) = data.derivatives(&p);
        let gap: f64 = (0..rows).map(|n| (0..d).map(|m| z[n][m] * p[n][m]).sum::<f64>()).sum();
        let dual_res = (0..rows)
            .flat_map(|n| (0..d).map(move |m| (n, m)))
            .map(|(n, m)| (g[n][m] + z[n][m] - nu[m]).abs())
            .fold(0.0, f64::max);
        if gap < INTERIOR_GAP && dual_res < INTERIOR_RESIDUAL * scale {
            break;
        }
        tracker.1 += 1;
        let mu = 0.1 * gap / vars;
        let mut ainv = Vec::with_capacity(rows);
        let mut ainv_b = Vec::with_capacity(rows);
        let mut schur = DMatrix::<f64>::zeros(d, d);
        let mut rhs = DVector::<f64>::zeros(d);
        for n in 0..rows {
            let mut a = -&h[n];
            let mut b = DVector::<f64>::zeros(d);
            for m in 0..d {
                a[(m, m)] += z[n][m] / p[n][m];
                b[m] = g[n][m] + z[n][m] - nu[m] + (mu - z[n][m] * p[n][m]) / p[n][m];
            }
            let Some(ch) = a.cholesky() else {
                return (p, false);
            };
            let ai = ch.inverse();
            let aib = &ai * &b;
            schur += &ai;
            rhs += &aib;
            ainv.push(ai);
            ainv_b.push(aib);
        }
        for m in 0..d {
            rhs[m] += (0..rows).map(|n| p[n][m]).sum::<f64>() - 1.0;
        }
        let Some(dnu) = schur.cholesky().map(|c| c.solve(&rhs)) else {
            return (p, false);
        };
        let dp: Vec<DVector<f64>> = (0..rows).map(|n| &ainv_b[n] - &ainv[n] * &dnu).collect();
        let dz: Vec<Vec<f64>> = (0..rows)
            .map(|n| (0..d).map(|m| (mu - z[n][m] * p[n][m] - z[n][m] * dp[n][m]) / p[n][m]).collect())
            .collect();
        let (mut ap, mut ad) = (1.0f64, 1.0f64);
        for n in 0..rows {
            for m in 0..d {
                if dp[n][m] < 0.0 {
                    ap = ap.min(-0.995 * p[n][m] / dp[n][m]);
                }
                if dz[n][m] < 0.0 {
                    ad = ad.min(-0.995 * z[n][m] / dz[n][m]);
                }
            }
        }
        for n in 0..rows {
            for m in 0..d {
                p[n][m] += ap * dp[n][m];
                z[n][m] += ad * dz[n][m];
            }
        }
        nu.iter_mut().zip(dnu.iter()).for_each(|(v, dv)| *v += ad * dv);
        tracker.0.push(data.loglik(&p));
    }
    for m in 0..d {
        let s: f64 = p.iter().map(|r| r[m]).sum();
        p.iter_mut().for_each(|r| r[m] = (r[m] / s).max(0.0));
    }
    (p, true)
}

fn ml_fit(
    data: &CalibrationData,
    config: &CalibrationMlConfig,
    start: Option<Vec<Vec<f64>>>,
) -> (Vec<Vec<f64>>, CalibrationMlReport) {
    let warm = start.is_some();
    let mut p = start.unwrap_or_else(|| initial_response(data.rows, data.dim, config));
    let em_budget = if warm { config.em_iters.min(WARM_EM_ITERS) } else { config.em_iters };
    let mut ll = data.loglik(&p);
    let mut history = vec![ll];
    let mut iters = 0;
    let mut small = 0;
    let mut converged = false;
    while iters < em_budget.min(config.max_iters) {
        iters += 1;
        let next = data.em_step(&p);
        let ll_next = data.loglik(&next);
        let rel = (ll_next - ll) / ll.abs().max(1e-300);
        p = next;
        ll = ll_next;
        history.push(ll);
        small = if rel < config.tol { small + 1 } else { 0 };
        if small >= 5 {
            converged = true;
            break;
        }
    }
    let em_iters = iters;
    if !converged && config.refine {
        let mut tracker = (history, iters);
        let (q, ok) = refine_interior(data, p, &mut tracker, config);
        p = q;
        history = tracker.0;
        iters = tracker.1;
        converged = ok;
        ll = data.loglik(&p);
    }
    let report = CalibrationMlReport { iters, em_iters, loglik: ll, converged, history };
    (p, report)
}

fn povm_from_rows(p: Vec<Vec<f64>>, n_max: usize, dim: usize, errors: Option<Vec<Vec<f64>>>) -> DiagonalPOVM {
    let mut rows = p;
    let overflow = rows.pop();
    DiagonalPOVM { n_max, dim, p: rows, errors, overflow, method: "ml".into() }
}

/// Maximum-likelihood diagonal POVM from joint records; outcomes above
/// `n_max` are pooled into the overflow row. No error bars; see
/// [`calibrate_ml_bootstrap`].
pub fn calibrate_ml(
    records: &[JointRecord],
    xi: f64,
    eta_h: f64,
    n_max: usize,
    dim: usize,
    config: &CalibrationMlConfig,
) -> Result<(DiagonalPOVM, CalibrationMlReport)> {
    check_eta_forward(eta_h)?;
    if records.is_empty() {
        return Err(TomoError::InsufficientData("no records".into()));
    }
    if !(xi.abs() < 1.0) || dim == 0 {
        return Err(TomoError::InvalidParameter("need |xi| < 1 and dim >= 1".into()));
    }
    let data = CalibrationData::new(records, xi, eta_h, n_max, dim);
    let (p, report) = ml_fit(&data, config, None);
    if !report.converged {
        log::warn!("calibration ML stopped after {} iterations without converging", report.iters);
    }
    Ok((povm_from_rows(p, n_max, dim, None), report))
}

/// [`calibrate_ml`] with element-wise bootstrap standard deviations over
/// `resamples` record resamples, each warm-started from the full estimate.
pub fn calibrate_ml_bootstrap(
    records: &[JointRecord],
    xi: f64,
    eta_h: f64,
    n_max: usize,
    dim: usize,
    config: &CalibrationMlConfig,
    resamples: usize,
) -> Result<(DiagonalPOVM, CalibrationMlReport)> {
    if resamples < 2 {
        return Err(TomoError::InsufficientData(format!("need at least 2 resamples, got {resamples}")));
    }
    let (full, report) = calibrate_ml(records, xi, eta_h, n_max, dim, config)?;
    let mut start = full.p.clone();
    start.push(full.overflow.clone().unwrap_or_else(|| vec![0.0; dim]));
    let n = records.len();
    let fits: Vec<Option<Vec<Vec<f64>>>> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(config.seed, StreamLabel::Bootstrap, r as u64);
            let data: Vec<JointRecord> = (0..n).map(|_| records[rng.random_range(0..n)]).collect();
            let cd = CalibrationData::new(&data, xi, eta_h, n_max, dim);
            let (p, rep) = ml_fit(&cd, config, Some(start.clone()));
            rep.converged.then_some(p)
        })
        .collect();
    let ok: Vec<&Vec<Vec<f64>>> = fits.iter().flatten().collect();
    if ok.len() < resamples {
        log::warn!("{} of {resamples} bootstrap fits did not converge and were excluded", resamples - ok.len());
    }
    if ok.len() < 2 {
        return Err(TomoError::NotConverged { iters: config.max_iters });
    }
    let mut err = vec![vec![0.0; dim]; n_max + 1];
    for (nn, row) in err.iter_mut().enumerate() {
        for (m, e) in row.iter_mut().enumerate() {
            let mut mo = Moments::default();
            ok.iter().for_each(|p| mo.push(p[nn][m]));
            *e = mo.variance().sqrt();
        }
    }
    Ok((DiagonalPOVM { errors: Some(err), ..full }, report))
}

/// Monte Carlo error bars for the ML estimator: the element-wise standard
/// deviation over `experiments` independently simulated datasets of `count`
/// records. Unlike [`calibrate_ml_bootstrap`] this needs the true detector,
/// but it stays reliable for elements pinned at zero, where resampling the
/// one dataset at hand underestimates the spread.
pub fn ml_experiment_errors(
    setup: &CalibrationSetup,
    count: usize,
    n_max: usize,
    dim: usize,
    config: &CalibrationMlConfig,
    experiments: usize,
) -> Result<Vec<Vec<f64>>> {
    if experiments < 2 {
        return Err(TomoError::InsufficientData(format!("need at least 2 experiments, got {experiments}")));
    }
    let mut acc = vec![vec![Moments::default(); dim]; n_max + 1];
    for e in 0..experiments {
        let seed = rng::stream(config.seed, StreamLabel::Resample, e as u64).random::<u64>();
        let records = simulate_joint(setup, count, seed, Some(dim.max(twin_beam_truncation(setup.xi.abs()))))?;
        let (povm, report) = calibrate_ml(&records, setup.xi, setup.eta_h, n_max, dim, config)?;
        if !report.converged {
            return Err(TomoError::NotConverged { iters: report.iters });
        }
        for (row, est) in acc.iter_mut().zip(&povm.p) {
            row.iter_mut().zip(est).for_each(|(a, v)| a.push(*v));
        }
    }
    Ok(acc.iter().map(|row| row.iter().map(|a| a.variance().sqrt()).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_lossy_counters() {
        for n in 0..5 {
            for m in 0..8 {
                let v = theoretical_povm(1.0, 0.0, n, m).unwrap();
                assert_eq!(v, if n == m { 1.0 } else { 0.0 });
                let v = theoretical_povm(0.8, 0.0, n, m).unwrap();
                let want = binomial(m, n) * 0.8f64.powi(n as i32) * 0.2f64.powi(m as i32 - n as i32);
                assert!((v - want).abs() < 1e-14, "{n} {m}: {v} vs {want}");
            }
        }
    }

    #[test]
    fn divergent_series_is_reported() {
        assert!(matches!(theoretical_povm(0.5, 3.0, 1, 1), Err(TomoError::Convergence(_))));
    }

    #[test]
    fn brute_force_columns_are_complete() {
        let t = beam_splitter_response(0.8, 1.0, 60, 10).unwrap();
        for m in 0..10 {
            let s: f64 = t.iter().map(|r| r[m]).sum();
            assert!((s - 1.0).abs() < 1e-12, "{m}: {s}");
        }
    }

    #[test]
    fn twin_beam_default_truncation() {
        assert_eq!(twin_beam_truncation(0.88), 28);
        assert!(matches!(TwinBeam::new(Complex64::new(0.88, 0.0), Some(12)), Err(TomoError::Truncation { .. })));
    }

    #[test]
    fn wilson_is_sane() {
        let hw = wilson_halfwidth(0.3, 1e4);
        assert!((hw - (0.3f64 * 0.7 / 1e4).sqrt()).abs() < 1e-5);
        assert!(wilson_halfwidth(0.0, 100.0) > 0.0);
    }
}
