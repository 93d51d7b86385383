//! Maximum-likelihood reconstruction over Cholesky-parameterised density
//! matrices.
//!
//! The likelihood uses exact smeared densities: for datum `i` the POVM
//! operator has entries `Π_mn = e^{i(m-n)φ} g_nm(x)`, so `p_i = Tr[ρ Π_i]`.
//! The default optimizer is the diluted `RρR` iteration, polished by
//! Levenberg–Marquardt Newton steps in the Cholesky factor.

use crate::linalg::hermitian_eigen;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{reconstruct_density_matrix, DensityMatrixEstimate, Moments};
use crate::error::{check_eta_forward, Result, TomoError};
use crate::rng::{self, StreamLabel, CHUNK};
use crate::states::{FockDensityMatrix, QuadratureSample, SmearedBasis};

const DENSITY_FLOOR: f64 = 1e-300;
/// Newton polishing is skipped above this dimension (its cost grows as `d^4`).
pub const MAX_POLISH_DIM: usize = 12;
const SUCCESSIVE: usize = 5;
const EM_SWITCH: f64 = 1e-9;
const EM_POLISH_AFTER: usize = 100;

/// Upper-triangular `T` with real nonnegative diagonal; `ρ = T†T / Tr[T†T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    entries: Vec<Complex64>,
}

impl CholeskyFactor {
    pub fn new(dim: usize, entries: Vec<Complex64>) -> Result<Self> {
        if entries.len() != dim * dim || dim == 0 {
            return Err(TomoError::InvalidParameter(format!(
                "expected {} entries for dimension {dim}, got {}",
                dim * dim,
                entries.len()
            )));
        }
        for j in 0..dim {
            for k in 0..dim {
                let v = entries[j * dim + k];
                if k < j && v != Complex64::new(0.0, 0.0) {
                    return Err(TomoError::InvalidParameter(format!("entry ({j},{k}) below the diagonal")));
                }
                if k == j && (v.im != 0.0 || v.re < 0.0) {
                    return Err(TomoError::InvalidParameter(format!(
                        "diagonal entry {j} must be real and nonnegative"
                    )));
                }
            }
        }
        let t = Self { dim, entries };
        if t.norm_sqr() == 0.0 {
            return Err(TomoError::InvalidParameter("zero Cholesky factor".into()));
        }
        Ok(t)
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![Complex64::new(0.0, 0.0); dim * dim];
        for j in 0..dim {
            entries[j * dim + j] = Complex64::new(1.0 / (dim as f64).sqrt(), 0.0);
        }
        Self { dim, entries }
    }

    /// Factor of `|0><0|`.
    pub fn vacuum(dim: usize) -> Self {
        let mut entries = vec![Complex64::new(0.0, 0.0); dim * dim];
        entries[0] = Complex64::new(1.0, 0.0);
        Self { dim, entries }
    }

    /// Standard-normal entries.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut entries = vec![Complex64::new(0.0, 0.0); dim * dim];
        for j in 0..dim {
            let d: f64 = StandardNormal.sample(rng);
            entries[j * dim + j] = Complex64::new(d.abs(), 0.0);
            for k in j + 1..dim {
                entries[j * dim + k] = Complex64::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
            }
        }
        let mut t = Self { dim, entries };
        t.normalize();
        t
    }

    /// Factor of a density matrix, with a tiny ridge so rank-deficient input works.
    pub fn from_density(rho: &FockDensityMatrix) -> Self {
        let d = rho.dim();
        let mut m = rho.to_dmatrix();
        let mut ridge = 1e-14;
        loop {
            let shifted = &m + DMatrix::<Complex64>::identity(d, d) * Complex64::new(ridge, 0.0);
            if let Some(ch) = shifted.cholesky() {
                let l = ch.l();
                let mut entries = vec![Complex64::new(0.0, 0.0); d * d];
                for j in 0..d {
                    for k in j..d {
                        entries[j * d + k] = l[(k, j)].conj();
                    }
                    entries[j * d + j] = Complex64::new(entries[j * d + j].re.abs(), 0.0);
                }
                let mut t = Self { dim: d, entries };
                t.normalize();
                return t;
            }
            ridge *= 10.0;
            m = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
        }
    }

    /// Builds a factor from its `d²` real parameters (see [`Self::params`]).
    pub fn from_params(dim: usize, params: &[f64]) -> Result<Self> {
        if params.len() != dim * dim {
            return Err(TomoError::InvalidParameter(format!(
                "expected {} parameters, got {}",
                dim * dim,
                params.len()
            )));
        }
        let mut entries = vec![Complex64::new(0.0, 0.0); dim * dim];
        let mut it = params.iter();
        for j in 0..dim {
            entries[j * dim + j] = Complex64::new(*it.next().unwrap(), 0.0);
            for k in j + 1..dim {
                let re = *it.next().unwrap();
                let im = *it.next().unwrap();
                entries[j * dim + k] = Complex64::new(re, im);
            }
        }
        let mut t = Self { dim, entries };
        t.fix_signs();
        Ok(t)
    }

    /// Diagonal first in each row, then real and imaginary parts of the
    /// strictly upper entries: exactly `d²` numbers.
    pub fn params(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = Vec::with_capacity(d * d);
        for j in 0..d {
            out.push(self.entries[j * d + j].re);
            for k in j + 1..d {
                out.push(self.entries[j * d + k].re);
                out.push(self.entries[j * d + k].im);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    fn norm_sqr(&self) -> f64 {
        self.entries.iter().map(|v| v.norm_sqr()).sum()
    }

    fn normalize(&mut self) {
        let s = self.norm_sqr().sqrt();
        if s > 0.0 {
            self.entries.iter_mut().for_each(|v| *v /= s);
        }
    }

    // A negative diagonal is fixed by flipping the row, which leaves T†T alone.
    fn fix_signs(&mut self) {
        let d = self.dim;
        for j in 0..d {
            if self.entries[j * d + j].re < 0.0 {
                for k in j..d {
                    self.entries[j * d + k] = -self.entries[j * d + k];
                }
            }
        }
    }

    fn gram(&self) -> Vec<Complex64> {
        let d = self.dim;
        let mut a = vec![Complex64::new(0.0, 0.0); d * d];
        for n in 0..d {
            for m in 0..d {
                let mut s = Complex64::new(0.0, 0.0);
                for j in 0..=n.min(m) {
                    s += self.entries[j * d + n].conj() * self.entries[j * d + m];
                }
                a[n * d + m] = s;
            }
        }
        a
    }

    /// `ρ(T) = T†T / Tr[T†T]`, positive and normalised by construction.
    pub fn density(&self) -> FockDensityMatrix {
        let d = self.dim;
        let a = self.gram();
        let tr = self.norm_sqr();
        let mut elements: Vec<Complex64> = a.iter().map(|v| v / tr).collect();
        for n in 0..d {
            elements[n * d + n].im = 0.0;
        }
        FockDensityMatrix::from_unnormalized(d, elements)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    ExpectationMaximization,
    DownhillSimplex,
    ProjectedGradient,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum MlStart {
    #[default]
    MaximallyMixed,
    /// Random Cholesky factor drawn from optimizer stream `index`.
    Random(u64),
    Given(FockDensityMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlConfig {
    pub dim: usize,
    pub eta: f64,
    pub optimizer: Optimizer,
    pub max_iters: usize,
    /// Relative log-likelihood change used as the stopping rule.
    pub tol: f64,
    pub seed: u64,
    pub start: MlStart,
}

impl MlConfig {
    pub fn new(dim: usize, eta: f64) -> Self {
        Self {
            dim,
            eta,
            optimizer: Optimizer::default(),
            max_iters: 5000,
            tol: 1e-10,
            seed: 0,
            start: MlStart::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_eta_forward(self.eta)?;
        if self.dim == 0 {
            return Err(TomoError::InvalidParameter("dimension must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(TomoError::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(TomoError::InvalidParameter("max_iters must be at least 1".into()));
        }
        if let MlStart::Given(rho) = &self.start {
            if rho.dim() != self.dim {
                return Err(TomoError::InvalidParameter(format!(
                    "start has dimension {}, expected {}",
                    rho.dim(),
                    self.dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlReport {
    pub optimizer: Optimizer,
    pub iters: usize,
    pub loglik: f64,
    pub stationarity_residual: f64,
    pub converged: bool,
    pub truncation: usize,
    /// Log-likelihood after every accepted ascent step, starting point first.
    #[serde(skip)]
    pub history: Vec<f64>,
}

impl MlReport {
    /// Turns a non-converged report into an error.
    pub fn check(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(TomoError::NotConverged { iters: self.iters })
        }
    }
}

/// Precomputed smeared products for every datum.
pub struct Likelihood {
    dim: usize,
    count: usize,
    phi: Vec<f64>,
    // upper triangle (n, m >= n) of g_nm(x_i), datum-major
    g: Vec<f64>,
}

fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

impl Likelihood {
    pub fn new(samples: &[QuadratureSample], dim: usize, eta: f64) -> Result<Self> {
        check_eta_forward(eta)?;
        if samples.is_empty() {
            return Err(TomoError::InsufficientData("no samples".into()));
        }
        let basis = SmearedBasis::new(dim, eta);
        let t = tri_len(dim);
        let g: Vec<f64> = samples
            .par_chunks(CHUNK)
            .flat_map_iter(|ch| {
                let mut psi = vec![0.0; dim];
                let mut full = vec![0.0; dim * dim];
                let mut out = Vec::with_capacity(ch.len() * t);
                for s in ch {
                    basis.eval_into(s.x, &mut psi, &mut full);
                    for n in 0..dim {
                        out.extend_from_slice(&full[n * dim + n..(n + 1) * dim]);
                    }
                }
                out
            })
            .collect();
        Ok(Self { dim, count: samples.len(), phi: samples.iter().map(|s| s.phi).collect(), g })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn powers(phi: f64, pw: &mut [Complex64]) {
        let rot = Complex64::from_polar(1.0, phi);
        let mut z = Complex64::new(1.0, 0.0);
        for p in pw.iter_mut() {
            *p = z;
            z *= rot;
        }
    }

    #[inline]
    fn prob(&self, i: usize, rho: &[Complex64], pw: &[Complex64]) -> f64 {
        let d = self.dim;
        let g = &self.g[i * tri_len(d)..(i + 1) * tri_len(d)];
        let mut idx = 0;
        let mut p = 0.0;
        for n in 0..d {
            p += rho[n * d + n].re * g[idx];
            idx += 1;
            for m in n + 1..d {
                p += 2.0 * (rho[n * d + m] * pw[m - n]).re * g[idx];
                idx += 1;
            }
        }
        p
    }

    /// `Σ log p_i`, densities clamped below at 1e-300.
    pub fn loglik(&self, rho: &[Complex64]) -> f64 {
        let d = self.dim;
        let parts: Vec<f64> = (0..self.count.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut pw = vec![Complex64::new(0.0, 0.0); d];
                let mut s = 0.0;
                for i in c * CHUNK..((c + 1) * CHUNK).min(self.count) {
                    Self::powers(self.phi[i], &mut pw);
                    s += self.prob(i, rho, &pw).max(DENSITY_FLOOR).ln();
                }
                s
            })
            .collect();
        parts.iter().sum()
    }

    /// Log-likelihood and `R = Σ Π_i / p_i` in one pass.
    pub fn loglik_and_r(&self, rho: &[Complex64]) -> (f64, DMatrix<Complex64>) {
        let d = self.dim;
        let t = tri_len(d);
        let parts: Vec<(f64, Vec<Complex64>)> = (0..self.count.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut pw = vec![Complex64::new(0.0, 0.0); d];
                let mut acc = vec![Complex64::new(0.0, 0.0); t];
                let mut s = 0.0;
                for i in c * CHUNK..((c + 1) * CHUNK).min(self.count) {
                    Self::powers(self.phi[i], &mut pw);
                    let p = self.prob(i, rho, &pw).max(DENSITY_FLOOR);
                    s += p.ln();
                    let g = &self.g[i * t..(i + 1) * t];
                    let inv = 1.0 / p;
                    let mut idx = 0;
                    for n in 0..d {
                        for m in n..d {
                            acc[idx] += pw[m - n] * (g[idx] * inv);
                            idx += 1;
                        }
                    }
                }
                (s, acc)
            })
            .collect();
        let mut ll = 0.0;
        let mut acc = vec![Complex64::new(0.0, 0.0); t];
        for (s, a) in &parts {
            ll += s;
            acc.iter_mut().zip(a).for_each(|(x, y)| *x += y);
        }
        (ll, r_from_upper(d, &acc))
    }
}

fn r_from_upper(d: usize, acc: &[Complex64]) -> DMatrix<Complex64> {
    let mut r = DMatrix::from_element(d, d, Complex64::new(0.0, 0.0));
    let mut idx = 0;
    for n in 0..d {
        for m in n..d {
            if m == n {
                r[(n, n)] = Complex64::new(acc[idx].re, 0.0);
            } else {
                r[(m, n)] = acc[idx];
                r[(n, m)] = acc[idx].conj();
            }
            idx += 1;
        }
    }
    r
}

fn flat(m: &DMatrix<Complex64>) -> Vec<Complex64> {
    let d = m.nrows();
    let mut out = vec![Complex64::new(0.0, 0.0); d * d];
    for n in 0..d {
        for k in 0..d {
            out[n * d + k] = m[(n, k)];
        }
    }
    out
}

fn normalized_density(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let tr = h.trace().re;
    h / Complex64::new(tr, 0.0)
}

/// `Σ log p_eta(x_i, φ_i; ρ(T))`.
pub fn log_likelihood(t: &CholeskyFactor, samples: &[QuadratureSample], eta: f64) -> Result<f64> {
    let lk = Likelihood::new(samples, t.dim(), eta)?;
    Ok(lk.loglik(t.density().elements()))
}

/// Stationarity residual of the likelihood maximum: the largest
/// eigenvalue-weighted deviation `y_m |<ψ_m|R|ψ_m>/N - 1|` over the
/// eigendirections of `ρ`.
pub fn stationarity_residual(lk: &Likelihood, rho: &FockDensityMatrix) -> f64 {
    let (_, r) = lk.loglik_and_r(rho.elements());
    let n = lk.count() as f64;
    let eig = hermitian_eigen(rho.to_dmatrix());
    let mut worst: f64 = 0.0;
    for (k, y) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let q = (v.adjoint() * &r * v)[(0, 0)].re / n;
        worst = worst.max(y.max(0.0) * (q - 1.0).abs());
    }
    worst
}

struct Tracker {
    tol: f64,
    small: usize,
    iters: usize,
    history: Vec<f64>,
}

impl Tracker {
    fn new(tol: f64, start: f64) -> Self {
        Self { tol, small: 0, iters: 0, history: vec![start] }
    }

    fn last(&self) -> f64 {
        *self.history.last().unwrap()
    }

    /// Records an accepted step; returns true once the stopping rule holds.
    fn accept(&mut self, ll: f64) -> bool {
        let prev = self.last();
        let rel = (ll - prev) / prev.abs().max(1e-300);
        self.history.push(ll);
        if rel < self.tol {
            self.small += 1;
        } else {
            self.small = 0;
        }
        self.small >= SUCCESSIVE
    }
}

fn start_density(config: &MlConfig) -> FockDensityMatrix {
    match &config.start {
        MlStart::MaximallyMixed => CholeskyFactor::identity(config.dim).density(),
        MlStart::Random(index) => {
            let mut r = rng::stream(config.seed, StreamLabel::Optimizer, *index);
            CholeskyFactor::random(config.dim, &mut r).density()
        }
        MlStart::Given(rho) => rho.clone(),
    }
}

/// Maximum-likelihood density matrix at truncation `config.dim`.
///
/// A run that hits `max_iters` still returns its best point, with
/// `converged = false` in the report.
pub fn ml_reconstruct(samples: &[QuadratureSample], config: &MlConfig) -> Result<(DensityMatrixEstimate, MlReport)> {
    config.validate()?;
    let d = config.dim;
    if samples.len() < d * d {
        return Err(TomoError::InsufficientData(format!(
            "need at least {} samples for dimension {d}, got {}",
            d * d,
            samples.len()
        )));
    }
    let lk = Likelihood::new(samples, d, config.eta)?;
    let start = start_density(config);
    let (rho, tracker, converged) = match config.optimizer {
        Optimizer::ExpectationMaximization => run_em(&lk, start, config),
        Optimizer::DownhillSimplex => run_simplex(&lk, start, config),
        Optimizer::ProjectedGradient => run_projected_gradient(&lk, start, config),
    };
    let residual = stationarity_residual(&lk, &rho);
    let report = MlReport {
        optimizer: config.optimizer,
        iters: tracker.iters,
        loglik: tracker.last(),
        stationarity_residual: residual,
        converged,
        truncation: d,
        history: tracker.history,
    };
    if !converged {
        log::warn!("ML optimizer stopped after {} iterations without converging", report.iters);
    }
    let est = DensityMatrixEstimate {
        dim: d,
        matrix: rho.elements().to_vec(),
        errors: vec![0.0; d * d],
        eta: config.eta,
        sample_count: samples.len(),
        hermitized: false,
        diagonal_chi2: vec![None; d],
    };
    Ok((est, report))
}

fn run_em(lk: &Likelihood, start: FockDensityMatrix, config: &MlConfig) -> (FockDensityMatrix, Tracker, bool) {
    let d = config.dim;
    let n = lk.count() as f64;
    let mut rho = start.to_dmatrix();
    let (mut ll, mut r) = lk.loglik_and_r(&flat(&rho));
    let mut tr = Tracker::new(config.tol, ll);
    let id = DMatrix::<Complex64>::identity(d, d);
    let polish = d <= MAX_POLISH_DIM;
    let mut switch_count = 0;
    while tr.iters < config.max_iters {
        tr.iters += 1;
        let rn = &r / Complex64::new(n, 0.0);
        let mut eps = f64::INFINITY;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = if eps.is_infinite() {
                normalized_density(&(&rn * &rho * &rn))
            } else {
                let a = &id + &rn * Complex64::new(eps, 0.0);
                normalized_density(&(&a * &rho * &a))
            };
            let (ll_c, r_c) = lk.loglik_and_r(&flat(&cand));
            if ll_c >= ll {
                accepted = Some((cand, ll_c, r_c));
                break;
            }
            eps = if eps.is_infinite() { 1.0 } else { eps * 0.5 };
        }
        let Some((cand, ll_c, r_c)) = accepted else {
            // no ascent direction left at double precision
            return (dm(&rho), tr, true);
        };
        let rel = (ll_c - ll) / ll.abs().max(1e-300);
        rho = cand;
        ll = ll_c;
        r = r_c;
        if tr.accept(ll) {
            return (dm(&rho), tr, true);
        }
        if polish {
            switch_count = if rel < EM_SWITCH { switch_count + 1 } else { 0 };
            if switch_count >= 3 || tr.iters >= EM_POLISH_AFTER {
                return run_newton(lk, dm(&rho), config, tr);
            }
        }
    }
    (dm(&rho), tr, false)
}

fn dm(m: &DMatrix<Complex64>) -> FockDensityMatrix {
    FockDensityMatrix::from_unnormalized(m.nrows(), flat(m))
}

struct Param {
    j: usize,
    k: usize,
    imag: bool,
}

fn param_layout(d: usize) -> Vec<Param> {
    let mut out = Vec::with_capacity(d * d);
    for j in 0..d {
        out.push(Param { j, k: j, imag: false });
        for k in j + 1..d {
            out.push(Param { j, k, imag: false });
            out.push(Param { j, k, imag: true });
        }
    }
    out
}

/// Gradient and Hessian of `L(T) = Σ log Tr[Π_i T†T] - N log Tr[T†T]`.
fn newton_system(lk: &Likelihood, t: &CholeskyFactor, layout: &[Param]) -> (f64, Vec<f64>, DMatrix<f64>) {
    let d = lk.dim;
    let np = layout.len();
    let tl = tri_len(d);
    let rho = t.gram();
    let te = t.entries();
    struct Acc {
        ll: f64,
        u: Vec<f64>,
        uu: Vec<f64>,
        r: Vec<Complex64>,
    }
    let parts: Vec<Acc> = (0..lk.count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc =
                Acc { ll: 0.0, u: vec![0.0; np], uu: vec![0.0; np * np], r: vec![Complex64::new(0.0, 0.0); tl] };
            let mut pw = vec![Complex64::new(0.0, 0.0); d];
            let mut gfull = vec![0.0; d * d];
            let mut w = vec![Complex64::new(0.0, 0.0); d * d];
            let mut ui = vec![0.0; np];
            for i in c * CHUNK..((c + 1) * CHUNK).min(lk.count) {
                Likelihood::powers(lk.phi[i], &mut pw);
                let p = lk.prob(i, &rho, &pw).max(DENSITY_FLOOR);
                acc.ll += p.ln();
                let g = &lk.g[i * tl..(i + 1) * tl];
                let inv = 1.0 / p;
                let mut idx = 0;
                for n in 0..d {
                    for m in n..d {
                        gfull[n * d + m] = g[idx];
                        gfull[m * d + n] = g[idx];
                        acc.r[idx] += pw[m - n] * (g[idx] * inv);
                        idx += 1;
                    }
                }
                // w_jl = conj(T_jl e^{ilφ})
                for j in 0..d {
                    for l in j..d {
                        w[j * d + l] = (te[j * d + l] * pw[l]).conj();
                    }
                }
                for (a, par) in layout.iter().enumerate() {
                    // (Π T†)_{kj} = e^{ikφ} Σ_l g_kl conj(T_jl e^{ilφ})
                    let mut s = Complex64::new(0.0, 0.0);
                    for l in par.j..d {
                        s += w[par.j * d + l] * gfull[par.k * d + l];
                    }
                    let mkj = pw[par.k] * s;
                    ui[a] = 2.0 * inv * if par.imag { -mkj.im } else { mkj.re };
                }
                for a in 0..np {
                    acc.u[a] += ui[a];
                    let ua = ui[a];
                    let row = &mut acc.uu[a * np..(a + 1) * np];
                    for b in a..np {
                        row[b] += ua * ui[b];
                    }
                }
            }
            acc
        })
        .collect();
    let mut ll = 0.0;
    let mut u = vec![0.0; np];
    let mut uu = vec![0.0; np * np];
    let mut racc = vec![Complex64::new(0.0, 0.0); tl];
    for a in &parts {
        ll += a.ll;
        u.iter_mut().zip(&a.u).for_each(|(x, y)| *x += y);
        uu.iter_mut().zip(&a.uu).for_each(|(x, y)| *x += y);
        racc.iter_mut().zip(&a.r).for_each(|(x, y)| *x += y);
    }
    let n = lk.count as f64;
    let tra = t.norm_sqr();
    let mut gm = r_from_upper(d, &racc);
    for k in 0..d {
        gm[(k, k)] -= Complex64::new(n / tra, 0.0);
    }
    let coef = |p: &Param| if p.imag { Complex64::new(0.0, 1.0) } else { Complex64::new(1.0, 0.0) };
    let trd: Vec<f64> = layout.iter().map(|p| 2.0 * (coef(p) * te[p.j * d + p.k].conj()).re).collect();
    let grad: Vec<f64> = (0..np).map(|a| u[a] - n * trd[a] / tra).collect();
    let mut h = DMatrix::<f64>::zeros(np, np);
    for a in 0..np {
        for b in a..np {
            let mut v = -uu[a * np + b] + n * trd[a] * trd[b] / (tra * tra);
            let (pa, pb) = (&layout[a], &layout[b]);
            if pa.j == pb.j {
                v += 2.0 * (coef(pa).conj() * coef(pb) * gm[(pb.k, pa.k)]).re;
            }
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    (ll, grad, h)
}

fn run_newton(
    lk: &Likelihood,
    start: FockDensityMatrix,
    config: &MlConfig,
    mut tr: Tracker,
) -> (FockDensityMatrix, Tracker, bool) {
    let d = config.dim;
    let layout = param_layout(d);
    let np = layout.len();
    let mut t = CholeskyFactor::from_density(&start);
    let mut rho = t.density();
    let mut ll = lk.loglik(rho.elements());
    if ll < tr.last() {
        // the ridge in the factorisation cost more than rounding; keep the input
        rho = start;
        t = CholeskyFactor::from_density(&rho);
        ll = tr.last();
    }
    let mut lambda: Option<f64> = None;
    let mut rejections = 0;
    while tr.iters < config.max_iters {
        tr.iters += 1;
        let (_, grad, h) = newton_system(lk, &t, &layout);
        let scale = (0..np).map(|a| h[(a, a)].abs()).fold(0.0, f64::max).max(1e-300);
        let mut lam = lambda.unwrap_or(1e-6 * scale);
        let theta = t.params();
        let mut step_taken = false;
        for _ in 0..40 {
            let mut m = -&h;
            for a in 0..np {
                m[(a, a)] += lam;
            }
            let Some(ch) = m.cholesky() else {
                lam *= 10.0;
                continue;
            };
            let delta = ch.solve(&nalgebra::DVector::from_vec(grad.clone()));
            let cand: Vec<f64> = theta.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let mut tc = CholeskyFactor::from_params(d, &cand).expect("layout length");
            tc.normalize();
            let rc = tc.density();
            let llc = lk.loglik(rc.elements());
            if llc >= ll {
                t = tc;
                rho = rc;
                ll = llc;
                lambda = Some((lam / 3.0).max(1e-12 * scale));
                step_taken = true;
                break;
            }
            lam *= 4.0;
            if lam > 1e12 * scale {
                break;
            }
        }
        if !step_taken {
            rejections += 1;
            if rejections >= 3 {
                return (rho, tr, true);
            }
            lambda = Some(lam);
            continue;
        }
        rejections = 0;
        if tr.accept(ll) {
            return (rho, tr, true);
        }
    }
    (rho, tr, false)
}

fn run_simplex(lk: &Likelihood, start: FockDensityMatrix, config: &MlConfig) -> (FockDensityMatrix, Tracker, bool) {
    let d = config.dim;
    let f = |theta: &[f64]| -> f64 {
        match CholeskyFactor::from_params(d, theta) {
            Ok(t) if t.norm_sqr() > 0.0 => -lk.loglik(t.density().elements()),
            _ => f64::INFINITY,
        }
    };
    let x0 = CholeskyFactor::from_density(&start).params();
    let np = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.clone()];
    for a in 0..np {
        let mut x = x0.clone();
        x[a] += 0.1;
        simplex.push(x);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    let mut tr = Tracker::new(config.tol, -vals[0]);
    let mut converged = false;
    while tr.iters < config.max_iters {
        tr.iters += 1;
        let mut order: Vec<usize> = (0..=np).collect();
        order.sort_by(|a, b| vals[*a].total_cmp(&vals[*b]));
        simplex = order.iter().map(|i| simplex[*i].clone()).collect();
        vals = order.iter().map(|i| vals[*i]).collect();
        let (best, worst) = (vals[0], vals[np]);
        if -best > tr.last() {
            tr.history.push(-best);
        }
        if (worst - best).abs() <= config.tol * best.abs() {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..np).map(|a| simplex[..np].iter().map(|x| x[a]).sum::<f64>() / np as f64).collect();
        let along = |s: f64| -> Vec<f64> { centroid.iter().zip(&simplex[np]).map(|(c, w)| c + s * (c - w)).collect() };
        let xr = along(1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[np] = xe;
                vals[np] = fe;
            } else {
                simplex[np] = xr;
                vals[np] = fr;
            }
        } else if fr < vals[np - 1] {
            simplex[np] = xr;
            vals[np] = fr;
        } else {
            let (xc, fc) = if fr < vals[np] {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            };
            if fc < vals[np].min(fr) {
                simplex[np] = xc;
                vals[np] = fc;
            } else {
                for i in 1..=np {
                    let x: Vec<f64> = simplex[0].iter().zip(&simplex[i]).map(|(b, v)| b + 0.5 * (v - b)).collect();
                    vals[i] = f(&x);
                    simplex[i] = x;
                }
            }
        }
    }
    let best = (0..=np).min_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap();
    let t = CholeskyFactor::from_params(d, &simplex[best]).expect("layout length");
    if -vals[best] > tr.last() {
        tr.history.push(-vals[best]);
    }
    (t.density(), tr, converged)
}

/// Euclidean projection of a Hermitian matrix onto unit-trace PSD matrices.
fn project_to_states(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = hermitian_eigen(h);
    let vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let mut sorted = vals.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut shift = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        cum += v;
        let s = (cum - 1.0) / (i + 1) as f64;
        if v - s > 0.0 {
            shift = s;
        }
    }
    let d = m.nrows();
    let mut out = DMatrix::from_element(d, d, Complex64::new(0.0, 0.0));
    for (k, v) in vals.iter().enumerate() {
        let w = (v - shift).max(0.0);
        if w > 0.0 {
            let c = eig.eigenvectors.column(k);
            out += (&c * c.adjoint()) * Complex64::new(w, 0.0);
        }
    }
    out
}

fn run_projected_gradient(
    lk: &Likelihood,
    start: FockDensityMatrix,
    config: &MlConfig,
) -> (FockDensityMatrix, Tracker, bool) {
    let d = config.dim;
    let n = lk.count() as f64;
    let mut rho = start.to_dmatrix();
    let (mut ll, mut r) = lk.loglik_and_r(&flat(&rho));
    let mut tr = Tracker::new(config.tol, ll);
    let id = DMatrix::<Complex64>::identity(d, d);
    let mut step = 1.0;
    while tr.iters < config.max_iters {
        tr.iters += 1;
        let grad = &r / Complex64::new(n, 0.0) - &id;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = project_to_states(&(&rho + &grad * Complex64::new(step, 0.0)));
            let (llc, rc) = lk.loglik_and_r(&flat(&cand));
            if llc >= ll {
                accepted = Some((cand, llc, rc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, llc, rc)) = accepted else {
            return (dm(&rho), tr, true);
        };
        rho = cand;
        ll = llc;
        r = rc;
        step = (step * 2.0).min(1e3);
        if tr.accept(ll) {
            return (dm(&rho), tr, true);
        }
    }
    (dm(&rho), tr, false)
}

/// Smallest truncation whose estimated diagonal mass reaches `mass`.
///
/// Uses plain averaging on at most 20 000 samples when `eta > 1/2`;
/// otherwise the mean photon number from the second quadrature moment and a
/// thermal tail bound.
pub fn default_truncation(samples: &[QuadratureSample], eta: f64, mass: f64) -> Result<usize> {
    check_eta_forward(eta)?;
    const PROBE: usize = 24;
    if eta > 0.5 && samples.len() >= 100 {
        let sub = &samples[..samples.len().min(20_000)];
        let est = reconstruct_density_matrix(sub, PROBE, eta)?;
        let mut cum = 0.0;
        for (k, p) in est.diagonal().iter().enumerate() {
            cum += p;
            if cum >= mass {
                let d = (k + 1).max(2);
                log::info!("ML truncation {d} from averaging pre-pass");
                return Ok(d);
            }
        }
        log::info!("ML truncation capped at {PROBE}");
        return Ok(PROBE);
    }
    if samples.is_empty() {
        return Err(TomoError::InsufficientData("no samples".into()));
    }
    let mut m = Moments::default();
    samples.iter().for_each(|s| m.push(s.x * s.x));
    let nbar = (2.0 * m.mean - 0.5 - (1.0 - eta) / (2.0 * eta)).max(0.0);
    let ratio = nbar / (nbar + 1.0);
    let d = if ratio <= 0.0 { 2 } else { (((1.0 - mass).ln() / ratio.ln()).ceil() as usize).clamp(2, 60) };
    log::info!("ML truncation {d} from photon-number moment {nbar:.4}");
    Ok(d)
}

const FISHER_PANELS: usize = 512;

/// `∫ (∂_γ p)² / p dx` over `range` by composite Gauss–Legendre quadrature,
/// with `∂_γ p` by central difference.
///
/// Fails when points with `p < 1e-14` carry more than 1% of `∫ |∂_γ p|`.
pub fn fisher_information<F>(family: F, gamma: f64, range: (f64, f64)) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
{
    let (a, b) = range;
    if !(b > a) {
        return Err(TomoError::InvalidParameter(format!("empty range [{a}, {b}]")));
    }
    let h = 1e-4 * gamma.abs().max(1.0);
    // 10-point Gauss–Legendre nodes and weights on [-1, 1]
    const X: [f64; 5] = [
        0.148_874_338_981_631_2,
        0.433_395_394_129_247_2,
        0.679_409_568_299_024_4,
        0.865_063_366_688_984_5,
        0.973_906_528_517_171_7,
    ];
    const W: [f64; 5] = [
        0.295_524_224_714_752_9,
        0.269_266_719_309_996_4,
        0.219_086_362_515_982_0,
        0.149_451_349_150_580_6,
        0.066_671_344_308_688_1,
    ];
    let width = (b - a) / FISHER_PANELS as f64;
    let (mut info, mut total, mut lost) = (0.0, 0.0, 0.0);
    for panel in 0..FISHER_PANELS {
        let c = a + (panel as f64 + 0.5) * width;
        for (x, w) in X.iter().zip(&W) {
            for s in [-1.0, 1.0] {
                let xx = c + s * x * 0.5 * width;
                let wt = w * 0.5 * width;
                let p = family(gamma, xx);
                let dp = (family(gamma + h, xx) - family(gamma - h, xx)) / (2.0 * h);
                total += wt * dp.abs();
                if p < 1e-14 {
                    lost += wt * dp.abs();
                } else {
                    info += wt * dp * dp / p;
                }
            }
        }
    }
    if lost > 0.01 * total {
        return Err(TomoError::Numerical(format!(
            "density below 1e-14 where {:.1}% of the derivative mass lies",
            100.0 * lost / total
        )));
    }
    Ok(info)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlBootstrap {
    pub dim: usize,
    /// Row-major element-wise standard deviations (root-sum-square of the
    /// real and imaginary parts).
    pub errors: Vec<f64>,
    pub mean_photon_std: f64,
    pub used: usize,
    pub failed: usize,
}

/// Repeats the reconstruction on `resamples` bootstrap resamples, each
/// warm-started from the full-data estimate.
pub fn ml_bootstrap(
    samples: &[QuadratureSample],
    config: &MlConfig,
    resamples: usize,
    seed: u64,
) -> Result<MlBootstrap> {
    if resamples < 20 {
        return Err(TomoError::InsufficientData(format!("need at least 20 resamples, got {resamples}")));
    }
    let (full, _) = ml_reconstruct(samples, config)?;
    let mut cfg = config.clone();
    cfg.start = MlStart::Given(FockDensityMatrix::from_unnormalized(full.dim, full.matrix.clone()));
    let n = samples.len();
    let runs: Vec<Option<FockDensityMatrix>> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, StreamLabel::Bootstrap, r as u64);
            let data: Vec<QuadratureSample> = (0..n).map(|_| samples[rng.random_range(0..n)]).collect();
            match ml_reconstruct(&data, &cfg) {
                Ok((est, rep)) if rep.converged => Some(FockDensityMatrix::from_unnormalized(est.dim, est.matrix)),
                _ => None,
            }
        })
        .collect();
    let ok: Vec<&FockDensityMatrix> = runs.iter().flatten().collect();
    let failed = resamples - ok.len();
    if failed > 0 {
        log::warn!("{failed} of {resamples} bootstrap fits did not converge and were excluded");
    }
    if ok.len() < 2 {
        return Err(TomoError::NotConverged { iters: cfg.max_iters });
    }
    let d = config.dim;
    let mut errors = vec![0.0; d * d];
    for (e, err) in errors.iter_mut().enumerate() {
        let (mut re, mut im) = (Moments::default(), Moments::default());
        for rho in &ok {
            re.push(rho.elements()[e].re);
            im.push(rho.elements()[e].im);
        }
        *err = re.variance().sqrt().hypot(im.variance().sqrt());
    }
    let mut nm = Moments::default();
    ok.iter().for_each(|r| nm.push(r.mean_photon_number()));
    Ok(MlBootstrap { dim: d, errors, mean_photon_std: nm.variance().sqrt(), used: ok.len(), failed })
}
