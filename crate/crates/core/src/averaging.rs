//! Plain kernel averaging: sample means with error bars, normality checks on
//! block means and bootstrap variance.
//!
//! Sums are accumulated per fixed chunk of `CHUNK` samples with Welford's
//! update and merged in chunk order, so results do not depend on how many
//! worker threads ran.

use crate::linalg::hermitian_eigen;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{check_eta_deconvolution, Result, TomoError};
use crate::kernels::KernelBank;
use crate::rng::{self, StreamLabel, CHUNK};
use crate::states::{FockDensityMatrix, QuadratureSample};

/// Number of blocks used for the automatic normality diagnostic.
pub const DEFAULT_BLOCKS: usize = 100;
/// Smallest block size for which block means are tested.
pub const MIN_BLOCK_SIZE: usize = 30;
/// Smallest number of blocks accepted by the block-mean test.
pub const MIN_BLOCKS: usize = 10;
const MIN_BINS: usize = 8;

/// Running mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n as f64;
        self.count = n;
    }

    /// Sample variance with the `N - 1` denominator.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    /// Error bar on the mean, `sqrt(Σ (f - m)² / (N (N - 1)))`.
    pub fn std_error(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ComplexMoments {
    pub re: Moments,
    pub im: Moments,
}

impl ComplexMoments {
    #[inline]
    pub fn push(&mut self, v: Complex64) {
        self.re.push(v.re);
        self.im.push(v.im);
    }

    pub fn merge(&mut self, other: &ComplexMoments) {
        self.re.merge(&other.re);
        self.im.merge(&other.im);
    }

    pub fn mean(&self) -> Complex64 {
        Complex64::new(self.re.mean, self.im.mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Block-mean normality p-value of the real part; absent when the sample
    /// is too small to form enough blocks.
    pub chi2_pvalue: Option<f64>,
    pub block_count: usize,
}

/// Monte-Carlo estimate `m` with error bar `eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateWithError {
    pub mean: Complex64,
    /// Root-sum-square of the real and imaginary error bars.
    pub std_error: f64,
    pub std_error_re: f64,
    pub std_error_im: f64,
    pub sample_count: usize,
    pub diagnostics: Diagnostics,
}

impl EstimateWithError {
    pub(crate) fn from_moments(m: &ComplexMoments, diagnostics: Diagnostics) -> Self {
        let (er, ei) = (m.re.std_error(), m.im.std_error());
        Self {
            mean: m.mean(),
            std_error: er.hypot(ei),
            std_error_re: er,
            std_error_im: ei,
            sample_count: m.re.count as usize,
            diagnostics,
        }
    }
}

fn chunked_moments<F>(values: usize, f: F) -> ComplexMoments
where
    F: Fn(usize) -> Complex64 + Sync,
{
    let chunks = values.div_ceil(CHUNK);
    let parts: Vec<ComplexMoments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = ComplexMoments::default();
            for i in c * CHUNK..((c + 1) * CHUNK).min(values) {
                acc.push(f(i));
            }
            acc
        })
        .collect();
    let mut total = ComplexMoments::default();
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Sample mean and error bar of `f` over the data.
pub fn estimate_expectation<F>(samples: &[QuadratureSample], f: F) -> Result<EstimateWithError>
where
    F: Fn(f64, f64) -> Complex64 + Sync,
{
    let n = samples.len();
    if n < 2 {
        return Err(TomoError::InsufficientData(format!("need at least 2 samples, got {n}")));
    }
    let values: Vec<Complex64> = samples.par_iter().map(|s| f(s.x, s.phi)).collect();
    let moments = chunked_moments(n, |i| values[i]);
    let diagnostics = block_diagnostics(&values.iter().map(|v| v.re).collect::<Vec<_>>());
    Ok(EstimateWithError::from_moments(&moments, diagnostics))
}

fn block_diagnostics(values: &[f64]) -> Diagnostics {
    if values.len() >= DEFAULT_BLOCKS * MIN_BLOCK_SIZE {
        let p = chi2_normality_check(values, DEFAULT_BLOCKS).ok();
        Diagnostics { chi2_pvalue: p, block_count: DEFAULT_BLOCKS }
    } else {
        Diagnostics { chi2_pvalue: None, block_count: 0 }
    }
}

/// Pearson chi-squared test of block means against a normal law with the
/// fitted mean and variance. Returns the p-value.
///
/// Contiguous blocks of (nearly) equal size; equiprobable bins under the
/// fitted normal, `max(8, blocks / 5)` of them; two fitted parameters.
pub fn chi2_normality_check(values: &[f64], blocks: usize) -> Result<f64> {
    if blocks < MIN_BLOCKS {
        return Err(TomoError::InsufficientData(format!("need at least {MIN_BLOCKS} blocks, got {blocks}")));
    }
    if values.len() < blocks * MIN_BLOCK_SIZE {
        return Err(TomoError::InsufficientData(format!(
            "need at least {MIN_BLOCK_SIZE} values per block ({} values for {blocks} blocks)",
            values.len()
        )));
    }
    let n = values.len();
    let means: Vec<f64> = (0..blocks)
        .map(|b| {
            let lo = b * n / blocks;
            let hi = (b + 1) * n / blocks;
            let mut m = Moments::default();
            values[lo..hi].iter().for_each(|v| m.push(*v));
            m.mean
        })
        .collect();
    pearson_normal(&means, MIN_BINS.max(blocks / 5))
}

/// Same test applied to the raw values, with `max(8, min(50, N / 50))` bins.
pub fn chi2_normality_raw(values: &[f64]) -> Result<f64> {
    if values.len() < MIN_BINS * 5 {
        return Err(TomoError::InsufficientData(format!(
            "need at least {} values, got {}",
            MIN_BINS * 5,
            values.len()
        )));
    }
    pearson_normal(values, MIN_BINS.max((values.len() / 50).min(50)))
}

fn pearson_normal(values: &[f64], bins: usize) -> Result<f64> {
    let mut m = Moments::default();
    values.iter().for_each(|v| m.push(*v));
    let sd = m.variance().sqrt();
    if sd <= 0.0 || !sd.is_finite() {
        // a degenerate sample is perfectly consistent with itself only if constant
        return Ok(if sd == 0.0 { 1.0 } else { 0.0 });
    }
    let normal = Normal::new(m.mean, sd).map_err(|e| TomoError::Numerical(e.to_string()))?;
    let mut counts = vec![0usize; bins];
    for v in values {
        let u = normal.cdf(*v);
        let idx = ((u * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let expected = values.len() as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    let dof = (bins - 3) as f64;
    let chi = ChiSquared::new(dof).map_err(|e| TomoError::Numerical(e.to_string()))?;
    Ok(chi.sf(stat))
}

/// Standard deviation of `resamples` bootstrap means of `f`.
pub fn bootstrap_std<F>(samples: &[QuadratureSample], f: F, resamples: usize, seed: u64) -> Result<f64>
where
    F: Fn(f64, f64) -> Complex64 + Sync,
{
    if resamples < 20 {
        return Err(TomoError::InsufficientData(format!("need at least 20 resamples, got {resamples}")));
    }
    let n = samples.len();
    if n < 2 {
        return Err(TomoError::InsufficientData(format!("need at least 2 samples, got {n}")));
    }
    let values: Vec<Complex64> = samples.par_iter().map(|s| f(s.x, s.phi)).collect();
    Ok(bootstrap_values(&values, resamples, seed))
}

pub(crate) fn bootstrap_values(values: &[Complex64], resamples: usize, seed: u64) -> f64 {
    let n = values.len();
    let means: Vec<Complex64> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, StreamLabel::Bootstrap, r as u64);
            let mut acc = ComplexMoments::default();
            for _ in 0..n {
                acc.push(values[rng.random_range(0..n)]);
            }
            acc.mean()
        })
        .collect();
    let mut spread = ComplexMoments::default();
    means.iter().for_each(|m| spread.push(*m));
    spread.re.variance().sqrt().hypot(spread.im.variance().sqrt())
}

/// Reconstructed density matrix with element-wise error bars.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrixEstimate {
    pub dim: usize,
    /// Row-major `<n|rho|m>`.
    pub matrix: Vec<Complex64>,
    /// Row-major scalar error bars (root-sum-square of real and imaginary bars).
    pub errors: Vec<f64>,
    pub eta: f64,
    pub sample_count: usize,
    pub hermitized: bool,
    /// Block-mean normality p-values of the diagonal elements.
    pub diagonal_chi2: Vec<Option<f64>>,
}

impl DensityMatrixEstimate {
    pub fn get(&self, n: usize, m: usize) -> Complex64 {
        self.matrix[n * self.dim + m]
    }

    pub fn error(&self, n: usize, m: usize) -> f64 {
        self.errors[n * self.dim + m]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|n| self.get(n, n).re).collect()
    }

    pub fn diagonal_errors(&self) -> Vec<f64> {
        (0..self.dim).map(|n| self.error(n, n)).collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.dim, self.dim, |n, m| self.get(n, m))
    }

    /// Hermitian part rescaled to unit trace. Positivity is not enforced, so
    /// for a raw averaging estimate the result may have negative eigenvalues.
    pub fn to_state(&self) -> FockDensityMatrix {
        FockDensityMatrix::from_unnormalized(self.dim, self.matrix.clone())
    }

    /// Opt-in post-processing: Hermitian part, negative eigenvalues clipped to
    /// zero and unit trace restored. The raw estimate is left untouched.
    pub fn hermitized_and_clipped(&self) -> Result<(Self, FockDensityMatrix)> {
        let d = self.dim;
        let h = self.to_dmatrix();
        let h = (&h + h.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = hermitian_eigen(h);
        let clipped: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
        let total: f64 = clipped.iter().sum();
        if total <= 0.0 {
            return Err(TomoError::Numerical("estimate has no positive spectrum".into()));
        }
        let mut rho = DMatrix::from_element(d, d, Complex64::new(0.0, 0.0));
        for (k, lam) in clipped.iter().enumerate() {
            let v = eig.eigenvectors.column(k);
            rho += (&v * v.adjoint()) * Complex64::new(lam / total, 0.0);
        }
        let state = FockDensityMatrix::from_dmatrix(&rho)?;
        let mut errors = self.errors.clone();
        for n in 0..d {
            for m in n + 1..d {
                let e = 0.5 * (errors[n * d + m] + errors[m * d + n]);
                errors[n * d + m] = e;
                errors[m * d + n] = e;
            }
        }
        let est = Self { matrix: state.elements().to_vec(), errors, hermitized: true, ..self.clone() };
        Ok((est, state))
    }
}

/// Kernel-averaging reconstruction of all `<n|rho|m>` with `n, m < dim`.
///
/// Only the upper triangle is averaged; the lower triangle is its conjugate,
/// which the estimator satisfies exactly.
pub fn reconstruct_density_matrix(samples: &[QuadratureSample], dim: usize, eta: f64) -> Result<DensityMatrixEstimate> {
    check_eta_deconvolution(eta)?;
    let bank = KernelBank::new(dim, eta)?;
    reconstruct_with_bank(samples, &bank)
}

pub fn reconstruct_with_bank(samples: &[QuadratureSample], bank: &KernelBank) -> Result<DensityMatrixEstimate> {
    let n_samples = samples.len();
    if n_samples < 100 {
        return Err(TomoError::InsufficientData(format!("need at least 100 samples, got {n_samples}")));
    }
    let d = bank.dim();
    let blocks = if n_samples >= DEFAULT_BLOCKS * MIN_BLOCK_SIZE { DEFAULT_BLOCKS } else { 0 };
    let chunks = n_samples.div_ceil(CHUNK);

    struct Partial {
        moments: Vec<ComplexMoments>,
        block_sums: Vec<f64>,
    }

    let parts: Vec<Partial> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut moments = vec![ComplexMoments::default(); d * d];
            let mut block_sums = vec![0.0; blocks * d];
            let mut scratch = vec![0.0; bank.scratch_len()];
            let mut radial = vec![0.0; d * d];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_samples) {
                let s = samples[i];
                bank.radial_into(s.x, &mut scratch, &mut radial);
                let rot = Complex64::from_polar(1.0, -s.phi);
                for n in 0..d {
                    let mut phase = Complex64::new(1.0, 0.0);
                    for m in n..d {
                        moments[n * d + m].push(phase * radial[n * d + m]);
                        phase *= rot;
                    }
                }
                if blocks > 0 {
                    let b = i * blocks / n_samples;
                    for n in 0..d {
                        block_sums[b * d + n] += radial[n * d + n];
                    }
                }
            }
            Partial { moments, block_sums }
        })
        .collect();

    let mut moments = vec![ComplexMoments::default(); d * d];
    let mut block_sums = vec![0.0; blocks * d];
    for p in &parts {
        for (acc, m) in moments.iter_mut().zip(&p.moments) {
            acc.merge(m);
        }
        for (acc, v) in block_sums.iter_mut().zip(&p.block_sums) {
            *acc += v;
        }
    }

    let mut matrix = vec![Complex64::new(0.0, 0.0); d * d];
    let mut errors = vec![0.0; d * d];
    for n in 0..d {
        for m in n..d {
            let mo = &moments[n * d + m];
            let mean = mo.mean();
            let err = mo.re.std_error().hypot(mo.im.std_error());
            matrix[n * d + m] = mean;
            matrix[m * d + n] = mean.conj();
            errors[n * d + m] = err;
            errors[m * d + n] = err;
        }
        matrix[n * d + n].im = 0.0;
    }
    let diagonal_chi2 = (0..d)
        .map(|n| {
            if blocks == 0 {
                return None;
            }
            let means: Vec<f64> = (0..blocks)
                .map(|b| {
                    let lo = b * n_samples / blocks;
                    let hi = (b + 1) * n_samples / blocks;
                    block_sums[b * d + n] / (hi - lo) as f64
                })
                .collect();
            pearson_normal(&means, MIN_BINS.max(blocks / 5)).ok()
        })
        .collect();
    Ok(DensityMatrixEstimate {
        dim: d,
        matrix,
        errors,
        eta: bank.eta(),
        sample_count: n_samples,
        hermitized: false,
        diagonal_chi2,
    })
}
