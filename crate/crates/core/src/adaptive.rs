//! Variance reduction with null estimators.
//!
//! A null term `x^k e^{±i(k+2+2n)φ}` averages to zero against every
//! homodyne density, so adding any combination of them to a kernel leaves
//! its mean unchanged. The combination minimising the sample variance is a
//! linear least-squares problem.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{ComplexMoments, DensityMatrixEstimate, Diagnostics, EstimateWithError};
use crate::error::{check_eta_deconvolution, Result, TomoError};
use crate::kernels::KernelBank;
use crate::rng::CHUNK;
use crate::states::QuadratureSample;

/// Relative ridge added to the unit-diagonal Gram matrix.
pub const RIDGE: f64 = 1e-10;
// Cholesky pivots below this (after unit-diagonal scaling) mean the ridge is
// doing the work, i.e. the basis is numerically rank deficient.
const PIVOT_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NullTerm {
    pub k: u32,
    pub n: u32,
    /// `+1` or `-1`.
    pub sign: i8,
}

impl NullTerm {
    pub fn new(k: u32, n: u32, sign: i8) -> Result<Self> {
        if sign != 1 && sign != -1 {
            return Err(TomoError::InvalidParameter(format!("sign must be ±1, got {sign}")));
        }
        Ok(Self { k, n, sign })
    }

    pub fn frequency(&self) -> i64 {
        self.sign as i64 * (self.k as i64 + 2 + 2 * self.n as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullBasis {
    pub terms: Vec<NullTerm>,
    pub max_k: u32,
    pub max_n: u32,
}

impl NullBasis {
    /// All terms with `k <= max_k`, `n <= max_n`, both signs.
    pub fn new(max_k: u32, max_n: u32) -> Self {
        let mut terms = Vec::new();
        for k in 0..=max_k {
            for n in 0..=max_n {
                for sign in [1, -1] {
                    terms.push(NullTerm { k, n, sign });
                }
            }
        }
        Self { terms, max_k, max_n }
    }

    pub fn empty() -> Self {
        Self { terms: Vec::new(), max_k: 0, max_n: 0 }
    }

    pub fn from_terms(terms: Vec<NullTerm>) -> Self {
        let max_k = terms.iter().map(|t| t.k).max().unwrap_or(0);
        let max_n = terms.iter().map(|t| t.n).max().unwrap_or(0);
        Self { terms, max_k, max_n }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    fn eval_into(&self, x: f64, phi: f64, out: &mut [Complex64]) {
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = null_value(*t, x, phi);
        }
    }
}

impl Default for NullBasis {
    fn default() -> Self {
        Self::new(4, 3)
    }
}

pub fn null_value(term: NullTerm, x: f64, phi: f64) -> Complex64 {
    Complex64::from_polar(x.powi(term.k as i32), term.frequency() as f64 * phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// Fit on the first half of the data, average on the second.
    #[default]
    SplitSample,
    /// Fit and average on the same data.
    WholeSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub k: u32,
    pub n: u32,
    pub sign: i8,
    pub c: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub coefficients: Vec<Coefficient>,
    /// In-sample variance of the base kernel on the fitting data.
    pub base_variance: f64,
    /// In-sample variance of the adapted kernel on the fitting data.
    pub adapted_variance: f64,
    pub fit_samples: usize,
}

/// `f + Σ c_t N_t`.
#[derive(Clone)]
pub struct AdaptedKernel<F> {
    base: F,
    basis: NullBasis,
    coeffs: Vec<Complex64>,
}

impl<F: Fn(f64, f64) -> Complex64> AdaptedKernel<F> {
    pub fn eval(&self, x: f64, phi: f64) -> Complex64 {
        let mut v = (self.base)(x, phi);
        for (t, c) in self.basis.terms.iter().zip(&self.coeffs) {
            v += c * null_value(*t, x, phi);
        }
        v
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coeffs
    }
}

/// Factorised least-squares system for one basis and one fitting sample.
/// The Gram matrix does not depend on the kernel, so it is shared.
struct NullFit {
    basis: NullBasis,
    count: usize,
    mean: Vec<Complex64>,
    scale: Vec<f64>,
    chol: DMatrix<Complex64>,
}

impl NullFit {
    fn new(samples: &[QuadratureSample], basis: &NullBasis) -> Result<Self> {
        let t = basis.len();
        let n = samples.len();
        if n < 10 * t.max(1) {
            return Err(TomoError::InsufficientData(format!(
                "fitting {t} null terms needs at least {} samples, got {n}",
                10 * t.max(1)
            )));
        }
        let chunks = n.div_ceil(CHUNK);
        let parts: Vec<(Vec<Complex64>, Vec<Complex64>)> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut sum = vec![Complex64::new(0.0, 0.0); t];
                let mut gram = vec![Complex64::new(0.0, 0.0); t * t];
                let mut v = vec![Complex64::new(0.0, 0.0); t];
                for s in &samples[c * CHUNK..((c + 1) * CHUNK).min(n)] {
                    basis.eval_into(s.x, s.phi, &mut v);
                    for a in 0..t {
                        sum[a] += v[a];
                        let ca = v[a].conj();
                        for b in a..t {
                            gram[a * t + b] += ca * v[b];
                        }
                    }
                }
                (sum, gram)
            })
            .collect();
        let mut sum = vec![Complex64::new(0.0, 0.0); t];
        let mut raw = vec![Complex64::new(0.0, 0.0); t * t];
        for (s, g) in &parts {
            sum.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            raw.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        let nf = n as f64;
        let mean: Vec<Complex64> = sum.iter().map(|s| s / nf).collect();
        let mut gram = DMatrix::from_element(t, t, Complex64::new(0.0, 0.0));
        for a in 0..t {
            for b in a..t {
                let g = raw[a * t + b] - mean[a].conj() * mean[b] * nf;
                gram[(a, b)] = g;
                gram[(b, a)] = g.conj();
            }
        }
        let mut scale = vec![0.0; t];
        for a in 0..t {
            let d = gram[(a, a)].re;
            if !(d > 0.0) || !d.is_finite() {
                return Err(TomoError::SingularBasis(format!(
                    "null term {:?} has no variance on the data",
                    basis.terms[a]
                )));
            }
            scale[a] = 1.0 / d.sqrt();
        }
        for a in 0..t {
            for b in 0..t {
                gram[(a, b)] *= scale[a] * scale[b];
            }
            gram[(a, a)] = Complex64::new(1.0 + RIDGE, 0.0);
        }
        let chol =
            gram.cholesky().ok_or_else(|| TomoError::SingularBasis("Gram matrix is not positive definite".into()))?;
        let l = chol.l();
        if let Some(a) = (0..t).find(|&a| l[(a, a)].re.powi(2) < PIVOT_FLOOR) {
            return Err(TomoError::SingularBasis(format!(
                "null term {:?} is linearly dependent on the others",
                basis.terms[a]
            )));
        }
        Ok(Self { basis: basis.clone(), count: n, mean, scale, chol: l })
    }

    /// Coefficients from `Σ conj(v_i) f_i` and `Σ f_i` over the fitting data.
    fn solve(&self, cross: &[Complex64], fsum: Complex64) -> Vec<Complex64> {
        let t = self.basis.len();
        let nf = self.count as f64;
        let fmean = fsum / nf;
        let rhs = DVector::from_fn(t, |a, _| -(cross[a] - self.mean[a].conj() * fmean * nf) * self.scale[a]);
        let y = self.chol.solve_lower_triangular(&rhs).expect("pivots checked at construction");
        let z = self.chol.adjoint().solve_upper_triangular(&y).expect("pivots checked at construction");
        (0..t).map(|a| z[a] * self.scale[a]).collect()
    }
}

fn coefficient_list(basis: &NullBasis, coeffs: &[Complex64]) -> Vec<Coefficient> {
    basis.terms.iter().zip(coeffs).map(|(t, c)| Coefficient { k: t.k, n: t.n, sign: t.sign, c: [c.re, c.im] }).collect()
}

fn variance(m: &ComplexMoments) -> f64 {
    m.re.variance() + m.im.variance()
}

fn moments_of<G: Fn(&QuadratureSample) -> Complex64 + Sync>(samples: &[QuadratureSample], g: G) -> ComplexMoments {
    let parts: Vec<ComplexMoments> = samples
        .par_chunks(CHUNK)
        .map(|ch| {
            let mut m = ComplexMoments::default();
            ch.iter().for_each(|s| m.push(g(s)));
            m
        })
        .collect();
    let mut total = ComplexMoments::default();
    parts.iter().for_each(|p| total.merge(p));
    total
}

/// Fits the variance-minimising null combination for `base` on `samples`.
pub fn adapt<F>(samples: &[QuadratureSample], base: F, basis: &NullBasis) -> Result<(AdaptedKernel<F>, AdaptReport)>
where
    F: Fn(f64, f64) -> Complex64 + Sync,
{
    let base_m = moments_of(samples, |s| base(s.x, s.phi));
    if basis.is_empty() {
        if samples.is_empty() {
            return Err(TomoError::InsufficientData("no samples".into()));
        }
        let v = variance(&base_m);
        let report =
            AdaptReport { coefficients: Vec::new(), base_variance: v, adapted_variance: v, fit_samples: samples.len() };
        return Ok((AdaptedKernel { base, basis: basis.clone(), coeffs: Vec::new() }, report));
    }
    let fit = NullFit::new(samples, basis)?;
    let t = basis.len();
    let parts: Vec<Vec<Complex64>> = samples
        .par_chunks(CHUNK)
        .map(|ch| {
            let mut cross = vec![Complex64::new(0.0, 0.0); t];
            let mut v = vec![Complex64::new(0.0, 0.0); t];
            for s in ch {
                basis.eval_into(s.x, s.phi, &mut v);
                let f = base(s.x, s.phi);
                cross.iter_mut().zip(&v).for_each(|(c, vi)| *c += vi.conj() * f);
            }
            cross
        })
        .collect();
    let mut cross = vec![Complex64::new(0.0, 0.0); t];
    for p in &parts {
        cross.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let fsum = base_m.mean() * samples.len() as f64;
    let coeffs = fit.solve(&cross, fsum);
    let kernel = AdaptedKernel { base, basis: basis.clone(), coeffs };
    let adapted_m = moments_of(samples, |s| kernel.eval(s.x, s.phi));
    let report = AdaptReport {
        coefficients: coefficient_list(basis, &kernel.coeffs),
        base_variance: variance(&base_m),
        adapted_variance: variance(&adapted_m),
        fit_samples: samples.len(),
    };
    Ok((kernel, report))
}

fn split(samples: &[QuadratureSample], mode: FitMode) -> (&[QuadratureSample], &[QuadratureSample]) {
    match mode {
        FitMode::SplitSample => samples.split_at(samples.len() / 2),
        FitMode::WholeSample => (samples, samples),
    }
}

/// Adapted estimate of `E[f]`, fitted and averaged according to `mode`.
pub fn adaptive_estimate<F>(
    samples: &[QuadratureSample],
    base: F,
    basis: &NullBasis,
    mode: FitMode,
) -> Result<(EstimateWithError, AdaptReport)>
where
    F: Fn(f64, f64) -> Complex64 + Sync,
{
    let (train, test) = split(samples, mode);
    let (kernel, report) = adapt(train, base, basis)?;
    let est = crate::averaging::estimate_expectation(test, |x, phi| kernel.eval(x, phi))?;
    Ok((est, report))
}

/// Kernel-averaging reconstruction with every element adapted independently.
/// Returns the estimate and one report per upper-triangle element, row-major.
pub fn reconstruct_density_matrix_adaptive(
    samples: &[QuadratureSample],
    dim: usize,
    eta: f64,
    basis: &NullBasis,
    mode: FitMode,
) -> Result<(DensityMatrixEstimate, Vec<AdaptReport>)> {
    check_eta_deconvolution(eta)?;
    if samples.len() < 100 {
        return Err(TomoError::InsufficientData(format!("need at least 100 samples, got {}", samples.len())));
    }
    let bank = KernelBank::new(dim, eta)?;
    let (train, test) = split(samples, mode);
    let d = dim;
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|n| (n..d).map(move |m| (n, m))).collect();
    let p = pairs.len();
    let t = basis.len();

    let kernel_row = |s: &QuadratureSample, scratch: &mut [f64], radial: &mut [f64], out: &mut [Complex64]| {
        bank.radial_into(s.x, scratch, radial);
        for (o, &(n, m)) in out.iter_mut().zip(&pairs) {
            *o = Complex64::from_polar(radial[n * d + m], (n as f64 - m as f64) * s.phi);
        }
    };

    // Pass 1 on the training data: base moments and cross products.
    struct Acc {
        base: Vec<ComplexMoments>,
        cross: Vec<Complex64>,
    }
    let parts: Vec<Acc> = train
        .par_chunks(CHUNK)
        .map(|ch| {
            let mut acc =
                Acc { base: vec![ComplexMoments::default(); p], cross: vec![Complex64::new(0.0, 0.0); p * t] };
            let mut scratch = vec![0.0; bank.scratch_len()];
            let mut radial = vec![0.0; d * d];
            let mut k = vec![Complex64::new(0.0, 0.0); p];
            let mut v = vec![Complex64::new(0.0, 0.0); t];
            for s in ch {
                kernel_row(s, &mut scratch, &mut radial, &mut k);
                basis.eval_into(s.x, s.phi, &mut v);
                for (e, f) in k.iter().enumerate() {
                    acc.base[e].push(*f);
                    let row = &mut acc.cross[e * t..(e + 1) * t];
                    row.iter_mut().zip(&v).for_each(|(c, vi)| *c += vi.conj() * f);
                }
            }
            acc
        })
        .collect();
    let mut base = vec![ComplexMoments::default(); p];
    let mut cross = vec![Complex64::new(0.0, 0.0); p * t];
    for a in &parts {
        base.iter_mut().zip(&a.base).for_each(|(x, y)| x.merge(y));
        cross.iter_mut().zip(&a.cross).for_each(|(x, y)| *x += y);
    }
    let coeffs: Vec<Vec<Complex64>> = if t == 0 {
        vec![Vec::new(); p]
    } else {
        let fit = NullFit::new(train, basis)?;
        (0..p).map(|e| fit.solve(&cross[e * t..(e + 1) * t], base[e].mean() * train.len() as f64)).collect()
    };

    // Pass 2: adapted moments on the training data (report) and test data (estimate).
    let adapted_moments = |data: &[QuadratureSample]| -> Vec<ComplexMoments> {
        let parts: Vec<Vec<ComplexMoments>> = data
            .par_chunks(CHUNK)
            .map(|ch| {
                let mut acc = vec![ComplexMoments::default(); p];
                let mut scratch = vec![0.0; bank.scratch_len()];
                let mut radial = vec![0.0; d * d];
                let mut k = vec![Complex64::new(0.0, 0.0); p];
                let mut v = vec![Complex64::new(0.0, 0.0); t];
                for s in ch {
                    kernel_row(s, &mut scratch, &mut radial, &mut k);
                    basis.eval_into(s.x, s.phi, &mut v);
                    for e in 0..p {
                        let mut g = k[e];
                        for (c, vi) in coeffs[e].iter().zip(&v) {
                            g += c * vi;
                        }
                        acc[e].push(g);
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![ComplexMoments::default(); p];
        for part in &parts {
            total.iter_mut().zip(part).for_each(|(x, y)| x.merge(y));
        }
        total
    };
    let fitted = adapted_moments(train);
    let held = if mode == FitMode::WholeSample { fitted.clone() } else { adapted_moments(test) };

    let mut matrix = vec![Complex64::new(0.0, 0.0); d * d];
    let mut errors = vec![0.0; d * d];
    let mut reports = Vec::with_capacity(p);
    for (e, &(n, m)) in pairs.iter().enumerate() {
        let est = EstimateWithError::from_moments(&held[e], Diagnostics { chi2_pvalue: None, block_count: 0 });
        matrix[n * d + m] = est.mean;
        matrix[m * d + n] = est.mean.conj();
        errors[n * d + m] = est.std_error;
        errors[m * d + n] = est.std_error;
        reports.push(AdaptReport {
            coefficients: coefficient_list(basis, &coeffs[e]),
            base_variance: variance(&base[e]),
            adapted_variance: variance(&fitted[e]),
            fit_samples: train.len(),
        });
    }
    for n in 0..d {
        matrix[n * d + n].im = 0.0;
    }
    Ok((
        DensityMatrixEstimate {
            dim: d,
            matrix,
            errors,
            eta,
            sample_count: test.len(),
            hermitized: false,
            diagonal_chi2: vec![None; d],
        },
        reports,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::states::{sample_quadratures, DetectorModel, StateModel};
    use std::f64::consts::PI;

    #[test]
    fn null_values() {
        let t = NullTerm::new(0, 0, 1).unwrap();
        assert_eq!(null_value(t, 0.7, 0.0), Complex64::new(1.0, 0.0));
        let t = NullTerm::new(2, 1, -1).unwrap();
        let v = null_value(t, 1.5, PI / 2.0);
        assert!((v - Complex64::new(-2.25, 0.0)).norm() < 1e-12);
        assert!(NullTerm::new(1, 1, 0).is_err());
        assert_eq!(NullBasis::default().len(), 40);
        assert!(NullBasis::default().terms.iter().all(|t| t.frequency().abs() >= 2));
    }

    #[test]
    fn empty_basis_is_identity() {
        let samples = sample_quadratures(&StateModel::vacuum(), &DetectorModel::ideal(), 1000, 1).unwrap();
        let (k, r) = adapt(&samples, |x, _| Complex64::new(x * x, 0.0), &NullBasis::empty()).unwrap();
        assert!(r.coefficients.is_empty());
        assert_eq!(k.eval(0.3, 1.0), Complex64::new(0.09, 0.0));
    }

    #[test]
    fn null_base_cancels_exactly() {
        let samples =
            sample_quadratures(&StateModel::coherent(Complex64::new(0.5, 0.2)), &DetectorModel::ideal(), 20_000, 4)
                .unwrap();
        let term = NullTerm::new(1, 0, 1).unwrap();
        let (k, r) = adapt(&samples, move |x, p| null_value(term, x, p), &NullBasis::new(3, 2)).unwrap();
        assert!(r.adapted_variance <= 1e-8, "{}", r.adapted_variance);
        let idx = NullBasis::new(3, 2).terms.iter().position(|t| *t == term).unwrap();
        assert!((k.coefficients()[idx] + 1.0).norm() < 1e-6);
    }

    #[test]
    fn duplicate_terms_are_singular() {
        let samples = sample_quadratures(&StateModel::vacuum(), &DetectorModel::ideal(), 2000, 1).unwrap();
        let t = NullTerm::new(1, 0, 1).unwrap();
        let basis = NullBasis::from_terms(vec![t, t]);
        let r = adapt(&samples, |x, _| Complex64::new(x, 0.0), &basis);
        assert!(matches!(r, Err(TomoError::SingularBasis(_))));
        let r = adapt(&samples[..100], |x, _| Complex64::new(x, 0.0), &NullBasis::default());
        assert!(matches!(r, Err(TomoError::InsufficientData(_))));
    }

    #[test]
    fn matrix_path_matches_single_element_path() {
        let samples =
            sample_quadratures(&StateModel::coherent(Complex64::new(1.0, 0.0)), &DetectorModel::ideal(), 20_000, 8)
                .unwrap();
        let basis = NullBasis::new(3, 2);
        let (est, reports) =
            reconstruct_density_matrix_adaptive(&samples, 3, 1.0, &basis, FitMode::SplitSample).unwrap();
        let bank = KernelBank::new(3, 1.0).unwrap();
        let (single, rep) =
            adaptive_estimate(&samples, |x, phi| bank.eval(0, 1, x, phi).unwrap(), &basis, FitMode::SplitSample)
                .unwrap();
        assert!((est.get(0, 1) - single.mean).norm() < 1e-10);
        assert!((reports[1].adapted_variance - rep.adapted_variance).abs() < 1e-9 * rep.base_variance);
        for r in &reports {
            assert!(r.adapted_variance <= r.base_variance * (1.0 + 1e-8));
        }
    }
}
