//! File formats: homodyne samples (CSV `phi,x` or the `HOMTOM01` binary),
//! joint calibration records (CSV `n,phi,x`), estimate and POVM JSON, and
//! kernel tables.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::averaging::DensityMatrixEstimate;
use crate::calibration::{DiagonalPOVM, JointRecord};
use crate::error::{Result, TomoError};
use crate::maxlik::MlReport;
use crate::states::QuadratureSample;

pub const BINARY_MAGIC: &[u8; 8] = b"HOMTOM01";

pub fn write_samples_csv<W: Write>(writer: W, samples: &[QuadratureSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<QuadratureSample>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["phi", "x"] {
        return Err(TomoError::Format(format!(
            "expected header `phi,x`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.deserialize().map(|row| row.map_err(TomoError::from)).collect()
}

pub fn write_samples_bin<W: Write>(mut writer: W, samples: &[QuadratureSample]) -> Result<()> {
    writer.write_all(BINARY_MAGIC)?;
    for s in samples {
        writer.write_all(&s.phi.to_le_bytes())?;
        writer.write_all(&s.x.to_le_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_samples_bin<R: Read>(mut reader: R) -> Result<Vec<QuadratureSample>> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    parse_samples_bin(&bytes)
}

fn parse_samples_bin(bytes: &[u8]) -> Result<Vec<QuadratureSample>> {
    let body = bytes
        .strip_prefix(BINARY_MAGIC.as_slice())
        .ok_or_else(|| TomoError::Format("missing HOMTOM01 magic".into()))?;
    if body.len() % 16 != 0 {
        return Err(TomoError::Format(format!("payload of {} bytes is not a whole number of pairs", body.len())));
    }
    let f = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
    Ok(body.chunks_exact(16).map(|c| QuadratureSample { phi: f(&c[..8]), x: f(&c[8..]) }).collect())
}

/// Reads either sample format, recognizing the binary one by its magic.
pub fn read_samples(path: &Path) -> Result<Vec<QuadratureSample>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(BINARY_MAGIC) {
        parse_samples_bin(&bytes)
    } else {
        read_samples_csv(bytes.as_slice())
    }
}

pub fn write_records_csv<W: Write>(writer: W, records: &[JointRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<JointRecord>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["n", "phi", "x"] {
        return Err(TomoError::Format("expected header `n,phi,x`".into()));
    }
    r.deserialize().map(|row| row.map_err(TomoError::from)).collect()
}

pub fn read_records(path: &Path) -> Result<Vec<JointRecord>> {
    read_records_csv(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDiagnostics {
    pub hermitized: bool,
    /// Block-mean normality p-values of the diagonal elements.
    #[serde(default)]
    pub diagonal_chi2: Vec<Option<f64>>,
}

/// JSON form of a density-matrix estimate; the ML fields are present only
/// for maximum-likelihood runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateFile {
    pub dim: usize,
    pub eta: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub rho: Vec<Vec<[f64; 2]>>,
    pub err: Vec<Vec<f64>>,
    pub diagnostics: MatrixDiagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loglik: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stationarity_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
}

impl EstimateFile {
    pub fn new(est: &DensityMatrixEstimate, method: &str) -> Self {
        let d = est.dim;
        Self {
            dim: d,
            eta: est.eta,
            n: est.sample_count,
            rho: (0..d).map(|i| (0..d).map(|j| [est.get(i, j).re, est.get(i, j).im]).collect()).collect(),
            err: (0..d).map(|i| (0..d).map(|j| est.error(i, j)).collect()).collect(),
            diagnostics: MatrixDiagnostics { hermitized: est.hermitized, diagonal_chi2: est.diagonal_chi2.clone() },
            method: Some(method.to_string()),
            loglik: None,
            iters: None,
            stationarity_residual: None,
            truncation: None,
            converged: None,
        }
    }

    pub fn with_ml(mut self, report: &MlReport) -> Self {
        self.loglik = Some(report.loglik);
        self.iters = Some(report.iters);
        self.stationarity_residual = Some(report.stationarity_residual);
        self.truncation = Some(report.truncation);
        self.converged = Some(report.converged);
        self
    }

    pub fn to_estimate(&self) -> Result<DensityMatrixEstimate> {
        let d = self.dim;
        if self.rho.len() != d || self.rho.iter().any(|r| r.len() != d) {
            return Err(TomoError::Format(format!("rho is not {d}×{d}")));
        }
        if self.err.len() != d || self.err.iter().any(|r| r.len() != d) {
            return Err(TomoError::Format(format!("err is not {d}×{d}")));
        }
        let mut chi2 = self.diagnostics.diagonal_chi2.clone();
        chi2.resize(d, None);
        Ok(DensityMatrixEstimate {
            dim: d,
            matrix: self.rho.iter().flatten().map(|c| Complex64::new(c[0], c[1])).collect(),
            errors: self.err.iter().flatten().copied().collect(),
            eta: self.eta,
            sample_count: self.n,
            hermitized: self.diagnostics.hermitized,
            diagonal_chi2: chi2,
        })
    }
}

/// POVM JSON: the POVM fields plus the resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PovmFile {
    #[serde(flatten)]
    pub povm: DiagonalPOVM,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Twelve significant digits, positional where that stays short.
pub fn format_sig12(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.11e}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelRow {
    pub n: usize,
    pub m: usize,
    pub x: f64,
    pub phi: f64,
    pub eta: f64,
    pub value: Complex64,
}

pub fn write_kernel_table<W: Write>(writer: W, rows: &[KernelRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["n", "m", "x", "phi", "eta", "re", "im"])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.m.to_string(),
            format_sig12(r.x),
            format_sig12(r.phi),
            format_sig12(r.eta),
            format_sig12(r.value.re),
            format_sig12(r.value.im),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_kernel_table<R: Read>(reader: R) -> Result<Vec<KernelRow>> {
    let mut r = csv::Reader::from_reader(reader);
    #[derive(Deserialize)]
    struct Raw {
        n: usize,
        m: usize,
        x: f64,
        phi: f64,
        eta: f64,
        re: f64,
        im: f64,
    }
    r.deserialize::<Raw>()
        .map(|row| {
            let r = row?;
            Ok(KernelRow { n: r.n, m: r.m, x: r.x, phi: r.phi, eta: r.eta, value: Complex64::new(r.re, r.im) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig12_digits() {
        assert_eq!(format_sig12(1.0), "1.00000000000");
        assert_eq!(format_sig12(-0.123456789012345), "-0.123456789012");
        assert_eq!(format_sig12(1234.5), "1234.50000000");
        assert_eq!(format_sig12(2.5e-9), "2.50000000000e-9");
        assert_eq!(format_sig12(0.0), "0");
        assert_eq!(format_sig12(-0.0), "0");
    }

    #[test]
    fn binary_rejects_bad_payloads() {
        assert!(parse_samples_bin(b"NOTMAGIC").is_err());
        let mut bytes = BINARY_MAGIC.to_vec();
        bytes.extend_from_slice(&[0u8; 12]);
        assert!(parse_samples_bin(&bytes).is_err());
    }
}
