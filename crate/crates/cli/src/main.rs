mod svg;

use clap::{Args, Parser, Subcommand, ValueEnum};
use homtom_core::adaptive::{reconstruct_density_matrix_adaptive, FitMode, NullBasis};
use homtom_core::averaging::{reconstruct_density_matrix, DensityMatrixEstimate};
use homtom_core::calibration::{
    calibrate_averaging, calibrate_ml, calibrate_ml_bootstrap, simulate_joint, twin_beam_truncation,
    CalibrationMlConfig, CalibrationSetup, DiagonalPOVM,
};
use homtom_core::io::{self, EstimateFile, KernelRow, PovmFile};
use homtom_core::maxlik::{default_truncation, ml_bootstrap, ml_reconstruct, MlConfig};
use homtom_core::states::{sample_quadratures, DetectorModel, StateModel};
use homtom_core::{KernelBank, TomoError};
use serde::Serialize;
use serde_json::{json, Value};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use svg::BarChart;

/// Homodyne tomography: simulate data, reconstruct states, calibrate
/// photodetectors, tabulate kernels and plot results.
#[derive(Debug, Parser)]
#[command(name = "homtom", version)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum Command {
    /// Simulate homodyne samples of a state, or joint calibration records.
    Simulate(SimulateArgs),
    /// Reconstruct a density matrix from homodyne samples.
    Reconstruct(ReconstructArgs),
    /// Reconstruct a detector's diagonal POVM from joint records.
    Calibrate(CalibrateArgs),
    /// Tabulate kernel functions on a grid.
    KernelTable(KernelTableArgs),
    /// Render an estimate or POVM JSON file to SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Bin,
    Json,
    Svg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Avg,
    Ml,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    /// State JSON, as a file path or inline text.
    #[arg(long, conflicts_with = "xi", required_unless_present = "xi")]
    state: Option<String>,
    /// Twin-beam gain; switches to joint calibration records.
    #[arg(long)]
    xi: Option<f64>,
    /// Homodyne efficiency, or the counter efficiency with --xi.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Counter dark-count mean (with --xi).
    #[arg(long, default_value_t = 0.0)]
    nbar: f64,
    /// Homodyne efficiency of the calibration arm (with --xi).
    #[arg(long, default_value_t = 1.0)]
    eta_h: f64,
    /// Number of samples or records.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fock truncation (state expansion or twin beam).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Args, Serialize)]
struct ReconstructArgs {
    /// Sample file (CSV `phi,x` or binary).
    input: PathBuf,
    /// Fock truncation; chosen from the data when omitted.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, value_enum, default_value_t = Method::Avg)]
    method: Method,
    /// Add fitted null estimators to the kernels (averaging only).
    #[arg(long)]
    adaptive: bool,
    /// Bootstrap resamples for maximum-likelihood error bars.
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Estimate JSON path.
    #[arg(long)]
    out: PathBuf,
    /// `svg` also writes a chart of the diagonal next to the JSON.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Args, Serialize)]
struct CalibrateArgs {
    /// Joint record file (CSV `n,phi,x`).
    input: PathBuf,
    #[arg(long)]
    xi: f64,
    #[arg(long, default_value_t = 1.0)]
    eta_h: f64,
    /// Largest outcome reconstructed.
    #[arg(long, default_value_t = 4)]
    n_max: usize,
    /// Fock truncation of the POVM; twin-beam default when omitted.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_enum, default_value_t = Method::Avg)]
    method: Method,
    /// Bootstrap resamples for maximum-likelihood error bars (0 disables).
    #[arg(long, default_value_t = 50)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Counter efficiency for the reference curve in plots.
    #[arg(long, requires = "nbar")]
    eta: Option<f64>,
    /// Dark-count mean for the reference curve in plots.
    #[arg(long, requires = "eta")]
    nbar: Option<f64>,
    /// POVM JSON path.
    #[arg(long)]
    out: PathBuf,
    /// `svg` also writes one chart per outcome.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Args, Serialize)]
struct KernelTableArgs {
    /// Rows cover all n, m below this.
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
    x_min: f64,
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    x_max: f64,
    #[arg(long, default_value_t = 61)]
    x_steps: usize,
    /// Comma-separated phases.
    #[arg(long, value_delimiter = ',', default_value = "0", allow_negative_numbers = true)]
    phi: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Args, Serialize)]
struct PlotArgs {
    /// Estimate or POVM JSON.
    input: PathBuf,
    /// SVG path; POVM plots get one file per outcome with an `_n<k>` suffix.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Svg)]
    format: Format,
}

enum Failure {
    Validation(String),
    NotConverged(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::NotConverged(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::NotConverged(m) | Failure::Io(m) => m,
        }
    }
}

impl From<TomoError> for Failure {
    fn from(e: TomoError) -> Self {
        match e {
            TomoError::Io(_) | TomoError::Format(_) => Failure::Io(e.to_string()),
            TomoError::NotConverged { .. } | TomoError::Convergence(_) => Failure::NotConverged(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = std::result::Result<Option<String>, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HOMTOM_LOG", "warn")).init();
    let cli = Cli::parse();
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let mut resolved = serde_json::to_value(&cli.command).expect("arguments serialize");
    resolved["jobs"] = json!(jobs);
    resolved["version"] = json!(env!("CARGO_PKG_VERSION"));
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a, &mut resolved),
        Command::Reconstruct(a) => reconstruct(a, &mut resolved),
        Command::Calibrate(a) => calibrate(a, &mut resolved),
        Command::KernelTable(a) => kernel_table(a),
        Command::Plot(a) => plot(a),
    };
    let out = match &cli.command {
        Command::Simulate(a) => &a.out,
        Command::Reconstruct(a) => &a.out,
        Command::Calibrate(a) => &a.out,
        Command::KernelTable(a) => &a.out,
        Command::Plot(a) => &a.out,
    };
    let failure = match result {
        Ok(None) => None,
        Ok(Some(warning)) => Some(Failure::NotConverged(warning)),
        Err(f) => Some(f),
    };
    let wrote_outputs = !matches!(failure, Some(Failure::Validation(_)) | Some(Failure::Io(_)));
    if wrote_outputs {
        log::info!("resolved configuration: {resolved}");
        if let Err(e) = io::write_json(&sidecar_path(out), &resolved) {
            eprintln!("error: cannot write configuration sidecar: {e}");
            return ExitCode::from(4);
        }
    }
    match failure {
        None => ExitCode::SUCCESS,
        Some(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn sibling(out: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn check_format(format: Format, allowed: &[Format]) -> std::result::Result<(), Failure> {
    if allowed.contains(&format) {
        Ok(())
    } else {
        Err(Failure::Validation(format!("format {format:?} is not available for this subcommand").to_lowercase()))
    }
}

fn load_state(spec: &str, dim: Option<usize>) -> std::result::Result<StateModel, Failure> {
    let text = if spec.trim_start().starts_with('{') {
        spec.to_string()
    } else {
        fs::read_to_string(spec).map_err(|e| Failure::Io(format!("{spec}: {e}")))?
    };
    let state = StateModel::from_json(&text).map_err(|e| Failure::Validation(e.to_string()))?;
    Ok(match dim {
        Some(d) => state.with_truncation(d),
        None => state,
    })
}

fn simulate(a: &SimulateArgs, resolved: &mut Value) -> Outcome {
    let out = BufWriter::new(File::create(&a.out)?);
    if let Some(xi) = a.xi {
        check_format(a.format, &[Format::Csv])?;
        let setup = CalibrationSetup { xi, eta: a.eta, nbar: a.nbar, eta_h: a.eta_h };
        let dim = a.dim.unwrap_or_else(|| twin_beam_truncation(xi.abs()));
        resolved["dim"] = json!(dim);
        let records = simulate_joint(&setup, a.n, a.seed, Some(dim))?;
        io::write_records_csv(out, &records)?;
    } else {
        check_format(a.format, &[Format::Csv, Format::Bin])?;
        let state = load_state(a.state.as_deref().expect("clap enforces --state"), a.dim)?;
        resolved["state"] = serde_json::from_str(&state.to_json()).expect("state JSON");
        let det = DetectorModel::new(a.eta)?;
        let samples = sample_quadratures(&state, &det, a.n, a.seed)?;
        match a.format {
            Format::Bin => io::write_samples_bin(out, &samples)?,
            _ => io::write_samples_csv(out, &samples)?,
        }
    }
    Ok(None)
}

fn diagonal_chart(est: &DensityMatrixEstimate, title: String) -> String {
    BarChart {
        title,
        x_label: "n",
        y_label: "<n|rho|n>",
        values: &est.diagonal(),
        errors: Some(&est.diagonal_errors()),
        theory: None,
    }
    .render()
}

fn reconstruct(a: &ReconstructArgs, resolved: &mut Value) -> Outcome {
    check_format(a.format, &[Format::Json, Format::Svg])?;
    let samples = io::read_samples(&a.input)?;
    let dim = match a.dim {
        Some(d) => d,
        None => default_truncation(&samples, a.eta, 0.999)?,
    };
    resolved["dim"] = json!(dim);
    let mut warning = None;
    let file = match a.method {
        Method::Avg => {
            if a.bootstrap.is_some() {
                return Err(Failure::Validation("--bootstrap applies to --method ml".into()));
            }
            if a.adaptive {
                let basis = NullBasis::default();
                let (est, _) = reconstruct_density_matrix_adaptive(&samples, dim, a.eta, &basis, FitMode::default())?;
                EstimateFile::new(&est, "avg-adaptive")
            } else {
                EstimateFile::new(&reconstruct_density_matrix(&samples, dim, a.eta)?, "avg")
            }
        }
        Method::Ml => {
            if a.adaptive {
                return Err(Failure::Validation("--adaptive applies to --method avg".into()));
            }
            let config = MlConfig { seed: a.seed, ..MlConfig::new(dim, a.eta) };
            let (mut est, report) = ml_reconstruct(&samples, &config)?;
            if !report.converged {
                warning =
                    Some(format!("maximum likelihood stopped after {} iterations without converging", report.iters));
            }
            if let Some(m) = a.bootstrap {
                est.errors = ml_bootstrap(&samples, &config, m, a.seed)?.errors;
            }
            EstimateFile::new(&est, "ml").with_ml(&report)
        }
    };
    io::write_json(&a.out, &file)?;
    if a.format == Format::Svg {
        let est = file.to_estimate()?;
        let title = format!("Photon-number distribution ({}, N = {})", file.method.as_deref().unwrap_or(""), file.n);
        fs::write(sibling(&a.out, "", "svg"), diagonal_chart(&est, title))?;
    }
    Ok(warning)
}

fn povm_charts(povm: &DiagonalPOVM, theory: Option<&DiagonalPOVM>, out: &Path) -> std::result::Result<(), Failure> {
    for n in 0..=povm.n_max {
        let errors = povm.errors.as_ref().map(|e| e[n].as_slice());
        let chart = BarChart {
            title: format!("<m|Pi_{n}|m> ({})", povm.method),
            x_label: "m",
            y_label: "probability",
            values: &povm.p[n],
            errors,
            theory: theory.map(|t| t.p[n].as_slice()),
        };
        fs::write(sibling(out, &format!("_n{n}"), "svg"), chart.render())?;
    }
    Ok(())
}

fn calibrate(a: &CalibrateArgs, resolved: &mut Value) -> Outcome {
    check_format(a.format, &[Format::Json, Format::Svg])?;
    let records = io::read_records(&a.input)?;
    let dim = a.dim.unwrap_or_else(|| twin_beam_truncation(a.xi.abs()));
    resolved["dim"] = json!(dim);
    let mut warning = None;
    let povm = match a.method {
        Method::Avg => calibrate_averaging(&records, a.xi, a.eta_h, a.n_max, dim)?,
        Method::Ml => {
            let config = CalibrationMlConfig { seed: a.seed, ..Default::default() };
            let (povm, report) = if a.bootstrap > 0 {
                calibrate_ml_bootstrap(&records, a.xi, a.eta_h, a.n_max, dim, &config, a.bootstrap)?
            } else {
                calibrate_ml(&records, a.xi, a.eta_h, a.n_max, dim, &config)?
            };
            resolved["loglik"] = json!(report.loglik);
            resolved["iters"] = json!(report.iters);
            if !report.converged {
                warning = Some(format!(
                    "calibration likelihood stopped after {} iterations without converging",
                    report.iters
                ));
            }
            povm
        }
    };
    let file = PovmFile { povm, config: resolved.clone() };
    io::write_json(&a.out, &file)?;
    if a.format == Format::Svg {
        let theory = match (a.eta, a.nbar) {
            (Some(eta), Some(nbar)) => Some(DiagonalPOVM::theoretical(eta, nbar, file.povm.n_max, file.povm.dim)?),
            _ => None,
        };
        povm_charts(&file.povm, theory.as_ref(), &a.out)?;
    }
    Ok(warning)
}

fn kernel_table(a: &KernelTableArgs) -> Outcome {
    check_format(a.format, &[Format::Csv])?;
    if a.x_steps < 1 || !(a.x_max >= a.x_min) {
        return Err(Failure::Validation("need --x-steps >= 1 and --x-max >= --x-min".into()));
    }
    let bank = KernelBank::new(a.dim, a.eta)?;
    let xs: Vec<f64> =
        (0..a.x_steps)
            .map(|i| {
                if a.x_steps == 1 {
                    a.x_min
                } else {
                    a.x_min + (a.x_max - a.x_min) * i as f64 / (a.x_steps - 1) as f64
                }
            })
            .collect();
    let mut rows = Vec::with_capacity(a.dim * a.dim * xs.len() * a.phi.len());
    for n in 0..a.dim {
        for m in 0..a.dim {
            for &phi in &a.phi {
                for &x in &xs {
                    rows.push(KernelRow { n, m, x, phi, eta: a.eta, value: bank.eval(n, m, x, phi)? });
                }
            }
        }
    }
    io::write_kernel_table(BufWriter::new(File::create(&a.out)?), &rows)?;
    Ok(None)
}

fn plot(a: &PlotArgs) -> Outcome {
    check_format(a.format, &[Format::Svg])?;
    let value: Value = io::read_json(&a.input)?;
    if value.get("rho").is_some() {
        let file: EstimateFile = serde_json::from_value(value).map_err(|e| Failure::Io(e.to_string()))?;
        let est = file.to_estimate()?;
        let title = format!("Photon-number distribution ({}, N = {})", file.method.as_deref().unwrap_or(""), file.n);
        fs::write(&a.out, diagonal_chart(&est, title))?;
    } else if value.get("P").is_some() {
        let file: PovmFile = serde_json::from_value(value).map_err(|e| Failure::Io(e.to_string()))?;
        let cfg = &file.config;
        let theory = match (cfg.get("eta").and_then(Value::as_f64), cfg.get("nbar").and_then(Value::as_f64)) {
            (Some(eta), Some(nbar)) => Some(DiagonalPOVM::theoretical(eta, nbar, file.povm.n_max, file.povm.dim)?),
            _ => None,
        };
        povm_charts(&file.povm, theory.as_ref(), &a.out)?;
    } else {
        return Err(Failure::Io(format!("{}: neither an estimate nor a POVM file", a.input.display())));
    }
    Ok(None)
}
