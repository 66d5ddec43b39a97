//! Command-line front end for `lattice-llr`.
//!
//! [`run`] parses arguments, executes one subcommand and returns the process
//! exit code. Output files are written to a temporary file in the target
//! directory and renamed into place.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use lattice_llr::asymptotics::{boundary_quantities, model1_regression};
use lattice_llr::estimator::{fit_curve, kde, FitResult};
use lattice_llr::experiment::{
    normality_diagnostics_with_threads, parse_grid, point_draws, run_experiment_with_threads, ExperimentConfig,
    ExperimentConfigFile, ExperimentError, ExperimentResult, ModelConfig, ModelKindName, NormalityDiagnostics,
};
use lattice_llr::lattice::format_f64;
use lattice_llr::simulator::{simulate, CovariatePreset, ModelKind, NoiseMode, SweepOrder};
use lattice_llr::{limit_quantities, Bandwidth, KernelFamily, KernelSpec, LatticeField, TrueModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment variable capping the worker threads of replicated runs.
pub const THREADS_ENV: &str = "LATTICE_LLR_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn read_field(path: &Path) -> Result<LatticeField, CliError> {
    LatticeField::read_csv(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn experiment_err(e: ExperimentError) -> CliError {
    match e {
        ExperimentError::InsufficientReplications { .. } => CliError::Numerical(e.to_string()),
        e => CliError::Data(e.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "lattice-llr", version, about = "Local linear regression for lattice random fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a field and write it as lattice CSV.
    Simulate(SimulateArgs),
    /// Fit local linear regression curves to a lattice CSV.
    Estimate(EstimateArgs),
    /// Tabulate limiting bias and variance quantities.
    Asymptotics(AsymptoticsArgs),
    /// Run a replicated experiment from a JSON config.
    Experiment(ExperimentArgs),
    /// Check the single-point limit law by Monte Carlo.
    Diagnose(DiagnoseArgs),
}

fn serde_parse<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Evaluation points parsed from `lo:hi:count`.
#[derive(Debug, Clone)]
struct PointGrid(Vec<f64>);

fn grid_parse(s: &str) -> Result<PointGrid, String> {
    parse_grid(s).map(PointGrid).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// model1, model2 or iid
    #[arg(long, value_parser = serde_parse::<ModelKindName>)]
    model: ModelKindName,
    /// Covariate construction for model2 (x0, xc, xd, xe, xf).
    #[arg(long, value_parser = serde_parse::<CovariatePreset>)]
    preset: Option<CovariatePreset>,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 75)]
    margin: usize,
    #[arg(long, default_value_t = 20)]
    sweeps: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    /// Half-width of the uniform covariate (iid only).
    #[arg(long, default_value_t = 1.0)]
    half_width: f64,
    #[arg(long, default_value = "raster", value_parser = serde_parse::<SweepOrder>)]
    sweep_order: SweepOrder,
    #[arg(long, default_value = "fixed", value_parser = serde_parse::<NoiseMode>)]
    noise_mode: NoiseMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    bandwidth: f64,
    #[arg(long, default_value = "epanechnikov")]
    kernel: KernelFamily,
    /// `lo:hi:count`; for d > 1 the tensor grid over every axis.
    #[arg(long, value_parser = grid_parse, allow_hyphen_values = true)]
    grid: PointGrid,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
enum Truth {
    Iid,
    Model1,
}

#[derive(Debug, Args)]
struct AsymptoticsArgs {
    /// iid (uniform covariate, g = x²) or model1 (density estimated from --field).
    #[arg(long, value_parser = serde_parse::<Truth>)]
    truth: Truth,
    #[arg(long, default_value = "gaussian")]
    kernel: KernelFamily,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 1.0)]
    half_width: f64,
    /// Lattice CSV used for the kernel density plug-in (model1).
    #[arg(long)]
    field: Option<PathBuf>,
    /// Bandwidth of the density plug-in.
    #[arg(long, default_value_t = 0.5)]
    bandwidth: f64,
    /// Evaluation points for interior quantities.
    #[arg(long, value_parser = grid_parse, default_value = "-2:2:41", allow_hyphen_values = true)]
    grid: PointGrid,
    /// Boundary offsets `c` (single value or `lo:hi:count`); switches to boundary output.
    #[arg(long, allow_hyphen_values = true)]
    boundary_c: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// Experiment config; the model must be `iid`.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    x0: f64,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-replication CSV of estimates and standardized errors.
    #[arg(long)]
    draws: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs one subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = threads_from_env().and_then(|threads| match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Asymptotics(a) => cmd_asymptotics(a),
        Command::Experiment(a) => cmd_experiment(a, threads),
        Command::Diagnose(a) => cmd_diagnose(a, threads),
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("lattice-llr: {}", e.message());
            e.exit_code()
        }
    }
}

/// Worker threads from [`THREADS_ENV`]; unset or `0` means automatic.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(s) if s.trim().is_empty() => Ok(0),
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a nonnegative integer, got `{s}`"))),
    }
}

/// Writes `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io_err = |e: io::Error| CliError::Data(format!("{}: {e}", path.display()));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)?;
    }
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

fn json_text<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn bandwidth(b: f64) -> Result<Bandwidth, CliError> {
    Bandwidth::new(b).map_err(|e| CliError::Usage(e.to_string()))
}

fn kernel(family: KernelFamily, d: usize) -> Result<KernelSpec, CliError> {
    KernelSpec::new(family, d).map_err(|e| CliError::Usage(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Curve CSV

/// Header of the curve CSV for covariate dimension `d`.
pub fn curve_header(d: usize) -> String {
    let mut h = if d == 1 { "x".to_string() } else { (1..=d).map(|k| format!("x{k}")).collect::<Vec<_>>().join(",") };
    h.push_str(",g_hat");
    for k in 1..=d {
        write!(h, ",grad_{k}").unwrap();
    }
    h.push_str(",rcond,support_count,status");
    h
}

/// One curve CSV row; estimate cells are empty when the fit failed.
pub fn curve_row(x: &[f64], fit: &FitResult) -> String {
    let mut cells: Vec<String> = x.iter().map(|&v| format_f64(v)).collect();
    match fit {
        Ok(f) => {
            cells.push(format_f64(f.g_hat));
            cells.extend(f.grad_hat.iter().map(|&g| format_f64(g)));
            cells.push(format_f64(f.rcond));
            cells.push(f.support_count.to_string());
            cells.push("ok".into());
        }
        Err(e) => {
            cells.extend(std::iter::repeat_n(String::new(), x.len() + 1));
            cells.push(format_f64(e.rcond));
            cells.push(e.support_count.to_string());
            cells.push(e.reason.as_str().into());
        }
    }
    cells.join(",")
}

fn tensor_grid(axis: &[f64], d: usize) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![]];
    for _ in 0..d {
        pts = pts
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    pts
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let cfg = ModelConfig {
        kind: a.model,
        covariate_preset: a.preset,
        m: a.m,
        n: a.n,
        margin: a.margin,
        sweeps: a.sweeps,
        noise_sd: a.noise_sd,
        sweep_order: a.sweep_order,
        noise_mode: a.noise_mode,
        half_width: a.half_width,
    };
    let spec = cfg.to_spec().map_err(|e| CliError::Usage(e.to_string()))?.with_seed(a.seed);
    let field = simulate(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    write_atomic(&a.out, |w| field.write_csv_to(w).map_err(io::Error::other))
}

fn cmd_estimate(a: EstimateArgs) -> Result<(), CliError> {
    let bw = bandwidth(a.bandwidth)?;
    let field = read_field(&a.input)?;
    let d = field.covariate_dim();
    let k = kernel(a.kernel, d)?;
    let points = tensor_grid(&a.grid.0, d);
    let curve = fit_curve(&field, &points, bw, &k).map_err(data_err)?;
    let mut text = curve_header(d);
    text.push('\n');
    for (x, fit) in &curve {
        text.push_str(&curve_row(x, fit));
        text.push('\n');
    }
    write_text(&a.out, &text)?;
    let failed = curve.iter().filter(|(_, f)| f.is_err()).count();
    if failed > 0 {
        eprintln!("lattice-llr: {failed} of {} fits failed", curve.len());
    }
    if failed == curve.len() {
        return Err(CliError::Numerical("every local fit failed".into()));
    }
    Ok(())
}

fn truth_model(a: &AsymptoticsArgs) -> Result<TrueModel, CliError> {
    if !(a.noise_sd > 0.0 && a.noise_sd.is_finite()) {
        return Err(CliError::Usage("--noise-sd must be positive".into()));
    }
    match a.truth {
        Truth::Iid => {
            if !(a.half_width > 0.0 && a.half_width.is_finite()) {
                return Err(CliError::Usage("--half-width must be positive".into()));
            }
            Ok(TrueModel::iid_quadratic(a.half_width, a.noise_sd))
        }
        Truth::Model1 => {
            let path = a
                .field
                .as_ref()
                .ok_or_else(|| CliError::Usage("--truth model1 needs --field for the density plug-in".into()))?;
            let field = read_field(path)?;
            if field.covariate_dim() != 1 {
                return Err(CliError::Data("density plug-in needs a field with d = 1".into()));
            }
            let bw = bandwidth(a.bandwidth)?;
            let k = kernel(KernelFamily::Gaussian, 1)?;
            let density = Arc::new(move |x: &[f64]| kde(&field, x, bw, &k).expect("dimension checked"));
            Ok(TrueModel::model1(density, a.noise_sd))
        }
    }
}

fn parse_offsets(s: &str) -> Result<Vec<f64>, CliError> {
    if s.contains(':') {
        grid_parse(s).map(|g| g.0).map_err(CliError::Usage)
    } else {
        s.parse::<f64>().map(|c| vec![c]).map_err(|_| CliError::Usage(format!("bad boundary offset `{s}`")))
    }
}

fn cmd_asymptotics(a: AsymptoticsArgs) -> Result<(), CliError> {
    let model = truth_model(&a)?;
    let k = kernel(a.kernel, 1)?;
    let mut text = String::new();
    let mut ok = 0usize;
    if let Some(spec) = &a.boundary_c {
        let cs = parse_offsets(spec)?;
        text.push_str("c,bg,var0,var1,status\n");
        for c in cs {
            match boundary_quantities(&model, c, &k) {
                Ok(q) => {
                    ok += 1;
                    writeln!(text, "{},{},{},{},ok", format_f64(c), format_f64(q.bg), format_f64(q.var0), format_f64(q.var1)).unwrap();
                }
                Err(e) => {
                    eprintln!("lattice-llr: c = {c}: {e}");
                    writeln!(text, "{},,,,failed", format_f64(c)).unwrap();
                }
            }
        }
    } else {
        text.push_str("x,density,bg,var0,var1,status\n");
        for &x in &a.grid.0 {
            let f = model.f(&[x]);
            match limit_quantities(&model, &[x], &k) {
                Ok(q) => {
                    ok += 1;
                    writeln!(
                        text,
                        "{},{},{},{},{},ok",
                        format_f64(x),
                        format_f64(f),
                        format_f64(q.bg),
                        format_f64(q.var0),
                        format_f64(q.var1[(0, 0)])
                    )
                    .unwrap();
                }
                Err(_) => writeln!(text, "{},{},,,,zero_density", format_f64(x), format_f64(f)).unwrap(),
            }
        }
    }
    write_text(&a.out, &text)?;
    if ok == 0 {
        return Err(CliError::Numerical("no point had well-defined limiting quantities".into()));
    }
    Ok(())
}

/// Reads and validates an experiment config file.
pub fn load_config(path: &Path) -> Result<(ExperimentConfigFile, ExperimentConfig), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let file: ExperimentConfigFile =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let cfg = file.to_config().map_err(data_err)?;
    Ok((file, cfg))
}

fn true_regression(kind: &ModelKind) -> Option<fn(f64) -> f64> {
    match kind {
        ModelKind::Model1 => Some(model1_regression),
        ModelKind::IidQuadratic { .. } => Some(|x| x * x),
        ModelKind::Model2 { .. } => None,
    }
}

#[derive(Serialize)]
struct ExperimentSummary<'a> {
    config: &'a ExperimentConfigFile,
    grid_points: usize,
    replications: usize,
    nsr_mean: f64,
    nsr_truth_mean: Option<f64>,
    failed_fits: usize,
    total_fits: usize,
}

/// The files written by `experiment`, keyed by file name.
pub fn experiment_outputs(file: &ExperimentConfigFile, cfg: &ExperimentConfig, r: &ExperimentResult) -> Vec<(&'static str, String)> {
    let mut curves = format!("replication,{}\n", curve_header(1));
    for rep in &r.replications {
        for (x, fit) in r.x_grid.iter().zip(&rep.curve) {
            writeln!(curves, "{},{}", rep.index, curve_row(&[*x], fit)).unwrap();
        }
    }

    let truth = true_regression(&cfg.model.kind);
    let mut summary = String::from("x,mean_g_hat,sd_g_hat,successes,g_true\n");
    for p in &r.summary {
        writeln!(
            summary,
            "{},{},{},{},{}",
            format_f64(p.x),
            opt(p.mean),
            opt(p.sd),
            p.successes,
            opt(truth.map(|g| g(p.x)))
        )
        .unwrap();
    }

    let mut nsr = String::from("replication,seed,nsr,nsr_truth,nsr_failures\n");
    for rep in &r.replications {
        writeln!(nsr, "{},{},{},{},{}", rep.index, rep.seed, opt(rep.nsr), opt(rep.nsr_truth), rep.nsr_failures).unwrap();
    }

    let mut scatter = String::from("x,y\n");
    for (x, y) in &r.scatter {
        writeln!(scatter, "{},{}", format_f64(*x), format_f64(*y)).unwrap();
    }

    let json = json_text(&ExperimentSummary {
        config: file,
        grid_points: r.x_grid.len(),
        replications: r.replications.len(),
        nsr_mean: r.nsr_mean,
        nsr_truth_mean: r.nsr_truth_mean,
        failed_fits: r.failures,
        total_fits: r.x_grid.len() * r.replications.len(),
    });

    vec![
        ("curves.csv", curves),
        ("summary.csv", summary),
        ("nsr.csv", nsr),
        ("scatter.csv", scatter),
        ("summary.json", json),
    ]
}

fn cmd_experiment(a: ExperimentArgs, threads: usize) -> Result<(), CliError> {
    let (file, cfg) = load_config(&a.config)?;
    let result = run_experiment_with_threads(&cfg, threads).map_err(experiment_err)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Data(format!("{}: {e}", a.out_dir.display())))?;
    for (name, text) in experiment_outputs(&file, &cfg, &result) {
        write_text(&a.out_dir.join(name), &text)?;
    }
    if result.failures > 0 {
        eprintln!("lattice-llr: {} curve fits failed", result.failures);
    }
    if result.failures == result.x_grid.len() * result.replications.len() {
        return Err(CliError::Numerical("every local fit failed".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseReport<'a> {
    config: &'a ExperimentConfigFile,
    x0: f64,
    #[serde(flatten)]
    diagnostics: NormalityDiagnostics,
}

fn cmd_diagnose(a: DiagnoseArgs, threads: usize) -> Result<(), CliError> {
    let (file, cfg) = load_config(&a.config)?;
    let ModelKind::IidQuadratic { half_width } = cfg.model.kind else {
        return Err(CliError::Data("diagnose needs a model with known truth (kind \"iid\")".into()));
    };
    let truth = TrueModel::iid_quadratic(half_width, cfg.model.protocol.noise_sd);
    let x0 = [a.x0];
    let diagnostics = normality_diagnostics_with_threads(&cfg, &truth, &x0, threads).map_err(experiment_err)?;
    if let Some(path) = &a.draws {
        let draws = point_draws(&cfg, &truth, &x0, threads).map_err(experiment_err)?;
        let mut text = String::from("g_hat,grad_hat,z0,z1\n");
        for k in 0..draws.z0.len() {
            writeln!(
                text,
                "{},{},{},{}",
                format_f64(draws.g_hat[k]),
                format_f64(draws.grad_hat[k]),
                format_f64(draws.z0[k]),
                format_f64(draws.z1[k])
            )
            .unwrap();
        }
        write_text(path, &text)?;
    }
    write_text(&a.out, &json_text(&DiagnoseReport { config: &file, x0: a.x0, diagnostics }))
}
