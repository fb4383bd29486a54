//! `gmrfsel`: simulate lattice fields, select GMRF neighborhoods, and run the
//! Monte Carlo benchmarks.

mod config;
mod error;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use gmrfsel::baselines::{
    aic_bic_select, default_variogram_bins, empirical_variogram_aniso, fit_mle, fit_variogram_wls, kriging_theta,
    InfoCriterion, DEFAULT_KRIGING_WINDOW,
};
use gmrfsel::benchmark::{run_experiment, BenchmarkResult};
use gmrfsel::cls::{fit_plane, fit_torus};
use gmrfsel::lattice::{full_model_dim, sublattice_for_model};
use gmrfsel::risk::{format_sig, write_risk_csv};
use gmrfsel::select::{slope_select_plane, slope_select_torus, SelectionPath, SelectionReport};
use gmrfsel::simulate::{AnisotropySpec, CorrelationFamily, FieldObservations};
use gmrfsel::spectral::DEFAULT_GRID_RESOLUTION;
use gmrfsel::{build_model_collection, ConstraintSpec, ModelCollection};

use crate::config::{benchmark_config, simulate_config, sidecar_path, Sidecar};
use crate::error::{CliError, CliResult};

/// Environment variable holding the number of worker threads.
const WORKERS_ENV: &str = "GMRF_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "gmrfsel", version, about = "Data-driven GMRF neighborhood selection on 2-D lattices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw fields from a GMRF or correlation-model truth.
    Simulate(SimulateArgs),
    /// Select a neighborhood (slope heuristic) or run a baseline.
    Select(SelectArgs),
    /// Fit a single model of the collection.
    Fit(FitArgs),
    /// Run a named or custom Monte Carlo experiment.
    Benchmark(BenchmarkArgs),
    /// Write the slope-heuristic selection path as CSV.
    PathDump(PathDumpArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub p1: Option<usize>,
    #[arg(long)]
    pub p2: Option<usize>,
    /// Simulate on a torus (GMRF truths).
    #[arg(long)]
    pub toroidal: bool,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// GMRF truth `θ^φ`.
    #[arg(long, conflicts_with = "family")]
    pub phi: Option<f64>,
    /// Correlation family of a plane truth.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub range: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub variance: Option<f64>,
    #[arg(long)]
    pub aniso_ratio: Option<f64>,
    #[arg(long)]
    pub aniso_rotation: Option<f64>,
    /// Binary output; the truth is written next to it as `<out>.truth.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    /// Binary dataset written by `simulate` (or any file in that format).
    #[arg(long)]
    data: PathBuf,
    /// Treat the data as toroidal, overriding the sidecar.
    #[arg(long, conflicts_with = "plane")]
    torus: bool,
    /// Treat the data as a plane window, overriding the sidecar.
    #[arg(long)]
    plane: bool,
}

#[derive(Debug, Args)]
struct CollectionArgs {
    /// Largest model dimension in the collection.
    #[arg(long)]
    max_dim: Option<usize>,
    /// Use anisotropic (reflection-only) symmetry classes.
    #[arg(long)]
    aniso: bool,
    /// Eigenvalue cap of the torus constraint set; unbounded when absent.
    #[arg(long)]
    rho: Option<f64>,
    /// Frequency grid of the plane constraints.
    #[arg(long, default_value_t = DEFAULT_GRID_RESOLUTION)]
    grid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    ClsSlope,
    Aic,
    Bic,
    Variogram,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long, value_enum, default_value_t = Method::ClsSlope)]
    method: Method,
    #[command(flatten)]
    collection: CollectionArgs,
    /// Variogram family.
    #[arg(long, default_value = "exponential")]
    family: String,
    /// Fix the Matérn smoothness instead of estimating it.
    #[arg(long)]
    kappa: Option<f64>,
    /// Kriging window side.
    #[arg(long, default_value_t = DEFAULT_KRIGING_WINDOW)]
    window: usize,
    /// Known anisotropy ratio for the variogram baseline.
    #[arg(long)]
    aniso_ratio: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    aniso_rotation: f64,
    /// JSON report; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FitMethod {
    Cls,
    Mle,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Index of the model in the collection.
    #[arg(long)]
    model: usize,
    #[arg(long, value_enum, default_value_t = FitMethod::Cls)]
    method: FitMethod,
    #[command(flatten)]
    collection: CollectionArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// JSON config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// table1..table6 or custom.
    #[arg(long)]
    pub experiment: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Side of the square lattice of a named experiment.
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PathDumpArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[command(flatten)]
    collection: CollectionArgs,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_workers().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn configure_workers() -> CliResult<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let workers: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&w| w > 0)
        .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Select(a) => cmd_select(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Benchmark(a) => cmd_benchmark(&a),
        Command::PathDump(a) => cmd_path_dump(&a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let cfg = simulate_config(a)?;
    let lattice = cfg.lattice.spec()?;
    let (data, truth) = cfg.truth.simulate(&lattice, cfg.n, cfg.seed)?;
    data.save_binary(&a.out)?;
    let sidecar = Sidecar {
        lattice: cfg.lattice,
        n: cfg.n,
        seed: cfg.seed,
        truth,
    };
    fs::write(sidecar_path(&a.out), pretty(&serde_json::to_value(&sidecar)?))?;
    eprintln!(
        "wrote {} replication(s) of a {}x{} {} field to {}",
        cfg.n,
        lattice.p1,
        lattice.p2,
        if lattice.toroidal { "toroidal" } else { "plane" },
        a.out.display()
    );
    Ok(())
}

fn load_dataset(a: &DatasetArgs) -> CliResult<FieldObservations> {
    let toroidal = if a.torus {
        true
    } else if a.plane {
        false
    } else {
        let side = sidecar_path(&a.data);
        if !side.exists() {
            return Err(CliError::Config(format!(
                "no sidecar {} found; pass --torus or --plane",
                side.display()
            )));
        }
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&side)?)?;
        sidecar.lattice.toroidal
    };
    Ok(FieldObservations::load_binary(&a.data, toroidal)?)
}

fn collection_for(data: &FieldObservations, c: &CollectionArgs) -> CliResult<(ModelCollection, bool)> {
    let iso = !c.aniso;
    let default = match (data.lattice.toroidal, iso) {
        (true, _) => 21,
        (false, true) => 18,
        (false, false) => 28,
    };
    let max_dim = c.max_dim.unwrap_or_else(|| default.min(full_model_dim(&data.lattice, iso)));
    Ok((build_model_collection(&data.lattice, max_dim, iso)?, iso))
}

fn slope_report(data: &FieldObservations, c: &CollectionArgs) -> CliResult<SelectionReport> {
    let (collection, iso) = collection_for(data, c)?;
    let report = if data.lattice.toroidal {
        slope_select_torus(data, &collection, iso, &ConstraintSpec::new(c.rho, 0.0)?)?
    } else {
        slope_select_plane(data, &collection, iso, c.grid)?
    };
    Ok(report)
}

fn cmd_select(a: &SelectArgs) -> CliResult<()> {
    let data = load_dataset(&a.dataset)?;
    let report = match a.method {
        Method::ClsSlope => {
            let r = slope_report(&data, &a.collection)?;
            eprintln!(
                "selected model {} (d = {}), N_min = {}, jump = {}{}",
                r.selected,
                r.selected_dim(),
                format_sig(r.n_min_hat, 6),
                r.jump,
                if r.degenerate { " [flat path]" } else { "" }
            );
            r.to_json()
        }
        Method::Aic | Method::Bic => {
            let crit = if a.method == Method::Aic { InfoCriterion::Aic } else { InfoCriterion::Bic };
            let (collection, iso) = collection_for(&data, &a.collection)?;
            let (selected, fit) = aic_bic_select(&data, &collection, iso, crit)?;
            eprintln!("selected model {selected} (d = {}), loglik = {}", fit.model.dim(iso), format_sig(fit.loglik, 6));
            json!({"criterion": crit, "selected": selected, "fit": fit.to_json()})
        }
        Method::Variogram => {
            let family: CorrelationFamily = a.family.parse()?;
            let aniso = a.aniso_ratio.map(|r| AnisotropySpec::new(r, a.aniso_rotation)).transpose()?;
            let (max_lag, n_bins) = default_variogram_bins(&data.lattice);
            let bins = empirical_variogram_aniso(&data, max_lag, n_bins, aniso.as_ref())?;
            let fit = fit_variogram_wls(&bins, family, a.kappa)?;
            let theta = kriging_theta(&fit, &data.lattice, a.window, aniso.as_ref())?;
            eprintln!(
                "{} variogram: range = {}, variance = {}",
                family.name(),
                format_sig(fit.range_hat, 6),
                format_sig(fit.variance_hat, 6)
            );
            json!({"variogram": fit, "window": a.window, "kriging": theta.to_json()})
        }
    };
    emit(a.out.as_deref(), &pretty(&report))
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let data = load_dataset(&a.dataset)?;
    let (collection, iso) = collection_for(&data, &a.collection)?;
    let m = collection.get(a.model).ok_or_else(|| {
        CliError::Config(format!("model {} is outside the collection of {} models", a.model, collection.len()))
    })?;
    let out = match a.method {
        FitMethod::Cls if data.lattice.toroidal => {
            fit_torus(m, &data, iso, &ConstraintSpec::new(a.collection.rho, 0.0)?)?.to_json()
        }
        FitMethod::Cls => {
            let sub = sublattice_for_model(m, &data.lattice)?;
            fit_plane(m, &data, &sub, iso, a.collection.grid)?.to_json()
        }
        FitMethod::Mle => fit_mle(m, &data, iso)?.to_json(),
    };
    emit(a.out.as_deref(), &pretty(&out))
}

fn path_csv(rows: &[(String, SelectionPath)]) -> String {
    let mut s = String::from("label,n,model,dim\n");
    for (label, path) in rows {
        for b in &path.breakpoints {
            s.push_str(&format!("{label},{},{},{}\n", format_sig(b.n, 6), b.model, b.dim));
        }
    }
    s
}

fn cmd_path_dump(a: &PathDumpArgs) -> CliResult<()> {
    let data = load_dataset(&a.dataset)?;
    let report = slope_report(&data, &a.collection)?;
    emit(a.out.as_deref(), &path_csv(&[("data".into(), report.path)]))
}

fn write_benchmark(dir: &Path, result: &BenchmarkResult) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let mut csv = Vec::new();
    write_risk_csv(&result.rows, &mut csv)?;
    fs::write(dir.join("risk.csv"), &csv)?;
    fs::write(dir.join("provenance.json"), pretty(&result.provenance))?;
    let paths: Vec<_> = result.paths.iter().map(|(label, p)| json!({"label": label, "path": p})).collect();
    fs::write(dir.join("paths.json"), pretty(&json!(paths)))?;
    fs::write(dir.join("paths.csv"), path_csv(&result.paths))?;
    std::io::stdout().write_all(&csv)?;
    Ok(())
}

fn cmd_benchmark(a: &BenchmarkArgs) -> CliResult<()> {
    let cfg = benchmark_config(a)?;
    let result = run_experiment(&cfg)?;
    let dir = PathBuf::from(cfg.output_dir.clone().unwrap_or_else(|| ".".into()));
    write_benchmark(&dir, &result)?;
    let failures: usize = result.rows.iter().map(|r| r.failures).sum();
    eprintln!(
        "{}: {} rows written to {}{}",
        cfg.experiment.name(),
        result.rows.len(),
        dir.display(),
        if failures > 0 { format!(" ({failures} failed replications excluded)") } else { String::new() }
    );
    Ok(())
}
