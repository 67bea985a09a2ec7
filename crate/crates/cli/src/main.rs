use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tfdw_core::runconfig::{emit_plots, run, ExperimentKind, RunConfig, RunResult};
use tfdw_core::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "tfdw", version, about = "TFDW energy minimization and splitting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: the config's `output`, else runs/<experiment>)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted key=value override, e.g. model.c1=64 (repeatable)
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Minimize the energy at one mass
    Minimize(Common),
    /// Minimize over an increasing list of masses
    MassScan(Common),
    /// Run a decreasing schedule of perturbation strengths
    PerturbationScan(Common),
    /// Minimize a reduced point-configuration energy
    ConfigMin(Common),
    /// Second differences of a ground-state energy table
    ConcavityScan(Common),
    /// Virial and multiplier identities of a stored field
    CheckIdentities {
        #[command(flatten)]
        common: Common,
        /// TFD1 snapshot
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Flatten finished experiment directories into plot-ready CSVs
    EmitPlots {
        dir: PathBuf,
        /// Destination (default: <dir>/plots)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure(kind: ExperimentKind, c: &Common, field: Option<&Path>) -> tfdw_core::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(kind),
    };
    cfg.experiment = kind;
    let mut cfg = cfg.with_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(f) = field {
        cfg.field = Some(f.to_path_buf());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(r: &RunResult) -> String {
    match r {
        RunResult::Minimize(m) => format!(
            "E = {:.10} mu = {:.8} residual = {:.3e} iters = {} converged = {} components = {}",
            m.record.breakdown.total,
            m.record.mu,
            m.record.residual,
            m.record.iters,
            m.record.converged,
            m.report.count()
        ),
        RunResult::MassScan(s) => format!(
            "{} masses, {} converged, strictly decreasing = {}, binding violations = {}",
            s.rows.len(),
            s.rows.iter().filter(|r| r.ok()).count(),
            s.strictly_decreasing,
            s.binding_violations.len()
        ),
        RunResult::PerturbationScan(p) => format!(
            "{} runs, {} converged, {} split; exponent {} (predicted {})",
            p.runs.len(),
            p.runs.iter().filter(|r| r.converged()).count(),
            p.runs.iter().filter(|r| r.is_split()).count(),
            p.fit.exponent.map_or("inconclusive".to_string(), |s| format!("{s:.4}")),
            p.fit.predicted_exponent
        ),
        RunResult::ConfigMin(c) => {
            format!("value = {:.12} status = {:?} points = {:?}", c.value, c.status, c.points)
        }
        RunResult::ConcavityScan(c) => {
            format!("{} interior rows, concave = {}, flagged = {:?}", c.report.rows.len(), c.report.concave_ok, c.report.flagged())
        }
        RunResult::CheckIdentities(i) => format!(
            "E = {:.10} mu = {:.8} stationarity = {:.3e} virial/|E| = {:.3e} muM identity = {:.3e}",
            i.breakdown.total, i.mu, i.stationarity_residual, i.virial_relative, i.mu_identity_relative
        ),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_NUMERICAL })
}

fn set_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("TFDW_THREADS") else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        Error::Validation(format!("TFDW_THREADS must be a positive integer (got {v:?})"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Configuration(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = set_threads() {
        return fail(&e);
    }
    let (kind, common, field) = match &cli.command {
        Command::Minimize(c) => (ExperimentKind::Minimize, c, None),
        Command::MassScan(c) => (ExperimentKind::MassScan, c, None),
        Command::PerturbationScan(c) => (ExperimentKind::PerturbationScan, c, None),
        Command::ConfigMin(c) => (ExperimentKind::ConfigMin, c, None),
        Command::ConcavityScan(c) => (ExperimentKind::ConcavityScan, c, None),
        Command::CheckIdentities { common, field } => (ExperimentKind::CheckIdentities, common, field.as_deref()),
        Command::EmitPlots { dir, out } => {
            let dest = out.clone().unwrap_or_else(|| dir.join("plots"));
            return match emit_plots(dir, &dest) {
                Ok(b) => {
                    for f in &b.files {
                        println!("{}", f.display());
                    }
                    for w in &b.warnings {
                        eprintln!("warning: {w}");
                    }
                    eprintln!("{} files, {} warnings", b.files.len(), b.warnings.len());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            };
        }
    };
    let cfg = match configure(kind, common, field) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(kind.name()));
    match run(&cfg, &out) {
        Ok(s) => {
            println!("{}", summarize(&s.result));
            for r in s.manifest.runs.iter().filter(|r| !r.ok) {
                eprintln!("warning: {} failed: {}", r.label, r.error.as_deref().unwrap_or("not converged"));
            }
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
