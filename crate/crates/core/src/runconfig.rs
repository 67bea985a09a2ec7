//! JSON run configurations, experiment dispatch, output directories and
//! the flat CSV bundle for plotting.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{binding_check, decay_fit, detect_components, BindingViolation, DetectOptions, SplitReport};
use crate::concavity::{concavity_scan, read_table_csv, ConcavityReport, DEFAULT_SCAN_MAX_MASS};
use crate::configopt::{minimize_config, ConfigOptOptions, ConfigOptResult, Configuration};
use crate::coulomb::CoulombKernel;
use crate::energy::{self, EnergyBreakdown, ModelParams};
use crate::error::{Error, Result};
use crate::experiments::{fit_scaling, run_schedule, PerturbationSchedule, ScalingFit, ScheduleOptions, ScheduleRun, DEFAULT_Z_VALUES};
use crate::grid::{mass, GridSpec};
use crate::minimizer::{mass_scan, minimize, InitSpec, MassScanRow, MinimizeConfig, MinimizeRecord};
use crate::potentials::{sample_potential, PotentialSpec};
use crate::snapshot;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULT_FILE: &str = "result.json";
pub const STENCIL: &str = "7-point second-order Laplacian, zero exterior";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Minimize,
    MassScan,
    PerturbationScan,
    ConfigMin,
    ConcavityScan,
    CheckIdentities,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Minimize => "minimize",
            ExperimentKind::MassScan => "mass-scan",
            ExperimentKind::PerturbationScan => "perturbation-scan",
            ExperimentKind::ConfigMin => "config-min",
            ExperimentKind::ConcavityScan => "concavity-scan",
            ExperimentKind::CheckIdentities => "check-identities",
        }
    }
}

/// Cubic box `[-box_size/2, box_size/2]³` with `points` nodes per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub points: usize,
    pub box_size: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { points: 48, box_size: 24.0 }
    }
}

impl GridConfig {
    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::centered(self.points, self.box_size)
    }
}

/// Solver settings shared by every run of an experiment; masses come from
/// the experiment section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "one")]
    pub step: f64,
    #[serde(default = "one")]
    pub precond_shift: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_residual: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub init: InitSpec,
}

fn one() -> f64 {
    1.0
}

fn default_max_iters() -> usize {
    5000
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { step: 1.0, precond_shift: 1.0, tol_residual: None, max_iters: 5000, init: InitSpec::default() }
    }
}

impl SolverConfig {
    pub fn for_mass(&self, mass: f64, seed: u64) -> MinimizeConfig {
        MinimizeConfig {
            mass,
            step: self.step,
            precond_shift: self.precond_shift,
            tol_residual: self.tol_residual,
            max_iters: self.max_iters,
            init: self.init.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mass: f64,
    #[serde(default = "default_z_values")]
    pub z_values: Vec<f64>,
    #[serde(default = "half")]
    pub nu: f64,
    /// Reduced centres used to seed the largest-Z run and check the box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Vec<[f64; 3]>>,
    #[serde(default = "default_split_tol")]
    pub split_tol: f64,
}

fn default_z_values() -> Vec<f64> {
    DEFAULT_Z_VALUES.to_vec()
}

fn half() -> f64 {
    0.5
}

fn default_split_tol() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigMinConfig {
    pub configuration: Configuration,
    #[serde(default)]
    pub options: ConfigOptOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcavityConfig {
    /// Masses at which `I₀` is computed; ignored when `table` is given.
    #[serde(default)]
    pub masses: Vec<f64>,
    /// Existing `mass,energy` CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    #[serde(default)]
    pub tol: f64,
    #[serde(default = "default_scan_max")]
    pub max_mass: f64,
}

fn default_scan_max() -> f64 {
    DEFAULT_SCAN_MAX_MASS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub potential: PotentialSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Mass for `minimize`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
    /// Increasing masses for `mass-scan`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_min: Option<ConfigMinConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concavity: Option<ConcavityConfig>,
    /// TFD1 snapshot examined by `check-identities`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl RunConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        RunConfig {
            experiment,
            grid: GridConfig::default(),
            model: ModelParams::default(),
            potential: PotentialSpec::default(),
            solver: SolverConfig::default(),
            mass: None,
            masses: Vec::new(),
            schedule: None,
            config_min: None,
            concavity: None,
            field: None,
            output: None,
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies dotted `key=value` overrides; values parse as JSON and fall
    /// back to strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| invalid(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key, value)?;
        }
        Self::from_value(v)
    }

    /// Checks every numeric parameter before anything runs.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid.spec()?;
        self.model.validate()?;
        self.potential.validate()?;
        self.potential.effective_width(&grid)?;
        let cfg = self.solver.for_mass(1.0, self.seed);
        cfg.validate()?;
        match self.experiment {
            ExperimentKind::Minimize => self.solver.for_mass(self.minimize_mass(), self.seed).validate()?,
            ExperimentKind::MassScan => {
                if self.masses.is_empty() {
                    return Err(invalid("mass-scan needs a non-empty `masses` list"));
                }
                if self.masses.iter().any(|m| !(*m > 0.0)) || self.masses.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(invalid("masses must be positive and strictly increasing"));
                }
            }
            ExperimentKind::PerturbationScan => {
                let s = self.schedule.as_ref().ok_or_else(|| invalid("perturbation-scan needs a `schedule` section"))?;
                if !(s.mass > 0.0) {
                    return Err(invalid("schedule mass must be > 0"));
                }
                self.perturbation_schedule()?.validate()?;
            }
            ExperimentKind::ConfigMin => {
                let c = self.config_min.as_ref().ok_or_else(|| invalid("config-min needs a `config_min` section"))?;
                c.configuration.validate()?;
            }
            ExperimentKind::ConcavityScan => {
                let c = self.concavity.as_ref().ok_or_else(|| invalid("concavity-scan needs a `concavity` section"))?;
                if c.table.is_none() && c.masses.len() < 5 {
                    return Err(invalid("concavity-scan needs at least 5 masses or a table"));
                }
            }
            ExperimentKind::CheckIdentities => {
                if self.field.is_none() {
                    return Err(invalid("check-identities needs a `field` snapshot path"));
                }
            }
        }
        Ok(())
    }

    fn minimize_mass(&self) -> f64 {
        self.mass.unwrap_or(1.0)
    }

    fn perturbation_schedule(&self) -> Result<PerturbationSchedule> {
        let s = self.schedule.as_ref().ok_or_else(|| invalid("missing `schedule` section"))?;
        let mut base = self.potential.clone();
        base.perturbation_strength = 0.0;
        Ok(PerturbationSchedule { z_values: s.z_values.clone(), nu: s.nu, base })
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("bad override key {key:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        if cur.get(*p).is_none_or(Value::is_null) {
            cur.as_object_mut()
                .ok_or_else(|| invalid(format!("override key {key:?} descends into a non-object")))?
                .insert(p.to_string(), Value::Object(Default::default()));
        }
        cur = cur.get_mut(*p).expect("just inserted");
    }
    cur.as_object_mut()
        .ok_or_else(|| invalid(format!("override key {key:?} descends into a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Numerical context recorded next to every result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub regularization_width: f64,
    pub kernel_padding: [usize; 3],
    pub stencil: String,
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub label: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: ExperimentKind,
    pub config: RunConfig,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_seconds: f64,
    pub provenance: Option<Provenance>,
    pub runs: Vec<RunStatus>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOutput {
    pub record: MinimizeRecord,
    pub report: SplitReport,
    pub virial_residual: f64,
    pub mu_identity_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassScanOutput {
    pub rows: Vec<MassScanRow>,
    /// `I₀` rows for the binding check; absent when V ≡ 0.
    pub free_rows: Option<Vec<MassScanRow>>,
    pub strictly_decreasing: bool,
    pub binding_violations: Vec<BindingViolation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationOutput {
    pub total_charge: f64,
    pub nu: f64,
    pub runs: Vec<ScheduleRun>,
    pub energy_monotone: bool,
    pub gap_monotone: bool,
    pub fit: ScalingFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcavityOutput {
    pub table: Vec<(f64, f64)>,
    pub report: ConcavityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub mass: f64,
    pub breakdown: EnergyBreakdown,
    pub mu: f64,
    pub stationarity_residual: f64,
    pub virial_residual: f64,
    pub virial_relative: f64,
    pub mu_identity_residual: f64,
    pub mu_identity_relative: f64,
    pub stationarity_identity_residual: f64,
}

/// Everything that goes into `result.json`; deterministic for a fixed
/// config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum RunResult {
    Minimize(MinimizeOutput),
    MassScan(MassScanOutput),
    PerturbationScan(PerturbationOutput),
    ConfigMin(ConfigOptResult),
    ConcavityScan(ConcavityOutput),
    CheckIdentities(IdentityReport),
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub result: RunResult,
    pub out_dir: PathBuf,
}

struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Outputs<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn field(&mut self, name: &str, u: &crate::grid::Field) -> Result<()> {
        self.write(name, &snapshot::encode(u))
    }
}

fn csv<I: IntoIterator<Item = String>>(header: &str, rows: I) -> Vec<u8> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s.into_bytes()
}

/// Validates, runs and writes the output directory.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let mut out = Outputs { dir: out_dir, files: Vec::new() };
    let mut runs = Vec::new();
    let grid = cfg.grid.spec()?;
    let needs_grid = !matches!(cfg.experiment, ExperimentKind::ConfigMin);
    let provenance = if needs_grid {
        let k = CoulombKernel::shared(&grid)?;
        Some(Provenance {
            regularization_width: cfg.potential.effective_width(&grid)?,
            kernel_padding: k.padded_dims(),
            stencil: STENCIL.to_string(),
            spacing: grid.spacing,
        })
    } else {
        None
    };

    let result = match cfg.experiment {
        ExperimentKind::Minimize => RunResult::Minimize(run_minimize(cfg, &grid, &mut out)?),
        ExperimentKind::MassScan => RunResult::MassScan(run_mass_scan(cfg, &grid, &mut out, &mut runs)?),
        ExperimentKind::PerturbationScan => {
            RunResult::PerturbationScan(run_perturbation(cfg, &grid, &mut out, &mut runs)?)
        }
        ExperimentKind::ConfigMin => {
            let c = cfg.config_min.as_ref().expect("validated");
            let opts = ConfigOptOptions { seed: cfg.seed, ..c.options.clone() };
            RunResult::ConfigMin(minimize_config(&c.configuration, &opts)?)
        }
        ExperimentKind::ConcavityScan => RunResult::ConcavityScan(run_concavity(cfg, &grid, &mut out, &mut runs)?),
        ExperimentKind::CheckIdentities => RunResult::CheckIdentities(run_identities(cfg)?),
    };
    out.json(RESULT_FILE, &result)?;
    let manifest = Manifest {
        experiment: cfg.experiment,
        config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        provenance,
        runs,
        files: {
            let mut f = out.files.clone();
            f.push(MANIFEST_FILE.to_string());
            f
        },
    };
    out.json(MANIFEST_FILE, &manifest)?;
    Ok(RunSummary { manifest, result, out_dir: out_dir.to_path_buf() })
}

fn run_minimize(cfg: &RunConfig, grid: &GridSpec, out: &mut Outputs) -> Result<MinimizeOutput> {
    let k = CoulombKernel::shared(grid)?;
    let v = sample_potential(&cfg.potential, grid)?;
    let mc = cfg.solver.for_mass(cfg.minimize_mass(), cfg.seed);
    let r = minimize(&v, &cfg.model, &mc, &k)?;
    let opts = DetectOptions { nuclei: cfg.potential.sites.iter().map(|s| s.position).collect(), ..Default::default() };
    let mut report = detect_components(&r.field, &opts)?;
    report.mu = Some(r.mu);
    if let Ok(fit) = decay_fit(&r.field, &report, None) {
        report.decay.push(fit.summary.clone());
        let mut buf = Vec::new();
        fit.write_csv(&mut buf)?;
        out.write("decay_shells.csv", &buf)?;
    }
    out.field("state.tfd1", &r.field)?;
    out.write(
        "energy_trace.csv",
        &csv("iteration,energy", r.energy_trace.iter().enumerate().map(|(i, e)| format!("{i},{e}"))),
    )?;
    Ok(MinimizeOutput {
        record: r.record(mc.tolerance()),
        virial_residual: r.breakdown.virial(),
        mu_identity_residual: energy::mu_identity_residual(&r.breakdown, mc.mass, r.mu),
        report,
    })
}

fn scan_csv(rows: &[MassScanRow]) -> Vec<u8> {
    csv(
        "mass,energy,mu,residual,iters,converged",
        rows.iter().map(|r| format!("{},{},{},{},{},{}", r.mass, r.energy, r.mu, r.residual, r.iters, r.converged)),
    )
}

fn run_mass_scan(cfg: &RunConfig, grid: &GridSpec, out: &mut Outputs, runs: &mut Vec<RunStatus>) -> Result<MassScanOutput> {
    let k = CoulombKernel::shared(grid)?;
    let template = cfg.solver.for_mass(cfg.masses[0], cfg.seed);
    let v = sample_potential(&cfg.potential, grid)?;
    let scan = mass_scan(&v, &cfg.model, &cfg.masses, &template, &k)?;
    for (row, res) in scan.rows.iter().zip(&scan.results) {
        runs.push(RunStatus { label: format!("M={}", row.mass), ok: row.ok(), error: row.error.clone() });
        if let Some(r) = res {
            out.field(&format!("state_m{}.tfd1", runs.len() - 1), &r.field)?;
        }
    }
    out.write("mass_scan.csv", &scan_csv(&scan.rows))?;
    let free_rows = if cfg.potential.is_zero() {
        None
    } else {
        let zero = crate::grid::Field::zeros(*grid);
        let free = mass_scan(&zero, &cfg.model, &cfg.masses, &template, &k)?;
        for row in &free.rows {
            runs.push(RunStatus { label: format!("I0 M={}", row.mass), ok: row.ok(), error: row.error.clone() });
        }
        out.write("mass_scan_free.csv", &scan_csv(&free.rows))?;
        Some(free.rows)
    };
    let table = |rows: &[MassScanRow]| rows.iter().filter(|r| r.ok()).map(|r| (r.mass, r.energy)).collect::<Vec<_>>();
    let iv = table(&scan.rows);
    let i0 = free_rows.as_deref().map(table).unwrap_or_else(|| iv.clone());
    // three times the residual tolerance of the largest-mass solve
    let tol = 3.0 * cfg.solver.for_mass(cfg.masses[cfg.masses.len() - 1], cfg.seed).tolerance();
    Ok(MassScanOutput {
        strictly_decreasing: iv.len() == cfg.masses.len() && iv.windows(2).all(|w| w[1].1 < w[0].1),
        binding_violations: binding_check(&iv, &i0, tol),
        rows: scan.rows,
        free_rows,
    })
}

fn run_perturbation(
    cfg: &RunConfig,
    grid: &GridSpec,
    out: &mut Outputs,
    runs: &mut Vec<RunStatus>,
) -> Result<PerturbationOutput> {
    let s = cfg.schedule.as_ref().expect("validated");
    let sched = cfg.perturbation_schedule()?;
    let k = CoulombKernel::shared(grid)?;
    let opts = ScheduleOptions { expected: s.expected.clone(), split_tol: s.split_tol, ..Default::default() };
    let template = cfg.solver.for_mass(s.mass, cfg.seed);
    let opts = ScheduleOptions {
        init: (cfg.solver.init != InitSpec::default()).then(|| cfg.solver.init.clone()),
        ..opts
    };
    let outcome = run_schedule(&sched, &cfg.model, grid, &template, &opts, &k)?;
    for (i, (r, f)) in outcome.runs.iter().zip(&outcome.fields).enumerate() {
        runs.push(RunStatus { label: format!("Z={}", r.z), ok: r.converged(), error: r.error.clone() });
        if let Some(f) = f {
            out.field(&format!("state_z{i}.tfd1"), f)?;
        }
    }
    let fit = fit_scaling(&outcome.samples(s.nu), s.nu, s.expected.as_deref());
    out.write(
        "centers.csv",
        &csv(
            "z,converged,components,localized_mass,r",
            outcome.runs.iter().map(|r| {
                let rep = r.report.as_ref();
                let d = rep.map(|x| x.fleeing_distances()).unwrap_or_default();
                let mean = if d.is_empty() { f64::NAN } else { d.iter().sum::<f64>() / d.len() as f64 };
                format!(
                    "{},{},{},{},{}",
                    r.z,
                    r.converged(),
                    rep.map_or(0, |x| x.count()),
                    rep.and_then(|x| x.components.first()).map_or(f64::NAN, |c| c.mass),
                    mean
                )
            }),
        ),
    )?;
    Ok(PerturbationOutput {
        total_charge: sched.total_charge(),
        nu: s.nu,
        runs: outcome.runs,
        energy_monotone: outcome.energy_monotone,
        gap_monotone: outcome.gap_monotone,
        fit,
    })
}

fn run_concavity(cfg: &RunConfig, grid: &GridSpec, out: &mut Outputs, runs: &mut Vec<RunStatus>) -> Result<ConcavityOutput> {
    let c = cfg.concavity.as_ref().expect("validated");
    let table = match &c.table {
        Some(path) => {
            let f = fs::File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
            read_table_csv(BufReader::new(f))?
        }
        None => {
            let k = CoulombKernel::shared(grid)?;
            let v = sample_potential(&cfg.potential, grid)?;
            let template = cfg.solver.for_mass(c.masses[0], cfg.seed);
            let scan = mass_scan(&v, &cfg.model, &c.masses, &template, &k)?;
            for row in &scan.rows {
                runs.push(RunStatus { label: format!("M={}", row.mass), ok: row.ok(), error: row.error.clone() });
            }
            if let Some(bad) = scan.rows.iter().find(|r| !r.ok()) {
                return Err(Error::NumericalFailure(format!("I0 run at M = {} did not converge", bad.mass)));
            }
            out.write("mass_scan.csv", &scan_csv(&scan.rows))?;
            scan.rows.iter().map(|r| (r.mass, r.energy)).collect()
        }
    };
    let report = concavity_scan(&table, c.tol, c.max_mass)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    out.write("concavity.csv", &buf)?;
    Ok(ConcavityOutput { table, report })
}

fn run_identities(cfg: &RunConfig) -> Result<IdentityReport> {
    let path = cfg.field.as_ref().expect("validated");
    let u = snapshot::load(path)?;
    let grid = *u.grid();
    let k = CoulombKernel::shared(&grid)?;
    let v = sample_potential(&cfg.potential, &grid)?;
    let (b, g) = energy::energy_and_gradient(&u, &v, &cfg.model, &k)?;
    let m = mass(&u)?;
    let mu = energy::lagrange_multiplier(&u, &g)?;
    let res = energy::stationarity_residual(&u, &g, mu)?;
    let mu_res = energy::mu_identity_residual(&b, m, mu);
    Ok(IdentityReport {
        mass: m,
        breakdown: b,
        mu,
        stationarity_residual: res,
        virial_residual: b.virial(),
        virial_relative: b.virial() / b.total.abs(),
        mu_identity_residual: mu_res,
        mu_identity_relative: mu_res / (mu * m).abs(),
        stationarity_identity_residual: mu * m - b.stationarity_rhs(),
    })
}

/// Flat CSVs written by [`emit_plots`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlotBundle {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Reads every experiment directory under `root` (including `root`
/// itself) and writes plot-ready CSVs into `dest`. Directories without a
/// readable result are listed as warnings and skipped.
pub fn emit_plots(root: &Path, dest: &Path) -> Result<PlotBundle> {
    let mut bundle = PlotBundle::default();
    let mut dirs = vec![root.to_path_buf()];
    if let Ok(entries) = fs::read_dir(root) {
        let mut subs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
        subs.sort();
        dirs.extend(subs);
    } else {
        bundle.warnings.push(format!("{}: not a readable directory", root.display()));
        return Ok(bundle);
    }
    let mut found = false;
    for dir in dirs {
        let path = dir.join(RESULT_FILE);
        if !path.exists() {
            continue;
        }
        found = true;
        let parsed = fs::read_to_string(&path)
            .map_err(Error::from)
            .and_then(|t| serde_json::from_str::<RunResult>(&t).map_err(Error::from));
        match parsed {
            Ok(r) => {
                fs::create_dir_all(dest)?;
                let stem = dir.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string();
                emit_one(&r, &dir, dest, &stem, &mut bundle)?
            }
            Err(e) => bundle.warnings.push(format!("{}: {e}", path.display())),
        }
    }
    if !found {
        bundle.warnings.push(format!("{}: no results found", root.display()));
    }
    Ok(bundle)
}

fn put(bundle: &mut PlotBundle, dest: &Path, stem: &str, name: &str, bytes: Vec<u8>) -> Result<()> {
    let mut p = dest.join(name);
    if bundle.files.contains(&p) {
        p = dest.join(format!("{stem}_{name}"));
    }
    fs::write(&p, bytes)?;
    bundle.files.push(p);
    Ok(())
}

fn emit_one(r: &RunResult, dir: &Path, dest: &Path, stem: &str, bundle: &mut PlotBundle) -> Result<()> {
    match r {
        RunResult::MassScan(s) => {
            let ok: Vec<&MassScanRow> = s.rows.iter().filter(|r| r.ok()).collect();
            let e = csv("mass,energy", ok.iter().map(|r| format!("{},{}", r.mass, r.energy)));
            put(bundle, dest, stem, "energy_vs_mass.csv", e)?;
            let mu = csv("mass,mu", ok.iter().map(|r| format!("{},{}", r.mass, r.mu)));
            put(bundle, dest, stem, "mu_vs_mass.csv", mu)?;
        }
        RunResult::ConcavityScan(c) => {
            let e = csv("mass,energy", c.table.iter().map(|(m, e)| format!("{m},{e}")));
            put(bundle, dest, stem, "energy_vs_mass.csv", e)?;
            let d2 = csv(
                "mass,second_difference,flagged",
                c.report.rows.iter().map(|r| format!("{},{},{}", r.mass, r.second_difference, r.flagged)),
            );
            put(bundle, dest, stem, "second_differences.csv", d2)?;
        }
        RunResult::PerturbationScan(p) => {
            let fitted = p.fit.exponent.map_or(String::new(), |s| s.to_string());
            let rows = p.runs.iter().filter(|r| r.converged() && r.is_split()).map(|r| {
                let rep = r.report.as_ref().expect("split runs carry a report");
                let d = rep.fleeing_distances();
                let mean = d.iter().sum::<f64>() / d.len() as f64;
                let scale = r.z.powf(1.0 / (1.0 - p.nu));
                format!("{},{},{},{},{},{}", r.z, rep.count(), mean, mean * scale, p.fit.predicted_exponent, fitted)
            });
            let c = csv("z,components,r,rescaled_r,predicted_exponent,fitted_exponent", rows);
            put(bundle, dest, stem, "centers_vs_Z.csv", c)?;
        }
        RunResult::Minimize(m) => {
            let shells = dir.join("decay_shells.csv");
            match fs::read(&shells) {
                Ok(bytes) => put(bundle, dest, stem, "decay_shells.csv", bytes)?,
                Err(_) => bundle.warnings.push(format!("{}: missing", shells.display())),
            }
            let mu = csv("mass,mu", std::iter::once(format!("{},{}", m.record.mass, m.record.mu)));
            put(bundle, dest, stem, "mu_vs_mass.csv", mu)?;
        }
        RunResult::ConfigMin(_) | RunResult::CheckIdentities(_) => {}
    }
    Ok(())
}
