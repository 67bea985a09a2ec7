//! Minimization of the energy on the sphere `‖u‖² = M` by a
//! Sobolev-preconditioned projected gradient flow.
//!
//! Each iteration forms `d = Pg − (⟨u,Pg⟩/⟨u,Pu⟩) Pu` with
//! `P = (−Δ + c_p)⁻¹`, so that `d` is tangent to the constraint in the
//! P-metric, then backtracks on `u ← normalize(|u − τd|)` until the Armijo
//! condition holds. Taking `|·|` never raises the discrete energy and
//! keeps iterates nonnegative.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coulomb::{hartree_potential, CoulombKernel};
use crate::energy::{breakdown_with, gradient_with, lagrange_multiplier, EnergyBreakdown, ModelParams};
use crate::error::{Error, Result};
use crate::grid::{distance, mass, Field, GridSpec, Vec3};
use crate::par;
use crate::snapshot;

pub const MAX_BACKTRACKS: usize = 30;
const ARMIJO: f64 = 1e-4;
const MAX_STEP: f64 = 50.0;
const STEP_GROWTH: f64 = 1.5;
/// Relative energy change treated as roundoff by the line search.
const ROUNDOFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: Vec3,
    pub width: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

fn default_width() -> f64 {
    2.0
}

fn default_bumps() -> usize {
    3
}

fn default_spread() -> f64 {
    0.25
}

/// Starting state; Gaussians are `weight · exp(−|x − c|²/(2 width²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitSpec {
    Gaussian {
        #[serde(default)]
        center: Vec3,
        #[serde(default = "default_width")]
        width: f64,
    },
    SumOfGaussians {
        bumps: Vec<Bump>,
    },
    FromFile {
        path: PathBuf,
    },
    /// `bumps` Gaussians with seeded random centres within `spread` of the
    /// half-box around the box centre and widths in `[width/2, width]`.
    RandomSmooth {
        #[serde(default = "default_bumps")]
        bumps: usize,
        #[serde(default = "default_width")]
        width: f64,
        #[serde(default = "default_spread")]
        spread: f64,
    },
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::Gaussian { center: [0.0; 3], width: default_width() }
    }
}

impl InitSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("init: {what}")));
        match self {
            InitSpec::Gaussian { width, .. } if !(*width > 0.0) => bad("width must be > 0"),
            InitSpec::SumOfGaussians { bumps } if bumps.is_empty() => bad("sum-of-gaussians needs at least one bump"),
            InitSpec::SumOfGaussians { bumps } if bumps.iter().any(|b| !(b.width > 0.0) || !(b.weight > 0.0)) => {
                bad("bump width and weight must be > 0")
            }
            InitSpec::RandomSmooth { bumps, width, spread } if *bumps == 0 || !(*width > 0.0) || !(*spread >= 0.0) => {
                bad("random-smooth needs bumps >= 1, width > 0, spread >= 0")
            }
            _ => Ok(()),
        }
    }

    /// Builds the (unnormalized) initial field.
    pub fn build(&self, grid: &GridSpec, seed: u64) -> Result<Field> {
        self.validate()?;
        let gauss = |bumps: Vec<Bump>| {
            Field::from_fn(*grid, move |x| {
                bumps
                    .iter()
                    .map(|b| b.weight * (-distance(x, b.center).powi(2) / (2.0 * b.width * b.width)).exp())
                    .sum()
            })
        };
        match self {
            InitSpec::Gaussian { center, width } => Ok(gauss(vec![Bump { center: *center, width: *width, weight: 1.0 }])),
            InitSpec::SumOfGaussians { bumps } => Ok(gauss(bumps.clone())),
            InitSpec::FromFile { path } => {
                let f = snapshot::load(path)?;
                f.grid().ensure_same(grid)?;
                Ok(f)
            }
            InitSpec::RandomSmooth { bumps, width, spread } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c = grid.center();
                let half = 0.5 * grid.spacing * (grid.dims.iter().min().unwrap() - 1) as f64;
                let r = spread * half;
                let list = (0..*bumps)
                    .map(|_| Bump {
                        center: [0, 1, 2].map(|a| c[a] + if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 }),
                        width: rng.random_range(0.5 * width..=*width),
                        weight: rng.random_range(0.5..=1.0),
                    })
                    .collect();
                Ok(gauss(list))
            }
        }
    }
}

fn default_step() -> f64 {
    1.0
}

fn default_shift() -> f64 {
    1.0
}

fn default_max_iters() -> usize {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimizeConfig {
    pub mass: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_shift")]
    pub precond_shift: f64,
    /// L² tolerance on `g − μu`; `1e−6 √M` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_residual: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub seed: u64,
}

impl MinimizeConfig {
    pub fn new(mass: f64) -> Self {
        MinimizeConfig {
            mass,
            step: default_step(),
            precond_shift: default_shift(),
            tol_residual: None,
            max_iters: default_max_iters(),
            init: InitSpec::default(),
            seed: 0,
        }
    }

    pub fn tolerance(&self) -> f64 {
        self.tol_residual.unwrap_or(1e-6 * self.mass.sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("mass", self.mass > 0.0 && self.mass.is_finite()),
            ("step", self.step > 0.0 && self.step.is_finite()),
            ("precond_shift", self.precond_shift > 0.0 && self.precond_shift.is_finite()),
            ("tol_residual", self.tolerance() > 0.0),
            ("max_iters", self.max_iters >= 1),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::Validation(format!("solver {name} out of range")));
            }
        }
        self.init.validate()
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub field: Field,
    pub breakdown: EnergyBreakdown,
    pub mu: f64,
    pub residual: f64,
    /// Virial residual, reported when V ≡ 0.
    pub virial: Option<f64>,
    pub iters: usize,
    pub converged: bool,
    /// Total energy after each accepted step, starting with the initial state.
    pub energy_trace: Vec<f64>,
}

/// Scalar summary of a run, suitable for JSON records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeRecord {
    pub mass: f64,
    pub breakdown: EnergyBreakdown,
    pub mu: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub virial: Option<f64>,
    pub iters: usize,
    pub converged: bool,
    pub min_value: f64,
    pub max_value: f64,
}

impl MinimizeResult {
    pub fn record(&self, tolerance: f64) -> MinimizeRecord {
        let v = self.field.values();
        MinimizeRecord {
            mass: mass(&self.field).unwrap_or(f64::NAN),
            breakdown: self.breakdown,
            mu: self.mu,
            residual: self.residual,
            tolerance,
            virial: self.virial,
            iters: self.iters,
            converged: self.converged,
            min_value: v.iter().cloned().fold(f64::INFINITY, f64::min),
            max_value: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// `(−Δ_h + c_p)⁻¹` applied through the padded transform of the kernel.
pub struct Preconditioner<'a> {
    kernel: &'a CoulombKernel,
    symbol: Vec<f64>,
}

impl<'a> Preconditioner<'a> {
    pub fn new(kernel: &'a CoulombKernel, shift: f64) -> Self {
        let t = kernel.transform();
        let [px, py, pz] = t.padded_dims();
        let h2 = kernel.grid().spacing.powi(2);
        let eig = |k: isize, n: usize| (2.0 - 2.0 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()) / h2;
        let symbol = t.tabulate(|kx, ky, kz| 1.0 / (shift + eig(kx, px) + eig(ky, py) + eig(kz, pz)));
        Preconditioner { kernel, symbol }
    }

    pub fn apply(&self, f: &Field) -> Field {
        Field::from_parts_unchecked(*f.grid(), self.kernel.transform().apply_symbol(f.values(), &self.symbol))
    }
}

struct State {
    u: Field,
    b: EnergyBreakdown,
    w: Field,
}

fn evaluate(u: Field, v: &Field, p: &ModelParams, k: &CoulombKernel) -> Result<State> {
    let w = hartree_potential(&u, k)?;
    let b = breakdown_with(&u, v, p, &w)?;
    if !b.total.is_finite() {
        return Err(Error::NumericalFailure("energy is not finite".into()));
    }
    Ok(State { u, b, w })
}

fn normalize_abs(values: Vec<f64>, grid: GridSpec, m: f64) -> Result<Field> {
    let mut values = values;
    values.iter_mut().for_each(|x| *x = x.abs());
    let current = grid.cell_volume() * par::sum_sq(&values);
    if !current.is_finite() {
        return Err(Error::NumericalFailure("iterate is not finite".into()));
    }
    if !(current > 0.0) {
        return Err(Error::DegenerateField("iterate collapsed to zero".into()));
    }
    let s = (m / current).sqrt();
    values.iter_mut().for_each(|x| *x *= s);
    Ok(Field::from_parts_unchecked(grid, values))
}

/// Minimizes from the initial state described by `cfg.init`.
pub fn minimize(v: &Field, p: &ModelParams, cfg: &MinimizeConfig, k: &CoulombKernel) -> Result<MinimizeResult> {
    cfg.validate()?;
    let u0 = cfg.init.build(v.grid(), cfg.seed)?;
    minimize_from(u0, v, p, cfg, k)
}

/// Minimizes from an explicit initial field (warm start); `cfg.init` is ignored.
pub fn minimize_from(
    u0: Field,
    v: &Field,
    p: &ModelParams,
    cfg: &MinimizeConfig,
    k: &CoulombKernel,
) -> Result<MinimizeResult> {
    cfg.validate()?;
    p.validate()?;
    let grid = *v.grid();
    u0.grid().ensure_same(&grid)?;
    grid.ensure_same(k.grid())?;
    u0.check_finite()?;
    v.check_finite()?;
    if u0.is_zero() {
        return Err(Error::DegenerateField("initial field is zero".into()));
    }
    let m = cfg.mass;
    let tol = cfg.tolerance();
    let h3 = grid.cell_volume();
    let pre = Preconditioner::new(k, cfg.precond_shift);
    let zero_potential = v.is_zero();

    let mut s = evaluate(normalize_abs(u0.into_values(), grid, m)?, v, p, k)?;
    let mut trace = vec![s.b.total];
    let mut tau = cfg.step;
    let mut iters = 0;
    loop {
        let g = gradient_with(&s.u, v, p, &s.w);
        let mu = lagrange_multiplier(&s.u, &g)?;
        let residual = crate::energy::stationarity_residual(&s.u, &g, mu)?;
        if !residual.is_finite() {
            return Err(Error::NumericalFailure(format!("residual is not finite at iteration {iters}")));
        }
        let converged = residual <= tol;
        if converged || iters >= cfg.max_iters {
            return Ok(MinimizeResult {
                virial: zero_potential.then(|| s.b.virial()),
                field: s.u,
                breakdown: s.b,
                mu,
                residual,
                iters,
                converged,
                energy_trace: trace,
            });
        }

        let pg = pre.apply(&g);
        let pu = pre.apply(&s.u);
        let beta = par::dot(s.u.values(), pg.values()) / par::dot(s.u.values(), pu.values());
        let d: Vec<f64> = pg.values().iter().zip(pu.values()).map(|(a, b)| a - beta * b).collect();
        let slope = -2.0 * h3 * par::dot(g.values(), &d);
        let e0 = s.b.total;

        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let trial: Vec<f64> = s.u.values().iter().zip(&d).map(|(a, b)| a - tau * b).collect();
            let t = evaluate(normalize_abs(trial, grid, m)?, v, p, k)?;
            let e1 = t.b.total;
            if e1 <= e0 + ARMIJO * tau * slope || e1 - e0 <= ROUNDOFF * e0.abs() {
                accepted = Some(t);
                break;
            }
            tau *= 0.5;
        }
        match accepted {
            Some(t) => {
                s = t;
                trace.push(s.b.total);
                tau = (tau * STEP_GROWTH).min(MAX_STEP);
                iters += 1;
            }
            None => return Err(Error::StepFailure { iteration: iters, backtracks: MAX_BACKTRACKS }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassScanRow {
    pub mass: f64,
    pub energy: f64,
    pub mu: f64,
    pub residual: f64,
    pub iters: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MassScanRow {
    pub fn ok(&self) -> bool {
        self.error.is_none() && self.converged
    }
}

#[derive(Debug, Clone)]
pub struct MassScan {
    pub rows: Vec<MassScanRow>,
    pub results: Vec<Option<MinimizeResult>>,
}

/// One minimization per mass, each warm-started from the previous
/// converged field; failed rows are recorded and the scan continues.
pub fn mass_scan(
    v: &Field,
    p: &ModelParams,
    masses: &[f64],
    template: &MinimizeConfig,
    k: &CoulombKernel,
) -> Result<MassScan> {
    if masses.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input("masses must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(masses.len());
    let mut results = Vec::with_capacity(masses.len());
    let mut warm: Option<Field> = None;
    for &mm in masses {
        let mut cfg = template.clone();
        cfg.mass = mm;
        let out = match &warm {
            Some(u) => minimize_from(u.clone(), v, p, &cfg, k),
            None => minimize(v, p, &cfg, k),
        };
        match out {
            Ok(r) => {
                rows.push(MassScanRow {
                    mass: mm,
                    energy: r.breakdown.total,
                    mu: r.mu,
                    residual: r.residual,
                    iters: r.iters,
                    converged: r.converged,
                    error: None,
                });
                warm = Some(r.field.clone());
                results.push(Some(r));
            }
            Err(e) => {
                rows.push(MassScanRow {
                    mass: mm,
                    energy: f64::NAN,
                    mu: f64::NAN,
                    residual: f64::NAN,
                    iters: 0,
                    converged: false,
                    error: Some(e.to_string()),
                });
                results.push(None);
            }
        }
    }
    Ok(MassScan { rows, results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{energy, gradient, mu_identity_check};
    use crate::grid::norm;
    use crate::potentials::{sample_potential, PotentialSpec};

    fn small_setup() -> (GridSpec, std::sync::Arc<CoulombKernel>) {
        let g = GridSpec::centered(24, 16.0).unwrap();
        (g, CoulombKernel::shared(&g).unwrap())
    }

    fn params() -> ModelParams {
        ModelParams::new(64.0, 32.0).unwrap()
    }

    #[test]
    fn preconditioner_is_symmetric_positive() {
        let (g, k) = small_setup();
        let pre = Preconditioner::new(&k, 1.0);
        let a = Field::from_fn(g, |x| (-(norm(x) - 1.0).powi(2)).exp() * (1.0 + x[0]));
        let b = Field::from_fn(g, |x| (-0.2 * norm(x).powi(2)).exp() * x[1].cos());
        let ab = a.inner(&pre.apply(&b)).unwrap();
        let ba = b.inner(&pre.apply(&a)).unwrap();
        assert!(((ab - ba) / ab).abs() < 1e-10);
        assert!(a.inner(&pre.apply(&a)).unwrap() > 0.0);
        // P inverts −Δ + c on fields whose image stays compact
        let lap = crate::energy::neg_laplacian(&b);
        let shifted = Field::new(g, lap.iter().zip(b.values()).map(|(l, x)| l + x).collect()).unwrap();
        let back = pre.apply(&shifted);
        let err = back.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 0.05 * b.max_abs(), "{err}");
    }

    #[test]
    fn converges_with_invariants() {
        let (g, k) = small_setup();
        let z = Field::zeros(g);
        let mut cfg = MinimizeConfig::new(0.5);
        cfg.tol_residual = Some(1e-6);
        let r = minimize(&z, &params(), &cfg, &k).unwrap();
        assert!(r.converged && r.residual <= 1e-6, "{} after {}", r.residual, r.iters);
        assert!(r.mu < 0.0 && r.breakdown.total < 0.0);
        assert!(((mass(&r.field).unwrap() - 0.5) / 0.5).abs() < 1e-10);
        for w in r.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
        }
        assert!(r.field.values().iter().all(|&x| x >= -1e-8 * r.field.max_abs()));
        let g2 = gradient(&r.field, &z, &params(), &k).unwrap();
        let res = crate::energy::stationarity_residual(&r.field, &g2, r.mu).unwrap();
        assert!((res - r.residual).abs() < 1e-12);
        assert!(mu_identity_check(&r.field, &params(), &k, r.mu).unwrap() <= 1e-2 * (r.mu * 0.5).abs());
        assert!(r.virial.is_some());
        // restarting from the converged state stops immediately
        let again = minimize_from(r.field.clone(), &z, &params(), &cfg, &k).unwrap();
        assert_eq!(again.iters, 0);
        assert!(again.converged);
    }

    #[test]
    fn nucleus_lowers_energy_and_centres_state() {
        let (g, k) = small_setup();
        let v = sample_potential(&PotentialSpec::single_site(1.0), &g).unwrap();
        let mut cfg = MinimizeConfig::new(1.0);
        cfg.init = InitSpec::Gaussian { center: [1.0, -0.5, 0.5], width: 2.0 };
        let with = minimize(&v, &params(), &cfg, &k).unwrap();
        // without a potential an off-centre start drifts along the nearly
        // flat translation mode, so start that run centred
        let without = minimize(&Field::zeros(g), &params(), &MinimizeConfig::new(1.0), &k).unwrap();
        assert!(with.converged && without.converged, "{} {} / {} {}", with.iters, with.residual, without.iters, without.residual);
        assert!(with.breakdown.total < without.breakdown.total);
        assert!(with.virial.is_none());
        let centroid = {
            let m = mass(&with.field).unwrap();
            let h3 = g.cell_volume();
            let mut c = [0.0; 3];
            for (i, x) in with.field.values().iter().enumerate() {
                let p = g.point(i);
                for a in 0..3 {
                    c[a] += h3 * x * x * p[a] / m;
                }
            }
            c
        };
        assert!(norm(centroid) < g.spacing, "{centroid:?}");
    }

    #[test]
    fn max_iters_is_reported_honestly() {
        let (g, k) = small_setup();
        let mut cfg = MinimizeConfig::new(0.5);
        cfg.max_iters = 2;
        let r = minimize(&Field::zeros(g), &params(), &cfg, &k).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iters, 2);
        let e = energy(&r.field, &Field::zeros(g), &params(), &k).unwrap();
        assert_eq!(e.total, r.breakdown.total);
    }

    #[test]
    fn config_validation_and_init_presets() {
        let (g, _) = small_setup();
        let mut cfg = MinimizeConfig::new(0.0);
        assert!(cfg.validate().is_err());
        cfg.mass = 1.0;
        cfg.max_iters = 0;
        assert!(cfg.validate().is_err());
        let bad: std::result::Result<MinimizeConfig, _> = serde_json::from_str(r#"{"mass":1,"stepp":1}"#);
        assert!(bad.is_err());
        let parsed: MinimizeConfig =
            serde_json::from_str(r#"{"mass":1,"init":{"kind":"random-smooth","bumps":2}}"#).unwrap();
        let a = parsed.init.build(&g, 4).unwrap();
        let b = parsed.init.build(&g, 4).unwrap();
        let c = parsed.init.build(&g, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let two = InitSpec::SumOfGaussians {
            bumps: vec![
                Bump { center: [-3.0, 0.0, 0.0], width: 1.0, weight: 1.0 },
                Bump { center: [3.0, 0.0, 0.0], width: 1.0, weight: 2.0 },
            ],
        };
        let f = two.build(&g, 0).unwrap();
        assert!((f.sample([3.0, 0.0, 0.0]) / f.sample([-3.0, 0.0, 0.0]) - 2.0).abs() < 0.05);
    }

    #[test]
    fn mass_scan_rows() {
        let (g, k) = small_setup();
        let z = Field::zeros(g);
        let cfg = MinimizeConfig::new(1.0);
        assert!(mass_scan(&z, &params(), &[0.5, 0.5], &cfg, &k).is_err());
        let scan = mass_scan(&z, &params(), &[0.25, 0.5, 1.0], &cfg, &k).unwrap();
        assert_eq!(scan.rows.len(), 3);
        assert!(scan.rows.iter().all(|r| r.ok()));
        for w in scan.rows.windows(2) {
            assert!(w[1].energy < w[0].energy);
        }
        let single = mass_scan(&z, &params(), &[1.0], &cfg, &k).unwrap();
        let direct = minimize(&z, &params(), &cfg, &k).unwrap();
        assert_eq!(single.rows[0].energy, direct.breakdown.total);
    }
}
