//! Perturbation schedules `V_Z = V + Z/|x|^ν` with `Z` decreasing, and the
//! power-law fit of the fleeing centres.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{detect_components, split_mass_check, DetectOptions, SplitReport, SplitStatus};
use crate::configopt::{minimize_config, ConfigOptOptions, ConfigOptResult, Configuration, Variant};
use crate::coulomb::CoulombKernel;
use crate::energy::ModelParams;
use crate::error::{Error, Result};
use crate::grid::{norm, Field, GridSpec, Vec3};
use crate::minimizer::{minimize, minimize_from, Bump, InitSpec, MinimizeConfig, MinimizeRecord};
use crate::potentials::{capped_power, sample_potential, PotentialSpec};

/// Default schedule window.
pub const DEFAULT_Z_VALUES: [f64; 4] = [0.8, 0.6, 0.45, 0.3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSchedule {
    pub z_values: Vec<f64>,
    pub nu: f64,
    /// Nuclear sites; its own perturbation strength must be zero.
    pub base: PotentialSpec,
}

impl PerturbationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.z_values.iter().any(|z| !(*z > 0.0) || !z.is_finite()) {
            return Err(Error::Validation("schedule Z values must be > 0".into()));
        }
        if self.z_values.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Validation("schedule Z values must be strictly decreasing".into()));
        }
        if self.base.perturbation_strength != 0.0 {
            return Err(Error::Validation("schedule base potential must not carry a perturbation".into()));
        }
        self.potential(self.z_values.first().copied().unwrap_or(1.0)).validate()
    }

    pub fn potential(&self, z: f64) -> PotentialSpec {
        self.base.clone().with_perturbation(z, self.nu)
    }

    pub fn total_charge(&self) -> f64 {
        self.base.total_charge()
    }

    /// `Z^{1/(1−ν)}`, the factor mapping physical centres to reduced ones.
    pub fn rescaling(&self, z: f64) -> f64 {
        z.powf(1.0 / (1.0 - self.nu))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleOptions {
    pub detect: DetectOptions,
    /// Starting state at the largest Z; a multi-bump guess when absent.
    pub init: Option<InitSpec>,
    /// Reduced centres `y^i` from the configuration optimizer.
    pub expected: Option<Vec<Vec3>>,
    /// Minimum distance from predicted centres to the box boundary.
    pub fit_margin: f64,
    /// Slack in the localized-mass check.
    pub split_tol: f64,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions { detect: DetectOptions::default(), init: None, expected: None, fit_margin: 4.0, split_tol: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRun {
    pub z: f64,
    pub record: Option<MinimizeRecord>,
    pub report: Option<SplitReport>,
    pub split_status: Option<SplitStatus>,
    /// `Z ∫ u²/|x|^ν`, the energy the perturbation contributes to this state.
    pub perturbation_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ScheduleRun {
    pub fn converged(&self) -> bool {
        self.error.is_none() && self.record.as_ref().is_some_and(|r| r.converged)
    }

    pub fn is_split(&self) -> bool {
        self.report.as_ref().is_some_and(|r| r.count() >= 2)
    }
}

#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub runs: Vec<ScheduleRun>,
    pub fields: Vec<Option<Field>>,
    /// E(Z) nondecreasing as Z decreases over converged runs.
    pub energy_monotone: bool,
    /// Perturbation gap decreasing along the schedule over converged runs.
    pub gap_monotone: bool,
}

impl ScheduleOutcome {
    pub fn samples(&self, nu: f64) -> Vec<ScalingSample> {
        self.runs
            .iter()
            .filter(|r| r.converged() && r.is_split())
            .map(|r| ScalingSample::from_report(r.z, nu, r.report.as_ref().expect("split runs carry a report")))
            .collect()
    }
}

/// Gaussians at the sites (or origin) plus one per expected centre, or a
/// symmetric pair along x when no centres are known.
pub fn multi_bump_init(sched: &PerturbationSchedule, grid: &GridSpec, expected: Option<&[Vec3]>) -> InitSpec {
    let z = sched.z_values.first().copied().unwrap_or(1.0);
    let mut bumps: Vec<Bump> = if sched.base.sites.is_empty() {
        vec![Bump { center: [0.0; 3], width: 2.0, weight: 1.0 }]
    } else {
        sched.base.sites.iter().map(|s| Bump { center: s.position, width: 2.0, weight: 1.0 }).collect()
    };
    match expected {
        Some(ys) => {
            let s = 1.0 / sched.rescaling(z);
            bumps.extend(ys.iter().map(|y| Bump { center: y.map(|c| c * s), width: 2.0, weight: 1.0 }));
        }
        None => {
            let half = 0.5 * grid.spacing * (grid.dims.iter().min().unwrap() - 1) as f64;
            let c = grid.center();
            for sign in [-1.0, 1.0] {
                bumps.push(Bump { center: [c[0] + sign * 0.5 * half, c[1], c[2]], width: 2.0, weight: 1.0 });
            }
        }
    }
    InitSpec::SumOfGaussians { bumps }
}

fn check_fits(sched: &PerturbationSchedule, grid: &GridSpec, ys: &[Vec3], margin: f64) -> Result<()> {
    let Some(&z) = sched.z_values.first() else { return Ok(()) };
    let s = 1.0 / sched.rescaling(z);
    for y in ys {
        let x = y.map(|c| c * s);
        let room = grid.distance_to_boundary(x);
        if room < margin {
            return Err(Error::Domain(format!(
                "predicted centre {x:?} at Z = {z} is {room:.3} from the boundary; need {margin}"
            )));
        }
    }
    Ok(())
}

fn perturbation_gap(u: &Field, z: f64, nu: f64, a: f64) -> f64 {
    let g = *u.grid();
    let h3 = g.cell_volume();
    u.values().iter().enumerate().map(|(i, x)| capped_power(norm(g.point(i)), nu, a) * x * x).sum::<f64>() * z * h3
}

/// One minimization per Z, largest first, each warm-started from the last
/// successful field. Solver failures are recorded and the schedule continues.
pub fn run_schedule(
    sched: &PerturbationSchedule,
    p: &ModelParams,
    grid: &GridSpec,
    template: &MinimizeConfig,
    opts: &ScheduleOptions,
    k: &CoulombKernel,
) -> Result<ScheduleOutcome> {
    sched.validate()?;
    p.validate()?;
    template.validate()?;
    if let Some(ys) = &opts.expected {
        check_fits(sched, grid, ys, opts.fit_margin)?;
    }
    let init = opts.init.clone().unwrap_or_else(|| multi_bump_init(sched, grid, opts.expected.as_deref()));
    let mut detect = opts.detect.clone();
    if detect.nuclei.is_empty() {
        detect.nuclei = sched.base.sites.iter().map(|s| s.position).collect();
    }
    let mut runs = Vec::with_capacity(sched.z_values.len());
    let mut fields = Vec::with_capacity(sched.z_values.len());
    let mut warm: Option<Field> = None;
    for &z in &sched.z_values {
        let spec = sched.potential(z);
        let attempt = (|| {
            let a = spec.effective_width(grid)?;
            let v = sample_potential(&spec, grid)?;
            let r = match &warm {
                Some(u) => minimize_from(u.clone(), &v, p, template, k)?,
                None => minimize(&v, p, &MinimizeConfig { init: init.clone(), ..template.clone() }, k)?,
            };
            let report = detect_components(&r.field, &detect)?;
            Ok::<_, Error>((r, report, a))
        })();
        match attempt {
            Ok((r, report, a)) => {
                let status = split_mass_check(&report, sched.total_charge(), opts.split_tol);
                runs.push(ScheduleRun {
                    z,
                    record: Some(r.record(template.tolerance())),
                    perturbation_gap: Some(perturbation_gap(&r.field, z, sched.nu, a)),
                    report: Some(report),
                    split_status: Some(status),
                    error: None,
                });
                warm = Some(r.field.clone());
                fields.push(Some(r.field));
            }
            Err(e) => {
                runs.push(ScheduleRun {
                    z,
                    record: None,
                    report: None,
                    split_status: None,
                    perturbation_gap: None,
                    error: Some(e.to_string()),
                });
                fields.push(None);
            }
        }
    }
    let ok: Vec<&ScheduleRun> = runs.iter().filter(|r| r.converged()).collect();
    let energy_monotone = ok.windows(2).all(|w| {
        let (e0, e1) = (w[0].record.as_ref().unwrap().breakdown.total, w[1].record.as_ref().unwrap().breakdown.total);
        e1 >= e0 - 1e-9 * e0.abs().max(1.0)
    });
    let gap_monotone = ok.windows(2).all(|w| w[1].perturbation_gap.unwrap() <= w[0].perturbation_gap.unwrap());
    Ok(ScheduleOutcome { runs, fields, energy_monotone, gap_monotone })
}

/// Independent schedules run concurrently.
pub fn run_schedules(
    scheds: &[PerturbationSchedule],
    p: &ModelParams,
    grid: &GridSpec,
    template: &MinimizeConfig,
    opts: &ScheduleOptions,
    k: &CoulombKernel,
) -> Vec<Result<ScheduleOutcome>> {
    scheds.par_iter().map(|s| run_schedule(s, p, grid, template, opts, k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSample {
    pub z: f64,
    pub components: usize,
    /// Mean distance of the fleeing centres to the nearest nucleus.
    pub r: f64,
    /// Fleeing-centre distances times `Z^{1/(1−ν)}`, ascending.
    pub rescaled: Vec<f64>,
}

impl ScalingSample {
    pub fn from_report(z: f64, nu: f64, report: &SplitReport) -> Self {
        let d = report.fleeing_distances();
        let s = z.powf(1.0 / (1.0 - nu));
        let mut rescaled: Vec<f64> = d.iter().map(|x| x * s).collect();
        rescaled.sort_by(f64::total_cmp);
        ScalingSample { z, components: report.count(), r: d.iter().sum::<f64>() / d.len().max(1) as f64, rescaled }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub samples: Vec<ScalingSample>,
    /// Slope of `log r` against `log Z`.
    pub exponent: Option<f64>,
    pub predicted_exponent: f64,
    /// RMS residual of the log-log fit.
    pub residual: Option<f64>,
    /// Largest relative gap between rescaled and reduced-problem distances.
    pub center_mismatch: Option<f64>,
    pub conclusive: bool,
}

impl ScalingFit {
    pub fn relative_error(&self) -> Option<f64> {
        self.exponent.map(|s| ((s - self.predicted_exponent) / self.predicted_exponent).abs())
    }
}

/// Least-squares power law over the split samples that share the most
/// common component count; needs at least three of them.
pub fn fit_scaling(samples: &[ScalingSample], nu: f64, reference: Option<&[Vec3]>) -> ScalingFit {
    let predicted_exponent = -1.0 / (1.0 - nu);
    let split: Vec<&ScalingSample> = samples.iter().filter(|s| s.components >= 2 && s.r > 0.0).collect();
    let mut mode = 0;
    let mut best = 0;
    for s in &split {
        let c = split.iter().filter(|t| t.components == s.components).count();
        if c > best {
            best = c;
            mode = s.components;
        }
    }
    let used: Vec<ScalingSample> = split.into_iter().filter(|s| s.components == mode).cloned().collect();
    let inconclusive = |samples| ScalingFit {
        samples,
        exponent: None,
        predicted_exponent,
        residual: None,
        center_mismatch: None,
        conclusive: false,
    };
    if used.len() < 3 {
        return inconclusive(used);
    }
    let xs: Vec<f64> = used.iter().map(|s| s.z.ln()).collect();
    let ys: Vec<f64> = used.iter().map(|s| s.r.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return inconclusive(used);
    }
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx;
    let icpt = my - slope * mx;
    let residual = (xs.iter().zip(&ys).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum::<f64>() / n).sqrt();
    let center_mismatch = reference.and_then(|ys| {
        let mut target: Vec<f64> = ys.iter().map(|y| norm(*y)).collect();
        target.sort_by(f64::total_cmp);
        used.iter()
            .filter(|s| s.rescaled.len() == target.len())
            .flat_map(|s| s.rescaled.iter().zip(&target).map(|(a, b)| (a - b).abs() / b))
            .reduce(f64::max)
    });
    ScalingFit {
        samples: used,
        exponent: Some(slope),
        predicted_exponent,
        residual: Some(residual),
        center_mismatch,
        conclusive: true,
    }
}

/// Reduced problem for a split state: F when the localized piece carries
/// more than 𝒵, F̄ otherwise. Start points are the rescaled centres.
pub fn reduced_configuration(sample: &ScalingSample, report: &SplitReport, total_charge: f64, nu: f64) -> Option<Configuration> {
    let masses: Vec<f64> = report.components.iter().map(|c| c.mass).collect();
    if masses.len() < 2 {
        return None;
    }
    let s = sample.z.powf(1.0 / (1.0 - nu));
    let origin = report.components[0].center;
    let rel = |c: Vec3| [0, 1, 2].map(|a| (c[a] - origin[a]) * s);
    if masses[0] > total_charge {
        let points = report.components[1..].iter().map(|c| rel(c.center)).collect();
        Some(Configuration { variant: Variant::F, masses, total_charge, nu, points })
    } else if masses.len() >= 3 {
        let anchor = report.components[1].center;
        let points = report.components[2..]
            .iter()
            .map(|c| [0, 1, 2].map(|a| (c.center[a] - anchor[a]) * s))
            .collect();
        Some(Configuration { variant: Variant::FBar, masses, total_charge, nu, points })
    } else {
        None
    }
}

/// Optimizes the reduced problem of a split state.
pub fn reduced_optimum(
    sample: &ScalingSample,
    report: &SplitReport,
    total_charge: f64,
    nu: f64,
    opts: &ConfigOptOptions,
) -> Result<Option<ConfigOptResult>> {
    match reduced_configuration(sample, report, total_charge, nu) {
        Some(c) if c.validate().is_ok() => minimize_config(&c, opts).map(Some),
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::Component;

    fn sample(z: f64, r: f64, n: usize, nu: f64) -> ScalingSample {
        ScalingSample { z, components: n, r, rescaled: vec![r * z.powf(1.0 / (1.0 - nu)); n - 1] }
    }

    #[test]
    fn exact_power_law() {
        let s: Vec<_> = DEFAULT_Z_VALUES.iter().map(|&z| sample(z, 4.0 * z.powi(-2), 2, 0.5)).collect();
        let fit = fit_scaling(&s, 0.5, Some(&[[4.0, 0.0, 0.0]]));
        assert!(fit.conclusive);
        assert!((fit.exponent.unwrap() + 2.0).abs() < 1e-6);
        assert!((fit.predicted_exponent + 2.0).abs() < 1e-15);
        assert!(fit.residual.unwrap() < 1e-12);
        assert!(fit.center_mismatch.unwrap() < 1e-12);
    }

    #[test]
    fn too_few_split_runs() {
        let fit = fit_scaling(&[sample(0.5, 16.0, 2, 0.5)], 0.5, None);
        assert!(!fit.conclusive);
        assert!(fit.exponent.is_none());
        let mixed = vec![sample(0.8, 6.0, 2, 0.5), sample(0.6, 11.0, 3, 0.5), sample(0.4, 25.0, 2, 0.5)];
        assert!(!fit_scaling(&mixed, 0.5, None).conclusive);
    }

    #[test]
    fn schedule_validation() {
        let ok = PerturbationSchedule { z_values: vec![0.8, 0.5], nu: 0.5, base: PotentialSpec::single_site(1.0) };
        ok.validate().unwrap();
        let bad = PerturbationSchedule { z_values: vec![0.5, 0.8], ..ok.clone() };
        assert!(bad.validate().is_err());
        let bad = PerturbationSchedule { nu: 1.5, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(Error::Validation(_))));
        let bad = PerturbationSchedule { base: ok.base.clone().with_perturbation(0.1, 0.5), ..ok };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_schedule() {
        let g = GridSpec::centered(16, 16.0).unwrap();
        let k = CoulombKernel::shared(&g).unwrap();
        let sched = PerturbationSchedule { z_values: vec![], nu: 0.5, base: PotentialSpec::single_site(1.0) };
        let out = run_schedule(&sched, &ModelParams::default(), &g, &MinimizeConfig::new(0.5), &Default::default(), &k)
            .unwrap();
        assert!(out.runs.is_empty());
        assert!(out.energy_monotone && out.gap_monotone);
    }

    #[test]
    fn box_too_small_for_prediction() {
        let g = GridSpec::centered(16, 16.0).unwrap();
        let k = CoulombKernel::shared(&g).unwrap();
        let sched = PerturbationSchedule { z_values: vec![0.3], nu: 0.5, base: PotentialSpec::single_site(1.0) };
        let opts = ScheduleOptions { expected: Some(vec![[4.0, 0.0, 0.0]]), ..Default::default() };
        let err = run_schedule(&sched, &ModelParams::default(), &g, &MinimizeConfig::new(0.5), &opts, &k);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn reduced_configuration_variants() {
        let comp = |mass, x: f64| Component { mass, center: [x, 0.0, 0.0], peak: 1.0, radius: 1.0, cell: 0 };
        let report = SplitReport {
            total_mass: 3.0,
            components: vec![comp(1.5, 0.0), comp(1.5, 8.0)],
            r_min: None,
            r0: None,
            r_bar: None,
            mass_deficit: 0.0,
            mass_floor: 0.0,
            seeds: vec![],
            nuclei: vec![[0.0; 3]],
            decay: vec![],
            mu: None,
        };
        let s = ScalingSample::from_report(0.5, 0.5, &report);
        assert!((s.rescaled[0] - 2.0).abs() < 1e-12);
        let c = reduced_configuration(&s, &report, 1.0, 0.5).unwrap();
        assert_eq!(c.variant, Variant::F);
        assert!((c.points[0][0] - 2.0).abs() < 1e-12);
        assert!(reduced_configuration(&s, &report, 2.0, 0.5).is_none());
        // closed form: (m⁰−𝒵)=0.5, m¹=1.5 gives |y| = (0.5/(0.5·1))² = 1
        let opt = reduced_optimum(&s, &report, 1.0, 0.5, &ConfigOptOptions::default()).unwrap().unwrap();
        assert!((norm(opt.points[0]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn compact_below_charge() {
        // total charge 1, M = 0.8: every run in the schedule stays in one piece
        let g = GridSpec::centered(32, 20.0).unwrap();
        let k = CoulombKernel::shared(&g).unwrap();
        let sched = PerturbationSchedule { z_values: vec![0.6, 0.3], nu: 0.5, base: PotentialSpec::single_site(1.0) };
        let mut cfg = MinimizeConfig::new(0.8);
        cfg.tol_residual = Some(1e-5);
        let out = run_schedule(&sched, &ModelParams::default(), &g, &cfg, &Default::default(), &k).unwrap();
        for r in &out.runs {
            assert!(r.converged(), "{:?}", r.error);
            assert_eq!(r.split_status, Some(SplitStatus::Compact));
        }
        assert!(out.energy_monotone);
        assert!(out.gap_monotone);
    }
}
