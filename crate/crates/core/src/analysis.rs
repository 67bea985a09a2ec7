//! Diagnostics of computed states: connected components with exact mass
//! accounting, exponential decay fits, and the splitting and binding
//! inequality checks.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{distance, mass, Field, GridSpec, Vec3};

pub const DEFAULT_THRESHOLD_FRAC: f64 = 1e-3;
pub const DEFAULT_MASS_FLOOR_FRAC: f64 = 1e-4;
/// Only nodes with `u > DECAY_AMPLITUDE_FLOOR · max u` enter decay fits.
pub const DECAY_AMPLITUDE_FLOOR: f64 = 1e-12;
pub const MIN_DECADES: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mass: f64,
    /// Density centroid over the component's Voronoi cell.
    pub center: Vec3,
    pub peak: f64,
    /// Radius about `center` of the smallest ball holding 99% of the cell mass.
    pub radius: f64,
    /// Index of the Voronoi cell in `SplitReport::seeds`.
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySummary {
    pub r_in: f64,
    pub r_out: f64,
    pub lambda: Option<f64>,
    pub decades: f64,
    pub conclusive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub total_mass: f64,
    /// Sorted by distance to the nearest nucleus; component 0 is the localized piece.
    pub components: Vec<Component>,
    pub r_min: Option<f64>,
    pub r0: Option<f64>,
    pub r_bar: Option<f64>,
    pub mass_deficit: f64,
    pub mass_floor: f64,
    pub seeds: Vec<Vec3>,
    pub nuclei: Vec<Vec3>,
    #[serde(default)]
    pub decay: Vec<DecaySummary>,
    #[serde(default)]
    pub mu: Option<f64>,
}

impl SplitReport {
    pub fn count(&self) -> usize {
        self.components.len()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.components.iter().map(|c| c.center).collect()
    }

    /// Distance of each non-localized centre to the nearest nucleus (or
    /// origin when there are none).
    pub fn fleeing_distances(&self) -> Vec<f64> {
        self.components.iter().skip(1).map(|c| nearest(c.center, &self.anchors())).collect()
    }

    fn anchors(&self) -> Vec<Vec3> {
        if self.nuclei.is_empty() {
            vec![[0.0; 3]]
        } else {
            self.nuclei.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOptions {
    pub threshold_frac: f64,
    pub mass_floor_frac: f64,
    /// Mass against which the floor is measured; the field's own mass when absent.
    pub reference_mass: Option<f64>,
    pub nuclei: Vec<Vec3>,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            threshold_frac: DEFAULT_THRESHOLD_FRAC,
            mass_floor_frac: DEFAULT_MASS_FLOOR_FRAC,
            reference_mass: None,
            nuclei: Vec::new(),
        }
    }
}

fn nearest(p: Vec3, anchors: &[Vec3]) -> f64 {
    anchors.iter().map(|&a| distance(p, a)).fold(f64::INFINITY, f64::min)
}

fn neighbours(g: &GridSpec, i: usize) -> impl Iterator<Item = usize> + '_ {
    let [ix, iy, iz] = g.unravel(i);
    let [nx, ny, nz] = g.dims;
    let cand = [
        (ix > 0).then(|| g.index(ix - 1, iy, iz)),
        (ix + 1 < nx).then(|| g.index(ix + 1, iy, iz)),
        (iy > 0).then(|| g.index(ix, iy - 1, iz)),
        (iy + 1 < ny).then(|| g.index(ix, iy + 1, iz)),
        (iz > 0).then(|| g.index(ix, iy, iz - 1)),
        (iz + 1 < nz).then(|| g.index(ix, iy, iz + 1)),
    ];
    cand.into_iter().flatten()
}

/// 6-connected regions of a mask, as lists of node indices.
fn flood_fill(g: &GridSpec, mask: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut regions = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut region = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            region.push(i);
            for j in neighbours(g, i) {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        regions.push(region);
    }
    regions
}

/// Index of the nearest seed for every node.
pub fn voronoi_labels(g: &GridSpec, seeds: &[Vec3]) -> Vec<usize> {
    (0..g.len())
        .into_par_iter()
        .map(|i| {
            let p = g.point(i);
            let mut best = (f64::INFINITY, 0);
            for (s, &c) in seeds.iter().enumerate() {
                let d = distance(p, c);
                if d < best.0 {
                    best = (d, s);
                }
            }
            best.1
        })
        .collect()
}

/// Finds the components of `u`.
///
/// Regions of `u² ≥ threshold_frac · max u²` seed a Voronoi partition of
/// the whole grid; each cell's mass is assigned to its seed, and cells
/// lighter than the mass floor count as exterior mass.
pub fn detect_components(u: &Field, opts: &DetectOptions) -> Result<SplitReport> {
    if !(opts.threshold_frac > 0.0 && opts.threshold_frac < 1.0) {
        return Err(Error::Input(format!("threshold_frac must lie in (0,1) (got {})", opts.threshold_frac)));
    }
    let total = mass(u)?;
    if !(total > 0.0) {
        return Err(Error::DegenerateField("no components in a zero field".into()));
    }
    let g = *u.grid();
    let h3 = g.cell_volume();
    let v = u.values();
    let max2 = u.max_abs().powi(2);
    let floor = opts.mass_floor_frac * opts.reference_mass.unwrap_or(total);
    let mask: Vec<bool> = v.iter().map(|x| x * x >= opts.threshold_frac * max2).collect();

    // region centroids seed the partition; regions lighter than the floor
    // would only split real basins
    let mut seeds: Vec<Vec3> = Vec::new();
    for region in flood_fill(&g, &mask) {
        let m: f64 = region.iter().map(|&i| v[i] * v[i]).sum::<f64>() * h3;
        if m < floor && !seeds.is_empty() {
            continue;
        }
        let mut c = [0.0; 3];
        let w: f64 = region.iter().map(|&i| v[i] * v[i]).sum();
        for &i in &region {
            let p = g.point(i);
            for a in 0..3 {
                c[a] += v[i] * v[i] * p[a] / w;
            }
        }
        seeds.push(c);
    }
    let labels = voronoi_labels(&g, &seeds);

    let mut comps = Vec::new();
    let mut assigned = 0.0;
    for (s, _) in seeds.iter().enumerate() {
        let nodes: Vec<usize> = (0..g.len()).filter(|&i| labels[i] == s).collect();
        let w: f64 = nodes.iter().map(|&i| v[i] * v[i]).sum();
        let m = h3 * w;
        if !(m > floor) || w == 0.0 {
            continue;
        }
        let mut center = [0.0; 3];
        for &i in &nodes {
            let p = g.point(i);
            for a in 0..3 {
                center[a] += v[i] * v[i] * p[a] / w;
            }
        }
        let mut shells: Vec<(f64, f64)> = nodes.iter().map(|&i| (distance(g.point(i), center), v[i] * v[i])).collect();
        shells.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        let mut radius = 0.0;
        for (r, q) in shells {
            acc += q;
            radius = r;
            if acc >= 0.99 * w {
                break;
            }
        }
        let peak = nodes.iter().map(|&i| v[i].abs()).fold(0.0, f64::max);
        assigned += m;
        comps.push(Component { mass: m, center, peak, radius, cell: s });
    }

    let anchors = if opts.nuclei.is_empty() { vec![[0.0; 3]] } else { opts.nuclei.clone() };
    comps.sort_by(|a, b| nearest(a.center, &anchors).total_cmp(&nearest(b.center, &anchors)));

    let pair_min = |cs: &[Component]| {
        let mut best: Option<f64> = None;
        for i in 0..cs.len() {
            for j in i + 1..cs.len() {
                let d = distance(cs[i].center, cs[j].center);
                best = Some(best.map_or(d, |b: f64| b.min(d)));
            }
        }
        best
    };
    let r_min = pair_min(&comps);
    let r_bar = if comps.len() > 2 { pair_min(&comps[1..]) } else { None };
    let r0 = comps.iter().skip(1).map(|c| nearest(c.center, &anchors)).reduce(f64::min);

    Ok(SplitReport {
        total_mass: total,
        components: comps,
        r_min,
        r0,
        r_bar,
        mass_deficit: total - assigned,
        mass_floor: floor,
        seeds,
        nuclei: opts.nuclei.clone(),
        decay: Vec::new(),
        mu: None,
    })
}

/// Radial shell of a decay fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayShell {
    pub sigma: f64,
    pub log_u: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub summary: DecaySummary,
    pub shells: Vec<DecayShell>,
}

impl DecayFit {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sigma,log_u,nodes")?;
        for s in &self.shells {
            writeln!(w, "{},{},{}", s.sigma, s.log_u, s.nodes)?;
        }
        Ok(())
    }
}

/// Least-squares slope of `log u` against the distance σ(x) to the
/// nearest component centre.
///
/// Nodes enter when σ lies between 1.5 times the largest component radius
/// and the distance from the centres to the box minus `wall_margin`
/// (`2h` when absent), and `u` exceeds the amplitude floor. Nodes are
/// binned in shells of width h and each shell contributes its mean log u.
pub fn decay_fit(u: &Field, report: &SplitReport, wall_margin: Option<f64>) -> Result<DecayFit> {
    if report.components.is_empty() {
        return Err(Error::Input("decay fit needs at least one component".into()));
    }
    let g = *u.grid();
    let h = g.spacing;
    let margin = wall_margin.unwrap_or(2.0 * h);
    let centers = report.centers();
    let r_in = 1.5 * report.components.iter().map(|c| c.radius).fold(0.0, f64::max);
    let r_out = centers.iter().map(|&c| g.distance_to_boundary(c)).fold(f64::INFINITY, f64::min) - margin;
    let umax = u.max_abs();
    let nshell = if r_out > r_in { ((r_out - r_in) / h).ceil() as usize } else { 0 };
    let mut sum = vec![(0.0, 0.0, 0usize); nshell];
    for (i, &x) in u.values().iter().enumerate() {
        if !(x > DECAY_AMPLITUDE_FLOOR * umax) {
            continue;
        }
        let sigma = nearest(g.point(i), &centers);
        if sigma < r_in || sigma >= r_out {
            continue;
        }
        let b = (((sigma - r_in) / h) as usize).min(nshell - 1);
        sum[b].0 += sigma;
        sum[b].1 += x.ln();
        sum[b].2 += 1;
    }
    let shells: Vec<DecayShell> = sum
        .into_iter()
        .filter(|s| s.2 > 0)
        .map(|(s, l, n)| DecayShell { sigma: s / n as f64, log_u: l / n as f64, nodes: n })
        .collect();
    let (lambda, decades) = if shells.len() >= 2 {
        let n = shells.len() as f64;
        let mx = shells.iter().map(|s| s.sigma).sum::<f64>() / n;
        let my = shells.iter().map(|s| s.log_u).sum::<f64>() / n;
        let sxy: f64 = shells.iter().map(|s| (s.sigma - mx) * (s.log_u - my)).sum();
        let sxx: f64 = shells.iter().map(|s| (s.sigma - mx).powi(2)).sum();
        let hi = shells.iter().map(|s| s.log_u).fold(f64::NEG_INFINITY, f64::max);
        let lo = shells.iter().map(|s| s.log_u).fold(f64::INFINITY, f64::min);
        ((sxx > 0.0).then(|| -sxy / sxx), (hi - lo) / std::f64::consts::LN_10)
    } else {
        (None, 0.0)
    };
    let conclusive = lambda.is_some_and(|l| l > 0.0) && decades >= MIN_DECADES;
    Ok(DecayFit { summary: DecaySummary { r_in, r_out, lambda, decades, conclusive }, shells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStatus {
    Compact,
    SplitOk,
    SplitViolation,
}

/// Classifies a state against the requirement that a split state keeps
/// at least the nuclear charge 𝒵 in its localized piece.
pub fn split_mass_check(report: &SplitReport, total_charge: f64, tol: f64) -> SplitStatus {
    let m = report.total_mass;
    match report.components.as_slice() {
        [only] if only.mass >= (1.0 - tol) * m => SplitStatus::Compact,
        [first, _, ..] if first.mass >= total_charge - tol => SplitStatus::SplitOk,
        _ => SplitStatus::SplitViolation,
    }
}

/// Multiplier `⟨g,u⟩/‖u‖²` restricted to each component's Voronoi cell.
pub fn cell_multipliers(u: &Field, g: &Field, report: &SplitReport) -> Result<Vec<f64>> {
    u.grid().ensure_same(g.grid())?;
    let labels = voronoi_labels(u.grid(), &report.seeds);
    let (uv, gv) = (u.values(), g.values());
    Ok(report
        .components
        .iter()
        .map(|c| {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..uv.len() {
                if labels[i] == c.cell {
                    num += gv[i] * uv[i];
                    den += uv[i] * uv[i];
                }
            }
            num / den
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BindingViolation {
    pub big_mass: f64,
    pub small_mass: f64,
    pub excess: f64,
}

/// All `(M, m)` with `I_V(M) > I_V(m) + I_0(M − m) + tol`, including
/// `m = 0` (`I_V(M) ≤ I_0(M)`). Pairs whose difference is not on the
/// `I_0` lattice are skipped.
pub fn binding_check(iv: &[(f64, f64)], i0: &[(f64, f64)], tol: f64) -> Vec<BindingViolation> {
    let lookup = |table: &[(f64, f64)], m: f64| {
        table.iter().find(|(x, _)| (x - m).abs() <= 1e-9 * m.abs().max(1.0)).map(|&(_, e)| e)
    };
    let mut out = Vec::new();
    for &(big, e_big) in iv {
        let smaller = std::iter::once((0.0, 0.0)).chain(iv.iter().copied().filter(|&(m, _)| m < big));
        for (small, e_small) in smaller {
            if let Some(e_rest) = lookup(i0, big - small) {
                let excess = e_big - (e_small + e_rest);
                if excess > tol {
                    out.push(BindingViolation { big_mass: big, small_mass: small, excess });
                }
            }
        }
    }
    out
}
