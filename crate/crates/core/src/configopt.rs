//! Reduced interaction energies of fleeing components.
//!
//! For masses `(m⁰, m¹, …, m^N)` and points `w^i ∈ ℝ³∖{0}`:
//!
//! ```text
//! F(w¹..w^N)  = Σ_{1≤i<j} m^i m^j/|w^i−w^j| + (m⁰−𝒵) Σ_{i≥1} m^i/|w^i| − Σ_{i≥1} m^i/|w^i|^ν
//! F̄(w²..w^N)  = Σ_{2≤i<j} m^i m^j/|w^i−w^j| + m¹ Σ_{i≥2} m^i/|w^i|     − Σ_{i≥2} m^i/|w^i|^ν
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{distance, norm, Vec3};

pub const MAX_POINTS: usize = 8;
const DIVERGE_VALUE: f64 = -1e9;
const DIVERGE_SMALL: f64 = 1e-9;
const DIVERGE_LARGE: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    F,
    FBar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Configuration {
    pub variant: Variant,
    /// `(m⁰, m¹, …, m^N)`.
    pub masses: Vec<f64>,
    pub total_charge: f64,
    pub nu: f64,
    /// `w¹..w^N` for F, `w²..w^N` for F̄.
    pub points: Vec<Vec3>,
}

impl Configuration {
    /// Coefficient of the `Σ m^i/|w^i|` term and the masses of the moving points.
    fn parts(&self) -> (f64, &[f64]) {
        match self.variant {
            Variant::F => (self.masses[0] - self.total_charge, &self.masses[1..]),
            Variant::FBar => (self.masses[1], &self.masses[2..]),
        }
    }

    pub fn validate_shape(&self) -> Result<()> {
        let n = self.masses.len().saturating_sub(1);
        let bad = |m: String| Err(Error::Validation(m));
        if self.masses.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return bad("all masses must be > 0".into());
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return bad(format!("nu must lie in (0,1) (got {})", self.nu));
        }
        if !(self.total_charge > 0.0) {
            return bad(format!("total charge must be > 0 (got {})", self.total_charge));
        }
        let (need, min_n) = match self.variant {
            Variant::F => (n, 1),
            Variant::FBar => (n.saturating_sub(1), 2),
        };
        if n < min_n || n > MAX_POINTS {
            return bad(format!("need {min_n} <= N <= {MAX_POINTS} (got N = {n})"));
        }
        if self.points.len() != need {
            return bad(format!("expected {need} points, got {}", self.points.len()));
        }
        Ok(())
    }

    /// Shape checks plus membership in the configuration space.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        for (i, p) in self.points.iter().enumerate() {
            if !(norm(*p) > 0.0) || p.iter().any(|c| !c.is_finite()) {
                return Err(Error::Domain(format!("point {i} is zero or not finite")));
            }
            for q in &self.points[i + 1..] {
                if distance(*p, *q) == 0.0 {
                    return Err(Error::Domain("coincident points".into()));
                }
            }
        }
        Ok(())
    }

    pub fn with_points(&self, points: Vec<Vec3>) -> Self {
        Configuration { points, ..self.clone() }
    }

    pub fn value(&self) -> Result<f64> {
        self.validate()?;
        Ok(value_unchecked(self, &self.points))
    }

    pub fn gradient(&self) -> Result<Vec<Vec3>> {
        self.validate()?;
        Ok(gradient_unchecked(self, &self.points))
    }
}

fn value_unchecked(c: &Configuration, pts: &[Vec3]) -> f64 {
    let (q, m) = c.parts();
    let mut v = 0.0;
    for i in 0..pts.len() {
        let r = norm(pts[i]);
        v += q * m[i] / r - m[i] / r.powf(c.nu);
        for j in i + 1..pts.len() {
            v += m[i] * m[j] / distance(pts[i], pts[j]);
        }
    }
    v
}

fn gradient_unchecked(c: &Configuration, pts: &[Vec3]) -> Vec<Vec3> {
    let (q, m) = c.parts();
    let mut g = vec![[0.0; 3]; pts.len()];
    for i in 0..pts.len() {
        let r = norm(pts[i]);
        // d/dw (q m/r − m r^{−ν}) = (−q m/r³ + ν m r^{−ν−2}) w
        let radial = -q * m[i] / r.powi(3) + c.nu * m[i] * r.powf(-c.nu - 2.0);
        for a in 0..3 {
            g[i][a] += radial * pts[i][a];
        }
        for j in i + 1..pts.len() {
            let d = distance(pts[i], pts[j]);
            let f = -m[i] * m[j] / d.powi(3);
            for a in 0..3 {
                let t = f * (pts[i][a] - pts[j][a]);
                g[i][a] += t;
                g[j][a] -= t;
            }
        }
    }
    g
}

fn grad_norm(g: &[Vec3]) -> f64 {
    g.iter().flat_map(|v| v.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

pub fn eval_f(c: &Configuration) -> Result<f64> {
    if c.variant != Variant::F {
        return Err(Error::Input("eval_f needs the F variant".into()));
    }
    c.value()
}

pub fn eval_f_bar(c: &Configuration) -> Result<f64> {
    if c.variant != Variant::FBar {
        return Err(Error::Input("eval_f_bar needs the F_bar variant".into()));
    }
    c.value()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptStatus {
    Converged,
    DivergedToZero,
    DivergedToInfinity,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigOptResult {
    pub points: Vec<Vec3>,
    pub value: f64,
    pub gradient_norm: f64,
    pub status: OptStatus,
    pub iters: usize,
    pub restart: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOptOptions {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    /// Random starts use radii log-uniform in `[0.1, 10] · radius_scale`.
    #[serde(default = "default_scale")]
    pub radius_scale: f64,
}

fn default_tol() -> f64 {
    1e-10
}
fn default_restarts() -> usize {
    32
}
fn default_iters() -> usize {
    200_000
}
fn default_scale() -> f64 {
    1.0
}

impl Default for ConfigOptOptions {
    fn default() -> Self {
        ConfigOptOptions {
            tol: default_tol(),
            restarts: default_restarts(),
            seed: 0,
            max_iters: default_iters(),
            radius_scale: default_scale(),
        }
    }
}

/// Backtracking gradient descent from one start.
fn descend(c: &Configuration, start: Vec<Vec3>, opts: &ConfigOptOptions, restart: usize) -> ConfigOptResult {
    let mut x = start;
    let mut f = value_unchecked(c, &x);
    let mut g = gradient_unchecked(c, &x);
    let mut step = 1.0;
    let finish = |x: Vec<Vec3>, f: f64, gn: f64, status, iters| ConfigOptResult {
        points: x,
        value: f,
        gradient_norm: gn,
        status,
        iters,
        restart,
    };
    for it in 0..opts.max_iters {
        let gn = grad_norm(&g);
        let rmin = x.iter().map(|p| norm(*p)).fold(f64::INFINITY, f64::min);
        let rmax = x.iter().map(|p| norm(*p)).fold(0.0, f64::max);
        if f < DIVERGE_VALUE || rmin < DIVERGE_SMALL {
            return finish(x, f, gn, OptStatus::DivergedToZero, it);
        }
        if rmax > DIVERGE_LARGE && gn < opts.tol * 1e-3 {
            return finish(x, f, gn, OptStatus::DivergedToInfinity, it);
        }
        if gn <= opts.tol {
            return finish(x, f, gn, OptStatus::Converged, it);
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<Vec3> =
                x.iter().zip(&g).map(|(p, d)| [p[0] - step * d[0], p[1] - step * d[1], p[2] - step * d[2]]).collect();
            let ft = value_unchecked(c, &trial);
            if ft.is_finite() && ft <= f - 1e-4 * step * gn * gn {
                x = trial;
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no representable decrease: the tolerance is below roundoff here
            return finish(x, f, gn, OptStatus::MaxIters, it);
        }
        g = gradient_unchecked(c, &x);
        step *= 2.0;
    }
    let gn = grad_norm(&g);
    finish(x, f, gn, OptStatus::MaxIters, opts.max_iters)
}

fn random_start(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            let r = scale * 10f64.powf(rng.random_range(-1.0..=1.0));
            // uniform direction
            let z: f64 = rng.random_range(-1.0..=1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let s = (1.0 - z * z).sqrt();
            [r * s * phi.cos(), r * s * phi.sin(), r * z]
        })
        .collect()
}

/// Multi-start descent: `c0` itself plus `restarts − 1` random starts.
pub fn minimize_config(c0: &Configuration, opts: &ConfigOptOptions) -> Result<ConfigOptResult> {
    c0.validate()?;
    if !(opts.tol > 0.0) || opts.restarts == 0 || opts.max_iters == 0 || !(opts.radius_scale > 0.0) {
        return Err(Error::Validation("configopt options out of range".into()));
    }
    let n = c0.points.len();
    let runs: Vec<ConfigOptResult> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let start = if r == 0 {
                c0.points.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(r as u64));
                random_start(n, opts.radius_scale, &mut rng)
            };
            descend(c0, start, opts, r)
        })
        .collect();
    let best_of = |status: OptStatus| {
        runs.iter().filter(|r| r.status == status).min_by(|a, b| a.value.total_cmp(&b.value)).cloned()
    };
    Ok(best_of(OptStatus::Converged)
        .or_else(|| best_of(OptStatus::DivergedToZero))
        .or_else(|| best_of(OptStatus::DivergedToInfinity))
        .or_else(|| best_of(OptStatus::MaxIters))
        .expect("at least one restart"))
}

/// Physical-space centres `y · Z^{−1/(1−ν)}`.
pub fn predicted_centers(result: &ConfigOptResult, z: f64, nu: f64) -> Vec<Vec3> {
    let s = z.powf(-1.0 / (1.0 - nu));
    result.points.iter().map(|p| p.map(|c| c * s)).collect()
}

/// Stationary radius `(a/(ν b))^{1/(1−ν)}` of `a/t − b/t^ν`.
pub fn single_point_radius(a: f64, b: f64, nu: f64) -> f64 {
    (a / (nu * b)).powf(1.0 / (1.0 - nu))
}
