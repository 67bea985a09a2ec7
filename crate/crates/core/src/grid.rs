//! Uniform-grid scalar fields on a box.
//!
//! Values are stored row-major with z fastest: the linear index of grid
//! node `(ix, iy, iz)` is `(ix * ny + iy) * nz + iz`. Outside the box a
//! field is exactly zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub type Vec3 = [f64; 3];

/// Smallest admissible number of nodes per axis.
pub const MIN_NODES: usize = 8;

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn norm(a: Vec3) -> f64 {
    distance(a, [0.0; 3])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub origin: Vec3,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: f64, origin: Vec3) -> Result<Self> {
        let g = GridSpec { dims, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    /// Cubic grid of `n` nodes per axis spanning `[-box_len/2, box_len/2]`.
    pub fn centered(n: usize, box_len: f64) -> Result<Self> {
        if !(box_len > 0.0) || n < 2 {
            return Err(Error::Validation(format!(
                "box length must be positive (got {box_len}) with n >= {MIN_NODES}"
            )));
        }
        let h = box_len / (n as f64 - 1.0);
        Self::new([n; 3], h, [-0.5 * box_len; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n < MIN_NODES) {
            return Err(Error::Validation(format!(
                "grid dims {:?}: every axis needs at least {MIN_NODES} nodes",
                self.dims
            )));
        }
        if !(self.spacing > 0.0) || !self.spacing.is_finite() {
            return Err(Error::Validation(format!(
                "grid spacing must be positive and finite (got {})",
                self.spacing
            )));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(3)
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    #[inline]
    pub fn unravel(&self, i: usize) -> [usize; 3] {
        let iz = i % self.dims[2];
        let r = i / self.dims[2];
        [r / self.dims[1], r % self.dims[1], iz]
    }

    #[inline]
    pub fn node(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let h = self.spacing;
        [
            self.origin[0] + ix as f64 * h,
            self.origin[1] + iy as f64 * h,
            self.origin[2] + iz as f64 * h,
        ]
    }

    #[inline]
    pub fn point(&self, i: usize) -> Vec3 {
        let [ix, iy, iz] = self.unravel(i);
        self.node(ix, iy, iz)
    }

    /// Upper corner of the box, `origin + (n - 1) h`.
    pub fn upper(&self) -> Vec3 {
        let h = self.spacing;
        [
            self.origin[0] + (self.dims[0] - 1) as f64 * h,
            self.origin[1] + (self.dims[1] - 1) as f64 * h,
            self.origin[2] + (self.dims[2] - 1) as f64 * h,
        ]
    }

    pub fn center(&self) -> Vec3 {
        let up = self.upper();
        [
            0.5 * (self.origin[0] + up[0]),
            0.5 * (self.origin[1] + up[1]),
            0.5 * (self.origin[2] + up[2]),
        ]
    }

    /// Distance from `p` to the nearest box face (negative outside).
    pub fn distance_to_boundary(&self, p: Vec3) -> f64 {
        let up = self.upper();
        (0..3)
            .map(|a| (p[a] - self.origin[a]).min(up[a] - p[a]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Configuration(format!(
                "grid mismatch: {self:?} vs {other:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidField(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        let f = Field { grid, values };
        f.check_finite()?;
        Ok(f)
    }

    pub(crate) fn from_parts_unchecked(grid: GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Field { grid, values }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Field { grid, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        Field { grid, values: vec![c; grid.len()] }
    }

    /// Samples `f` at every grid node.
    pub fn from_fn<F>(grid: GridSpec, f: F) -> Self
    where
        F: Fn(Vec3) -> f64 + Sync,
    {
        let values = (0..grid.len()).into_par_iter().map(|i| f(grid.point(i))).collect();
        Field { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::InvalidField(format!(
                "non-finite value {} at node {:?}",
                self.values[i],
                self.grid.unravel(i)
            ))),
        }
    }

    pub fn map<F>(&self, f: F) -> Field
    where
        F: Fn(f64) -> f64 + Sync,
    {
        let values = self.values.par_iter().map(|&v| f(v)).collect();
        Field { grid: self.grid, values }
    }

    pub fn scale(&self, c: f64) -> Field {
        self.map(|v| c * v)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        par::max_abs(&self.values)
    }

    /// L² inner product `h³ Σ a b`.
    pub fn inner(&self, other: &Field) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        Ok(self.grid.cell_volume() * par::dot(&self.values, &other.values))
    }

    /// Value at an arbitrary point by trilinear interpolation against a
    /// zero halo one node beyond each face.
    pub fn sample(&self, p: Vec3) -> f64 {
        let g = &self.grid;
        let mut base = [0isize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let s = (p[a] - g.origin[a]) / g.spacing;
            if !(s > -1.0 && s < g.dims[a] as f64) {
                return 0.0;
            }
            let f = s.floor();
            base[a] = f as isize;
            frac[a] = s - f;
        }
        let at = |ix: isize, iy: isize, iz: isize| -> f64 {
            if ix < 0
                || iy < 0
                || iz < 0
                || ix >= g.dims[0] as isize
                || iy >= g.dims[1] as isize
                || iz >= g.dims[2] as isize
            {
                0.0
            } else {
                self.values[g.index(ix as usize, iy as usize, iz as usize)]
            }
        };
        let mut acc = 0.0;
        for (dx, wx) in [(0, 1.0 - frac[0]), (1, frac[0])] {
            for (dy, wy) in [(0, 1.0 - frac[1]), (1, frac[1])] {
                for (dz, wz) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                    let w = wx * wy * wz;
                    if w != 0.0 {
                        acc += w * at(base[0] + dx, base[1] + dy, base[2] + dz);
                    }
                }
            }
        }
        acc
    }
}

/// Squared L² norm `h³ Σ u²`.
pub fn mass(u: &Field) -> Result<f64> {
    u.check_finite()?;
    Ok(u.grid.cell_volume() * par::sum_sq(&u.values))
}

/// Scales `u` so that its mass is exactly `target`.
pub fn rescale_mass(u: &Field, target: f64) -> Result<Field> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::Domain(format!("target mass must be positive (got {target})")));
    }
    let m = mass(u)?;
    if !(m > 0.0) {
        return Err(Error::DegenerateField("cannot rescale a zero field".into()));
    }
    Ok(u.scale((target / m).sqrt()))
}

/// Fraction of mass allowed to fall outside the box under dilation.
const DILATE_LOSS_TOL: f64 = 1e-8;

/// Mass-preserving dilation `σ^{3/2} u(σx)` about the coordinate origin.
pub fn dilate(u: &Field, sigma: f64) -> Result<Field> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("dilation factor must be positive (got {sigma})")));
    }
    u.check_finite()?;
    if sigma == 1.0 {
        return Ok(u.clone());
    }
    let g = u.grid;
    if sigma < 1.0 {
        // u at y lands at y/σ; anything mapped outside the box is lost.
        let lo = g.origin;
        let hi = g.upper();
        let lost = par::sum_map(g.len(), |i| {
            let y = g.point(i);
            let x = [y[0] / sigma, y[1] / sigma, y[2] / sigma];
            let outside = (0..3).any(|a| x[a] < lo[a] || x[a] > hi[a]);
            if outside {
                u.values[i] * u.values[i]
            } else {
                0.0
            }
        });
        let total = par::sum_sq(&u.values);
        if total > 0.0 && lost > DILATE_LOSS_TOL * total {
            return Err(Error::Domain(format!(
                "dilation by {sigma} pushes a mass fraction {:.3e} outside the box",
                lost / total
            )));
        }
    }
    let amp = sigma.powf(1.5);
    Ok(Field::from_fn(g, |x| amp * u.sample([sigma * x[0], sigma * x[1], sigma * x[2]])))
}

/// Smooth cutoff φ with φ = 1 on (-∞, 0], φ = 0 on [1, ∞) and |φ'| ≤ 2.
///
/// The transition is the quintic smoothstep `1 - t³(10 - 15t + 6t²)`,
/// whose derivative peaks at 15/8.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CutoffProfile;

impl CutoffProfile {
    pub const DERIVATIVE_BOUND: f64 = 2.0;

    pub fn value(&self, t: f64) -> f64 {
        if t <= 0.0 {
            1.0
        } else if t >= 1.0 {
            0.0
        } else {
            1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        if t <= 0.0 || t >= 1.0 {
            0.0
        } else {
            -30.0 * t * t * (1.0 - t) * (1.0 - t)
        }
    }

    /// Exact supremum of |φ'|, attained at t = 1/2.
    pub fn max_slope(&self) -> f64 {
        15.0 / 8.0
    }
}

/// Multiplies `u` by `φ(|x - center| - ρ + 1)`: unchanged inside
/// `B_{ρ-1}(center)`, zero outside `B_ρ(center)`.
pub fn truncate_ball(u: &Field, center: Vec3, rho: f64, phi: &CutoffProfile) -> Result<Field> {
    if !(rho > 1.0) {
        return Err(Error::Domain(format!("truncation radius must exceed 1 (got {rho})")));
    }
    u.check_finite()?;
    let g = u.grid;
    let values = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let w = phi.value(distance(g.point(i), center) - rho + 1.0);
            w * u.values[i]
        })
        .collect();
    Ok(Field { grid: g, values })
}
