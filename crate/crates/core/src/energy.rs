//! The TFDW energy, its L² gradient and the identities satisfied by
//! constrained critical points.
//!
//! Discretization: fields vanish on a halo one node outside the box. The
//! kinetic energy is `h Σ (u_j − u_i)²` over all nearest-neighbour edges
//! including those to the halo, which equals `h³ ⟨−Δ_h u, u⟩` for the
//! 7-point Laplacian, so the gradient below is the exact derivative of the
//! discrete energy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coulomb::{hartree_energy_with, hartree_potential, CoulombKernel};
use crate::error::{Error, Result};
use crate::grid::{mass, rescale_mass, Field};
use crate::par;
use crate::potentials::external_energy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub c1: f64,
    pub c2: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams { c1: 1.0, c2: 1.0 }
    }
}

impl ModelParams {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        let p = ModelParams { c1, c2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c1", self.c1), ("c2", self.c2)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be > 0 (got {v})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub kinetic: f64,
    pub p_term: f64,
    pub x_term: f64,
    pub external: f64,
    pub hartree: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn from_terms(kinetic: f64, p_term: f64, x_term: f64, external: f64, hartree: f64) -> Self {
        EnergyBreakdown {
            kinetic,
            p_term,
            x_term,
            external,
            hartree,
            total: kinetic + p_term - x_term - external + hartree,
        }
    }

    /// `K + 5/3 P − 4/3 X − ext + 2H`, which equals `μM` at a critical point.
    pub fn stationarity_rhs(&self) -> f64 {
        self.kinetic + 5.0 / 3.0 * self.p_term - 4.0 / 3.0 * self.x_term - self.external + 2.0 * self.hartree
    }

    /// `dE/dσ` at σ = 1 for the dilation `σ^{3/2}u(σx)` (V ≡ 0).
    pub fn virial(&self) -> f64 {
        2.0 * self.kinetic + 2.0 * self.p_term - self.x_term + self.hartree
    }

    /// `μM` predicted once the virial relation is used to eliminate the
    /// pressure term: `−2/3 K − 1/2 X + 7/6 H`.
    pub fn mu_mass_after_virial(&self) -> f64 {
        -2.0 / 3.0 * self.kinetic - 0.5 * self.x_term + 7.0 / 6.0 * self.hartree
    }
}

/// Shape integrals of a unit-mass profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeIntegrals {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl ShapeIntegrals {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("A", self.a), ("B", self.b), ("C", self.c), ("D", self.d)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("shape integral {name} must be >= 0 (got {v})")));
            }
        }
        Ok(())
    }
}

/// `−Δ_h u` with zero halo.
pub fn neg_laplacian(u: &Field) -> Vec<f64> {
    let g = u.grid();
    let [nx, ny, nz] = g.dims;
    let inv_h2 = 1.0 / (g.spacing * g.spacing);
    let v = u.values();
    let mut out = vec![0.0; v.len()];
    out.par_chunks_mut(ny * nz).enumerate().for_each(|(ix, plane)| {
        for iy in 0..ny {
            for iz in 0..nz {
                let i = (ix * ny + iy) * nz + iz;
                let mut s = 6.0 * v[i];
                if ix > 0 {
                    s -= v[i - ny * nz];
                }
                if ix + 1 < nx {
                    s -= v[i + ny * nz];
                }
                if iy > 0 {
                    s -= v[i - nz];
                }
                if iy + 1 < ny {
                    s -= v[i + nz];
                }
                if iz > 0 {
                    s -= v[i - 1];
                }
                if iz + 1 < nz {
                    s -= v[i + 1];
                }
                plane[iy * nz + iz] = s * inv_h2;
            }
        }
    });
    out
}

/// `∫|∇u|²` as the sum of squared forward differences over every edge.
pub fn kinetic_energy(u: &Field) -> f64 {
    let g = u.grid();
    let [nx, ny, nz] = g.dims;
    let v = u.values();
    let sx = ny * nz;
    let edges = par::sum_map(v.len(), |i| {
        let [ix, iy, iz] = [i / sx, (i / nz) % ny, i % nz];
        let ui = v[i];
        let back = |cond: bool, j: usize| if cond { v[j] } else { 0.0 };
        let mut s = (ui - back(ix > 0, i.wrapping_sub(sx))).powi(2)
            + (ui - back(iy > 0, i.wrapping_sub(nz))).powi(2)
            + (ui - back(iz > 0, i.wrapping_sub(1))).powi(2);
        // edges from the last node on each line to the halo
        let last = (ix + 1 == nx) as u8 + (iy + 1 == ny) as u8 + (iz + 1 == nz) as u8;
        s += last as f64 * ui * ui;
        s
    });
    g.spacing * edges
}

fn power_integrals(u: &Field) -> (f64, f64) {
    let v = u.values();
    let h3 = u.grid().cell_volume();
    // Σ|u|^{10/3} and Σ|u|^{8/3} share |u|^{2/3}
    let p = par::sum_map(v.len(), |i| {
        let a = v[i].abs();
        a.cbrt().powi(10)
    });
    let x = par::sum_map(v.len(), |i| {
        let a = v[i].abs();
        a.cbrt().powi(8)
    });
    (h3 * p, h3 * x)
}

pub(crate) fn breakdown_with(u: &Field, v: &Field, p: &ModelParams, w: &Field) -> Result<EnergyBreakdown> {
    let kinetic = kinetic_energy(u);
    let (pi, xi) = power_integrals(u);
    let external = external_energy(u, v)?;
    let hartree = hartree_energy_with(u, w);
    Ok(EnergyBreakdown::from_terms(kinetic, p.c1 * pi, p.c2 * xi, external, hartree))
}

fn check_inputs(u: &Field, v: &Field, k: &CoulombKernel) -> Result<()> {
    u.grid().ensure_same(v.grid())?;
    u.grid().ensure_same(k.grid())?;
    u.check_finite()?;
    v.check_finite()
}

/// Full energy breakdown of `u` in the background `v`.
pub fn energy(u: &Field, v: &Field, p: &ModelParams, k: &CoulombKernel) -> Result<EnergyBreakdown> {
    check_inputs(u, v, k)?;
    let w = hartree_potential(u, k)?;
    breakdown_with(u, v, p, &w)
}

pub(crate) fn gradient_with(u: &Field, v: &Field, p: &ModelParams, w: &Field) -> Field {
    let lap = neg_laplacian(u);
    let (uv, vv, wv) = (u.values(), v.values(), w.values());
    let (c1, c2) = (5.0 / 3.0 * p.c1, 4.0 / 3.0 * p.c2);
    let g: Vec<f64> = (0..uv.len())
        .into_par_iter()
        .map(|i| {
            let x = uv[i];
            let a23 = x.abs().cbrt().powi(2);
            lap[i] + c1 * x * a23 * a23 - c2 * x * a23 - vv[i] * x + wv[i] * x
        })
        .collect();
    Field::from_parts_unchecked(*u.grid(), g)
}

/// Half the Fréchet derivative:
/// `−Δu + 5/3 c₁ u|u|^{4/3} − 4/3 c₂ u|u|^{2/3} − Vu + (u² ⋆ |·|⁻¹) u`.
pub fn gradient(u: &Field, v: &Field, p: &ModelParams, k: &CoulombKernel) -> Result<Field> {
    check_inputs(u, v, k)?;
    let w = hartree_potential(u, k)?;
    Ok(gradient_with(u, v, p, &w))
}

/// Energy and gradient sharing one Hartree convolution.
pub fn energy_and_gradient(
    u: &Field,
    v: &Field,
    p: &ModelParams,
    k: &CoulombKernel,
) -> Result<(EnergyBreakdown, Field)> {
    check_inputs(u, v, k)?;
    let w = hartree_potential(u, k)?;
    Ok((breakdown_with(u, v, p, &w)?, gradient_with(u, v, p, &w)))
}

/// `μ = ⟨g, u⟩ / ‖u‖²`.
pub fn lagrange_multiplier(u: &Field, g: &Field) -> Result<f64> {
    let m = mass(u)?;
    if !(m > 0.0) {
        return Err(Error::DegenerateField("zero mass has no multiplier".into()));
    }
    Ok(u.inner(g)? / m)
}

/// `‖g − μu‖` in L².
pub fn stationarity_residual(u: &Field, g: &Field, mu: f64) -> Result<f64> {
    u.grid().ensure_same(g.grid())?;
    let (a, b) = (u.values(), g.values());
    Ok((u.grid().cell_volume() * par::sum_map(a.len(), |i| (b[i] - mu * a[i]).powi(2))).sqrt())
}

/// `2K + 2P − X + H`, which vanishes at minimizers with V ≡ 0.
pub fn virial_residual(u: &Field, p: &ModelParams, k: &CoulombKernel) -> Result<f64> {
    Ok(energy(u, &Field::zeros(*u.grid()), p, k)?.virial())
}

/// `|μM − (−2/3 A − ½ c₂∫|u|^{8/3} + 7/12 ∫∫u²u²/|x−y|)|`.
pub fn mu_identity_check(u: &Field, p: &ModelParams, k: &CoulombKernel, mu: f64) -> Result<f64> {
    let b = energy(u, &Field::zeros(*u.grid()), p, k)?;
    Ok(mu_identity_residual(&b, mass(u)?, mu))
}

pub fn mu_identity_residual(b: &EnergyBreakdown, m: f64, mu: f64) -> f64 {
    (mu * m - b.mu_mass_after_virial()).abs()
}

/// `(A, B, C, D)` of the unit-mass rescaling of `u`.
pub fn shape_integrals(u: &Field, p: &ModelParams, k: &CoulombKernel) -> Result<ShapeIntegrals> {
    if u.is_zero() {
        return Err(Error::DegenerateField("shape integrals of a zero field".into()));
    }
    let unit = rescale_mass(u, 1.0)?;
    let b = energy(&unit, &Field::zeros(*u.grid()), p, k)?;
    Ok(ShapeIntegrals { a: b.kinetic, b: b.p_term, c: b.x_term, d: b.hartree })
}
