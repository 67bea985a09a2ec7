//! Background potentials: nuclear attraction `Σ α_k / |x − r_k|` plus an
//! optional long-range tail `Z / |x|^ν`, sampled with smoothed
//! singularities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{distance, norm, Field, GridSpec, Vec3};
use crate::par;

/// Regularized values must match the exact potential beyond this many widths.
pub const EXACT_BEYOND_WIDTHS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuclearSite {
    pub charge: f64,
    pub position: Vec3,
}

impl NuclearSite {
    pub fn new(charge: f64, position: Vec3) -> Result<Self> {
        let s = NuclearSite { charge, position };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.charge > 0.0) || !self.charge.is_finite() {
            return Err(Error::Validation(format!("nuclear charge must be > 0 (got {})", self.charge)));
        }
        if self.position.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("nuclear position must be finite".into()));
        }
        Ok(())
    }
}

fn default_nu() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    #[serde(default)]
    pub sites: Vec<NuclearSite>,
    /// Strength Z ≥ 0 of the `Z/|x|^ν` tail.
    #[serde(default)]
    pub perturbation_strength: f64,
    #[serde(default = "default_nu")]
    pub perturbation_exponent: f64,
    /// Power τ of the site terms `α/|x − r|^τ`; Coulomb when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation_power: Option<f64>,
    /// Smoothing width a; `None` means h/2 on whatever grid is sampled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularization_width: Option<f64>,
}

impl Default for PotentialSpec {
    fn default() -> Self {
        PotentialSpec {
            sites: Vec::new(),
            perturbation_strength: 0.0,
            perturbation_exponent: default_nu(),
            perturbation_power: None,
            regularization_width: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeClass {
    LongRange,
    ShortRange,
}

impl PotentialSpec {
    /// V ≡ 0.
    pub fn zero() -> Self {
        Self::default()
    }

    /// One nucleus of charge `alpha` at the origin.
    pub fn single_site(alpha: f64) -> Self {
        PotentialSpec { sites: vec![NuclearSite { charge: alpha, position: [0.0; 3] }], ..Self::default() }
    }

    pub fn with_perturbation(mut self, z: f64, nu: f64) -> Self {
        self.perturbation_strength = z;
        self.perturbation_exponent = nu;
        self
    }

    /// 𝒵 = Σ α_k.
    pub fn total_charge(&self) -> f64 {
        self.sites.iter().map(|s| s.charge).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.sites.is_empty() && self.perturbation_strength == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.sites {
            s.validate()?;
        }
        let z = self.perturbation_strength;
        if !(z >= 0.0) || !z.is_finite() {
            return Err(Error::Validation(format!("perturbation_strength Z must be >= 0 (got {z})")));
        }
        let nu = self.perturbation_exponent;
        if !(nu > 0.0 && nu < 1.0) {
            return Err(Error::Validation(format!("perturbation_exponent nu must lie in (0,1) (got {nu})")));
        }
        if let Some(tau) = self.perturbation_power {
            if !(tau > 0.0 && tau < 2.0) {
                return Err(Error::Validation(format!("perturbation_power tau must lie in (0,2) (got {tau})")));
            }
        }
        if let Some(a) = self.regularization_width {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::Validation(format!("regularization_width must be > 0 (got {a})")));
            }
        }
        Ok(())
    }

    pub fn classify(&self) -> RangeClass {
        if self.perturbation_strength > 0.0 && self.perturbation_exponent < 1.0 {
            RangeClass::LongRange
        } else {
            RangeClass::ShortRange
        }
    }

    /// Regularization width used on `grid`.
    pub fn effective_width(&self, grid: &GridSpec) -> Result<f64> {
        let half = 0.5 * grid.spacing;
        match self.regularization_width {
            None => Ok(half),
            Some(a) if a < half => Err(Error::UnderResolved { width: a, half_spacing: half }),
            Some(a) => Ok(a),
        }
    }

    /// Regularized potential at a point for smoothing width `a`.
    pub fn value_at(&self, x: Vec3, a: f64) -> f64 {
        let tau = self.perturbation_power.unwrap_or(1.0);
        let mut v = 0.0;
        for s in &self.sites {
            let c = smeared_inverse_distance(distance(x, s.position), a);
            v += s.charge * if tau == 1.0 { c } else { c.powf(tau) };
        }
        if self.perturbation_strength > 0.0 {
            v += self.perturbation_strength * capped_power(norm(x), self.perturbation_exponent, a);
        }
        v
    }

    /// Unregularized potential (infinite at singular points).
    pub fn exact_value_at(&self, x: Vec3) -> f64 {
        let tau = self.perturbation_power.unwrap_or(1.0);
        let mut v = 0.0;
        for s in &self.sites {
            v += s.charge / distance(x, s.position).powf(tau);
        }
        if self.perturbation_strength > 0.0 {
            v += self.perturbation_strength / norm(x).powf(self.perturbation_exponent);
        }
        v
    }
}

/// `erf(r/(√2 a))/r`, the potential of a unit Gaussian charge of width a.
pub fn smeared_inverse_distance(r: f64, a: f64) -> f64 {
    let t = r / (std::f64::consts::SQRT_2 * a);
    if t < 1e-4 {
        // erf(t)/t = 2/√π (1 − t²/3 + ...)
        let lead = std::f64::consts::FRAC_2_SQRT_PI / (std::f64::consts::SQRT_2 * a);
        lead * (1.0 - t * t / 3.0)
    } else {
        libm::erf(t) / r
    }
}

/// `min(r^{−ν}, a^{−ν})`.
pub fn capped_power(r: f64, nu: f64, a: f64) -> f64 {
    r.max(a).powf(-nu)
}

/// Samples the regularized potential on the grid nodes.
pub fn sample_potential(spec: &PotentialSpec, grid: &GridSpec) -> Result<Field> {
    spec.validate()?;
    grid.validate()?;
    let a = spec.effective_width(grid)?;
    for s in &spec.sites {
        let margin = grid.distance_to_boundary(s.position);
        if margin < EXACT_BEYOND_WIDTHS * a {
            return Err(Error::Domain(format!(
                "nucleus at {:?} is {margin:.3} from the box boundary; need at least {:.3}",
                s.position,
                EXACT_BEYOND_WIDTHS * a
            )));
        }
    }
    let spec = spec.clone();
    Ok(Field::from_fn(*grid, move |x| spec.value_at(x, a)))
}

/// `h³ Σ V u²`, the magnitude of the attractive term.
pub fn external_energy(u: &Field, v: &Field) -> Result<f64> {
    u.grid().ensure_same(v.grid())?;
    let uv = u.values();
    let vv = v.values();
    Ok(u.grid().cell_volume() * par::sum_map(uv.len(), |i| vv[i] * uv[i] * uv[i]))
}
