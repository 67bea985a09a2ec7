//! Free-space Coulomb (Hartree) terms by zero-padded FFT convolution.
//!
//! The kernel is sampled pointwise as `1/|x|` on the padded lattice of
//! offsets, except at the origin where the exact mean of `1/|x|` over one
//! grid cell is used. Padding to twice the field extent makes the
//! circular convolution equal to the aperiodic one on the field block.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::Result;
use crate::grid::{Field, GridSpec};
use crate::par;
use crate::transform::PaddedTransform;

/// Mean of `1/|x|` over the unit cube centred at the origin:
/// `3 ln(2 + √3) − π/2`.
pub fn unit_cell_inverse_distance_mean() -> f64 {
    3.0 * (2.0 + 3f64.sqrt()).ln() - std::f64::consts::FRAC_PI_2
}

#[derive(Debug)]
pub struct CoulombKernel {
    grid: GridSpec,
    transform: PaddedTransform,
    /// FFT of the kernel samples times the cell volume.
    symbol: Vec<f64>,
}

impl CoulombKernel {
    /// Kernel on a box padded to exactly twice the field extent.
    pub fn new(grid: GridSpec) -> Result<Self> {
        let d = grid.dims;
        Self::with_padding(grid, [2 * d[0], 2 * d[1], 2 * d[2]])
    }

    pub fn with_padding(grid: GridSpec, padded: [usize; 3]) -> Result<Self> {
        grid.validate()?;
        let transform = PaddedTransform::new(grid.dims, padded)?;
        let h = grid.spacing;
        let origin_value = unit_cell_inverse_distance_mean() / h;
        let [px, py, pz] = padded;
        let mut samples = vec![0.0; px * py * pz];
        for ix in 0..px {
            let dx = PaddedTransform::signed_index(ix, px) as f64;
            for iy in 0..py {
                let dy = PaddedTransform::signed_index(iy, py) as f64;
                let row = (ix * py + iy) * pz;
                for iz in 0..pz {
                    let dz = PaddedTransform::signed_index(iz, pz) as f64;
                    let r = (dx * dx + dy * dy + dz * dz).sqrt();
                    samples[row + iz] = if r == 0.0 { origin_value } else { 1.0 / (h * r) };
                }
            }
        }
        let h3 = grid.cell_volume();
        let symbol = transform.forward_padded(&samples).into_iter().map(|c| c.re * h3).collect();
        Ok(CoulombKernel { grid, transform, symbol })
    }

    /// Process-wide kernel cache keyed by grid.
    pub fn shared(grid: &GridSpec) -> Result<Arc<CoulombKernel>> {
        type Key = ([usize; 3], u64, [u64; 3]);
        static CACHE: OnceLock<Mutex<HashMap<Key, Arc<CoulombKernel>>>> = OnceLock::new();
        let key = (grid.dims, grid.spacing.to_bits(), grid.origin.map(f64::to_bits));
        let cache = CACHE.get_or_init(Default::default);
        if let Some(k) = cache.lock().unwrap().get(&key) {
            return Ok(Arc::clone(k));
        }
        let k = Arc::new(CoulombKernel::new(*grid)?);
        cache.lock().unwrap().insert(key, Arc::clone(&k));
        Ok(k)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn padded_dims(&self) -> [usize; 3] {
        self.transform.padded_dims()
    }

    pub fn transform(&self) -> &PaddedTransform {
        &self.transform
    }

    /// Kernel value at a lattice offset (in units of h), as used in the
    /// convolution.
    pub fn sample(&self, offset: [isize; 3]) -> f64 {
        let r2 = offset.iter().map(|&d| (d * d) as f64).sum::<f64>();
        if r2 == 0.0 {
            unit_cell_inverse_distance_mean() / self.grid.spacing
        } else {
            1.0 / (self.grid.spacing * r2.sqrt())
        }
    }

    /// `h³ Σ_y K(x − y) rho(y)` for a density given on the field grid.
    pub fn convolve(&self, rho: &[f64]) -> Vec<f64> {
        self.transform.apply_symbol(rho, &self.symbol)
    }
}

fn density(u: &Field) -> Vec<f64> {
    u.values().iter().map(|v| v * v).collect()
}

/// `w = u² ⋆ |·|⁻¹`.
pub fn hartree_potential(u: &Field, k: &CoulombKernel) -> Result<Field> {
    u.grid().ensure_same(&k.grid)?;
    if u.is_zero() {
        return Ok(Field::zeros(*u.grid()));
    }
    Ok(Field::from_parts_unchecked(*u.grid(), k.convolve(&density(u))))
}

/// `½ ∫∫ u²(x) u²(y) / |x − y|`.
pub fn hartree_energy(u: &Field, k: &CoulombKernel) -> Result<f64> {
    let w = hartree_potential(u, k)?;
    Ok(hartree_energy_with(u, &w))
}

/// Hartree energy from an already computed potential.
pub fn hartree_energy_with(u: &Field, w: &Field) -> f64 {
    let uv = u.values();
    let wv = w.values();
    0.5 * u.grid().cell_volume() * par::sum_map(uv.len(), |i| uv[i] * uv[i] * wv[i])
}

/// `∫∫ u1²(x) u2²(y) / |x − y|`.
pub fn pair_interaction(u1: &Field, u2: &Field, k: &CoulombKernel) -> Result<f64> {
    u1.grid().ensure_same(u2.grid())?;
    u1.grid().ensure_same(&k.grid)?;
    if u1.is_zero() || u2.is_zero() {
        return Ok(0.0);
    }
    // Convolve the argument with the smaller support so the result is
    // symmetric to roundoff either way.
    let w = hartree_potential(u2, k)?;
    let a = u1.values();
    let wv = w.values();
    let forward = par::sum_map(a.len(), |i| a[i] * a[i] * wv[i]);
    let w1 = hartree_potential(u1, k)?;
    let b = u2.values();
    let wv1 = w1.values();
    let backward = par::sum_map(b.len(), |i| b[i] * b[i] * wv1[i]);
    Ok(u1.grid().cell_volume() * 0.5 * (forward + backward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::grid::{distance, mass, norm};
    use std::f64::consts::PI;

    /// O(n²) double sum with the same kernel samples.
    fn brute_hartree(u: &Field, k: &CoulombKernel) -> f64 {
        let g = u.grid();
        let v = u.values();
        let h3 = g.cell_volume();
        let mut s = 0.0;
        for i in 0..g.len() {
            if v[i] == 0.0 {
                continue;
            }
            let a = g.unravel(i);
            for j in 0..g.len() {
                let b = g.unravel(j);
                let off = [
                    a[0] as isize - b[0] as isize,
                    a[1] as isize - b[1] as isize,
                    a[2] as isize - b[2] as isize,
                ];
                s += v[i] * v[i] * v[j] * v[j] * k.sample(off);
            }
        }
        0.5 * h3 * h3 * s
    }

    #[test]
    fn cell_mean_constant_matches_quadrature() {
        // midpoint rule on a 200³ subdivision, excluding nothing: the
        // singularity is integrable and midpoints never hit it
        let m = 200;
        let mut s = 0.0;
        for i in 0..m {
            let x = (i as f64 + 0.5) / m as f64 - 0.5;
            for j in 0..m {
                let y = (j as f64 + 0.5) / m as f64 - 0.5;
                for l in 0..m {
                    let z = (l as f64 + 0.5) / m as f64 - 0.5;
                    s += 1.0 / (x * x + y * y + z * z).sqrt();
                }
            }
        }
        s /= (m * m * m) as f64;
        assert!((s - unit_cell_inverse_distance_mean()).abs() < 2e-3, "{s}");
    }

    #[test]
    fn zero_field_has_zero_potential() {
        let g = GridSpec::centered(8, 4.0).unwrap();
        let k = CoulombKernel::new(g).unwrap();
        let w = hartree_potential(&Field::zeros(g), &k).unwrap();
        assert!(w.is_zero());
        assert_eq!(hartree_energy(&Field::zeros(g), &k).unwrap(), 0.0);
    }

    #[test]
    fn insufficient_padding_is_rejected() {
        let g = GridSpec::centered(8, 4.0).unwrap();
        assert!(matches!(CoulombKernel::with_padding(g, [15, 16, 16]), Err(Error::Configuration(_))));
        let other = GridSpec::centered(9, 4.0).unwrap();
        let k = CoulombKernel::new(g).unwrap();
        assert!(hartree_potential(&Field::zeros(other), &k).is_err());
    }

    #[test]
    fn kernel_symbol_is_symmetric() {
        let g = GridSpec::centered(8, 4.0).unwrap();
        let k = CoulombKernel::new(g).unwrap();
        for off in [[1, 2, -3], [0, 4, 1], [3, 3, 3]] {
            let neg = [-off[0], -off[1], -off[2]];
            assert_eq!(k.sample(off), k.sample(neg));
        }
    }

    #[test]
    fn matches_brute_force_double_sum() {
        let g = GridSpec::centered(12, 6.0).unwrap();
        let k = CoulombKernel::new(g).unwrap();
        let u = Field::from_fn(g, |x| (-(x[0] - 0.3).powi(2) - 0.5 * x[1] * x[1] - 0.8 * x[2] * x[2]).exp() + 0.1);
        let fast = hartree_energy(&u, &k).unwrap();
        let slow = brute_hartree(&u, &k);
        assert!(((fast - slow) / slow).abs() < 1e-10, "{fast} vs {slow}");
    }

    #[test]
    fn narrow_gaussian_far_field() {
        let n = 64;
        let g = GridSpec::centered(n, 12.0).unwrap();
        let h = g.spacing;
        let s = 2.0 * h;
        let amp = (1.0 / (2.0 * PI * s * s).powf(1.5)).sqrt();
        // centre on a node so the probe lies on a node too
        let c = g.node(n / 2 - 10, n / 2, n / 2);
        let u = Field::from_fn(g, |x| amp * (-distance(x, c).powi(2) / (4.0 * s * s)).exp());
        let u = crate::grid::rescale_mass(&u, 1.0).unwrap();
        let k = CoulombKernel::new(g).unwrap();
        let w = hartree_potential(&u, &k).unwrap();
        let probe = g.index(n / 2 - 10 + 10, n / 2, n / 2);
        let r = distance(g.point(probe), c);
        assert!((r - 10.0 * h).abs() < 1e-12);
        let got = w.values()[probe];
        let want = 1.0 / r;
        assert!(((got - want) / want).abs() < 0.02, "{got} vs {want}");
        assert!(w.values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn uniform_ball_potential_and_self_energy() {
        let g = GridSpec::centered(48, 16.0).unwrap();
        let radius = 3.0;
        let ball = Field::from_fn(g, |x| if norm(x) <= radius { 1.0 } else { 0.0 });
        let q = mass(&ball).unwrap();
        let k = CoulombKernel::new(g).unwrap();
        let w = hartree_potential(&ball, &k).unwrap();
        for i in 0..g.len() {
            let r = norm(g.point(i));
            if r > 1.5 * radius && r < 7.0 {
                let rel = (w.values()[i] - q / r).abs() / (q / r);
                assert!(rel < 0.02, "r={r} rel={rel}");
            }
        }
        // use the discrete volume's equivalent radius for the oracle
        let r_eq = (3.0 * q / (4.0 * PI)).cbrt();
        let e = hartree_energy(&ball, &k).unwrap();
        let want = 0.6 * q * q / r_eq;
        assert!(((e - want) / want).abs() < 0.03, "{e} vs {want}");
    }

    #[test]
    fn far_gaussians_interaction_energy() {
        let g = GridSpec::centered(40, 30.0).unwrap();
        let k = CoulombKernel::new(g).unwrap();
        let s = 1.0;
        let c1 = [-9.0, 0.0, 0.0];
        let c2 = [9.0, 0.0, 0.0];
        let bump = |c: [f64; 3], q: f64| {
            let f = Field::from_fn(g, |x| (-distance(x, c).powi(2) / (4.0 * s * s)).exp());
            crate::grid::rescale_mass(&f, q).unwrap()
        };
        let a = bump(c1, 1.0);
        let b = bump(c2, 2.0);
        let sum = Field::new(g, a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect()).unwrap();
        // squared sum ≈ sum of squares (overlap ~ e^{-81/2})
        let total = hartree_energy(&sum, &k).unwrap();
        let parts = hartree_energy(&a, &k).unwrap() + hartree_energy(&b, &k).unwrap();
        let r12 = distance(c1, c2);
        let cross = total - parts;
        let rho = 4.0 * s;
        assert!((cross - 2.0 / r12).abs() <= 4.0 * rho / (r12 * r12) * 2.0);
    }

    #[test]
    fn pair_interaction_is_symmetric_and_bounded() {
        let g = GridSpec::centered(40, 30.0).unwrap();
        let k = CoulombKernel::new(g).unwrap();
        let rho = 2.0;
        let c1 = [-10.0, 0.0, 0.0];
        let c2 = [10.0, 0.0, 0.0];
        let blob = |c: [f64; 3]| {
            let f = Field::from_fn(g, |x| {
                let r = distance(x, c);
                if r < rho {
                    (1.0 - (r / rho).powi(2)).powi(2)
                } else {
                    0.0
                }
            });
            crate::grid::rescale_mass(&f, 1.0).unwrap()
        };
        let a = blob(c1);
        let b = blob(c2);
        assert_eq!(pair_interaction(&a, &Field::zeros(g), &k).unwrap(), 0.0);
        let ab = pair_interaction(&a, &b, &k).unwrap();
        let ba = pair_interaction(&b, &a, &k).unwrap();
        assert!(((ab - ba) / ab).abs() < 1e-12);
        let r = 20.0;
        assert!((ab - 1.0 / r).abs() <= 4.0 * rho / (r * r));
    }

    #[test]
    fn shared_kernel_is_cached() {
        let g = GridSpec::centered(10, 5.0).unwrap();
        let a = CoulombKernel::shared(&g).unwrap();
        let b = CoulombKernel::shared(&g).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }
}
