//! Small-mass concavity of `I₀(M)`.
//!
//! For a unit-mass profile with shape integrals `(A, B, C, D)`, optimizing
//! the dilation of `√M u` gives
//!
//! ```text
//! F_u(M) = −M^{5/3} (C − M^{2/3} D)₊² / (4 (A + M^{2/3} B))
//! ```
//!
//! and `I₀(M) = inf_u F_u(M)`. Where the clamp is inactive,
//! `F_u''(M) = −G_u(M) / (18 M^{1/3} (A + M^{2/3} B)³)` with the
//! polynomial `G_u` below, so `G_u > 0` means `F_u` is concave.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::energy::ShapeIntegrals;
use crate::error::{Error, Result};

pub const DEFAULT_SCAN_MAX_MASS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedProfile {
    pub integrals: ShapeIntegrals,
}

impl ReducedProfile {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let integrals = ShapeIntegrals { a, b, c, d };
        integrals.validate()?;
        Ok(ReducedProfile { integrals })
    }

    fn check(&self, m: f64) -> Result<()> {
        self.integrals.validate()?;
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::Domain(format!("mass must be > 0 (got {m})")));
        }
        if self.integrals.a == 0.0 && self.integrals.b == 0.0 {
            return Err(Error::DegenerateField("profile with A = B = 0".into()));
        }
        Ok(())
    }

    /// `C − M^{2/3} D`; the clamp in `F_u` is active when this is ≤ 0.
    pub fn clamp_argument(&self, m: f64) -> f64 {
        self.integrals.c - m.powf(2.0 / 3.0) * self.integrals.d
    }
}

pub fn eval_f_u(p: &ReducedProfile, m: f64) -> Result<f64> {
    p.check(m)?;
    let ShapeIntegrals { a, b, .. } = p.integrals;
    let m23 = m.powf(2.0 / 3.0);
    let pos = p.clamp_argument(m).max(0.0);
    Ok(-m.powf(5.0 / 3.0) * pos * pos / (4.0 * (a + m23 * b)))
}

pub fn eval_g_u(p: &ReducedProfile, m: f64) -> Result<f64> {
    p.check(m)?;
    if !(p.clamp_argument(m) > 0.0) {
        return Err(Error::InapplicableRegion(format!("C − M^(2/3) D <= 0 at M = {m}")));
    }
    let ShapeIntegrals { a, b, c, d } = p.integrals;
    let m23 = m.powf(2.0 / 3.0);
    let m43 = m23 * m23;
    let m2 = m43 * m23;
    let m83 = m43 * m43;
    Ok(14.0 * m83 * b * b * d * d
        + m2 * (37.0 * a * b * d * d - 10.0 * b * b * c * d)
        + m43 * (27.0 * a * a * d * d - 30.0 * a * b * c * d)
        + m23 * (-28.0 * a * a * c * d + a * b * c * c)
        + 5.0 * a * a * c * c)
}

/// `F_u''(M)` from `G_u`.
pub fn second_derivative_from_g(p: &ReducedProfile, m: f64) -> Result<f64> {
    let g = eval_g_u(p, m)?;
    let ShapeIntegrals { a, b, .. } = p.integrals;
    Ok(-g / (18.0 * m.cbrt() * (a + m.powf(2.0 / 3.0) * b).powi(3)))
}

/// `A²C²(−10M² − 30M^{4/3} − 28M^{2/3} + 5)`, a lower bound for `G_u`
/// when `B ≤ A` and `D ≤ C`.
pub fn g_lower_bound(p: &ReducedProfile, m: f64) -> f64 {
    let ShapeIntegrals { a, c, .. } = p.integrals;
    let m23 = m.powf(2.0 / 3.0);
    a * a * c * c * (-10.0 * m23 * m23 * m23 - 30.0 * m23 * m23 - 28.0 * m23 + 5.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcavityRow {
    pub mass: f64,
    pub energy: f64,
    pub second_difference: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcavityReport {
    pub step: f64,
    pub tol: f64,
    pub rows: Vec<ConcavityRow>,
    pub concave_ok: bool,
}

impl ConcavityReport {
    pub fn flagged(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.flagged).map(|r| r.mass).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "mass,energy,second_difference,flagged")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.mass, r.energy, r.second_difference, r.flagged)?;
        }
        Ok(())
    }
}

/// Second differences `(E_{i+1} − 2E_i + E_{i−1})/ΔM²` of an `I₀` table
/// at its interior rows; a row is flagged when the difference exceeds `tol`.
pub fn concavity_scan(table: &[(f64, f64)], tol: f64, max_mass: f64) -> Result<ConcavityReport> {
    if table.len() < 5 {
        return Err(Error::Input(format!("need at least 5 rows, got {}", table.len())));
    }
    if table.iter().any(|&(m, e)| !(m > 0.0) || !e.is_finite()) {
        return Err(Error::Input("masses must be > 0 and energies finite".into()));
    }
    if let Some(&(m, _)) = table.iter().find(|&&(m, _)| m > max_mass) {
        return Err(Error::Input(format!("mass {m} exceeds the scan limit {max_mass}")));
    }
    let step = table[1].0 - table[0].0;
    if !(step > 0.0) || table.windows(2).any(|w| ((w[1].0 - w[0].0) - step).abs() > 1e-9 * step.max(1.0)) {
        return Err(Error::Input("masses must be equally spaced and increasing".into()));
    }
    let rows: Vec<ConcavityRow> = table
        .windows(3)
        .map(|w| {
            let d2 = (w[2].1 - 2.0 * w[1].1 + w[0].1) / (step * step);
            ConcavityRow { mass: w[1].0, energy: w[1].1, second_difference: d2, flagged: !(d2 < tol) }
        })
        .collect();
    let concave_ok = rows.iter().all(|r| !r.flagged);
    Ok(ConcavityReport { step, tol, rows, concave_ok })
}

/// Reads `mass,energy` rows, skipping a header line if present.
pub fn read_table_csv<R: BufRead>(r: R) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split(',').map(str::trim);
        let (a, b) = (it.next().unwrap_or(""), it.next().unwrap_or(""));
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(m), Ok(e)) => out.push((m, e)),
            _ if n == 0 => continue,
            _ => return Err(Error::Input(format!("line {}: expected mass,energy", n + 1))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn prof(a: f64, b: f64, c: f64, d: f64) -> ReducedProfile {
        ReducedProfile::new(a, b, c, d).unwrap()
    }

    #[test]
    fn f_u_examples() {
        assert_eq!(eval_f_u(&prof(1.0, 1.0, 1.0, 1.0), 1.0).unwrap(), 0.0);
        assert!((eval_f_u(&prof(1.0, 0.0, 1.0, 0.0), 1.0).unwrap() + 0.25).abs() < 1e-15);
        assert_eq!(eval_f_u(&prof(1.0, 1.0, 1.0, 8.0), 0.5).unwrap(), 0.0);
        assert!(matches!(eval_f_u(&prof(0.0, 0.0, 1.0, 1.0), 0.5), Err(Error::DegenerateField(_))));
        assert!(eval_f_u(&prof(1.0, 1.0, 1.0, 1.0), 0.0).is_err());
        assert!(ReducedProfile::new(-1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn f_u_is_the_optimal_dilation() {
        // F_u(M) = min_σ [σ²(M A + M^{5/3} B) − σ(M^{4/3} C − M² D)]
        let p = prof(0.8, 0.3, 1.1, 0.4);
        let m: f64 = 0.2;
        let quad = |s: f64| {
            s * s * (m * 0.8 + m.powf(5.0 / 3.0) * 0.3) - s * (m.powf(4.0 / 3.0) * 1.1 - m * m * 0.4)
        };
        let best = (1..200_000).map(|i| quad(i as f64 * 1e-5)).fold(f64::INFINITY, f64::min);
        assert!((best - eval_f_u(&p, m).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn g_u_polynomial_value() {
        let m: f64 = 0.01;
        let m23 = m.powf(2.0 / 3.0);
        let direct = 14.0 * m23.powi(4) + 27.0 * m * m - 3.0 * m23 * m23 - 27.0 * m23 + 5.0;
        let g = eval_g_u(&prof(1.0, 1.0, 1.0, 1.0), m).unwrap();
        assert!((g - direct).abs() < 1e-12);
        assert!((g - 3.7435).abs() < 1e-3);
        assert!(matches!(eval_g_u(&prof(1.0, 1.0, 1.0, 1.0), 1.0), Err(Error::InapplicableRegion(_))));
    }

    #[test]
    fn second_derivative_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, h) = (0.01, 1e-3);
        for _ in 0..50 {
            let p = prof(
                rng.random_range(0.2..3.0),
                rng.random_range(0.0..3.0),
                rng.random_range(0.2..3.0),
                rng.random_range(0.0..3.0),
            );
            let d2 = |h: f64| {
                (eval_f_u(&p, m + h).unwrap() - 2.0 * eval_f_u(&p, m).unwrap() + eval_f_u(&p, m - h).unwrap())
                    / (h * h)
            };
            // Richardson step removes the O(h²) term
            let fd = (4.0 * d2(h / 2.0) - d2(h)) / 3.0;
            let an = second_derivative_from_g(&p, m).unwrap();
            assert!(((fd - an) / an).abs() < 1e-4, "{fd} vs {an}");
        }
    }

    #[test]
    fn scan_examples() {
        let table: Vec<(f64, f64)> = (1..=6).map(|i| 0.05 * i as f64).map(|m: f64| (m, -m.powf(5.0 / 3.0))).collect();
        let r = concavity_scan(&table, 0.0, DEFAULT_SCAN_MAX_MASS).unwrap();
        assert!(r.concave_ok);
        assert!(r.rows.iter().all(|x| x.second_difference < 0.0));
        let mut bumped = table.clone();
        bumped[3].1 -= 0.05;
        let r = concavity_scan(&bumped, 0.0, DEFAULT_SCAN_MAX_MASS).unwrap();
        assert!(!r.concave_ok);
        assert_eq!(r.flagged(), vec![bumped[3].0]);
        let mut uneven = table.clone();
        uneven[2].0 += 0.01;
        assert!(matches!(concavity_scan(&uneven, 0.0, 0.5), Err(Error::Input(_))));
        assert!(concavity_scan(&table[..4], 0.0, 0.5).is_err());
        assert!(concavity_scan(&table, 0.0, 0.2).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let text = "mass,energy\n0.1,-0.5\n0.2,-1.25\n";
        let t = read_table_csv(text.as_bytes()).unwrap();
        assert_eq!(t, vec![(0.1, -0.5), (0.2, -1.25)]);
        assert!(read_table_csv("0.1,-0.5\nx,y\n".as_bytes()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn f_u_nonpositive(a in 0.01f64..5.0, b in 0.0f64..5.0, c in 0.0f64..5.0, d in 0.0f64..5.0, m in 1e-4f64..5.0) {
            let p = prof(a, b, c, d);
            let f = eval_f_u(&p, m).unwrap();
            prop_assert!(f <= 0.0);
            prop_assert_eq!(f == 0.0, p.clamp_argument(m) <= 0.0);
        }

        #[test]
        fn g_lower_bound_in_small_mass_regime(
            a in 0.05f64..5.0, bf in 0.0f64..1.0, c in 0.05f64..5.0, df in 0.0f64..1.0, m in 1e-6f64..0.01,
        ) {
            let p = prof(a, bf * a, c, df * c);
            let g = eval_g_u(&p, m).unwrap();
            prop_assert!(g > g_lower_bound(&p, m));
            prop_assert!(g > 0.0);
        }
    }
}
