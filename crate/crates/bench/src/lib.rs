//! Shared fixtures for the benchmarks.

use tfdw_core::{Field, GridSpec};

/// Off-centre Gaussian of unit peak on an `n³` grid of box 16.
pub fn gaussian(n: usize) -> Field {
    let g = GridSpec::centered(n, 16.0).expect("valid grid");
    Field::from_fn(g, |x| (-(x[0] - 0.3).powi(2) / 4.0 - x[1] * x[1] / 3.0 - (x[2] + 0.2).powi(2) / 5.0).exp())
}
