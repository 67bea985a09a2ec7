//! Zero-padded 3D real FFT used for aperiodic convolutions.
//!
//! A field of `n = [nx, ny, nz]` nodes is embedded in the corner of a
//! padded box of `padded` nodes and transformed with a real-to-complex
//! FFT along z followed by complex FFTs along y and x. Passes that would
//! only touch padding zeros are skipped, and on the way back only the
//! field block is reconstructed.

use std::sync::Arc;

use rayon::prelude::*;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub struct PaddedTransform {
    n: [usize; 3],
    padded: [usize; 3],
    kz: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    fy: Arc<dyn Fft<f64>>,
    fy_inv: Arc<dyn Fft<f64>>,
    fx: Arc<dyn Fft<f64>>,
    fx_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PaddedTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PaddedTransform")
            .field("n", &self.n)
            .field("padded", &self.padded)
            .finish()
    }
}

impl PaddedTransform {
    pub fn new(n: [usize; 3], padded: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if padded[a] < 2 * n[a] {
                return Err(Error::Configuration(format!(
                    "padded extent {} on axis {a} is less than twice the field extent {}",
                    padded[a], n[a]
                )));
            }
        }
        let mut rp = RealFftPlanner::<f64>::new();
        let mut cp = FftPlanner::<f64>::new();
        Ok(PaddedTransform {
            n,
            padded,
            kz: padded[2] / 2 + 1,
            r2c: rp.plan_fft_forward(padded[2]),
            c2r: rp.plan_fft_inverse(padded[2]),
            fy: cp.plan_fft_forward(padded[1]),
            fy_inv: cp.plan_fft_inverse(padded[1]),
            fx: cp.plan_fft_forward(padded[0]),
            fx_inv: cp.plan_fft_inverse(padded[0]),
        })
    }

    pub fn field_dims(&self) -> [usize; 3] {
        self.n
    }

    pub fn padded_dims(&self) -> [usize; 3] {
        self.padded
    }

    /// Number of complex coefficients in a half spectrum.
    pub fn spectrum_len(&self) -> usize {
        self.padded[0] * self.padded[1] * self.kz
    }

    /// Signed integer frequency (or offset) of index `j` on an axis of length `len`.
    pub fn signed_index(j: usize, len: usize) -> isize {
        if j <= len / 2 {
            j as isize
        } else {
            j as isize - len as isize
        }
    }

    /// Calls `f(kx, ky, kz)` for every half-spectrum slot, with signed
    /// integer frequencies, returning the values in spectrum order.
    pub fn tabulate<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(isize, isize, isize) -> f64 + Sync,
    {
        let [px, py, _] = self.padded;
        let kzl = self.kz;
        (0..self.spectrum_len())
            .into_par_iter()
            .map(|i| {
                let kz = i % kzl;
                let r = i / kzl;
                let (ix, iy) = (r / py, r % py);
                f(Self::signed_index(ix, px), Self::signed_index(iy, py), kz as isize)
            })
            .collect()
    }

    /// Forward transform of a padded real array given in full padded layout.
    pub fn forward_padded(&self, data: &[f64]) -> Vec<Complex64> {
        let [px, py, pz] = self.padded;
        assert_eq!(data.len(), px * py * pz);
        self.forward_impl(px, py, |ix, iy, line| {
            let o = (ix * py + iy) * pz;
            line.copy_from_slice(&data[o..o + pz]);
        })
    }

    /// Forward transform of a field-sized array embedded at the corner.
    pub fn forward(&self, field: &[f64]) -> Vec<Complex64> {
        let [nx, ny, nz] = self.n;
        assert_eq!(field.len(), nx * ny * nz);
        self.forward_impl(nx, ny, |ix, iy, line| {
            let o = (ix * ny + iy) * nz;
            line[..nz].copy_from_slice(&field[o..o + nz]);
            line[nz..].iter_mut().for_each(|v| *v = 0.0);
        })
    }

    fn forward_impl<L>(&self, active_x: usize, active_y: usize, load: L) -> Vec<Complex64>
    where
        L: Fn(usize, usize, &mut [f64]) + Sync,
    {
        let [px, py, pz] = self.padded;
        let kzl = self.kz;
        let plane = py * kzl;
        let mut spec = vec![Complex64::new(0.0, 0.0); px * plane];

        // z (real-to-complex) then y, one x-plane at a time
        spec.par_chunks_mut(plane).enumerate().take(active_x).for_each(|(ix, pl)| {
            let mut line = vec![0.0; pz];
            let mut scratch = self.r2c.make_scratch_vec();
            for iy in 0..active_y {
                load(ix, iy, &mut line);
                let out = &mut pl[iy * kzl..(iy + 1) * kzl];
                self.r2c.process_with_scratch(&mut line, out, &mut scratch).expect("r2c length");
            }
            let mut col = vec![Complex64::new(0.0, 0.0); py];
            let mut cs = vec![Complex64::new(0.0, 0.0); self.fy.get_inplace_scratch_len()];
            for k in 0..kzl {
                for iy in 0..py {
                    col[iy] = pl[iy * kzl + k];
                }
                self.fy.process_with_scratch(&mut col, &mut cs);
                for iy in 0..py {
                    pl[iy * kzl + k] = col[iy];
                }
            }
        });

        self.x_pass(&mut spec, &self.fx, px);
        spec
    }

    /// Transforms along x for every (y, kz) pencil; writes back the first
    /// `keep_x` planes.
    fn x_pass(&self, spec: &mut [Complex64], fft: &Arc<dyn Fft<f64>>, keep_x: usize) {
        let [px, py, _] = self.padded;
        let kzl = self.kz;
        let plane = py * kzl;
        let src: &[Complex64] = spec;
        let pencils: Vec<Vec<Complex64>> = (0..py)
            .into_par_iter()
            .map(|iy| {
                let mut buf = vec![Complex64::new(0.0, 0.0); px * kzl];
                for ix in 0..px {
                    let o = ix * plane + iy * kzl;
                    for k in 0..kzl {
                        buf[k * px + ix] = src[o + k];
                    }
                }
                let mut cs = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
                for line in buf.chunks_exact_mut(px) {
                    fft.process_with_scratch(line, &mut cs);
                }
                buf
            })
            .collect();
        spec.par_chunks_mut(plane).enumerate().take(keep_x).for_each(|(ix, pl)| {
            for (iy, buf) in pencils.iter().enumerate() {
                for k in 0..kzl {
                    pl[iy * kzl + k] = buf[k * px + ix];
                }
            }
        });
    }

    /// Inverse transform, normalized, returning only the field block.
    pub fn inverse(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        let [nx, ny, nz] = self.n;
        let [px, py, pz] = self.padded;
        let kzl = self.kz;
        let plane = py * kzl;
        assert_eq!(spec.len(), self.spectrum_len());
        self.x_pass(&mut spec, &self.fx_inv, nx);
        let scale = 1.0 / (px * py * pz) as f64;
        let mut out = vec![0.0; nx * ny * nz];
        out.par_chunks_mut(ny * nz)
            .zip(spec.par_chunks_mut(plane))
            .for_each(|(dst, pl)| {
                let mut col = vec![Complex64::new(0.0, 0.0); py];
                let mut cs = vec![Complex64::new(0.0, 0.0); self.fy_inv.get_inplace_scratch_len()];
                for k in 0..kzl {
                    for iy in 0..py {
                        col[iy] = pl[iy * kzl + k];
                    }
                    self.fy_inv.process_with_scratch(&mut col, &mut cs);
                    for iy in 0..ny {
                        pl[iy * kzl + k] = col[iy];
                    }
                }
                let mut line = vec![0.0; pz];
                let mut scratch = self.c2r.make_scratch_vec();
                for iy in 0..ny {
                    let input = &mut pl[iy * kzl..(iy + 1) * kzl];
                    input[0].im = 0.0;
                    if pz % 2 == 0 {
                        input[kzl - 1].im = 0.0;
                    }
                    self.c2r.process_with_scratch(input, &mut line, &mut scratch).expect("c2r length");
                    for iz in 0..nz {
                        dst[iy * nz + iz] = line[iz] * scale;
                    }
                }
            });
        out
    }

    /// Aperiodic convolution-style filter: `inverse(forward(field) · symbol)`.
    pub fn apply_symbol(&self, field: &[f64], symbol: &[f64]) -> Vec<f64> {
        assert_eq!(symbol.len(), self.spectrum_len());
        let mut spec = self.forward(field);
        spec.par_iter_mut().zip(symbol.par_iter()).for_each(|(c, &s)| *c *= s);
        self.inverse(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rejects_short_padding() {
        assert!(PaddedTransform::new([8, 8, 8], [15, 16, 16]).is_err());
        assert!(PaddedTransform::new([8, 8, 8], [16, 16, 16]).is_ok());
    }

    #[test]
    fn identity_symbol_round_trips() {
        let n = [8, 9, 10];
        let t = PaddedTransform::new(n, [16, 18, 21]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let f: Vec<f64> = (0..n.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ones = vec![1.0; t.spectrum_len()];
        let back = t.apply_symbol(&f, &ones);
        for (a, b) in f.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_aperiodic_convolution() {
        let n = [8, 8, 9];
        let p = [16, 17, 18];
        let t = PaddedTransform::new(n, p).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let f: Vec<f64> = (0..n.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        // even kernel on offsets
        let kern = |d: [isize; 3]| 1.0 / (1.0 + (d[0] * d[0] + 2 * d[1] * d[1] + d[2] * d[2]) as f64);
        let mut kp = vec![0.0; p.iter().product()];
        for ix in 0..p[0] {
            for iy in 0..p[1] {
                for iz in 0..p[2] {
                    let d = [
                        PaddedTransform::signed_index(ix, p[0]),
                        PaddedTransform::signed_index(iy, p[1]),
                        PaddedTransform::signed_index(iz, p[2]),
                    ];
                    kp[(ix * p[1] + iy) * p[2] + iz] = kern(d);
                }
            }
        }
        let ks = t.forward_padded(&kp);
        let symbol: Vec<f64> = ks.iter().map(|c| c.re).collect();
        let fast = t.apply_symbol(&f, &symbol);
        let idx = |x: usize, y: usize, z: usize| (x * n[1] + y) * n[2] + z;
        for x in 0..n[0] {
            for y in 0..n[1] {
                for z in 0..n[2] {
                    let mut s = 0.0;
                    for a in 0..n[0] {
                        for b in 0..n[1] {
                            for c in 0..n[2] {
                                let d = [x as isize - a as isize, y as isize - b as isize, z as isize - c as isize];
                                s += kern(d) * f[idx(a, b, c)];
                            }
                        }
                    }
                    assert!((s - fast[idx(x, y, z)]).abs() < 1e-10, "{s} vs {}", fast[idx(x, y, z)]);
                }
            }
        }
    }
}
