//! Core 3D volume types and the centered FFT shared by every other module.
//!
//! Conventions, fixed once for the whole crate:
//! - layout is row-major with x fastest: `idx = x + nx*(y + ny*z)`
//! - forward FFT is unnormalized, inverse carries the 1/N factor
//! - both real and reciprocal space store their origin at the center voxel
//!   `(nx/2, ny/2, nz/2)`; centering is realized by index rotation around an
//!   uncentered transform (fftshift semantics)

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{CxdiError, Result};

/// Voxel counts per axis. All axes must be even and at least 4 so that
/// half-size support boxes and 2x pooling stay exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Grid3 {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        let ok = |n: usize| n >= 4 && n % 2 == 0;
        if ok(nx) && ok(ny) && ok(nz) {
            Ok(Self { nx, ny, nz })
        } else {
            Err(CxdiError::BadGrid([nx, ny, nz]))
        }
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    /// Center voxel, the shared real/reciprocal-space origin.
    #[inline]
    pub fn center(&self) -> (usize, usize, usize) {
        (self.nx / 2, self.ny / 2, self.nz / 2)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    /// Grid with every axis halved (used for support boxes and network outputs).
    pub fn half(&self) -> Result<Self> {
        Self::new(self.nx / 2, self.ny / 2, self.nz / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVolume {
    pub grid: Grid3,
    pub data: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealVolume {
    pub grid: Grid3,
    pub data: Vec<f64>,
}

/// Measured or synthetic diffraction amplitudes sqrt(I(Q)), DC at the center voxel.
#[derive(Debug, Clone)]
pub struct DiffractionPattern {
    pub grid: Grid3,
    pub amplitude: RealVolume,
    pub centered: bool,
    pub source_tag: String,
}

impl ComplexVolume {
    pub fn zeros(grid: Grid3) -> Self {
        Self {
            grid,
            data: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_data(grid: Grid3, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(CxdiError::DimensionMismatch {
                expected: grid.len(),
                actual: data.len(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

impl RealVolume {
    pub fn zeros(grid: Grid3) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn from_data(grid: Grid3, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(CxdiError::DimensionMismatch {
                expected: grid.len(),
                actual: data.len(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

impl DiffractionPattern {
    pub fn new(amplitude: RealVolume, source_tag: impl Into<String>) -> Self {
        Self {
            grid: amplitude.grid,
            amplitude,
            centered: true,
            source_tag: source_tag.into(),
        }
    }
}

/// Rotate each axis by half its length. For even grids this is an involution,
/// so the same routine serves as both fftshift and its inverse.
fn shift_half(v: &[Complex64], grid: Grid3) -> Vec<Complex64> {
    let (nx, ny, nz) = (grid.nx, grid.ny, grid.nz);
    let (cx, cy, cz) = (nx / 2, ny / 2, nz / 2);
    let mut out = vec![Complex64::new(0.0, 0.0); v.len()];
    for z in 0..nz {
        let sz = (z + cz) % nz;
        for y in 0..ny {
            let sy = (y + cy) % ny;
            let dst_row = grid.idx(0, y, z);
            let src_row = grid.idx(0, sy, sz);
            for x in 0..nx {
                out[dst_row + x] = v[src_row + (x + cx) % nx];
            }
        }
    }
    out
}

/// Uncentered in-place 3D FFT along all three axes.
fn fft3_raw(data: &mut [Complex64], grid: Grid3, inverse: bool) {
    let (nx, ny, nz) = (grid.nx, grid.ny, grid.nz);
    let mut planner = FftPlanner::new();
    let plan = |n: usize, planner: &mut FftPlanner<f64>| {
        if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        }
    };

    // x axis: rows are contiguous
    let fx = plan(nx, &mut planner);
    for row in data.chunks_exact_mut(nx) {
        fx.process(row);
    }

    // y axis
    let fy = plan(ny, &mut planner);
    let mut scratch = vec![Complex64::new(0.0, 0.0); ny];
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                scratch[y] = data[grid.idx(x, y, z)];
            }
            fy.process(&mut scratch);
            for y in 0..ny {
                data[grid.idx(x, y, z)] = scratch[y];
            }
        }
    }

    // z axis
    let fz = plan(nz, &mut planner);
    let mut scratch = vec![Complex64::new(0.0, 0.0); nz];
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                scratch[z] = data[grid.idx(x, y, z)];
            }
            fz.process(&mut scratch);
            for z in 0..nz {
                data[grid.idx(x, y, z)] = scratch[z];
            }
        }
    }
}

/// Centered forward FFT: origin at the center voxel on both sides,
/// unnormalized.
pub fn fft_forward(v: &ComplexVolume) -> ComplexVolume {
    let mut data = shift_half(&v.data, v.grid);
    fft3_raw(&mut data, v.grid, false);
    let data = shift_half(&data, v.grid);
    ComplexVolume { grid: v.grid, data }
}

/// Centered inverse FFT carrying the 1/N normalization, so that
/// `fft_inverse(fft_forward(v)) == v` up to roundoff.
pub fn fft_inverse(v: &ComplexVolume) -> ComplexVolume {
    let mut data = shift_half(&v.data, v.grid);
    fft3_raw(&mut data, v.grid, true);
    let n = v.grid.len() as f64;
    for c in data.iter_mut() {
        *c /= n;
    }
    let data = shift_half(&data, v.grid);
    ComplexVolume { grid: v.grid, data }
}

/// Element-wise modulus.
pub fn modulus(v: &ComplexVolume) -> RealVolume {
    RealVolume {
        grid: v.grid,
        data: v.data.iter().map(|c| c.norm()).collect(),
    }
}

/// Place `v` centrally inside a larger grid, zeros elsewhere.
/// Preserves the total energy exactly.
pub fn zero_pad_center(v: &ComplexVolume, target: Grid3) -> Result<ComplexVolume> {
    let s = v.grid;
    if target.nx < s.nx || target.ny < s.ny || target.nz < s.nz {
        return Err(CxdiError::TargetTooSmall {
            source_dims: s.dims(),
            target: target.dims(),
        });
    }
    let (ox, oy, oz) = (
        (target.nx - s.nx) / 2,
        (target.ny - s.ny) / 2,
        (target.nz - s.nz) / 2,
    );
    let mut out = ComplexVolume::zeros(target);
    for z in 0..s.nz {
        for y in 0..s.ny {
            let src = s.idx(0, y, z);
            let dst = target.idx(ox, oy + y, oz + z);
            out.data[dst..dst + s.nx].copy_from_slice(&v.data[src..src + s.nx]);
        }
    }
    Ok(out)
}

/// Adjoint of `zero_pad_center`: crop the central block of size `target`.
pub fn crop_center(v: &ComplexVolume, target: Grid3) -> Result<ComplexVolume> {
    let s = v.grid;
    if target.nx > s.nx || target.ny > s.ny || target.nz > s.nz {
        return Err(CxdiError::TargetTooSmall {
            source_dims: s.dims(),
            target: target.dims(),
        });
    }
    let (ox, oy, oz) = (
        (s.nx - target.nx) / 2,
        (s.ny - target.ny) / 2,
        (s.nz - target.nz) / 2,
    );
    let mut out = ComplexVolume::zeros(target);
    for z in 0..target.nz {
        for y in 0..target.ny {
            let src = s.idx(ox, oy + y, oz + z);
            let dst = target.idx(0, y, z);
            out.data[dst..dst + target.nx].copy_from_slice(&v.data[src..src + target.nx]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(grid: Grid3, seed: u64) -> ComplexVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..grid.len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        ComplexVolume { grid, data }
    }

    #[test]
    fn grid_rejects_odd_or_tiny_axes() {
        assert!(Grid3::new(4, 4, 4).is_ok());
        assert!(Grid3::new(3, 4, 4).is_err());
        assert!(Grid3::new(4, 5, 4).is_err());
        assert!(Grid3::new(2, 4, 4).is_err());
    }

    #[test]
    fn delta_at_center_transforms_to_unit_modulus() {
        let grid = Grid3::cube(8).unwrap();
        let mut v = ComplexVolume::zeros(grid);
        let (cx, cy, cz) = grid.center();
        v.data[grid.idx(cx, cy, cz)] = Complex64::new(1.0, 0.0);
        let f = fft_forward(&v);
        for c in &f.data {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_round_trip() {
        let grid = Grid3::cube(16).unwrap();
        let v = random_volume(grid, 1);
        let back = fft_inverse(&fft_forward(&v));
        let num: f64 = v
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        let den: f64 = v.energy();
        assert!((num / den).sqrt() < 1e-12);
    }

    #[test]
    fn parseval() {
        let grid = Grid3::cube(8).unwrap();
        let v = random_volume(grid, 2);
        let f = fft_forward(&v);
        let real = v.energy();
        let recip = f.energy() / grid.len() as f64;
        assert!((real - recip).abs() <= 1e-9 * real);
    }

    #[test]
    fn centro_symmetric_real_volume_has_symmetric_modulus() {
        let grid = Grid3::cube(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = ComplexVolume::zeros(grid);
        // symmetrize a random real volume about the center voxel
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let val = rng.gen_range(0.0..1.0);
                    let (rx, ry, rz) = ((8 - x) % 8, (8 - y) % 8, (8 - z) % 8);
                    v.data[grid.idx(x, y, z)] += Complex64::new(val, 0.0);
                    v.data[grid.idx(rx, ry, rz)] += Complex64::new(val, 0.0);
                }
            }
        }
        let m = modulus(&fft_forward(&v));
        let peak = m.data.iter().cloned().fold(0.0, f64::max);
        for z in 0..8usize {
            for y in 0..8usize {
                for x in 0..8usize {
                    let r = m.data[grid.idx((8 - x) % 8, (8 - y) % 8, (8 - z) % 8)];
                    assert!((m.data[grid.idx(x, y, z)] - r).abs() <= 1e-9 * peak);
                }
            }
        }
    }

    #[test]
    fn modulus_of_three_four() {
        let grid = Grid3::cube(4).unwrap();
        let mut v = ComplexVolume::zeros(grid);
        v.data[0] = Complex64::new(3.0, 4.0);
        let m = modulus(&v);
        assert_eq!(m.data[0], 5.0);
        assert!(m.data[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_pad_preserves_energy_and_centers_block() {
        let src = Grid3::cube(4).unwrap();
        let dst = Grid3::cube(8).unwrap();
        let v = random_volume(src, 4);
        let p = zero_pad_center(&v, dst).unwrap();
        assert_eq!(p.energy(), v.energy());
        // central block matches, ring of zeros outside
        for z in 0..8usize {
            for y in 0..8usize {
                for x in 0..8usize {
                    let inside = (2..6).contains(&x) && (2..6).contains(&y) && (2..6).contains(&z);
                    let val = p.data[dst.idx(x, y, z)];
                    if inside {
                        assert_eq!(val, v.data[src.idx(x - 2, y - 2, z - 2)]);
                    } else {
                        assert_eq!(val, Complex64::new(0.0, 0.0));
                    }
                }
            }
        }
        // identity when target = source
        let same = zero_pad_center(&v, src).unwrap();
        assert_eq!(same.data, v.data);
        // crop is the exact inverse
        let back = crop_center(&p, src).unwrap();
        assert_eq!(back.data, v.data);
    }

    #[test]
    fn zero_pad_rejects_small_target() {
        let v = ComplexVolume::zeros(Grid3::cube(8).unwrap());
        let err = zero_pad_center(&v, Grid3::cube(4).unwrap());
        assert!(matches!(err, Err(CxdiError::TargetTooSmall { .. })));
    }
}
