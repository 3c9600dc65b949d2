//! Synthetic particle and diffraction-pattern generation: superellipsoid
//! amplitudes, Gaussian-correlated phase fields, random 3D rotation, and the
//! forward model that turns a particle into a diffraction amplitude.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CxdiError, Result};
use crate::volume::{fft_forward, fft_inverse, modulus, ComplexVolume, DiffractionPattern, Grid3, RealVolume};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SuperellipsoidParams {
    /// Semi-axis bounds along x, y, z in voxels.
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Roundedness exponents.
    pub n: f64,
    pub e: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PhaseFieldParams {
    /// Correlation lengths in voxels.
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Row-major rotation matrix.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Uniform over SO(3): four standard normals, normalized.
    pub fn random(rng: &mut impl Rng) -> Self {
        loop {
            let q = Self {
                w: rng.sample(StandardNormal),
                x: rng.sample(StandardNormal),
                y: rng.sample(StandardNormal),
                z: rng.sample(StandardNormal),
            };
            let n = q.norm();
            if n > 1e-6 {
                return Self {
                    w: q.w / n,
                    x: q.x / n,
                    y: q.y / n,
                    z: q.z / n,
                };
            }
        }
    }
}

/// 0/1 indicator of the superellipsoid
/// ((|x/a|^(2/e) + |y/b|^(2/e))^(e/n) + |z/c|^(2/n)) <= 1,
/// offsets taken from the grid center.
pub fn superellipsoid_support(p: &SuperellipsoidParams, grid: Grid3) -> Result<RealVolume> {
    if p.a <= 0.0 || p.b <= 0.0 || p.c <= 0.0 || p.n <= 0.0 || p.e <= 0.0 {
        return Err(CxdiError::ParamsExceedGrid);
    }
    let budget = [grid.nx, grid.ny, grid.nz].map(|n| n as f64 / 4.0);
    if p.a > budget[0] || p.b > budget[1] || p.c > budget[2] {
        return Err(CxdiError::ParamsExceedGrid);
    }
    let (cx, cy, cz) = grid.center();
    let mut out = RealVolume::zeros(grid);
    for z in 0..grid.nz {
        let tz = ((z as f64 - cz as f64) / p.c).abs().powf(2.0 / p.n);
        for y in 0..grid.ny {
            let ty = ((y as f64 - cy as f64) / p.b).abs().powf(2.0 / p.e);
            for x in 0..grid.nx {
                let tx = ((x as f64 - cx as f64) / p.a).abs().powf(2.0 / p.e);
                let lhs = (tx + ty).powf(p.e / p.n) + tz;
                if lhs <= 1.0 {
                    out.data[grid.idx(x, y, z)] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// Gaussian-correlated phase field: white noise convolved (circularly, via
/// FFT) with the separable Gaussian kernel
/// sqrt(Lx Ly Lz)/pi^(3/4) * exp(-x^2/2Lx^2 - y^2/2Ly^2 - z^2/2Lz^2),
/// then rescaled to span exactly [0, 1] inside the support and zeroed outside.
pub fn gaussian_phase_field(p: &PhaseFieldParams, support: &RealVolume) -> Result<RealVolume> {
    let grid = support.grid;
    let n_inside = support.data.iter().filter(|&&v| v > 0.0).count();
    if n_inside < 2 {
        return Err(CxdiError::DegenerateSupport);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = ComplexVolume {
        grid,
        data: (0..grid.len())
            .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
            .collect(),
    };

    let (cx, cy, cz) = grid.center();
    let prefactor = (p.lx * p.ly * p.lz).sqrt() / std::f64::consts::PI.powf(0.75);
    let mut kernel = ComplexVolume::zeros(grid);
    for z in 0..grid.nz {
        let dz = z as f64 - cz as f64;
        for y in 0..grid.ny {
            let dy = y as f64 - cy as f64;
            for x in 0..grid.nx {
                let dx = x as f64 - cx as f64;
                let g = (-dx * dx / (2.0 * p.lx * p.lx)
                    - dy * dy / (2.0 * p.ly * p.ly)
                    - dz * dz / (2.0 * p.lz * p.lz))
                    .exp();
                kernel.data[grid.idx(x, y, z)] = Complex64::new(prefactor * g, 0.0);
            }
        }
    }

    let fn_ = fft_forward(&noise);
    let fk = fft_forward(&kernel);
    let product = ComplexVolume {
        grid,
        data: fn_
            .data
            .iter()
            .zip(&fk.data)
            .map(|(a, b)| a * b)
            .collect(),
    };
    let field = fft_inverse(&product);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (v, s) in field.data.iter().zip(&support.data) {
        if *s > 0.0 {
            lo = lo.min(v.re);
            hi = hi.max(v.re);
        }
    }
    if !(hi - lo).is_finite() || hi - lo <= 0.0 {
        return Err(CxdiError::DegenerateSupport);
    }
    let span = hi - lo;
    let data = field
        .data
        .iter()
        .zip(&support.data)
        .map(|(v, s)| if *s > 0.0 { (v.re - lo) / span } else { 0.0 })
        .collect();
    Ok(RealVolume { grid, data })
}

/// Resample a volume under the rotation `q` about the grid center with
/// trilinear interpolation; out-of-bounds source samples contribute zero.
pub fn random_rotation(v: &ComplexVolume, q: &Quaternion) -> Result<ComplexVolume> {
    if (q.norm() - 1.0).abs() > 1e-9 {
        return Err(CxdiError::NonUnitQuaternion);
    }
    let grid = v.grid;
    let m = q.matrix();
    // inverse rotation = transpose for the source lookup
    let inv = [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ];
    let (cx, cy, cz) = (
        grid.nx as f64 / 2.0,
        grid.ny as f64 / 2.0,
        grid.nz as f64 / 2.0,
    );
    let mut out = ComplexVolume::zeros(grid);
    for z in 0..grid.nz {
        let dz = z as f64 - cz;
        for y in 0..grid.ny {
            let dy = y as f64 - cy;
            for x in 0..grid.nx {
                let dx = x as f64 - cx;
                let sx = inv[0][0] * dx + inv[0][1] * dy + inv[0][2] * dz + cx;
                let sy = inv[1][0] * dx + inv[1][1] * dy + inv[1][2] * dz + cy;
                let sz = inv[2][0] * dx + inv[2][1] * dy + inv[2][2] * dz + cz;
                out.data[grid.idx(x, y, z)] = trilinear(v, sx, sy, sz);
            }
        }
    }
    Ok(out)
}

fn trilinear(v: &ComplexVolume, x: f64, y: f64, z: f64) -> Complex64 {
    let grid = v.grid;
    let x0 = x.floor();
    let y0 = y.floor();
    let z0 = z.floor();
    let (fx, fy, fz) = (x - x0, y - y0, z - z0);
    let mut acc = Complex64::new(0.0, 0.0);
    for dz in 0..2i64 {
        let zi = z0 as i64 + dz;
        if zi < 0 || zi >= grid.nz as i64 {
            continue;
        }
        let wz = if dz == 0 { 1.0 - fz } else { fz };
        for dy in 0..2i64 {
            let yi = y0 as i64 + dy;
            if yi < 0 || yi >= grid.ny as i64 {
                continue;
            }
            let wy = if dy == 0 { 1.0 - fy } else { fy };
            for dx in 0..2i64 {
                let xi = x0 as i64 + dx;
                if xi < 0 || xi >= grid.nx as i64 {
                    continue;
                }
                let wx = if dx == 0 { 1.0 - fx } else { fx };
                acc += v.data[grid.idx(xi as usize, yi as usize, zi as usize)] * (wx * wy * wz);
            }
        }
    }
    acc
}

/// True when every nonzero voxel lies in the central half-box per axis.
pub fn oversampled(v: &ComplexVolume) -> bool {
    let grid = v.grid;
    let (lx, hx) = (grid.nx / 4, 3 * grid.nx / 4);
    let (ly, hy) = (grid.ny / 4, 3 * grid.ny / 4);
    let (lz, hz) = (grid.nz / 4, 3 * grid.nz / 4);
    for z in 0..grid.nz {
        for y in 0..grid.ny {
            for x in 0..grid.nx {
                let inside =
                    (lx..hx).contains(&x) && (ly..hy).contains(&y) && (lz..hz).contains(&z);
                if !inside && v.data[grid.idx(x, y, z)].norm_sqr() != 0.0 {
                    return false;
                }
            }
        }
    }
    true
}

/// Forward model: keep only the amplitude of the Fourier transform.
pub fn synthesize_diffraction(particle: &ComplexVolume, tag: &str) -> Result<DiffractionPattern> {
    if !oversampled(particle) {
        return Err(CxdiError::OversamplingViolation);
    }
    let amplitude = modulus(&fft_forward(particle));
    Ok(DiffractionPattern::new(amplitude, tag))
}

/// Sampling ranges for the dataset generator. Defaults keep the oversampling
/// guard satisfied and produce visible faceting variety.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRanges {
    pub semi_axis: (f64, f64),
    pub roundedness: (f64, f64),
    pub correlation_length: (f64, f64),
    pub phi_scale: f64,
}

impl ParamRanges {
    pub fn defaults_for(grid: Grid3) -> Self {
        let g = grid.nx.min(grid.ny).min(grid.nz) as f64;
        Self {
            semi_axis: (g / 10.0, g / 4.5),
            roundedness: (0.4, 2.0),
            correlation_length: (2.0, 8.0),
            phi_scale: 1.0,
        }
    }
}

/// Everything needed to regenerate one sample, stored in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleParams {
    pub index: usize,
    pub shape: SuperellipsoidParams,
    pub phase: PhaseFieldParams,
    pub rotation: Quaternion,
    pub phi_scale: f64,
    pub split: String,
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub particle: ComplexVolume,
    pub pattern: DiffractionPattern,
    pub params: SampleParams,
}

/// Deterministic per-index RNG stream derived from (seed, index).
fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generate one sample. Pure function of (grid, ranges, seed, index), so
/// records can be produced concurrently and in any order.
pub fn generate_sample(
    grid: Grid3,
    ranges: &ParamRanges,
    seed: u64,
    index: usize,
    count: usize,
) -> Result<SampleRecord> {
    let mut rng = record_rng(seed, index);
    let (alo, ahi) = ranges.semi_axis;
    let (rlo, rhi) = ranges.roundedness;
    let (llo, lhi) = ranges.correlation_length;
    let shape = SuperellipsoidParams {
        a: rng.gen_range(alo..=ahi),
        b: rng.gen_range(alo..=ahi),
        c: rng.gen_range(alo..=ahi),
        n: rng.gen_range(rlo..=rhi),
        e: rng.gen_range(rlo..=rhi),
    };
    let phase = PhaseFieldParams {
        lx: rng.gen_range(llo..=lhi),
        ly: rng.gen_range(llo..=lhi),
        lz: rng.gen_range(llo..=lhi),
        seed: rng.gen(),
    };

    let support = superellipsoid_support(&shape, grid)?;
    let phi = gaussian_phase_field(&phase, &support)?;
    let rho = ComplexVolume {
        grid,
        data: support
            .data
            .iter()
            .zip(&phi.data)
            .map(|(s, p)| Complex64::from_polar(*s, ranges.phi_scale * p))
            .collect(),
    };

    // reject rotations that push the particle outside the central half-box;
    // the unrotated particle always fits, so this terminates
    let mut rotation = Quaternion::IDENTITY;
    let mut rotated = rho.clone();
    for _ in 0..64 {
        let q = Quaternion::random(&mut rng);
        let candidate = random_rotation(&rho, &q)?;
        if oversampled(&candidate) {
            rotation = q;
            rotated = candidate;
            break;
        }
    }

    let pattern = synthesize_diffraction(&rotated, &format!("synthetic seed={seed} index={index}"))?;
    // 95/5 train/validation split
    let split = if count >= 20 && index % 20 == 19 {
        "val"
    } else if count < 20 && index + 1 == count && count > 1 {
        "val"
    } else {
        "train"
    };
    Ok(SampleRecord {
        particle: rotated,
        pattern,
        params: SampleParams {
            index,
            shape,
            phase,
            rotation,
            phi_scale: ranges.phi_scale,
            split: split.to_string(),
        },
    })
}

/// Lazily generate the full corpus. Pure function of its arguments.
pub fn generate_dataset(
    grid: Grid3,
    ranges: ParamRanges,
    count: usize,
    seed: u64,
) -> impl Iterator<Item = Result<SampleRecord>> {
    (0..count).map(move |i| generate_sample(grid, &ranges, seed, i, count))
}
