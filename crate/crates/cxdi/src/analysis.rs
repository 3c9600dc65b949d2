//! Ambiguity-aware comparison against ground truth, ensemble repeatability
//! studies, FSW comparison, and Poisson-noise robustness experiments.
//!
//! The diffraction modulus is blind to integer translations, to the
//! conjugate-inverted twin, and to a global phase; `align_to_reference`
//! searches that group before any real-space score is computed.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::iterative::RunReport;
use crate::metrics::{fourier_spectral_weight, rel_l2, FswProfile};
use crate::volume::{fft_forward, fft_inverse, modulus, ComplexVolume, DiffractionPattern, RealVolume};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlignmentTransform {
    /// Circular integer voxel shift per axis, in [-n/2, n/2).
    pub translation: [i64; 3],
    /// Whether the conjugate-inverted twin was taken first.
    pub twin: bool,
    /// Global phase removed from the candidate, radians.
    pub phase_offset: f64,
}

/// Conjugate inversion through the center voxel: rho*(-r).
pub fn conjugate_invert(v: &ComplexVolume) -> ComplexVolume {
    let grid = v.grid;
    let mut out = ComplexVolume::zeros(grid);
    for z in 0..grid.nz {
        for y in 0..grid.ny {
            for x in 0..grid.nx {
                let src = grid.idx(
                    (grid.nx - x) % grid.nx,
                    (grid.ny - y) % grid.ny,
                    (grid.nz - z) % grid.nz,
                );
                out.data[grid.idx(x, y, z)] = v.data[src].conj();
            }
        }
    }
    out
}

/// Circular shift: out(r) = in(r - s).
pub fn circular_shift(v: &ComplexVolume, s: [i64; 3]) -> ComplexVolume {
    let grid = v.grid;
    let n = [grid.nx as i64, grid.ny as i64, grid.nz as i64];
    let wrap = |v: i64, n: i64| ((v % n) + n) % n;
    let mut out = ComplexVolume::zeros(grid);
    for z in 0..grid.nz {
        let sz = wrap(z as i64 - s[2], n[2]) as usize;
        for y in 0..grid.ny {
            let sy = wrap(y as i64 - s[1], n[1]) as usize;
            for x in 0..grid.nx {
                let sx = wrap(x as i64 - s[0], n[0]) as usize;
                out.data[grid.idx(x, y, z)] = v.data[grid.idx(sx, sy, sz)];
            }
        }
    }
    out
}

/// Best circular shift aligning |candidate| to |reference|, found at the peak
/// of the FFT cross-correlation of the amplitudes.
fn best_shift(candidate: &ComplexVolume, reference: &ComplexVolume) -> [i64; 3] {
    let grid = reference.grid;
    let to_amp = |v: &ComplexVolume| ComplexVolume {
        grid,
        data: v.data.iter().map(|c| Complex64::new(c.norm(), 0.0)).collect(),
    };
    let fr = fft_forward(&to_amp(reference));
    let fa = fft_forward(&to_amp(candidate));
    let corr = fft_inverse(&ComplexVolume {
        grid,
        data: fr.data.iter().zip(&fa.data).map(|(r, a)| r * a.conj()).collect(),
    });
    let mut best = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for (i, c) in corr.data.iter().enumerate() {
        if c.re > best_val {
            best_val = c.re;
            best = i;
        }
    }
    let (bx, by, bz) = (
        best % grid.nx,
        (best / grid.nx) % grid.ny,
        best / (grid.nx * grid.ny),
    );
    // the centered transforms leave the correlation rotated by half the grid
    let signed = |u: usize, n: usize| {
        let v = (u + n / 2) % n;
        let v = v as i64;
        if v >= n as i64 / 2 {
            v - n as i64
        } else {
            v
        }
    };
    [
        signed(bx, grid.nx),
        signed(by, grid.ny),
        signed(bz, grid.nz),
    ]
}

/// Remove the trivial ambiguities: search {identity, twin} x integer
/// translations x global phase, minimizing amplitude rel_l2 against the
/// reference (phase rel_l2 breaks ties). The identity transform is always a
/// candidate, so alignment never makes the amplitude score worse.
pub fn align_to_reference(
    candidate: &ComplexVolume,
    reference: &ComplexVolume,
) -> (ComplexVolume, AlignmentTransform) {
    let ref_amp = modulus(reference);
    let score = |v: &ComplexVolume| rel_l2(&modulus(v), &ref_amp).unwrap_or(f64::INFINITY);

    let mut candidates: Vec<(ComplexVolume, AlignmentTransform)> = Vec::new();
    candidates.push((
        candidate.clone(),
        AlignmentTransform {
            translation: [0, 0, 0],
            twin: false,
            phase_offset: 0.0,
        },
    ));
    for twin in [false, true] {
        let base = if twin {
            conjugate_invert(candidate)
        } else {
            candidate.clone()
        };
        let s = best_shift(&base, reference);
        let shifted = circular_shift(&base, s);
        // `s` undoes the displacement; report the displacement itself
        candidates.push((
            shifted,
            AlignmentTransform {
                translation: [-s[0], -s[1], -s[2]],
                twin,
                phase_offset: 0.0,
            },
        ));
    }

    let ref_norm = reference.energy().sqrt().max(1e-300);
    let mut best: Option<(f64, f64, ComplexVolume, AlignmentTransform)> = None;
    for (shifted, mut t) in candidates {
        // global phase: sum of conj(ref) * candidate over the joint support
        let inner: Complex64 = reference
            .data
            .iter()
            .zip(&shifted.data)
            .map(|(r, c)| r.conj() * c)
            .sum();
        let offset = if inner.norm() > 0.0 { inner.arg() } else { 0.0 };
        let rot = Complex64::from_polar(1.0, -offset);
        let aligned = ComplexVolume {
            grid: shifted.grid,
            data: shifted.data.iter().map(|c| c * rot).collect(),
        };
        t.phase_offset = offset;
        let s = score(&aligned);
        // tie-break amplitude-equal candidates (e.g. centro-symmetric
        // moduli) by the full complex residual, which sees the phases
        let residual: f64 = aligned
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
            / ref_norm;
        let better = match &best {
            None => true,
            Some((bs, br, _, _)) => s < *bs - 1e-12 || ((s - *bs).abs() <= 1e-12 && residual < *br),
        };
        if better {
            best = Some((s, residual, aligned, t));
        }
    }
    let (_, _, aligned, t) = best.unwrap();
    (aligned, t)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub ok: bool,
    pub chi2: Option<f64>,
    pub rp: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub histogram_edges: Vec<f64>,
    pub histogram_counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub runs: Vec<RunOutcome>,
    pub failures: usize,
    pub chi2: MetricSummary,
    pub rp: MetricSummary,
}

/// 30 uniform bins spanning mean +/- 4 sigma.
fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n.max(1.0);
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1.0);
    let std = var.sqrt();
    let span = if std > 0.0 { 4.0 * std } else { mean.abs().max(1e-12) };
    let (lo, hi) = (mean - span, mean + span);
    let bins = 30usize;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as isize).clamp(0, bins as isize - 1) as usize;
        counts[b] += 1;
    }
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    MetricSummary {
        mean,
        std,
        histogram_edges: edges,
        histogram_counts: counts,
    }
}

/// Execute `runs` independent reconstructions with seeds base_seed + i and
/// aggregate their reciprocal-space chi2 and modified r_p. Failed runs are
/// recorded and excluded from the statistics.
pub fn ensemble_run(
    runs: usize,
    base_seed: u64,
    jobs: Option<usize>,
    runner: impl Fn(u64) -> Result<RunReport> + Sync,
) -> EnsembleReport {
    let seeds: Vec<u64> = (0..runs as u64).map(|i| base_seed + i).collect();
    let execute = |seed: &u64| -> RunOutcome {
        match runner(*seed) {
            Ok(report) => RunOutcome {
                seed: *seed,
                ok: true,
                chi2: Some(report.final_chi2),
                rp: Some(report.final_rp),
                error: None,
            },
            Err(e) => RunOutcome {
                seed: *seed,
                ok: false,
                chi2: None,
                rp: None,
                error: Some(e.to_string()),
            },
        }
    };
    let outcomes: Vec<RunOutcome> = match jobs {
        Some(1) => seeds.iter().map(execute).collect(),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .expect("thread pool");
            pool.install(|| seeds.par_iter().map(execute).collect())
        }
        None => seeds.par_iter().map(execute).collect(),
    };
    let failures = outcomes.iter().filter(|o| !o.ok).count();
    let chi2_vals: Vec<f64> = outcomes.iter().filter_map(|o| o.chi2).collect();
    let rp_vals: Vec<f64> = outcomes.iter().filter_map(|o| o.rp).collect();
    EnsembleReport {
        runs: outcomes,
        failures,
        chi2: summarize(&chi2_vals),
        rp: summarize(&rp_vals),
    }
}

/// Per-shell relative FSW difference: |FSW_a - FSW_b| / max(FSW_a, tiny).
pub fn compare_fsw(a: &DiffractionPattern, b: &DiffractionPattern, n_shells: usize) -> Vec<f64> {
    let fa = fourier_spectral_weight(a, n_shells);
    let fb = fourier_spectral_weight(b, n_shells);
    fsw_relative_difference(&fa, &fb)
}

pub fn fsw_relative_difference(fa: &FswProfile, fb: &FswProfile) -> Vec<f64> {
    const TINY: f64 = 1e-12;
    fa.weights
        .iter()
        .zip(&fb.weights)
        .map(|(a, b)| (a - b).abs() / a.max(TINY))
        .collect()
}

/// Rescale the intensity to a total photon budget, draw Poisson counts per
/// voxel, and return the square-root counts rescaled back. Deterministic for
/// a given seed.
pub fn add_poisson_noise(
    pattern: &DiffractionPattern,
    photon_budget: f64,
    seed: u64,
) -> DiffractionPattern {
    let total_i: f64 = pattern.amplitude.data.iter().map(|a| a * a).sum();
    let scale = photon_budget / total_i;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = pattern
        .amplitude
        .data
        .iter()
        .map(|a| {
            let lam = a * a * scale;
            if lam <= 0.0 {
                return 0.0;
            }
            let counts = Poisson::new(lam).map(|p| p.sample(&mut rng)).unwrap_or(0.0);
            (counts / scale).sqrt()
        })
        .collect();
    DiffractionPattern {
        grid: pattern.grid,
        amplitude: RealVolume {
            grid: pattern.grid,
            data,
        },
        centered: true,
        source_tag: format!("{} + poisson({photon_budget})", pattern.source_tag),
    }
}
