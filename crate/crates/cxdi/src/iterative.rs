//! Conventional projection-based phase retrieval: error reduction, hybrid
//! input-output, shrink-wrap support updates, and the standard 2000-iteration
//! schedule (50 ER head, alternating HIO beta=0.9 / ER blocks of 50,
//! shrink-wrap every 10 iterations after 100, 100 ER tail).

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CxdiError, Result};
use crate::metrics::{chi2_loss, fourier_spectral_weight, FswProfile};
use crate::volume::{
    fft_forward, fft_inverse, modulus, ComplexVolume, DiffractionPattern, Grid3, RealVolume,
};

#[derive(Debug, Clone)]
pub struct SupportMask {
    pub grid: Grid3,
    pub mask: Vec<bool>,
}

impl SupportMask {
    /// Centered box covering half the grid per axis, the standard initial
    /// support.
    pub fn centered_half_box(grid: Grid3) -> Self {
        let mut mask = vec![false; grid.len()];
        let (lx, hx) = (grid.nx / 4, 3 * grid.nx / 4);
        let (ly, hy) = (grid.ny / 4, 3 * grid.ny / 4);
        let (lz, hz) = (grid.nz / 4, 3 * grid.nz / 4);
        for z in lz..hz {
            for y in ly..hy {
                for x in lx..hx {
                    mask[grid.idx(x, y, z)] = true;
                }
            }
        }
        Self { grid, mask }
    }

    pub fn voxel_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructionState {
    pub estimate: ComplexVolume,
    pub support: SupportMask,
    pub iteration: usize,
    /// (iteration, chi-square) pairs, one per projection step.
    pub error_trace: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterativeSchedule {
    pub total_iters: usize,
    pub er_head: usize,
    pub block_len: usize,
    pub hio_beta: f64,
    pub shrinkwrap_start: usize,
    pub shrinkwrap_every: usize,
    pub er_tail: usize,
    pub sigma0: f64,
    pub sigma_decay: f64,
    pub sigma_min: f64,
    pub threshold: f64,
}

impl Default for IterativeSchedule {
    fn default() -> Self {
        Self {
            total_iters: 2000,
            er_head: 50,
            block_len: 50,
            hio_beta: 0.9,
            shrinkwrap_start: 100,
            shrinkwrap_every: 10,
            er_tail: 100,
            sigma0: 3.0,
            sigma_decay: 0.99,
            sigma_min: 1.5,
            threshold: 0.2,
        }
    }
}

/// Per-run result, the unit of ensemble statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub final_chi2: f64,
    pub final_rp: f64,
    pub loss_trace: Vec<(usize, f64)>,
    pub fsw: FswProfile,
    pub alignment: Option<crate::analysis::AlignmentTransform>,
}

/// Project onto the Fourier-modulus constraint set: replace |F| with the
/// measured amplitude, keeping the phase. Zero-modulus voxels adopt phase 0.
pub fn modulus_projection(rho: &ComplexVolume, pattern: &DiffractionPattern) -> ComplexVolume {
    let f = fft_forward(rho);
    let data = f
        .data
        .iter()
        .zip(&pattern.amplitude.data)
        .map(|(c, a)| {
            let m = c.norm();
            if m > 0.0 {
                c * (a / m)
            } else {
                Complex64::new(*a, 0.0)
            }
        })
        .collect();
    fft_inverse(&ComplexVolume {
        grid: f.grid,
        data,
    })
}

fn record_error(state: &mut ReconstructionState, pattern: &DiffractionPattern) {
    let amp = modulus(&fft_forward(&state.estimate));
    let chi2 = chi2_loss(&amp, &pattern.amplitude).unwrap_or(f64::NAN);
    state.error_trace.push((state.iteration, chi2));
}

/// One error-reduction step: support projection after modulus projection.
pub fn er_step(state: &mut ReconstructionState, pattern: &DiffractionPattern) {
    let y = modulus_projection(&state.estimate, pattern);
    for (i, v) in state.estimate.data.iter_mut().enumerate() {
        *v = if state.support.mask[i] {
            y.data[i]
        } else {
            Complex64::new(0.0, 0.0)
        };
    }
    state.iteration += 1;
    record_error(state, pattern);
}

/// One hybrid input-output step: inside the support take the modulus-projected
/// output; outside, feed back estimate - beta * output.
pub fn hio_step(state: &mut ReconstructionState, pattern: &DiffractionPattern, beta: f64) {
    let y = modulus_projection(&state.estimate, pattern);
    for (i, v) in state.estimate.data.iter_mut().enumerate() {
        *v = if state.support.mask[i] {
            y.data[i]
        } else {
            *v - y.data[i] * beta
        };
    }
    state.iteration += 1;
    record_error(state, pattern);
}

/// Shrink-wrap: threshold the Gaussian-blurred amplitude at a fraction of its
/// peak. Blur is circular, via FFT.
pub fn shrinkwrap_update(
    estimate: &ComplexVolume,
    sigma: f64,
    threshold: f64,
) -> Result<SupportMask> {
    let grid = estimate.grid;
    let amp = ComplexVolume {
        grid,
        data: estimate
            .data
            .iter()
            .map(|c| Complex64::new(c.norm(), 0.0))
            .collect(),
    };
    let (cx, cy, cz) = grid.center();
    let mut kernel = ComplexVolume::zeros(grid);
    let mut ksum = 0.0;
    for z in 0..grid.nz {
        let dz = z as f64 - cz as f64;
        for y in 0..grid.ny {
            let dy = y as f64 - cy as f64;
            for x in 0..grid.nx {
                let dx = x as f64 - cx as f64;
                let g = (-(dx * dx + dy * dy + dz * dz) / (2.0 * sigma * sigma)).exp();
                kernel.data[grid.idx(x, y, z)] = Complex64::new(g, 0.0);
                ksum += g;
            }
        }
    }
    for k in kernel.data.iter_mut() {
        *k /= ksum;
    }
    let fa = fft_forward(&amp);
    let fk = fft_forward(&kernel);
    let blurred = fft_inverse(&ComplexVolume {
        grid,
        data: fa.data.iter().zip(&fk.data).map(|(a, b)| a * b).collect(),
    });
    let peak = blurred.data.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max);
    let cut = threshold * peak;
    let mask: Vec<bool> = blurred.data.iter().map(|c| c.re >= cut).collect();
    if !mask.iter().any(|&m| m) {
        return Err(CxdiError::EmptySupport);
    }
    Ok(SupportMask { grid, mask })
}

/// Phase of the algorithm at a given 1-based iteration index.
fn is_er_iteration(iter: usize, s: &IterativeSchedule) -> bool {
    if iter <= s.er_head {
        return true;
    }
    if iter > s.total_iters - s.er_tail {
        return true;
    }
    // alternating blocks, HIO first
    let offset = iter - s.er_head - 1;
    (offset / s.block_len) % 2 == 1
}

/// Run the full schedule from a seeded random-phase start.
pub fn run_schedule(
    pattern: &DiffractionPattern,
    schedule: &IterativeSchedule,
    seed: u64,
) -> Result<(ReconstructionState, RunReport)> {
    let grid = pattern.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // initial estimate: inverse transform of the measured amplitude with
    // uniform random phases in [-pi, pi]
    let field = ComplexVolume {
        grid,
        data: pattern
            .amplitude
            .data
            .iter()
            .map(|a| Complex64::from_polar(*a, rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)))
            .collect(),
    };
    let estimate = fft_inverse(&field);
    let mut state = ReconstructionState {
        estimate,
        support: SupportMask::centered_half_box(grid),
        iteration: 0,
        error_trace: Vec::with_capacity(schedule.total_iters),
    };

    let mut sigma = schedule.sigma0;
    for iter in 1..=schedule.total_iters {
        if iter > schedule.shrinkwrap_start && iter % schedule.shrinkwrap_every == 0 {
            state.support = shrinkwrap_update(&state.estimate, sigma, schedule.threshold)?;
            sigma = (sigma * schedule.sigma_decay).max(schedule.sigma_min);
        }
        if is_er_iteration(iter, schedule) {
            er_step(&mut state, pattern);
        } else {
            hio_step(&mut state, pattern, schedule.hio_beta);
        }
        if !state.estimate.is_finite() {
            return Err(CxdiError::NonFiniteState(iter));
        }
    }

    let amp = modulus(&fft_forward(&state.estimate));
    let final_chi2 = chi2_loss(&amp, &pattern.amplitude)?;
    let final_rp = 1.0
        - crate::metrics::pearson_loss(&amp, &pattern.amplitude)
            .unwrap_or(1.0);
    let fsw = fourier_spectral_weight(
        &DiffractionPattern::new(amp, "reconstructed"),
        grid.nx.min(grid.ny).min(grid.nz) / 2,
    );
    let report = RunReport {
        seed,
        final_chi2,
        final_rp,
        loss_trace: state.error_trace.clone(),
        fsw,
        alignment: None,
    };
    Ok((state, report))
}

/// Amplitude of the reconstruction restricted to its support, as a real
/// volume (used for scoring against ground truth).
pub fn estimate_amplitude(state: &ReconstructionState) -> RealVolume {
    modulus(&state.estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{superellipsoid_support, synthesize_diffraction, SuperellipsoidParams};
    use rand::Rng;

    fn test_pattern(n: usize) -> (ComplexVolume, DiffractionPattern) {
        let grid = Grid3::cube(n).unwrap();
        let shape = SuperellipsoidParams {
            a: n as f64 / 6.0,
            b: n as f64 / 7.0,
            c: n as f64 / 5.5,
            n: 1.0,
            e: 1.0,
        };
        let s = superellipsoid_support(&shape, grid).unwrap();
        let rho = ComplexVolume {
            grid,
            data: s.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        };
        let pat = synthesize_diffraction(&rho, "test").unwrap();
        (rho, pat)
    }

    #[test]
    fn modulus_projection_is_idempotent_and_exact() {
        let (rho, pat) = test_pattern(16);
        // consistent input is a fixed point
        let p1 = modulus_projection(&rho, &pat);
        let diff: f64 = p1
            .data
            .iter()
            .zip(&rho.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-10 * rho.energy().sqrt());

        // random input: projection enforces the amplitude exactly and twice = once
        let grid = pat.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rand_v = ComplexVolume {
            grid,
            data: (0..grid.len())
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        };
        let once = modulus_projection(&rand_v, &pat);
        let amp = modulus(&fft_forward(&once));
        let scale: f64 = pat.amplitude.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err: f64 = amp
            .data
            .iter()
            .zip(&pat.amplitude.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-10 * scale);
        let twice = modulus_projection(&once, &pat);
        let dd: f64 = twice
            .data
            .iter()
            .zip(&once.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(dd <= 1e-10 * once.energy().sqrt());
    }

    #[test]
    fn zero_amplitude_projects_to_zero() {
        let grid = Grid3::cube(8).unwrap();
        let pat = DiffractionPattern::new(RealVolume::zeros(grid), "z");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = ComplexVolume {
            grid,
            data: (0..grid.len())
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0))
                .collect(),
        };
        let p = modulus_projection(&v, &pat);
        assert!(p.data.iter().all(|c| c.norm() < 1e-14));
    }

    #[test]
    fn er_zeroes_outside_support() {
        let (_, pat) = test_pattern(16);
        let grid = pat.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = ReconstructionState {
            estimate: ComplexVolume {
                grid,
                data: (0..grid.len())
                    .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect(),
            },
            support: SupportMask::centered_half_box(grid),
            iteration: 0,
            error_trace: vec![],
        };
        er_step(&mut state, &pat);
        for (v, m) in state.estimate.data.iter().zip(&state.support.mask) {
            if !m {
                assert_eq!(*v, Complex64::new(0.0, 0.0));
            }
        }
        assert_eq!(state.iteration, 1);
        assert_eq!(state.error_trace.len(), 1);
    }

    #[test]
    fn hio_inside_support_matches_projection() {
        let (_, pat) = test_pattern(16);
        let grid = pat.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = ComplexVolume {
            grid,
            data: (0..grid.len())
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        };
        let y = modulus_projection(&est, &pat);
        let mut state = ReconstructionState {
            estimate: est.clone(),
            support: SupportMask::centered_half_box(grid),
            iteration: 0,
            error_trace: vec![],
        };
        hio_step(&mut state, &pat, 0.9);
        for i in 0..grid.len() {
            if state.support.mask[i] {
                assert_eq!(state.estimate.data[i], y.data[i]);
            } else {
                let expect = est.data[i] - y.data[i] * 0.9;
                assert!((state.estimate.data[i] - expect).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn shrinkwrap_constant_amplitude_keeps_whole_grid() {
        let grid = Grid3::cube(8).unwrap();
        let v = ComplexVolume {
            grid,
            data: vec![Complex64::new(1.0, 0.0); grid.len()],
        };
        let m = shrinkwrap_update(&v, 1.0, 0.2).unwrap();
        assert_eq!(m.voxel_count(), grid.len());
    }

    #[test]
    fn shrinkwrap_isolated_voxel_gives_blurred_blob() {
        let grid = Grid3::cube(16).unwrap();
        let mut v = ComplexVolume::zeros(grid);
        let (cx, cy, cz) = grid.center();
        v.data[grid.idx(cx, cy, cz)] = Complex64::new(1.0, 0.0);
        let sigma = 1.0;
        let m = shrinkwrap_update(&v, sigma, 0.2).unwrap();
        // blurred delta = Gaussian; above 20% of peak means r^2 <= 2 sigma^2 ln 5
        let r2_cut = 2.0 * sigma * sigma * 5.0f64.ln();
        for z in 0..grid.nz {
            for y in 0..grid.ny {
                for x in 0..grid.nx {
                    let r2 = ((x as f64 - cx as f64).powi(2)
                        + (y as f64 - cy as f64).powi(2)
                        + (z as f64 - cz as f64).powi(2)) as f64;
                    let expected = r2 <= r2_cut + 1e-9;
                    assert_eq!(
                        m.mask[grid.idx(x, y, z)],
                        expected,
                        "voxel ({x},{y},{z}) r2={r2}"
                    );
                }
            }
        }
        // threshold near 1 shrinks to the peak voxel
        let tight = shrinkwrap_update(&v, sigma, 0.999).unwrap();
        assert_eq!(tight.voxel_count(), 1);
        assert!(tight.mask[grid.idx(cx, cy, cz)]);
    }

    #[test]
    fn schedule_phase_layout_matches_recipe() {
        let s = IterativeSchedule::default();
        // head
        assert!(is_er_iteration(1, &s));
        assert!(is_er_iteration(50, &s));
        // first alternating block is HIO
        assert!(!is_er_iteration(51, &s));
        assert!(!is_er_iteration(100, &s));
        // then ER
        assert!(is_er_iteration(101, &s));
        assert!(is_er_iteration(150, &s));
        assert!(!is_er_iteration(151, &s));
        // tail
        assert!(is_er_iteration(1901, &s));
        assert!(is_er_iteration(2000, &s));
    }

    #[test]
    fn run_schedule_is_deterministic_and_converges_on_benign_case() {
        let (rho, pat) = test_pattern(32);
        let schedule = IterativeSchedule::default();
        let (state1, report1) = run_schedule(&pat, &schedule, 7).unwrap();
        let (_state2, report2) = run_schedule(&pat, &schedule, 7).unwrap();
        assert_eq!(report1.loss_trace, report2.loss_trace);
        assert_eq!(report1.final_chi2, report2.final_chi2);
        // reciprocal-space error small on the noise-free zero-phase case
        assert!(
            report1.final_chi2 < 0.01,
            "chi2 = {}",
            report1.final_chi2
        );
        // real-space agreement after alignment
        let (aligned, _t) =
            crate::analysis::align_to_reference(&state1.estimate, &rho);
        let a = modulus(&aligned);
        let g = modulus(&rho);
        let err = crate::metrics::rel_l2(&a, &g).unwrap();
        assert!(err < 0.05, "aligned amplitude rel_l2 = {err}");
    }
}
