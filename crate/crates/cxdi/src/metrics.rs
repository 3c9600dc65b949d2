//! Error and loss functionals: relative L2, the modified Pearson loss, the
//! chi-square amplitude error, the composite supervised and unsupervised
//! losses, the Weibull weighting schedule, and the Fourier spectral weight.
//!
//! Analytic gradients for the terms used inside training loops live here as
//! well, so the oracle tests can check them against finite differences in one
//! place.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CxdiError, Result};
use crate::volume::{
    fft_forward, fft_inverse, modulus, zero_pad_center, ComplexVolume, DiffractionPattern, Grid3,
    RealVolume,
};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SupervisedWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for SupervisedWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
        }
    }
}

/// Schedule for the beta1 weighting coefficient, decaying from its epoch-0
/// value toward the asymptote `a1`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeibullSchedule {
    pub k: f64,
    pub lambda: f64,
    pub a0: f64,
    pub a1: f64,
    /// Divisor applied to the raw epoch index before evaluation.
    #[serde(default = "default_divisor")]
    pub divisor: f64,
}

fn default_divisor() -> f64 {
    1.0
}

impl Default for WeibullSchedule {
    fn default() -> Self {
        // endpoints 1e4 at epoch 0 and 1 at infinity, with k = 1, lambda = 0.5
        Self {
            k: 1.0,
            lambda: 0.5,
            a0: (1e4 - 1.0) / 2.0,
            a1: 1.0,
            divisor: 1.0,
        }
    }
}

/// beta1(n) = a0 * (k/lambda) * (n/lambda)^(k-1) * exp(-(n/lambda)^k) + a1.
/// The epoch index is divided by `divisor` first; 0^0 evaluates to 1.
pub fn weibull_beta1(epoch: usize, s: &WeibullSchedule) -> f64 {
    let n = epoch as f64 / s.divisor;
    let t = n / s.lambda;
    s.a0 * (s.k / s.lambda) * t.powf(s.k - 1.0) * (-t.powf(s.k)).exp() + s.a1
}

fn check_same_grid(a: &RealVolume, b: &RealVolume) -> Result<()> {
    if a.grid != b.grid {
        return Err(CxdiError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.grid.dims(),
            b.grid.dims()
        )));
    }
    Ok(())
}

/// Relative L2 norm: sqrt(sum (x_p - x_g)^2) / sqrt(sum x_g^2).
pub fn rel_l2(x_p: &RealVolume, x_g: &RealVolume) -> Result<f64> {
    check_same_grid(x_p, x_g)?;
    let den: f64 = x_g.data.iter().map(|v| v * v).sum();
    if den <= 0.0 {
        return Err(CxdiError::ZeroReference);
    }
    let num: f64 = x_p
        .data
        .iter()
        .zip(&x_g.data)
        .map(|(p, g)| (p - g) * (p - g))
        .sum();
    Ok((num / den).sqrt())
}

/// Gradient of `rel_l2` with respect to x_p.
pub fn rel_l2_grad(x_p: &RealVolume, x_g: &RealVolume) -> Result<Vec<f64>> {
    check_same_grid(x_p, x_g)?;
    let den: f64 = x_g.data.iter().map(|v| v * v).sum();
    if den <= 0.0 {
        return Err(CxdiError::ZeroReference);
    }
    let num: f64 = x_p
        .data
        .iter()
        .zip(&x_g.data)
        .map(|(p, g)| (p - g) * (p - g))
        .sum();
    let norm = num.sqrt().max(1e-300);
    let scale = 1.0 / (norm * den.sqrt());
    Ok(x_p
        .data
        .iter()
        .zip(&x_g.data)
        .map(|(p, g)| (p - g) * scale)
        .collect())
}

struct PearsonParts {
    dev_p: Vec<f64>,
    dev_g: Vec<f64>,
    sp: f64,
    sg: f64,
    numerator: f64,
}

fn pearson_parts(x_p: &RealVolume, x_g: &RealVolume) -> Result<PearsonParts> {
    check_same_grid(x_p, x_g)?;
    let n = x_p.data.len() as f64;
    let mean_p = x_p.data.iter().sum::<f64>() / n;
    let mean_g = x_g.data.iter().sum::<f64>() / n;
    let dev_p: Vec<f64> = x_p.data.iter().map(|v| v - mean_p).collect();
    let dev_g: Vec<f64> = x_g.data.iter().map(|v| v - mean_g).collect();
    let sp: f64 = dev_p.iter().map(|d| d * d).sum();
    let sg: f64 = dev_g.iter().map(|d| d * d).sum();
    if sp <= 0.0 || sg <= 0.0 {
        return Err(CxdiError::ConstantInput);
    }
    let numerator: f64 = dev_p
        .iter()
        .zip(&dev_g)
        .map(|(p, g)| p.abs() * g.abs())
        .sum();
    Ok(PearsonParts {
        dev_p,
        dev_g,
        sp,
        sg,
        numerator,
    })
}

/// Modified Pearson loss with the absolute-value numerator:
/// 1 - sum |dp||dg| / sqrt(sum dp^2 * sum dg^2).
pub fn pearson_loss(x_p: &RealVolume, x_g: &RealVolume) -> Result<f64> {
    let parts = pearson_parts(x_p, x_g)?;
    Ok(1.0 - parts.numerator / (parts.sp * parts.sg).sqrt())
}

/// Gradient of `pearson_loss` with respect to x_p. The |dp| sub-gradient at
/// zero is taken as 0.
pub fn pearson_loss_grad(x_p: &RealVolume, x_g: &RealVolume) -> Result<Vec<f64>> {
    let parts = pearson_parts(x_p, x_g)?;
    let n = parts.dev_p.len() as f64;
    let denom = (parts.sp * parts.sg).sqrt();
    // d/d dev_p_i of -num/denom, before accounting for the mean subtraction
    let raw: Vec<f64> = parts
        .dev_p
        .iter()
        .zip(&parts.dev_g)
        .map(|(dp, dg)| {
            let sign = if *dp > 0.0 {
                1.0
            } else if *dp < 0.0 {
                -1.0
            } else {
                0.0
            };
            -(sign * dg.abs()) / denom + parts.numerator * dp / (parts.sp * denom)
        })
        .collect();
    // dev depends on all x through the mean: project out the mean component
    let mean_raw = raw.iter().sum::<f64>() / n;
    Ok(raw.iter().map(|r| r - mean_raw).collect())
}

/// Conventional chi-square amplitude error:
/// sum (sqrtIp - sqrtIm)^2 / sum Im, with Im = sqrtIm^2.
pub fn chi2_loss(sqrt_ip: &RealVolume, sqrt_im: &RealVolume) -> Result<f64> {
    check_same_grid(sqrt_ip, sqrt_im)?;
    let den: f64 = sqrt_im.data.iter().map(|v| v * v).sum();
    if den <= 0.0 {
        return Err(CxdiError::ZeroReference);
    }
    let num: f64 = sqrt_ip
        .data
        .iter()
        .zip(&sqrt_im.data)
        .map(|(p, m)| (p - m) * (p - m))
        .sum();
    Ok(num / den)
}

/// Gradient of `chi2_loss` with respect to sqrtIp.
pub fn chi2_loss_grad(sqrt_ip: &RealVolume, sqrt_im: &RealVolume) -> Result<Vec<f64>> {
    check_same_grid(sqrt_ip, sqrt_im)?;
    let den: f64 = sqrt_im.data.iter().map(|v| v * v).sum();
    if den <= 0.0 {
        return Err(CxdiError::ZeroReference);
    }
    Ok(sqrt_ip
        .data
        .iter()
        .zip(&sqrt_im.data)
        .map(|(p, m)| 2.0 * (p - m) / den)
        .collect())
}

/// Diffraction amplitude of a particle after zero-padding to `pattern_grid`.
pub fn predicted_amplitude(
    amp: &RealVolume,
    phase: &RealVolume,
    phi_scale: f64,
    pattern_grid: Grid3,
) -> Result<RealVolume> {
    check_same_grid(amp, phase)?;
    let rho = complex_from_amp_phase(amp, phase, phi_scale);
    let padded = zero_pad_center(&rho, pattern_grid)?;
    Ok(modulus(&fft_forward(&padded)))
}

pub fn complex_from_amp_phase(amp: &RealVolume, phase: &RealVolume, phi_scale: f64) -> ComplexVolume {
    let data = amp
        .data
        .iter()
        .zip(&phase.data)
        .map(|(a, p)| Complex64::from_polar(*a, phi_scale * p))
        .collect();
    ComplexVolume {
        grid: amp.grid,
        data,
    }
}

/// Composite supervised loss:
/// (a1*L1(A) + a2*L2(phi) + a3*L3(sqrtIp, sqrtIg)) / (a1+a2+a3),
/// with the sqrt-intensity terms computed by zero-padding each particle to
/// the pattern grid (twice the particle grid per axis) and transforming.
pub fn supervised_loss(
    a_p: &RealVolume,
    phi_p: &RealVolume,
    a_g: &RealVolume,
    phi_g: &RealVolume,
    w: &SupervisedWeights,
) -> Result<f64> {
    let pattern_grid = Grid3::new(a_p.grid.nx * 2, a_p.grid.ny * 2, a_p.grid.nz * 2)?;
    let sqrt_ip = predicted_amplitude(a_p, phi_p, 1.0, pattern_grid)?;
    let sqrt_ig = predicted_amplitude(a_g, phi_g, 1.0, pattern_grid)?;
    let l1 = rel_l2(a_p, a_g)?;
    let l2 = rel_l2(phi_p, phi_g)?;
    let l3 = pearson_loss(&sqrt_ip, &sqrt_ig)?;
    let total = w.alpha1 + w.alpha2 + w.alpha3;
    Ok((w.alpha1 * l1 + w.alpha2 * l2 + w.alpha3 * l3) / total)
}

/// Supervised loss plus its gradients with respect to the predicted
/// amplitude and phase volumes, differentiating the Pearson term through the
/// padding/FFT/modulus chain. A constant predicted sqrt-intensity maps the
/// Pearson term to 1 with zero gradient (the returned flag reports it), so
/// dead-ReLU early epochs do not abort training.
pub fn supervised_loss_grad(
    a_p: &RealVolume,
    phi_p: &RealVolume,
    a_g: &RealVolume,
    phi_g: &RealVolume,
    w: &SupervisedWeights,
) -> Result<(f64, Vec<f64>, Vec<f64>, bool)> {
    let pattern_grid = Grid3::new(a_p.grid.nx * 2, a_p.grid.ny * 2, a_p.grid.nz * 2)?;
    let rho_p = complex_from_amp_phase(a_p, phi_p, 1.0);
    let field = fft_forward(&zero_pad_center(&rho_p, pattern_grid)?);
    let sqrt_ip = modulus(&field);
    let sqrt_ig = predicted_amplitude(a_g, phi_g, 1.0, pattern_grid)?;

    let l1 = rel_l2(a_p, a_g)?;
    let l2 = rel_l2(phi_p, phi_g)?;
    let (l3, l3_grad, degenerate) = match pearson_loss(&sqrt_ip, &sqrt_ig) {
        Ok(v) => (v, pearson_loss_grad(&sqrt_ip, &sqrt_ig)?, false),
        Err(CxdiError::ConstantInput) => (1.0, vec![0.0; sqrt_ip.data.len()], true),
        Err(e) => return Err(e),
    };
    let total = w.alpha1 + w.alpha2 + w.alpha3;
    let loss = (w.alpha1 * l1 + w.alpha2 * l2 + w.alpha3 * l3) / total;

    let g1 = rel_l2_grad(a_p, a_g)?;
    let g2 = rel_l2_grad(phi_p, phi_g)?;
    let grad_sqrt_ip = RealVolume {
        grid: pattern_grid,
        data: l3_grad,
    };
    let grad_rho = amplitude_grad_to_particle(&grad_sqrt_ip, &field, a_p.grid)?;
    let (g3_a, g3_phi) = split_amp_phase_grad(&grad_rho, a_p, phi_p, 1.0);

    let grad_a = g1
        .iter()
        .zip(&g3_a)
        .map(|(a, b)| (w.alpha1 * a + w.alpha3 * b) / total)
        .collect();
    let grad_phi = g2
        .iter()
        .zip(&g3_phi)
        .map(|(a, b)| (w.alpha2 * a + w.alpha3 * b) / total)
        .collect();
    Ok((loss, grad_a, grad_phi, degenerate))
}

/// Composite unsupervised loss:
/// (beta1*L3 + beta2*L4) / (beta1 + beta2) on sqrt-intensities.
/// A constant predicted amplitude makes L3 undefined; callers in training
/// substitute 1 for that term (see `unsupervised_loss_lenient`).
pub fn unsupervised_loss(
    sqrt_ip: &RealVolume,
    sqrt_im: &RealVolume,
    beta1: f64,
    beta2: f64,
) -> Result<f64> {
    let l3 = pearson_loss(sqrt_ip, sqrt_im)?;
    let l4 = chi2_loss(sqrt_ip, sqrt_im)?;
    Ok((beta1 * l3 + beta2 * l4) / (beta1 + beta2))
}

/// Like `unsupervised_loss` but maps a constant predicted amplitude to a
/// Pearson term of 1 (maximum) instead of failing, reporting whether the
/// substitution happened. Keeps refinement alive through degenerate epochs.
pub fn unsupervised_loss_lenient(
    sqrt_ip: &RealVolume,
    sqrt_im: &RealVolume,
    beta1: f64,
    beta2: f64,
) -> Result<(f64, bool)> {
    let (l3, degenerate) = match pearson_loss(sqrt_ip, sqrt_im) {
        Ok(v) => (v, false),
        Err(CxdiError::ConstantInput) => (1.0, true),
        Err(e) => return Err(e),
    };
    let l4 = chi2_loss(sqrt_ip, sqrt_im)?;
    Ok(((beta1 * l3 + beta2 * l4) / (beta1 + beta2), degenerate))
}

/// Gradient of the lenient unsupervised loss with respect to sqrtIp.
pub fn unsupervised_loss_grad(
    sqrt_ip: &RealVolume,
    sqrt_im: &RealVolume,
    beta1: f64,
    beta2: f64,
) -> Result<Vec<f64>> {
    let l3_grad = match pearson_loss_grad(sqrt_ip, sqrt_im) {
        Ok(g) => g,
        Err(CxdiError::ConstantInput) => vec![0.0; sqrt_ip.data.len()],
        Err(e) => return Err(e),
    };
    let l4_grad = chi2_loss_grad(sqrt_ip, sqrt_im)?;
    let total = beta1 + beta2;
    Ok(l3_grad
        .iter()
        .zip(&l4_grad)
        .map(|(g3, g4)| (beta1 * g3 + beta2 * g4) / total)
        .collect())
}

/// Back-propagate a gradient on |F(Q)| through modulus, centered FFT and the
/// zero-padding, returning the gradient with respect to the complex particle
/// voxels on `particle_grid` as d/dRe + i d/dIm. The modulus gradient at
/// F = 0 is taken as 0.
pub fn amplitude_grad_to_particle(
    grad_amp: &RealVolume,
    field: &ComplexVolume,
    particle_grid: Grid3,
) -> Result<ComplexVolume> {
    if grad_amp.grid != field.grid {
        return Err(CxdiError::ShapeMismatch("amplitude grad vs field".into()));
    }
    let grad_f = ComplexVolume {
        grid: field.grid,
        data: field
            .data
            .iter()
            .zip(&grad_amp.data)
            .map(|(f, g)| {
                let m = f.norm();
                if m > 0.0 {
                    Complex64::new(g * f.re / m, g * f.im / m)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect(),
    };
    // adjoint of the unnormalized forward transform is N * inverse
    let mut grad_rho = fft_inverse(&grad_f);
    let n = field.grid.len() as f64;
    for c in grad_rho.data.iter_mut() {
        *c *= n;
    }
    crate::volume::crop_center(&grad_rho, particle_grid)
}

/// Split a complex-voxel gradient into gradients on the amplitude and phase
/// arrays of rho = A * exp(i * phi_scale * phi).
pub fn split_amp_phase_grad(
    grad_rho: &ComplexVolume,
    amp: &RealVolume,
    phase: &RealVolume,
    phi_scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut grad_a = Vec::with_capacity(amp.data.len());
    let mut grad_phi = Vec::with_capacity(amp.data.len());
    for ((g, a), p) in grad_rho.data.iter().zip(&amp.data).zip(&phase.data) {
        let e = Complex64::from_polar(1.0, phi_scale * p);
        // g = dL/dRe + i dL/dIm; chain through (Re, Im) = A * (cos, sin)
        let inner = g.conj() * e;
        grad_a.push(inner.re);
        grad_phi.push(-a * phi_scale * inner.im);
    }
    (grad_a, grad_phi)
}

/// Radially binned amplitude sums (Fourier spectral weight).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FswProfile {
    /// Bin edges in voxel radii, length n_shells + 1.
    pub shell_edges: Vec<f64>,
    /// Summed amplitude per shell.
    pub weights: Vec<f64>,
}

impl FswProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("shell_index,radius_lo,radius_hi,weight\n");
        for (i, w) in self.weights.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                i,
                self.shell_edges[i],
                self.shell_edges[i + 1],
                w
            ));
        }
        out
    }
}

/// Integrate amplitude over shells of constant |Q| (radius in voxels from the
/// center voxel). Equal-width bins up to the largest inscribed radius; voxels
/// beyond it land in the last bin.
pub fn fourier_spectral_weight(pattern: &DiffractionPattern, n_shells: usize) -> FswProfile {
    let grid = pattern.grid;
    let n_shells = n_shells.max(1);
    let (cx, cy, cz) = grid.center();
    let r_max = (grid.nx.min(grid.ny).min(grid.nz) / 2) as f64;
    let width = r_max / n_shells as f64;
    let mut weights = vec![0.0; n_shells];
    for z in 0..grid.nz {
        for y in 0..grid.ny {
            for x in 0..grid.nx {
                let dx = x as f64 - cx as f64;
                let dy = y as f64 - cy as f64;
                let dz = z as f64 - cz as f64;
                let r = (dx * dx + dy * dy + dz * dz).sqrt();
                let bin = ((r / width) as usize).min(n_shells - 1);
                weights[bin] += pattern.amplitude.data[grid.idx(x, y, z)];
            }
        }
    }
    let shell_edges = (0..=n_shells).map(|i| i as f64 * width).collect();
    FswProfile {
        shell_edges,
        weights,
    }
}
