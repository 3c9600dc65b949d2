//! Encoder–decoder network mapping a reciprocal-space diffraction amplitude
//! to real-space amplitude and phase volumes at half the input extent.
//!
//! The encoder stacks stages of (3x3x3 conv, LReLU, norm, factorized
//! 3x1x1/1x3x1/1x1x3 convs, LReLU, norm, 2x max pool). Two decoders — one
//! per output head — mirror the encoder with upsampling but stop one stage
//! early, so each output axis is half the input axis. Both heads end in a
//! 3x3x3 conv to one channel followed by ReLU, making the outputs
//! non-negative.
//!
//! All gradients are hand-derived per layer and checked against central
//! finite differences in the test suite.

mod layers;

pub use layers::{
    conv_backward, conv_forward, lrelu_backward, lrelu_forward, maxpool2_backward,
    maxpool2_forward, norm_backward, norm_forward, upsample2_backward, upsample2_forward,
    LayerCache, LayerParams, LayerSpec, Tensor, NORM_EPS,
};

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CxdiError, Result};
use crate::volume::{Grid3, RealVolume};

/// Interpolation used by decoder upsampling layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleKind {
    #[default]
    Nearest,
    Trilinear,
}

/// Architecture description; the concrete layer sequences are derived from
/// the encoder widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Spatial extents of the input diffraction amplitude.
    pub input_dims: [usize; 3],
    /// Channel width of each encoder stage; one 2x pool per stage.
    pub encoder_widths: Vec<usize>,
    #[serde(default = "default_slope")]
    pub lrelu_slope: f64,
    /// Phase-head output is multiplied by this when forming the complex
    /// density.
    #[serde(default = "default_phi_scale")]
    pub phi_scale: f64,
    #[serde(default)]
    pub upsample: UpsampleKind,
}

fn default_slope() -> f64 {
    0.01
}

fn default_phi_scale() -> f64 {
    1.0
}

impl NetworkSpec {
    /// Desk-scale default: 32^3 input, widths [16, 32, 64].
    pub fn desk() -> Self {
        Self::new([32, 32, 32], vec![16, 32, 64])
    }

    /// Paper-scale: 64^3 input, widths [32, 64, 128].
    pub fn paper_scale() -> Self {
        Self::new([64, 64, 64], vec![32, 64, 128])
    }

    pub fn new(input_dims: [usize; 3], encoder_widths: Vec<usize>) -> Self {
        Self {
            input_dims,
            encoder_widths,
            lrelu_slope: default_slope(),
            phi_scale: default_phi_scale(),
            upsample: UpsampleKind::Nearest,
        }
    }

    pub fn stages(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn output_dims(&self) -> [usize; 3] {
        [
            self.input_dims[0] / 2,
            self.input_dims[1] / 2,
            self.input_dims[2] / 2,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() {
            return Err(CxdiError::Config("encoder_widths must be non-empty".into()));
        }
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(CxdiError::Config("encoder widths must be positive".into()));
        }
        let div = 1usize << self.stages();
        for (axis, &n) in self.input_dims.iter().enumerate() {
            if n == 0 || n % div != 0 {
                return Err(CxdiError::Config(format!(
                    "input extent {n} on axis {axis} is not divisible by 2^{}",
                    self.stages()
                )));
            }
        }
        if !self.lrelu_slope.is_finite() || !self.phi_scale.is_finite() {
            return Err(CxdiError::Config("non-finite spec scalars".into()));
        }
        Ok(())
    }

    /// Encoder layer sequence.
    pub fn encoder_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut prev = 1;
        for &w in &self.encoder_widths {
            push_stage_convs(&mut layers, prev, w);
            layers.push(LayerSpec::MaxPool2);
            prev = w;
        }
        layers
    }

    /// One decoder head: mirrors the encoder but stops one stage early, so
    /// the head output extent is half the input extent. Ends with a
    /// single-channel 3x3x3 conv + ReLU.
    pub fn decoder_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut prev = *self.encoder_widths.last().unwrap();
        for i in (0..self.stages().saturating_sub(1)).rev() {
            layers.push(LayerSpec::Upsample2);
            let w = self.encoder_widths[i];
            push_stage_convs(&mut layers, prev, w);
            prev = w;
        }
        layers.push(LayerSpec::Conv {
            in_channels: prev,
            out_channels: 1,
            kx: 3,
            ky: 3,
            kz: 3,
        });
        layers.push(LayerSpec::Relu);
        layers
    }
}

fn push_stage_convs(layers: &mut Vec<LayerSpec>, in_c: usize, w: usize) {
    layers.push(LayerSpec::Conv {
        in_channels: in_c,
        out_channels: w,
        kx: 3,
        ky: 3,
        kz: 3,
    });
    layers.push(LayerSpec::LRelu);
    layers.push(LayerSpec::Norm { channels: w });
    for (kx, ky, kz) in [(3, 1, 1), (1, 3, 1), (1, 1, 3)] {
        layers.push(LayerSpec::Conv {
            in_channels: w,
            out_channels: w,
            kx,
            ky,
            kz,
        });
    }
    layers.push(LayerSpec::LRelu);
    layers.push(LayerSpec::Norm { channels: w });
}

/// All optimizable state, grouped per layer in declaration order: encoder,
/// amplitude decoder, phase decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub encoder: Vec<LayerParams>,
    pub decoder_amp: Vec<LayerParams>,
    pub decoder_phase: Vec<LayerParams>,
}

fn init_layer(spec: &LayerSpec, slope: f64, rng: &mut ChaCha8Rng) -> LayerParams {
    match spec {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kx,
            ky,
            kz,
        } => {
            let fan_in = in_channels * kx * ky * kz;
            let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let kernel = (0..out_channels * fan_in)
                .map(|_| normal.sample(rng))
                .collect();
            LayerParams::Conv {
                kernel,
                bias: vec![0.0; *out_channels],
            }
        }
        LayerSpec::Norm { channels } => LayerParams::Norm {
            gamma: vec![1.0; *channels],
            delta: vec![0.0; *channels],
        },
        _ => LayerParams::None,
    }
}

/// Kernels fan-in scaled for the leaky-ReLU gain, biases zero, norm scale 1
/// and shift 0; deterministic given the seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init_seq = |layers: &[LayerSpec], rng: &mut ChaCha8Rng| -> Vec<LayerParams> {
        layers
            .iter()
            .map(|l| init_layer(l, spec.lrelu_slope, rng))
            .collect()
    };
    let encoder = init_seq(&spec.encoder_layers(), &mut rng);
    let decoder_amp = init_seq(&spec.decoder_layers(), &mut rng);
    let decoder_phase = init_seq(&spec.decoder_layers(), &mut rng);
    Ok(NetworkParams {
        spec: spec.clone(),
        seed,
        encoder,
        decoder_amp,
        decoder_phase,
    })
}

impl NetworkParams {
    fn groups(&self) -> [&Vec<LayerParams>; 3] {
        [&self.encoder, &self.decoder_amp, &self.decoder_phase]
    }

    fn groups_mut(&mut self) -> [&mut Vec<LayerParams>; 3] {
        [
            &mut self.encoder,
            &mut self.decoder_amp,
            &mut self.decoder_phase,
        ]
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.groups()
            .iter()
            .flat_map(|g| g.iter())
            .map(|p| p.len())
            .sum()
    }

    /// Copy every parameter into one flat vector, declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for group in self.groups() {
            for p in group {
                match p {
                    LayerParams::Conv { kernel, bias } => {
                        out.extend_from_slice(kernel);
                        out.extend_from_slice(bias);
                    }
                    LayerParams::Norm { gamma, delta } => {
                        out.extend_from_slice(gamma);
                        out.extend_from_slice(delta);
                    }
                    LayerParams::None => {}
                }
            }
        }
        out
    }

    /// Inverse of `to_flat`.
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(CxdiError::ShapeMismatch(format!(
                "flat parameter vector has {} entries, network has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for group in self.groups_mut() {
            for p in group.iter_mut() {
                match p {
                    LayerParams::Conv { kernel, bias } => {
                        let (kl, bl) = (kernel.len(), bias.len());
                        kernel.copy_from_slice(&flat[off..off + kl]);
                        off += kl;
                        bias.copy_from_slice(&flat[off..off + bl]);
                        off += bl;
                    }
                    LayerParams::Norm { gamma, delta } => {
                        let (gl, dl) = (gamma.len(), delta.len());
                        gamma.copy_from_slice(&flat[off..off + gl]);
                        off += gl;
                        delta.copy_from_slice(&flat[off..off + dl]);
                        off += dl;
                    }
                    LayerParams::None => {}
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Cached activations from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct TapeState {
    encoder: Vec<LayerCache>,
    decoder_amp: Vec<LayerCache>,
    decoder_phase: Vec<LayerCache>,
}

const PARAMS_MAGIC: &[u8; 4] = b"CXP1";

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    spec: NetworkSpec,
    seed: u64,
    num_params: usize,
}

/// Serialize parameters: magic, u32-LE header length, JSON header, then the
/// flat parameter vector as little-endian f64.
pub fn write_params(path: &Path, params: &NetworkParams) -> Result<()> {
    let header = serde_json::to_vec(&ParamsHeader {
        spec: params.spec.clone(),
        seed: params.seed,
        num_params: params.num_params(),
    })?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(PARAMS_MAGIC)?;
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(&header)?;
    for v in params.to_flat() {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<NetworkParams> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| CxdiError::BadMagic)?;
    if &magic != PARAMS_MAGIC {
        return Err(CxdiError::BadMagic);
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| CxdiError::BadMagic)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut header_bytes)
        .map_err(|_| CxdiError::HeaderParse("truncated header".into()))?;
    let header: ParamsHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CxdiError::HeaderParse(e.to_string()))?;
    let mut params = init_params(&header.spec, header.seed)?;
    if params.num_params() != header.num_params {
        return Err(CxdiError::HeaderParse(format!(
            "header claims {} parameters, spec yields {}",
            header.num_params,
            params.num_params()
        )));
    }
    let mut payload = vec![0u8; header.num_params * 8];
    file.read_exact(&mut payload).map_err(|_| {
        CxdiError::TruncatedPayload {
            expected: header.num_params * 8,
            actual: 0,
        }
    })?;
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    params.set_from_flat(&flat)?;
    Ok(params)
}

/// Trilinear 2x upsampling (half-voxel-centered sampling); linear, so the
/// backward pass is the transpose scatter with identical weights.
fn trilinear_taps(i: usize, n_in: usize) -> [(usize, f64); 2] {
    let s = (i as f64 + 0.5) / 2.0 - 0.5;
    let i0 = s.floor();
    let frac = s - i0;
    let a = (i0 as isize).clamp(0, n_in as isize - 1) as usize;
    let b = (i0 as isize + 1).clamp(0, n_in as isize - 1) as usize;
    [(a, 1.0 - frac), (b, frac)]
}

fn trilinear_forward(input: &Tensor) -> Tensor {
    let (nx, ny, nz) = (input.nx * 2, input.ny * 2, input.nz * 2);
    let mut out = Tensor::zeros(input.channels, nx, ny, nz);
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..nz {
            let tz = trilinear_taps(z, input.nz);
            for y in 0..ny {
                let ty = trilinear_taps(y, input.ny);
                for x in 0..nx {
                    let tx = trilinear_taps(x, input.nx);
                    let mut acc = 0.0;
                    for (zi, wz) in tz {
                        for (yi, wy) in ty {
                            for (xi, wx) in tx {
                                acc += wz * wy * wx
                                    * src[xi + input.nx * (yi + input.ny * zi)];
                            }
                        }
                    }
                    dst[x + nx * (y + ny * z)] = acc;
                }
            }
        }
    }
    out
}

fn trilinear_backward(in_shape: [usize; 4], upstream: &Tensor) -> Tensor {
    let [channels, nx, ny, nz] = in_shape;
    let mut grad = Tensor::zeros(channels, nx, ny, nz);
    for c in 0..channels {
        let up = upstream.channel(c);
        let g = grad.channel_mut(c);
        for z in 0..upstream.nz {
            let tz = trilinear_taps(z, nz);
            for y in 0..upstream.ny {
                let ty = trilinear_taps(y, ny);
                for x in 0..upstream.nx {
                    let tx = trilinear_taps(x, nx);
                    let u = up[x + upstream.nx * (y + upstream.ny * z)];
                    for (zi, wz) in tz {
                        for (yi, wy) in ty {
                            for (xi, wx) in tx {
                                g[xi + nx * (yi + ny * zi)] += wz * wy * wx * u;
                            }
                        }
                    }
                }
            }
        }
    }
    grad
}

fn run_forward(
    layers: &[LayerSpec],
    params: &[LayerParams],
    slope: f64,
    upsample: UpsampleKind,
    mut x: Tensor,
    mut tape: Option<&mut Vec<LayerCache>>,
) -> Result<Tensor> {
    for (spec, p) in layers.iter().zip(params) {
        let next = match (spec, p) {
            (LayerSpec::Conv { .. }, LayerParams::Conv { kernel, bias }) => {
                let out = conv_forward(spec, kernel, bias, &x)?;
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerCache::Conv { input: x });
                }
                out
            }
            (LayerSpec::LRelu, _) => {
                let out = lrelu_forward(&x, slope);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerCache::Act { input: x });
                }
                out
            }
            (LayerSpec::Relu, _) => {
                let out = lrelu_forward(&x, 0.0);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerCache::Act { input: x });
                }
                out
            }
            (LayerSpec::Norm { .. }, LayerParams::Norm { gamma, delta }) => {
                let (out, mean, inv_std) = norm_forward(&x, gamma, delta);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerCache::Norm {
                        input: x,
                        mean,
                        inv_std,
                    });
                }
                out
            }
            (LayerSpec::MaxPool2, _) => {
                let (out, argmax) = maxpool2_forward(&x)?;
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerCache::MaxPool {
                        argmax,
                        in_shape: [x.channels, x.nx, x.ny, x.nz],
                    });
                }
                out
            }
            (LayerSpec::Upsample2, _) => {
                let out = match upsample {
                    UpsampleKind::Nearest => upsample2_forward(&x),
                    UpsampleKind::Trilinear => trilinear_forward(&x),
                };
                if let Some(t) = tape.as_deref_mut() {
                    t.push(LayerCache::Upsample {
                        in_shape: [x.channels, x.nx, x.ny, x.nz],
                    });
                }
                out
            }
            _ => {
                return Err(CxdiError::ShapeMismatch(
                    "layer spec and parameters out of sync".into(),
                ))
            }
        };
        x = next;
    }
    Ok(x)
}

/// Backward through one layer sequence. Appends per-layer parameter
/// gradients (flat, declaration order) into `grad_out` indexed by layer.
fn run_backward(
    layers: &[LayerSpec],
    params: &[LayerParams],
    caches: &[LayerCache],
    slope: f64,
    upsample: UpsampleKind,
    mut grad: Tensor,
    grad_params: &mut [Vec<f64>],
) -> Result<Tensor> {
    for i in (0..layers.len()).rev() {
        grad = match (&layers[i], &params[i], &caches[i]) {
            (spec @ LayerSpec::Conv { .. }, LayerParams::Conv { kernel, .. }, LayerCache::Conv { input }) => {
                let (gin, gk, gb) = conv_backward(spec, kernel, input, &grad)?;
                let mut flat = gk;
                flat.extend(gb);
                grad_params[i] = flat;
                gin
            }
            (LayerSpec::LRelu, _, LayerCache::Act { input }) => {
                lrelu_backward(input, &grad, slope)
            }
            (LayerSpec::Relu, _, LayerCache::Act { input }) => lrelu_backward(input, &grad, 0.0),
            (LayerSpec::Norm { .. }, LayerParams::Norm { gamma, .. }, LayerCache::Norm { input, mean, inv_std }) => {
                let (gin, gg, gd) = norm_backward(input, &grad, gamma, mean, inv_std);
                let mut flat = gg;
                flat.extend(gd);
                grad_params[i] = flat;
                gin
            }
            (LayerSpec::MaxPool2, _, LayerCache::MaxPool { argmax, in_shape }) => {
                maxpool2_backward(argmax, *in_shape, &grad)
            }
            (LayerSpec::Upsample2, _, LayerCache::Upsample { in_shape }) => match upsample {
                UpsampleKind::Nearest => upsample2_backward(*in_shape, &grad),
                UpsampleKind::Trilinear => trilinear_backward(*in_shape, &grad),
            },
            _ => return Err(CxdiError::MissingTape),
        };
    }
    Ok(grad)
}

fn input_tensor(spec: &NetworkSpec, amplitude: &RealVolume) -> Result<Tensor> {
    let dims = amplitude.grid.dims();
    if dims != spec.input_dims {
        return Err(CxdiError::ShapeMismatch(format!(
            "input dims {dims:?} do not match network input {:?}",
            spec.input_dims
        )));
    }
    // normalize by the peak so arbitrarily scaled patterns land in the
    // activation range the network was trained on
    let max = amplitude.data.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    Ok(Tensor {
        channels: 1,
        nx: dims[0],
        ny: dims[1],
        nz: dims[2],
        data: amplitude.data.iter().map(|v| v * scale).collect(),
    })
}

fn tensor_to_volume(t: &Tensor) -> RealVolume {
    RealVolume {
        grid: Grid3::new(t.nx, t.ny, t.nz).expect("even network extents"),
        data: t.data.clone(),
    }
}

fn volume_to_tensor(v: &RealVolume) -> Tensor {
    Tensor {
        channels: 1,
        nx: v.grid.nx,
        ny: v.grid.ny,
        nz: v.grid.nz,
        data: v.data.clone(),
    }
}

/// Inference: amplitude and phase heads, each half the input extent per
/// axis and non-negative.
pub fn network_forward(
    params: &NetworkParams,
    amplitude: &RealVolume,
) -> Result<(RealVolume, RealVolume)> {
    let (a, p, _) = forward_impl(params, amplitude, false)?;
    Ok((a, p))
}

/// Training-mode forward: same outputs plus the tape for `network_backward`.
pub fn network_forward_train(
    params: &NetworkParams,
    amplitude: &RealVolume,
) -> Result<(RealVolume, RealVolume, TapeState)> {
    let (a, p, tape) = forward_impl(params, amplitude, true)?;
    Ok((a, p, tape.expect("tape requested")))
}

fn forward_impl(
    params: &NetworkParams,
    amplitude: &RealVolume,
    train: bool,
) -> Result<(RealVolume, RealVolume, Option<TapeState>)> {
    let spec = &params.spec;
    let input = input_tensor(spec, amplitude)?;
    let enc_layers = spec.encoder_layers();
    let dec_layers = spec.decoder_layers();

    let mut enc_tape = Vec::new();
    let encoded = run_forward(
        &enc_layers,
        &params.encoder,
        spec.lrelu_slope,
        spec.upsample,
        input,
        train.then_some(&mut enc_tape),
    )?;

    let mut amp_tape = Vec::new();
    let amp_out = run_forward(
        &dec_layers,
        &params.decoder_amp,
        spec.lrelu_slope,
        spec.upsample,
        encoded.clone(),
        train.then_some(&mut amp_tape),
    )?;
    let mut phase_tape = Vec::new();
    let phase_out = run_forward(
        &dec_layers,
        &params.decoder_phase,
        spec.lrelu_slope,
        spec.upsample,
        encoded,
        train.then_some(&mut phase_tape),
    )?;

    let tape = train.then_some(TapeState {
        encoder: enc_tape,
        decoder_amp: amp_tape,
        decoder_phase: phase_tape,
    });
    Ok((tensor_to_volume(&amp_out), tensor_to_volume(&phase_out), tape))
}

/// Exact reverse-mode parameter gradients, flattened in the same order as
/// `NetworkParams::to_flat`.
pub fn network_backward(
    params: &NetworkParams,
    tape: Option<&TapeState>,
    grad_amp: &RealVolume,
    grad_phase: &RealVolume,
) -> Result<Vec<f64>> {
    let tape = tape.ok_or(CxdiError::MissingTape)?;
    let spec = &params.spec;
    let enc_layers = spec.encoder_layers();
    let dec_layers = spec.decoder_layers();

    let mut amp_grads = vec![Vec::new(); dec_layers.len()];
    let g_enc_from_amp = run_backward(
        &dec_layers,
        &params.decoder_amp,
        &tape.decoder_amp,
        spec.lrelu_slope,
        spec.upsample,
        volume_to_tensor(grad_amp),
        &mut amp_grads,
    )?;
    let mut phase_grads = vec![Vec::new(); dec_layers.len()];
    let g_enc_from_phase = run_backward(
        &dec_layers,
        &params.decoder_phase,
        &tape.decoder_phase,
        spec.lrelu_slope,
        spec.upsample,
        volume_to_tensor(grad_phase),
        &mut phase_grads,
    )?;

    // both decoders consume the shared encoder output, so their gradients sum
    let mut g_encoded = g_enc_from_amp;
    for (a, b) in g_encoded.data.iter_mut().zip(&g_enc_from_phase.data) {
        *a += b;
    }

    let mut enc_grads = vec![Vec::new(); enc_layers.len()];
    run_backward(
        &enc_layers,
        &params.encoder,
        &tape.encoder,
        spec.lrelu_slope,
        spec.upsample,
        g_encoded,
        &mut enc_grads,
    )?;

    // assemble flat vector matching to_flat order: zero-fill layers without
    // parameters
    let mut flat = Vec::with_capacity(params.num_params());
    for (group_params, group_grads) in [
        (&params.encoder, &enc_grads),
        (&params.decoder_amp, &amp_grads),
        (&params.decoder_phase, &phase_grads),
    ] {
        for (p, g) in group_params.iter().zip(group_grads) {
            if p.len() == 0 {
                continue;
            }
            if g.len() == p.len() {
                flat.extend_from_slice(g);
            } else {
                flat.extend(std::iter::repeat(0.0).take(p.len()));
            }
        }
    }
    debug_assert_eq!(flat.len(), params.num_params());
    Ok(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_volume(n: usize, seed: u64) -> RealVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid3::new(n, n, n).unwrap();
        let data = (0..grid.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        RealVolume { grid, data }
    }

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new([8, 8, 8], vec![4, 8])
    }

    #[test]
    fn output_extent_is_half_the_input() {
        for (n, widths) in [(8usize, vec![4, 8]), (16, vec![4]), (32, vec![4, 6, 8])] {
            let spec = NetworkSpec::new([n, n, n], widths);
            let params = init_params(&spec, 5).unwrap();
            let input = random_volume(n, 1);
            let (a, p) = network_forward(&params, &input).unwrap();
            assert_eq!(a.grid.dims(), [n / 2, n / 2, n / 2]);
            assert_eq!(p.grid.dims(), [n / 2, n / 2, n / 2]);
        }
    }

    #[test]
    fn outputs_are_non_negative() {
        let params = init_params(&tiny_spec(), 11).unwrap();
        let (a, p) = network_forward(&params, &random_volume(8, 2)).unwrap();
        assert!(a.data.iter().all(|&v| v >= 0.0));
        assert!(p.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let spec = NetworkSpec::desk();
        let a = init_params(&spec, 42).unwrap();
        let b = init_params(&spec, 42).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        let c = init_params(&spec, 43).unwrap();
        assert_ne!(a.to_flat(), c.to_flat());

        // biases zero, norm gamma 1 / delta 0
        for p in a.encoder.iter().chain(&a.decoder_amp).chain(&a.decoder_phase) {
            match p {
                LayerParams::Conv { bias, .. } => assert!(bias.iter().all(|&b| b == 0.0)),
                LayerParams::Norm { gamma, delta } => {
                    assert!(gamma.iter().all(|&g| g == 1.0));
                    assert!(delta.iter().all(|&d| d == 0.0));
                }
                LayerParams::None => {}
            }
        }

        // kernel variance close to 2/((1+slope^2) fan_in) on a large layer
        let slope = spec.lrelu_slope;
        if let LayerParams::Conv { kernel, .. } = &a.encoder[9] {
            // second stage conv3: 16 -> 32 channels, fan_in = 16*27
            let fan_in = 16.0 * 27.0;
            let expected = 2.0 / ((1.0 + slope * slope) * fan_in);
            let var = kernel.iter().map(|k| k * k).sum::<f64>() / kernel.len() as f64;
            assert!(
                (var - expected).abs() / expected < 0.10,
                "kernel variance {var} vs expected {expected}"
            );
        } else {
            panic!("unexpected layer layout");
        }
    }

    #[test]
    fn inference_matches_training_forward() {
        let params = init_params(&tiny_spec(), 3).unwrap();
        let input = random_volume(8, 4);
        let (a0, p0) = network_forward(&params, &input).unwrap();
        let (a1, p1, _) = network_forward_train(&params, &input).unwrap();
        assert_eq!(a0.data, a1.data);
        assert_eq!(p0.data, p1.data);
    }

    #[test]
    fn backward_requires_tape() {
        let params = init_params(&tiny_spec(), 3).unwrap();
        let g = random_volume(4, 5);
        assert!(matches!(
            network_backward(&params, None, &g, &g),
            Err(CxdiError::MissingTape)
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients_and_linearity() {
        let params = init_params(&tiny_spec(), 3).unwrap();
        let input = random_volume(8, 4);
        let (_, _, tape) = network_forward_train(&params, &input).unwrap();
        let zero = RealVolume {
            grid: Grid3::new(4, 4, 4).unwrap(),
            data: vec![0.0; 64],
        };
        let g = network_backward(&params, Some(&tape), &zero, &zero).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let up = random_volume(4, 6);
        let g1 = network_backward(&params, Some(&tape), &up, &zero).unwrap();
        let mut up2 = up.clone();
        for v in up2.data.iter_mut() {
            *v *= 2.0;
        }
        let g2 = network_backward(&params, Some(&tape), &up2, &zero).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut params = init_params(&tiny_spec(), 9).unwrap();
        let flat = params.to_flat();
        let mut perturbed = flat.clone();
        for (i, v) in perturbed.iter_mut().enumerate() {
            *v += (i % 7) as f64 * 0.01;
        }
        params.set_from_flat(&perturbed).unwrap();
        assert_eq!(params.to_flat(), perturbed);
        assert!(params.set_from_flat(&flat[1..]).is_err());
    }

    #[test]
    fn params_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.cxp");
        let params = init_params(&tiny_spec(), 21).unwrap();
        write_params(&path, &params).unwrap();
        let loaded = read_params(&path).unwrap();
        assert_eq!(params, loaded);
    }

    /// End-to-end gradient check: scalar loss = sum(w_a * A) + sum(w_p * P)
    /// against central finite differences over a random subset of params.
    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        let spec = tiny_spec();
        let mut params = init_params(&spec, 17).unwrap();
        let input = random_volume(8, 18);
        let wa = random_volume(4, 19);
        let wp = random_volume(4, 20);

        let loss = |p: &NetworkParams| -> f64 {
            let (a, ph) = network_forward(p, &input).unwrap();
            a.data.iter().zip(&wa.data).map(|(x, w)| x * w).sum::<f64>()
                + ph.data.iter().zip(&wp.data).map(|(x, w)| x * w).sum::<f64>()
        };

        let (_, _, tape) = network_forward_train(&params, &input).unwrap();
        let grad = network_backward(&params, Some(&tape), &wa, &wp).unwrap();
        let flat = params.to_flat();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 40 {
            let i = rng.gen_range(0..flat.len());
            let mut p = flat.clone();
            p[i] += h;
            params.set_from_flat(&p).unwrap();
            let lp = loss(&params);
            p[i] -= 2.0 * h;
            params.set_from_flat(&p).unwrap();
            let lm = loss(&params);
            let fd = (lp - lm) / (2.0 * h);
            // skip probes whose output is insensitive (dead ReLU paths give
            // exact zeros on both sides)
            if fd == 0.0 && grad[i] == 0.0 {
                continue;
            }
            let scale = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(
                (fd - grad[i]).abs() / scale < 1e-4,
                "param {i}: fd {fd} vs analytic {}",
                grad[i]
            );
            checked += 1;
        }
        params.set_from_flat(&flat).unwrap();
    }

    #[test]
    fn trilinear_upsample_forward_and_gradient() {
        // constant volume stays constant under trilinear interpolation
        let c = Tensor {
            channels: 1,
            nx: 2,
            ny: 2,
            nz: 2,
            data: vec![3.0; 8],
        };
        let up = trilinear_forward(&c);
        assert!(up.data.iter().all(|&v| (v - 3.0).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut input = Tensor::zeros(1, 2, 2, 2);
        for v in input.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut upstream = Tensor::zeros(1, 4, 4, 4);
        for v in upstream.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let g = trilinear_backward([1, 2, 2, 2], &upstream);
        let h = 1e-5;
        for i in 0..input.data.len() {
            let loss = |inp: &Tensor| -> f64 {
                trilinear_forward(inp)
                    .data
                    .iter()
                    .zip(&upstream.data)
                    .map(|(o, u)| o * u)
                    .sum()
            };
            let mut p = input.clone();
            p.data[i] += h;
            let mut m = input.clone();
            m.data[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn trilinear_spec_runs_end_to_end() {
        let mut spec = tiny_spec();
        spec.upsample = UpsampleKind::Trilinear;
        let params = init_params(&spec, 8).unwrap();
        let input = random_volume(8, 9);
        let (a, _, tape) = network_forward_train(&params, &input).unwrap();
        assert_eq!(a.grid.dims(), [4, 4, 4]);
        let up = random_volume(4, 10);
        let g = network_backward(&params, Some(&tape), &up, &up).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(NetworkSpec::new([8, 8, 8], vec![]).validate().is_err());
        assert!(NetworkSpec::new([10, 10, 10], vec![4, 8]).validate().is_err());
        assert!(NetworkSpec::new([8, 8, 8], vec![4, 8]).validate().is_ok());
        let wrong_input = random_volume(16, 1);
        let params = init_params(&tiny_spec(), 1).unwrap();
        assert!(network_forward(&params, &wrong_input).is_err());
    }
}
