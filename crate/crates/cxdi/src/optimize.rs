//! Optimizers and training loops: plain SGD, bias-corrected ADAM, the
//! alternating-optimizer / decaying-learning-rate schedules, the supervised
//! trainer, and the single-pattern unsupervised refiner whose gradient runs
//! through the entire padding/FFT/modulus chain.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::datagen::SampleRecord;
use crate::error::{CxdiError, Result};
use crate::metrics::{
    amplitude_grad_to_particle, complex_from_amp_phase, split_amp_phase_grad, supervised_loss_grad,
    unsupervised_loss_grad, unsupervised_loss_lenient, weibull_beta1, SupervisedWeights,
    WeibullSchedule,
};
use crate::neuralnet::{
    init_params, network_backward, network_forward, network_forward_train, read_params,
    NetworkParams, NetworkSpec,
};
use crate::volume::{
    crop_center, fft_forward, modulus, zero_pad_center, ComplexVolume, DiffractionPattern,
    RealVolume,
};

pub const ADAM_B1: f64 = 0.9;
pub const ADAM_B2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimizerKind::Adam => write!(f, "adam"),
            OptimizerKind::Sgd => write!(f, "sgd"),
        }
    }
}

/// ADAM moment buffers plus step counter; sized to the flat parameter
/// vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// theta <- theta - lr * g, no momentum.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(CxdiError::ShapeMismatch(format!(
            "sgd: {} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// Standard bias-corrected ADAM update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CxdiError::ShapeMismatch(format!(
            "adam: {} params vs {} grads vs {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_B1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_B2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
        *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Epoch-level schedule: optimizers alternate ADAM -> SGD every
/// `switch_every` epochs starting with ADAM; the learning rate is
/// `lr0 * lr_decay^floor(epoch / decay_every)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub switch_every: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Supervised minibatch size (unsupervised runs are single-sample).
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    SUPERVISED_BATCH
}

impl TrainSchedule {
    /// Supervised recipe: 100 epochs, switch every 25, lr0 0.01, x0.95
    /// every 25 epochs.
    pub fn supervised() -> Self {
        Self {
            total_epochs: 100,
            switch_every: 25,
            lr0: 0.01,
            lr_decay: 0.95,
            decay_every: 25,
            batch_size: SUPERVISED_BATCH,
        }
    }

    /// Unsupervised recipe: switch every 200, lr0 0.006, x0.95 every 200
    /// epochs.
    pub fn unsupervised(total_epochs: usize) -> Self {
        Self {
            total_epochs,
            switch_every: 200,
            lr0: 0.006,
            lr_decay: 0.95,
            decay_every: 200,
            batch_size: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0
            || self.switch_every == 0
            || self.decay_every == 0
            || self.batch_size == 0
        {
            return Err(CxdiError::Config("schedule counts must be positive".into()));
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(CxdiError::Config(
                "need lr0 > 0 and 0 < lr_decay <= 1".into(),
            ));
        }
        Ok(())
    }

    /// ADAM iff floor(epoch / switch_every) is even.
    pub fn optimizer_at(&self, epoch: usize) -> OptimizerKind {
        if (epoch / self.switch_every) % 2 == 0 {
            OptimizerKind::Adam
        } else {
            OptimizerKind::Sgd
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// One row of a training/refinement loss trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub loss: f64,
    pub beta1: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

/// CSV with header `epoch,loss,beta1,lr,optimizer`.
pub fn trace_to_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("epoch,loss,beta1,lr,optimizer\n");
    for e in trace {
        writeln!(out, "{},{},{},{},{}", e.epoch, e.loss, e.beta1, e.lr, e.optimizer)
            .expect("string write");
    }
    out
}

/// Supervised training result.
#[derive(Debug)]
pub struct TrainResult {
    /// Best-validation checkpoint (best-train when there is no validation
    /// split); retained as the early-stopping rule.
    pub params: NetworkParams,
    pub train_trace: Vec<TraceEntry>,
    pub val_trace: Vec<TraceEntry>,
    pub best_epoch: usize,
}

pub const SUPERVISED_BATCH: usize = 8;

/// Minimize the composite supervised loss over the train split, alternating
/// optimizers per the schedule and checkpointing the best-validation
/// parameters.
pub fn supervised_train(
    dataset: &[SampleRecord],
    spec: &NetworkSpec,
    schedule: &TrainSchedule,
    weights: &SupervisedWeights,
    seed: u64,
) -> Result<TrainResult> {
    schedule.validate()?;
    let train: Vec<&SampleRecord> = dataset
        .iter()
        .filter(|r| r.params.split == "train")
        .collect();
    let val: Vec<&SampleRecord> = dataset
        .iter()
        .filter(|r| r.params.split == "val")
        .collect();
    if train.is_empty() {
        return Err(CxdiError::EmptyDataset);
    }

    let mut params = init_params(spec, seed)?;
    let mut flat = params.to_flat();
    let mut adam = AdamState::new(flat.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546_464c_4531);

    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut train_trace = Vec::with_capacity(schedule.total_epochs);
    let mut val_trace = Vec::new();

    for epoch in 0..schedule.total_epochs {
        let lr = schedule.lr_at(epoch);
        let opt = schedule.optimizer_at(epoch);

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let mut grad_acc = vec![0.0; flat.len()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let rec = train[i];
                let (loss, grad) = sample_loss_grad(&params, rec, weights)?;
                batch_loss += loss;
                for (a, g) in grad_acc.iter_mut().zip(&grad) {
                    *a += g;
                }
            }
            let bn = batch.len() as f64;
            for g in grad_acc.iter_mut() {
                *g /= bn;
            }
            epoch_loss += batch_loss;
            match opt {
                OptimizerKind::Adam => adam_step(&mut flat, &grad_acc, &mut adam, lr)?,
                OptimizerKind::Sgd => sgd_step(&mut flat, &grad_acc, lr)?,
            }
            params.set_from_flat(&flat)?;
            if !params.all_finite() {
                return Err(CxdiError::NonFiniteLoss(epoch));
            }
        }
        let train_loss = epoch_loss / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(CxdiError::NonFiniteLoss(epoch));
        }
        train_trace.push(TraceEntry {
            epoch,
            loss: train_loss,
            beta1: 0.0,
            lr,
            optimizer: opt,
        });

        // validation (or train loss when no val split) drives checkpointing
        let monitor = if val.is_empty() {
            train_loss
        } else {
            let mut v = 0.0;
            for rec in &val {
                v += sample_loss(&params, rec, weights)?;
            }
            let v = v / val.len() as f64;
            val_trace.push(TraceEntry {
                epoch,
                loss: v,
                beta1: 0.0,
                lr,
                optimizer: opt,
            });
            v
        };
        if monitor < best.0 {
            best = (monitor, params.clone(), epoch);
        }
    }

    Ok(TrainResult {
        params: best.1,
        train_trace,
        val_trace,
        best_epoch: best.2,
    })
}

fn ground_truth(rec: &SampleRecord) -> Result<(RealVolume, RealVolume)> {
    // the particle occupies the central half-box of the pattern grid; the
    // network targets live on that half grid
    let half = rec.particle.grid.half()?;
    let cropped = crop_center(&rec.particle, half)?;
    let mut amp = RealVolume::zeros(half);
    let mut phase = RealVolume::zeros(half);
    let phi_scale = rec.params.phi_scale.max(f64::MIN_POSITIVE);
    for (i, c) in cropped.data.iter().enumerate() {
        amp.data[i] = c.norm();
        // phases were synthesized in [0,1] then scaled; undo the scale so the
        // network target lives in [0,1]
        phase.data[i] = if c.norm() > 0.0 { c.arg() / phi_scale } else { 0.0 };
    }
    Ok((amp, phase))
}

fn sample_loss(params: &NetworkParams, rec: &SampleRecord, w: &SupervisedWeights) -> Result<f64> {
    let (a_g, phi_g) = ground_truth(rec)?;
    let (a_p, phi_p) = network_forward(params, &rec.pattern.amplitude)?;
    let (loss, _, _, _) = supervised_loss_grad(&a_p, &phi_p, &a_g, &phi_g, w)?;
    Ok(loss)
}

fn sample_loss_grad(
    params: &NetworkParams,
    rec: &SampleRecord,
    w: &SupervisedWeights,
) -> Result<(f64, Vec<f64>)> {
    let (a_g, phi_g) = ground_truth(rec)?;
    let (a_p, phi_p, tape) = network_forward_train(params, &rec.pattern.amplitude)?;
    let (loss, grad_a, grad_phi, _) = supervised_loss_grad(&a_p, &phi_p, &a_g, &phi_g, w)?;
    let ga = RealVolume {
        grid: a_p.grid,
        data: grad_a,
    };
    let gp = RealVolume {
        grid: phi_p.grid,
        data: grad_phi,
    };
    let grad = network_backward(params, Some(&tape), &ga, &gp)?;
    Ok((loss, grad))
}

/// Inference: run the network and assemble the complex density
/// rho_p = A_p * exp(i * phi_scale * phi_p) on the half-size grid.
pub fn predict(params: &NetworkParams, pattern: &DiffractionPattern) -> Result<ComplexVolume> {
    let (a_p, phi_p) = network_forward(params, &pattern.amplitude)?;
    Ok(complex_from_amp_phase(&a_p, &phi_p, params.spec.phi_scale))
}

/// How refinement parameters start.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineInit {
    /// Fresh random initialization from this seed.
    Random { seed: u64 },
    /// Load pretrained parameters (transfer learning); all weights stay
    /// trainable.
    Transfer { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineConfig {
    pub init: RefineInit,
    pub schedule: TrainSchedule,
    pub weibull: WeibullSchedule,
    /// Stop early once l_u drops to this value (None runs the full budget).
    pub target_loss: Option<f64>,
}

impl RefineConfig {
    pub fn random(seed: u64, total_epochs: usize) -> Self {
        Self {
            init: RefineInit::Random { seed },
            schedule: TrainSchedule::unsupervised(total_epochs),
            weibull: WeibullSchedule::default(),
            target_loss: None,
        }
    }
}

/// Unsupervised refinement result.
#[derive(Debug)]
pub struct RefineResult {
    pub params: NetworkParams,
    pub reconstruction: ComplexVolume,
    pub trace: Vec<TraceEntry>,
    /// Epochs where the Pearson term degenerated to its constant-input
    /// substitute.
    pub degenerate_epochs: Vec<usize>,
}

/// Fit the network to a single measured pattern by minimizing the
/// Pearson + chi-square composite on sqrt-intensities, back-propagating
/// through modulus, centered FFT, zero-padding, and the complex assembly.
pub fn unsupervised_refine(
    pattern: &DiffractionPattern,
    spec: &NetworkSpec,
    config: &RefineConfig,
) -> Result<RefineResult> {
    config.schedule.validate()?;
    let mut params = match &config.init {
        RefineInit::Random { seed } => init_params(spec, *seed)?,
        RefineInit::Transfer { path } => {
            let loaded = read_params(path)?;
            if loaded.spec.input_dims != spec.input_dims {
                return Err(CxdiError::ShapeMismatch(format!(
                    "transfer params expect input {:?}, pattern spec has {:?}",
                    loaded.spec.input_dims, spec.input_dims
                )));
            }
            loaded
        }
    };
    if pattern.grid.dims() != params.spec.input_dims {
        return Err(CxdiError::ShapeMismatch(format!(
            "pattern dims {:?} vs network input {:?}",
            pattern.grid.dims(),
            params.spec.input_dims
        )));
    }

    let sqrt_im = &pattern.amplitude;
    let phi_scale = params.spec.phi_scale;
    let mut flat = params.to_flat();
    let mut adam = AdamState::new(flat.len());
    let mut trace = Vec::with_capacity(config.schedule.total_epochs);
    let mut degenerate_epochs = Vec::new();

    for epoch in 0..config.schedule.total_epochs {
        let lr = config.schedule.lr_at(epoch);
        let opt = config.schedule.optimizer_at(epoch);
        let beta1 = weibull_beta1(epoch, &config.weibull);

        let (a_p, phi_p, tape) = network_forward_train(&params, sqrt_im)?;
        let rho = complex_from_amp_phase(&a_p, &phi_p, phi_scale);
        let padded = zero_pad_center(&rho, pattern.grid)?;
        let field = fft_forward(&padded);
        let sqrt_ip = modulus(&field);

        let (loss, degenerate) = unsupervised_loss_lenient(&sqrt_ip, sqrt_im, beta1, 1.0)?;
        if !loss.is_finite() {
            eprintln!("refinement diverged: l_u = {loss} at epoch {epoch} (lr {lr}, beta1 {beta1})");
            return Err(CxdiError::NonFiniteLoss(epoch));
        }
        if degenerate {
            degenerate_epochs.push(epoch);
            eprintln!("warning: constant predicted amplitude at epoch {epoch}; Pearson term set to 1");
        }
        trace.push(TraceEntry {
            epoch,
            loss,
            beta1,
            lr,
            optimizer: opt,
        });
        if config.target_loss.map_or(false, |t| loss <= t) {
            break;
        }

        let g_amp = RealVolume {
            grid: pattern.grid,
            data: unsupervised_loss_grad(&sqrt_ip, sqrt_im, beta1, 1.0)?,
        };
        let grad_rho = amplitude_grad_to_particle(&g_amp, &field, rho.grid)?;
        let (grad_a, grad_phi) = split_amp_phase_grad(&grad_rho, &a_p, &phi_p, phi_scale);
        let grad = network_backward(
            &params,
            Some(&tape),
            &RealVolume {
                grid: a_p.grid,
                data: grad_a,
            },
            &RealVolume {
                grid: phi_p.grid,
                data: grad_phi,
            },
        )?;

        match opt {
            OptimizerKind::Adam => adam_step(&mut flat, &grad, &mut adam, lr)?,
            OptimizerKind::Sgd => sgd_step(&mut flat, &grad, lr)?,
        }
        params.set_from_flat(&flat)?;
        if !params.all_finite() {
            return Err(CxdiError::NonFiniteLoss(epoch));
        }
    }

    let reconstruction = predict(&params, pattern)?;
    Ok(RefineResult {
        params,
        reconstruction,
        trace,
        degenerate_epochs,
    })
}
