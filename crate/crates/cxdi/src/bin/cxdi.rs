//! Command-line entry point: dataset generation, supervised training,
//! prediction, unsupervised refinement, iterative reconstruction, ensembles,
//! Fourier-spectral-weight reports, and raw/.cxv conversion.
//!
//! Every command writes a `run.json` provenance record containing the full
//! effective config plus SHA-256 hashes of its input files; re-running a
//! command with `--config run.json` reproduces its numerical artifacts
//! byte-for-byte. All outputs are written atomically (temp file + rename).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cxdi::analysis::ensemble_run;
use cxdi::cxv::{read_volume, write_complex, write_pattern, write_real, VolumeFile};
use cxdi::datagen::{generate_dataset, ParamRanges, SampleParams, SampleRecord};
use cxdi::error::{CxdiError, Result};
use cxdi::iterative::{run_schedule, IterativeSchedule, RunReport};
use cxdi::metrics::{
    chi2_loss, fourier_spectral_weight, pearson_loss, SupervisedWeights, WeibullSchedule,
};
use cxdi::neuralnet::{read_params, write_params, NetworkSpec};
use cxdi::optimize::{
    predict, supervised_train, trace_to_csv, unsupervised_refine, RefineConfig, RefineInit,
    TrainSchedule,
};
use cxdi::volume::{
    fft_forward, modulus, zero_pad_center, ComplexVolume, DiffractionPattern, Grid3, RealVolume,
};

#[derive(Parser)]
#[command(name = "cxdi", version, about = "3D coherent diffraction phase-retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic particle/pattern dataset
    Generate(GenerateArgs),
    /// Train the network on a generated dataset
    Train(TrainArgs),
    /// One-shot network inversion of a pattern
    Predict(PredictArgs),
    /// Fit the network to a single pattern (unsupervised refinement)
    Refine(RefineArgs),
    /// Iterative phase retrieval (ER/HIO with shrink-wrap)
    Iterative(IterativeArgs),
    /// Repeated seeded reconstructions with aggregate statistics
    Ensemble(EnsembleArgs),
    /// Fourier spectral weight profile of a pattern or reconstruction
    Fsw(FswArgs),
    /// Convert between raw float stacks and .cxv
    Convert(ConvertArgs),
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("CXDI_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Iterative(a) => cmd_iterative(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Fsw(a) => cmd_fsw(a),
        Command::Convert(a) => cmd_convert(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 = config error, 3 = numerical failure, 4 = I/O failure.
fn exit_code(e: &CxdiError) -> u8 {
    match e {
        CxdiError::Config(_) | CxdiError::Json(_) => 2,
        CxdiError::Io(_) => 4,
        _ => 3,
    }
}

// ---------------------------------------------------------------------------
// provenance + atomic output helpers

#[derive(Serialize, Deserialize)]
struct RunRecord<C> {
    command: String,
    config: C,
    /// SHA-256 of every input file, keyed by path as given.
    inputs: BTreeMap<String, String>,
    tool_version: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for p in paths {
        map.insert(p.display().to_string(), sha256_file(p)?);
    }
    Ok(map)
}

/// Write bytes to `path` atomically via a sibling temp file.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!(".{name}.tmp"))
}

/// Run a writer against a temp path, then rename into place.
fn atomic_with(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = tmp_path(path);
    write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_run_json<C: Serialize>(
    out_dir: &Path,
    command: &str,
    config: &C,
    inputs: BTreeMap<String, String>,
) -> Result<()> {
    let record = RunRecord {
        command: command.to_string(),
        config,
        inputs,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    atomic_write(
        &out_dir.join("run.json"),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )
}

/// Load a config either from explicit flags or from `--config file.json`.
/// The file may be a bare config or a previously written `run.json`
/// (detected by its `config` wrapper), so runs replay directly from their
/// provenance records.
fn load_config<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let inner = match value.get("config") {
        Some(c) if value.get("command").is_some() => c.clone(),
        _ => value,
    };
    Ok(serde_json::from_value(inner)?)
}

fn require<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| CxdiError::Config(format!("missing required --{flag}")))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CxdiError::Config(format!("bad width list '{s}'")))
        })
        .collect()
}

fn read_pattern(path: &Path) -> Result<DiffractionPattern> {
    read_volume(path)?.into_pattern()
}

// ---------------------------------------------------------------------------
// generate

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of samples
    #[arg(long)]
    count: Option<usize>,
    /// Cubic grid extent of the diffraction patterns
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Phase scale applied to the synthesized [0,1] phase fields
    #[arg(long)]
    phi_scale: Option<f64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct GenerateConfig {
    count: usize,
    grid: usize,
    seed: u64,
    #[serde(default = "default_phi_scale")]
    phi_scale: f64,
    out: PathBuf,
}

fn default_phi_scale() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    params: SampleParams,
    particle: String,
    pattern: String,
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let config: GenerateConfig = match args.config {
        Some(path) => load_config(&path)?,
        None => GenerateConfig {
            count: require(args.count, "count")?,
            grid: require(args.grid, "grid")?,
            seed: require(args.seed, "seed")?,
            phi_scale: args.phi_scale.unwrap_or(1.0),
            out: require(args.out, "out")?,
        },
    };
    if config.count == 0 {
        return Err(CxdiError::Config("--count must be positive".into()));
    }
    let grid = Grid3::cube(config.grid)?;
    let mut ranges = ParamRanges::defaults_for(grid);
    ranges.phi_scale = config.phi_scale;
    ensure_dir(&config.out)?;

    let mut manifest = Vec::with_capacity(config.count);
    for record in generate_dataset(grid, ranges, config.count, config.seed) {
        let record = record?;
        let i = record.params.index;
        let particle_name = format!("sample_{i:05}_particle.cxv");
        let pattern_name = format!("sample_{i:05}_pattern.cxv");
        atomic_with(&config.out.join(&particle_name), |tmp| {
            write_complex(&record.particle, tmp, &format!("particle index={i}"))
        })?;
        atomic_with(&config.out.join(&pattern_name), |tmp| {
            write_pattern(&record.pattern, tmp)
        })?;
        manifest.push(ManifestEntry {
            params: record.params,
            particle: particle_name,
            pattern: pattern_name,
        });
    }
    atomic_write(
        &config.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    write_run_json(&config.out, "generate", &config, BTreeMap::new())?;
    println!("wrote {} samples to {}", config.count, config.out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Vec<ManifestEntry> =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    if manifest.is_empty() {
        return Err(CxdiError::EmptyDataset);
    }
    manifest
        .into_iter()
        .map(|e| {
            let particle = read_volume(dir.join(&e.particle))?.into_complex()?;
            let pattern = read_volume(dir.join(&e.pattern))?.into_pattern()?;
            Ok(SampleRecord {
                particle,
                pattern,
                params: e.params,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `generate`
    #[arg(long)]
    data: Option<PathBuf>,
    /// Encoder channel widths, comma separated
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    switch_every: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct TrainConfig {
    data: PathBuf,
    widths: Vec<usize>,
    schedule: TrainSchedule,
    seed: u64,
    out: PathBuf,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config: TrainConfig = match args.config {
        Some(path) => load_config(&path)?,
        None => {
            let mut schedule = TrainSchedule::supervised();
            if let Some(v) = args.epochs {
                schedule.total_epochs = v;
            }
            if let Some(v) = args.switch_every {
                schedule.switch_every = v;
            }
            if let Some(v) = args.lr0 {
                schedule.lr0 = v;
            }
            if let Some(v) = args.lr_decay {
                schedule.lr_decay = v;
            }
            if let Some(v) = args.decay_every {
                schedule.decay_every = v;
            }
            TrainConfig {
                data: require(args.data, "data")?,
                widths: parse_widths(args.widths.as_deref().unwrap_or("16,32,64"))?,
                schedule,
                seed: args.seed.unwrap_or(0),
                out: require(args.out, "out")?,
            }
        }
    };
    let dataset = load_dataset(&config.data)?;
    let dims = dataset[0].pattern.grid.dims();
    let spec = NetworkSpec::new(dims, config.widths.clone());
    spec.validate()?;
    ensure_dir(&config.out)?;

    let result = supervised_train(
        &dataset,
        &spec,
        &config.schedule,
        &SupervisedWeights::default(),
        config.seed,
    )?;

    atomic_with(&config.out.join("params.bin"), |tmp| {
        write_params(tmp, &result.params)
    })?;
    atomic_write(
        &config.out.join("train_loss.csv"),
        trace_to_csv(&result.train_trace).as_bytes(),
    )?;
    atomic_write(
        &config.out.join("val_loss.csv"),
        trace_to_csv(&result.val_trace).as_bytes(),
    )?;
    let inputs = hash_inputs(&[config.data.join("manifest.json").as_path()])?;
    write_run_json(&config.out, "train", &config, inputs)?;
    println!(
        "trained {} epochs; best checkpoint at epoch {}; final train loss {:.6}",
        config.schedule.total_epochs,
        result.best_epoch,
        result.train_trace.last().map(|e| e.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// predict

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained parameter file
    #[arg(long)]
    params: Option<PathBuf>,
    /// Pattern .cxv
    #[arg(long)]
    pattern: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct PredictConfig {
    params: PathBuf,
    pattern: PathBuf,
    out: PathBuf,
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let config: PredictConfig = match args.config {
        Some(path) => load_config(&path)?,
        None => PredictConfig {
            params: require(args.params, "params")?,
            pattern: require(args.pattern, "pattern")?,
            out: require(args.out, "out")?,
        },
    };
    let params = read_params(&config.params)?;
    let pattern = read_pattern(&config.pattern)?;
    ensure_dir(&config.out)?;

    let start = std::time::Instant::now();
    let recon = predict(&params, &pattern)?;
    let elapsed = start.elapsed();

    atomic_with(&config.out.join("recon.cxv"), |tmp| {
        write_complex(&recon, tmp, "network prediction")
    })?;
    let inputs = hash_inputs(&[config.params.as_path(), config.pattern.as_path()])?;
    write_run_json(&config.out, "predict", &config, inputs)?;
    eprintln!(
        "inversion took {:.3} ms; output grid {:?}",
        elapsed.as_secs_f64() * 1e3,
        recon.grid.dims()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// refine

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pattern: Option<PathBuf>,
    /// "random" or "transfer"
    #[arg(long)]
    init: Option<String>,
    /// Seed for random init
    #[arg(long)]
    seed: Option<u64>,
    /// Pretrained parameter file for transfer init
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    widths: Option<String>,
    /// Weibull epoch divisor
    #[arg(long)]
    divisor: Option<f64>,
    /// Stop once the loss reaches this value
    #[arg(long)]
    target_loss: Option<f64>,
    #[arg(long)]
    phi_scale: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct RefineCliConfig {
    pattern: PathBuf,
    widths: Vec<usize>,
    #[serde(default = "default_phi_scale")]
    phi_scale: f64,
    refine: RefineConfig,
    out: PathBuf,
}

fn cmd_refine(args: RefineArgs) -> Result<()> {
    let config: RefineCliConfig = match args.config {
        Some(path) => load_config(&path)?,
        None => {
            let epochs = args.epochs.unwrap_or(20_000);
            let init = match args.init.as_deref().unwrap_or("random") {
                "random" => RefineInit::Random {
                    seed: args.seed.unwrap_or(0),
                },
                "transfer" => RefineInit::Transfer {
                    path: require(args.params, "params")?,
                },
                other => {
                    return Err(CxdiError::Config(format!(
                        "--init must be 'random' or 'transfer', got '{other}'"
                    )))
                }
            };
            let mut weibull = WeibullSchedule::default();
            if let Some(d) = args.divisor {
                weibull.divisor = d;
            }
            RefineCliConfig {
                pattern: require(args.pattern, "pattern")?,
                widths: parse_widths(args.widths.as_deref().unwrap_or("8,16"))?,
                phi_scale: args.phi_scale.unwrap_or(1.0),
                refine: RefineConfig {
                    init,
                    schedule: TrainSchedule::unsupervised(epochs),
                    weibull,
                    target_loss: args.target_loss,
                },
                out: require(args.out, "out")?,
            }
        }
    };
    let pattern = read_pattern(&config.pattern)?;
    let mut spec = NetworkSpec::new(pattern.grid.dims(), config.widths.clone());
    spec.phi_scale = config.phi_scale;
    spec.validate()?;
    ensure_dir(&config.out)?;

    let result = unsupervised_refine(&pattern, &spec, &config.refine)?;

    atomic_with(&config.out.join("params.bin"), |tmp| {
        write_params(tmp, &result.params)
    })?;
    atomic_with(&config.out.join("recon.cxv"), |tmp| {
        write_complex(&result.reconstruction, tmp, "unsupervised refinement")
    })?;
    atomic_write(
        &config.out.join("loss.csv"),
        trace_to_csv(&result.trace).as_bytes(),
    )?;
    let mut input_paths: Vec<&Path> = vec![config.pattern.as_path()];
    if let RefineInit::Transfer { path } = &config.refine.init {
        input_paths.push(path.as_path());
    }
    let inputs = hash_inputs(&input_paths)?;
    write_run_json(&config.out, "refine", &config, inputs)?;
    let last = result.trace.last();
    println!(
        "refined {} epochs; final loss {:.6e}",
        result.trace.len(),
        last.map(|e| e.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// iterative

#[derive(Args)]
struct IterativeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pattern: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    hio_beta: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct IterativeConfig {
    pattern: PathBuf,
    seed: u64,
    schedule: IterativeSchedule,
    out: PathBuf,
}

fn cmd_iterative(args: IterativeArgs) -> Result<()> {
    let config: IterativeConfig = match args.config {
        Some(path) => load_config(&path)?,
        None => {
            let mut schedule = IterativeSchedule::default();
            if let Some(v) = args.iterations {
                schedule.total_iters = v;
            }
            if let Some(v) = args.hio_beta {
                schedule.hio_beta = v;
            }
            IterativeConfig {
                pattern: require(args.pattern, "pattern")?,
                seed: args.seed.unwrap_or(0),
                schedule,
                out: require(args.out, "out")?,
            }
        }
    };
    let pattern = read_pattern(&config.pattern)?;
    ensure_dir(&config.out)?;

    let (state, report) = run_schedule(&pattern, &config.schedule, config.seed)?;

    atomic_with(&config.out.join("recon.cxv"), |tmp| {
        write_complex(&state.estimate, tmp, "iterative reconstruction")
    })?;
    let mut csv = String::from("iteration,chi2\n");
    for (i, v) in &report.loss_trace {
        csv.push_str(&format!("{i},{v}\n"));
    }
    atomic_write(&config.out.join("loss.csv"), csv.as_bytes())?;
    atomic_write(
        &config.out.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    let inputs = hash_inputs(&[config.pattern.as_path()])?;
    write_run_json(&config.out, "iterative", &config, inputs)?;
    println!(
        "iterative run finished: chi2 {:.3e}, r_p {:.4}",
        report.final_chi2, report.final_rp
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ensemble

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pattern: Option<PathBuf>,
    /// "iterative" or "refine"
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    /// Concurrent runs
    #[arg(long)]
    jobs: Option<usize>,
    /// Refinement epochs (refine method)
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    target_loss: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum EnsembleMethod {
    Iterative,
    Refine,
}

#[derive(Serialize, Deserialize)]
struct EnsembleConfig {
    pattern: PathBuf,
    method: EnsembleMethod,
    runs: usize,
    base_seed: u64,
    jobs: Option<usize>,
    /// Refine-method settings; ignored for the iterative method.
    epochs: usize,
    widths: Vec<usize>,
    target_loss: Option<f64>,
    out: PathBuf,
}

/// Score a refinement the same way iterative runs are scored: chi-square and
/// modified Pearson between predicted and measured sqrt-intensities, plus the
/// FSW of the predicted pattern.
fn refine_report(
    pattern: &DiffractionPattern,
    spec: &NetworkSpec,
    refine: &RefineConfig,
    seed: u64,
) -> Result<RunReport> {
    let result = unsupervised_refine(pattern, spec, refine)?;
    let padded = zero_pad_center(&result.reconstruction, pattern.grid)?;
    let amp = modulus(&fft_forward(&padded));
    let final_chi2 = chi2_loss(&amp, &pattern.amplitude)?;
    let final_rp = 1.0 - pearson_loss(&amp, &pattern.amplitude).unwrap_or(1.0);
    let n = pattern.grid.dims();
    let fsw = fourier_spectral_weight(
        &DiffractionPattern::new(amp, "refined"),
        n[0].min(n[1]).min(n[2]) / 2,
    );
    Ok(RunReport {
        seed,
        final_chi2,
        final_rp,
        loss_trace: result.trace.iter().map(|e| (e.epoch, e.loss)).collect(),
        fsw,
        alignment: None,
    })
}

fn cmd_ensemble(args: EnsembleArgs) -> Result<()> {
    let config: EnsembleConfig = match args.config {
        Some(path) => load_config(&path)?,
        None => {
            let method = match args.method.as_deref() {
                Some("iterative") => EnsembleMethod::Iterative,
                Some("refine") => EnsembleMethod::Refine,
                other => {
                    return Err(CxdiError::Config(format!(
                        "--method must be 'iterative' or 'refine', got {other:?}"
                    )))
                }
            };
            EnsembleConfig {
                pattern: require(args.pattern, "pattern")?,
                method,
                runs: args.runs.unwrap_or(20),
                base_seed: args.base_seed.unwrap_or(0),
                jobs: args.jobs,
                epochs: args.epochs.unwrap_or(2000),
                widths: parse_widths(args.widths.as_deref().unwrap_or("8,16"))?,
                target_loss: args.target_loss,
                out: require(args.out, "out")?,
            }
        }
    };
    if config.runs == 0 {
        return Err(CxdiError::Config("--runs must be positive".into()));
    }
    let pattern = read_pattern(&config.pattern)?;
    ensure_dir(&config.out)?;

    let report = match config.method {
        EnsembleMethod::Iterative => {
            let schedule = IterativeSchedule::default();
            ensemble_run(config.runs, config.base_seed, config.jobs, |seed| {
                run_schedule(&pattern, &schedule, seed).map(|(_, r)| r)
            })
        }
        EnsembleMethod::Refine => {
            let spec = NetworkSpec::new(pattern.grid.dims(), config.widths.clone());
            spec.validate()?;
            ensemble_run(config.runs, config.base_seed, config.jobs, |seed| {
                let refine = RefineConfig {
                    target_loss: config.target_loss,
                    ..RefineConfig::random(seed, config.epochs)
                };
                refine_report(&pattern, &spec, &refine, seed)
            })
        }
    };

    atomic_write(
        &config.out.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    let inputs = hash_inputs(&[config.pattern.as_path()])?;
    write_run_json(&config.out, "ensemble", &config, inputs)?;
    println!(
        "{} runs ({} failed): chi2 {:.4e} +/- {:.4e}",
        config.runs, report.failures, report.chi2.mean, report.chi2.std
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fsw

#[derive(Args)]
struct FswArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pattern or complex-density .cxv
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    shells: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct FswConfig {
    input: PathBuf,
    shells: Option<usize>,
    out: PathBuf,
}

fn cmd_fsw(args: FswArgs) -> Result<()> {
    let config: FswConfig = match args.config {
        Some(path) => load_config(&path)?,
        None => FswConfig {
            input: require(args.input, "input")?,
            shells: args.shells,
            out: require(args.out, "out")?,
        },
    };
    // a complex density is propagated to reciprocal space on the doubled
    // (oversampled) grid first, matching how patterns are synthesized
    let pattern = match read_volume(&config.input)? {
        VolumeFile::Pattern(p) => p,
        VolumeFile::Complex(v) => {
            let doubled = Grid3::new(v.grid.nx * 2, v.grid.ny * 2, v.grid.nz * 2)?;
            let amp = modulus(&fft_forward(&zero_pad_center(&v, doubled)?));
            DiffractionPattern::new(amp, "derived from complex density")
        }
        VolumeFile::Real(_) => {
            return Err(CxdiError::Config(
                "fsw expects a diffraction_amplitude or complex_density volume".into(),
            ))
        }
    };
    let n = pattern.grid.dims();
    let shells = config.shells.unwrap_or(n[0].min(n[1]).min(n[2]) / 2);
    let profile = fourier_spectral_weight(&pattern, shells);
    ensure_dir(&config.out)?;
    atomic_write(&config.out.join("fsw.csv"), profile.to_csv().as_bytes())?;
    let inputs = hash_inputs(&[config.input.as_path()])?;
    write_run_json(&config.out, "fsw", &config, inputs)?;
    println!("wrote {} shells to {}", shells, config.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// convert

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input file: .cxv exports to raw, anything else imports raw -> .cxv
    #[arg(long)]
    input: Option<PathBuf>,
    /// Raw-import dims, comma separated ("64,64,64")
    #[arg(long)]
    dims: Option<String>,
    /// Raw-import kind: diffraction_amplitude | real | complex_density
    #[arg(long)]
    kind: Option<String>,
    /// Raw scalar type: f32 | f64
    #[arg(long)]
    dtype: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct ConvertConfig {
    input: PathBuf,
    dims: Option<[usize; 3]>,
    kind: Option<String>,
    dtype: Option<String>,
    out: PathBuf,
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CxdiError::Config(format!("bad dims '{s}'")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(CxdiError::Config(format!("dims need 3 entries, got '{s}'")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn read_raw_scalars(path: &Path, dtype: &str) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    match dtype {
        "f32" => {
            if bytes.len() % 4 != 0 {
                return Err(CxdiError::Config("raw length not a multiple of 4".into()));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect())
        }
        "f64" => {
            if bytes.len() % 8 != 0 {
                return Err(CxdiError::Config("raw length not a multiple of 8".into()));
            }
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        }
        other => Err(CxdiError::Config(format!("unsupported dtype '{other}'"))),
    }
}

fn cmd_convert(args: ConvertArgs) -> Result<()> {
    let config: ConvertConfig = match args.config {
        Some(path) => load_config(&path)?,
        None => ConvertConfig {
            input: require(args.input, "input")?,
            dims: args.dims.as_deref().map(parse_dims).transpose()?,
            kind: args.kind,
            dtype: args.dtype,
            out: require(args.out, "out")?,
        },
    };

    if let Some(dir) = config.out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    if config.input.extension().is_some_and(|e| e == "cxv") {
        // .cxv -> raw little-endian f64 stack (complex as re,im pairs)
        let scalars: Vec<f64> = match read_volume(&config.input)? {
            VolumeFile::Complex(v) => v.data.iter().flat_map(|c| [c.re, c.im]).collect(),
            VolumeFile::Pattern(p) => p.amplitude.data,
            VolumeFile::Real(v) => v.data,
        };
        let mut bytes = Vec::with_capacity(scalars.len() * 8);
        for s in scalars {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        atomic_write(&config.out, &bytes)?;
    } else {
        // raw -> .cxv
        let dims = config
            .dims
            .ok_or_else(|| CxdiError::Config("raw import needs --dims".into()))?;
        let kind = config.kind.as_deref().unwrap_or("real");
        let dtype = config.dtype.as_deref().unwrap_or("f32");
        let grid = Grid3::new(dims[0], dims[1], dims[2])?;
        let scalars = read_raw_scalars(&config.input, dtype)?;
        let tag = format!("imported from {}", config.input.display());
        match kind {
            "diffraction_amplitude" => {
                let vol = RealVolume::from_data(grid, scalars)?;
                let p = DiffractionPattern::new(vol, tag.as_str());
                atomic_with(&config.out, |tmp| write_pattern(&p, tmp))?;
            }
            "real" => {
                let vol = RealVolume::from_data(grid, scalars)?;
                atomic_with(&config.out, |tmp| write_real(&vol, tmp, &tag))?;
            }
            "complex_density" => {
                if scalars.len() != 2 * grid.len() {
                    return Err(CxdiError::Config(format!(
                        "complex import needs {} scalars, got {}",
                         2 * grid.len(),
                        scalars.len()
                    )));
                }
                let data = scalars
                    .chunks_exact(2)
                    .map(|p| num_complex::Complex64::new(p[0], p[1]))
                    .collect();
                let vol = ComplexVolume::from_data(grid, data)?;
                atomic_with(&config.out, |tmp| write_complex(&vol, tmp, &tag))?;
            }
            other => {
                return Err(CxdiError::Config(format!("unsupported kind '{other}'")));
            }
        }
    }
    let inputs = hash_inputs(&[config.input.as_path()])?;
    let run_dir = config
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    write_run_json(run_dir, "convert", &config, inputs)?;
    Ok(())
}
