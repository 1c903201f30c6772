//! `hbf`: generate channels, train and evaluate hybrid beamforming networks, run
//! classical baselines and parameter sweeps.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric abort, 4 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hbf_core::baselines::{baseline_sum_rate, BaselineMethod, BaselineSettings, PowerAllocation};
use hbf_core::channel::{generate_batch, read_dataset, write_dataset, ChannelBatch, ChannelModelParams};
use hbf_core::persist::{
    config_sidecar, load_model, results_csv, save_model, write_atomic, ExperimentConfig, ModelFile,
};
use hbf_core::precoding::{PhaseResolution, Structure};
use hbf_core::trainer::{
    evaluate_indices, mean, split_indices, sweep, sweep_csv, train, SweepAxis, TrainConfig,
};
use hbf_core::{Error, Result};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "hbf", version, about = "Hybrid beamforming design and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered-channel dataset (HBFD).
    GenData(GenDataArgs),
    /// Train a network from a JSON experiment config.
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset.
    Eval(EvalArgs),
    /// Run a classical baseline on a dataset.
    Baseline(BaselineArgs),
    /// Train and evaluate once per value of one hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    nt: usize,
    #[arg(long, default_value_t = 2)]
    nu: usize,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 5)]
    rays: usize,
    /// Per-cluster angular spread in degrees.
    #[arg(long, default_value_t = 7.5)]
    spread: f64,
}

/// Flags that override values of the config file.
#[derive(Args, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    structure: Option<Structure>,
    #[arg(long)]
    tau: Option<f64>,
    /// Phase resolution in bits, or "continuous".
    #[arg(long)]
    qbits: Option<String>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Pilot estimation noise power (defaults to sigma2).
    #[arg(long)]
    pilot_noise: Option<f64>,
    /// Record wall-clock seconds in the metrics (makes them run-dependent).
    #[arg(long)]
    record_timing: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_model: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Dataset file (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Evaluate at a different phase resolution (bits or "continuous").
    #[arg(long)]
    qbits: Option<String>,
    /// Only evaluate the held-out split implied by the model's training config.
    #[arg(long)]
    eval_split: bool,
}

#[derive(Args)]
struct BaselineArgs {
    /// One of zf-fdp, omp, pe-altmin-ls, fsa-altmin, dsa-greedy, random.
    #[arg(long)]
    method: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    nrf: usize,
    /// Phase resolution in bits, or "continuous".
    #[arg(long, default_value = "4")]
    qbits: String,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long, default_value_t = 1.0)]
    pmax: f64,
    /// Structure drawn by the random baseline.
    #[arg(long, default_value = "fc")]
    structure: Structure,
    /// Fully digital power allocation: water-filling or equal.
    #[arg(long, default_value = "water-filling")]
    power: String,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 2)]
    passes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// tau, qbits, sigma2 or structure.
    #[arg(long)]
    axis: String,
    /// Comma-separated values, e.g. "1,2,4,6".
    #[arg(long)]
    values: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format(_) => 4,
        Error::Numeric(_) | Error::NanAbort(_) | Error::Degenerate(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(exit_code(&e));
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NanAbort(d) = &e {
                eprintln!("  message: {}", d.message);
                eprintln!("  running loss: {}", d.running_loss);
                eprintln!("  parameter max |w|: {:?}", d.param_max_abs);
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Cap rayon's pool at `HBF_THREADS` when set.
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("HBF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("HBF_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn parse_resolution(s: &str) -> Result<PhaseResolution> {
    match s.trim() {
        "continuous" | "inf" => Ok(PhaseResolution::Continuous),
        v => match v.parse::<u32>() {
            Ok(q) if q >= 1 => Ok(PhaseResolution::Bits(q)),
            _ => Err(Error::Config(format!(
                "qbits: {v:?} is neither a positive integer nor \"continuous\""
            ))),
        },
    }
}

fn echo_config(output: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    write_atomic(&config_sidecar(output), text.as_bytes())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Parameter("--count must be at least 1".into()));
    }
    if a.nt == 0 || a.nu == 0 {
        return Err(Error::Parameter("--nt and --nu must be positive".into()));
    }
    let params = ChannelModelParams {
        n_clusters: a.clusters,
        rays_per_cluster: a.rays,
        angle_spread_deg: a.spread,
        seed: a.seed,
    };
    let batch = generate_batch(&params, a.nt, a.nu, a.count)?;
    write_dataset(&a.out, &batch)?;
    echo_config(
        &a.out,
        &json!({"command": "gen-data", "count": a.count, "n_t": a.nt, "n_u": a.nu, "channel": params}),
    )?;
    println!(
        "wrote {} channels ({} users × {} antennas, seed {}) to {}",
        a.count,
        a.nu,
        a.nt,
        a.seed,
        a.out.display()
    );
    Ok(())
}

fn apply_overrides(cfg: &mut TrainConfig, o: &TrainOverrides) -> Result<()> {
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.structure {
        cfg.structure = v;
    }
    if let Some(v) = o.tau {
        cfg.tau = v;
    }
    if let Some(v) = &o.qbits {
        cfg.q_bits = parse_resolution(v)?;
    }
    if let Some(v) = o.sigma2 {
        cfg.sigma2 = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.pilot_noise {
        cfg.pilot_noise_power = Some(v);
    }
    if o.record_timing {
        cfg.record_timing = true;
    }
    cfg.validate()
}

fn load_experiment(path: &Path, data: Option<PathBuf>, o: &TrainOverrides) -> Result<(ExperimentConfig, ChannelBatch)> {
    let mut exp = ExperimentConfig::load(path)?;
    if data.is_some() {
        exp.dataset = data;
    }
    apply_overrides(&mut exp.train, o)?;
    let batch = match &exp.dataset {
        Some(p) => read_dataset(p)?,
        None => {
            let n = exp.samples.expect("validated sample count");
            generate_batch(&exp.channel, exp.train.n_t, exp.train.n_u, n)?
        }
    };
    Ok((exp, batch))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (mut exp, data) = load_experiment(&a.config, a.data, &a.overrides)?;
    let model_path = a
        .out_model
        .or(exp.model_out.clone())
        .ok_or_else(|| Error::Config("model_out: no model path in the config or --out-model".into()))?;
    let metrics_path = a
        .metrics
        .or(exp.metrics_out.clone())
        .ok_or_else(|| Error::Config("metrics_out: no metrics path in the config or --metrics".into()))?;
    exp.model_out = Some(model_path.clone());
    exp.metrics_out = Some(metrics_path.clone());
    let (net, log) = train(&data, &exp.train)?;
    save_model(
        &model_path,
        &ModelFile {
            config: exp.train.clone(),
            net,
        },
    )?;
    write_atomic(&metrics_path, log.to_csv().as_bytes())?;
    let effective: serde_json::Value = serde_json::from_str(&exp.to_json()).expect("valid json");
    echo_config(&model_path, &effective)?;
    echo_config(&metrics_path, &effective)?;
    let last = log.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs on {} samples: train sum-rate {:.4}, eval sum-rate {:.4} bit/s/Hz",
        exp.train.structure,
        exp.train.epochs,
        log.train_indices.len(),
        last.train_sumrate,
        last.eval_sumrate
    );
    println!("model: {}\nmetrics: {}", model_path.display(), metrics_path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = read_dataset(&a.data)?;
    let cfg = &model.config;
    if (data.n_t, data.n_u) != (cfg.n_t, cfg.n_u) {
        return Err(Error::Config(format!(
            "dataset is {} users × {} antennas but the model expects {} × {}",
            data.n_u, data.n_t, cfg.n_u, cfg.n_t
        )));
    }
    let resolution = match &a.qbits {
        Some(q) => parse_resolution(q)?,
        None => cfg.q_bits,
    };
    let indices: Vec<usize> = if a.eval_split {
        split_indices(data.len(), cfg.train_fraction, cfg.seed)?.1
    } else {
        (0..data.len()).collect()
    };
    let rates = evaluate_indices(&model.net, &data, &indices, cfg, resolution)?;
    write_atomic(&a.out, results_csv(&indices, &rates).as_bytes())?;
    echo_config(
        &a.out,
        &json!({
            "command": "eval",
            "model": a.model,
            "data": a.data,
            "q_bits": resolution,
            "eval_split": a.eval_split,
            "train": cfg,
        }),
    )?;
    println!(
        "{} samples, mean sum-rate {:.4} bit/s/Hz -> {}",
        rates.len(),
        mean(&rates),
        a.out.display()
    );
    Ok(())
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let method: BaselineMethod = a.method.parse()?;
    let power = match a.power.as_str() {
        "water-filling" => PowerAllocation::WaterFilling,
        "equal" => PowerAllocation::Equal,
        p => {
            return Err(Error::Parameter(format!(
                "unknown power allocation {p:?}; valid: water-filling, equal"
            )))
        }
    };
    let data = read_dataset(&a.data)?;
    if a.nrf == 0 || a.nrf > data.n_t {
        return Err(Error::Parameter(format!(
            "--nrf {} must lie in 1..={} (the dataset's antenna count)",
            a.nrf, data.n_t
        )));
    }
    let mut settings = BaselineSettings::new(a.nrf, parse_resolution(&a.qbits)?, a.sigma2, a.pmax);
    settings.structure = a.structure;
    settings.power_allocation = power;
    settings.altmin_iters = a.iters;
    settings.dsa_passes = a.passes;
    settings.seed = a.seed;
    let rates = (0..data.len())
        .into_par_iter()
        .map(|i| baseline_sum_rate(method, &data.channels[i], &settings, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let indices: Vec<usize> = (0..data.len()).collect();
    write_atomic(&a.out, results_csv(&indices, &rates).as_bytes())?;
    echo_config(
        &a.out,
        &json!({
            "command": "baseline",
            "method": method.name(),
            "method_description": method.description(),
            "data": a.data,
            "n_rf": a.nrf,
            "q_bits": settings.resolution,
            "sigma2": a.sigma2,
            "p_max": a.pmax,
            "structure": a.structure,
            "power": power,
            "iters": a.iters,
            "passes": a.passes,
            "seed": a.seed,
        }),
    )?;
    println!(
        "{method} [{}]: {} samples, mean sum-rate {:.4} bit/s/Hz -> {}",
        method.description(),
        rates.len(),
        mean(&rates),
        a.out.display()
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let axis: SweepAxis = a.axis.parse()?;
    let values: Vec<String> = a
        .values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::Config("--values: at least one value is required".into()));
    }
    let (exp, data) = load_experiment(&a.config, None, &a.overrides)?;
    let rows = sweep(axis, &values, &exp.train, &data)?;
    write_atomic(&a.out, sweep_csv(axis, &rows).as_bytes())?;
    let effective: serde_json::Value = serde_json::from_str(&exp.to_json()).expect("valid json");
    echo_config(
        &a.out,
        &json!({"command": "sweep", "axis": axis.name(), "values": values, "experiment": effective}),
    )?;
    for r in &rows {
        println!(
            "{} = {}: train {:.4}, eval {:.4} bit/s/Hz",
            axis, r.value, r.train_sumrate, r.eval_sumrate
        );
    }
    println!("-> {}", a.out.display());
    Ok(())
}
