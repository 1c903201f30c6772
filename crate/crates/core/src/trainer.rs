//! Training, evaluation and parameter sweeps.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, Graph, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::baselines::{baseline_sum_rate, BaselineMethod, BaselineSettings};
use crate::channel::{add_pilot_noise_with, stream_rng, ChannelBatch};
use crate::error::{Error, Result};
use crate::net::{
    extract_designs, network_loss, step_noise, ConnectionMode, HbfNet, LossSpec, NetConfig,
};
use crate::precoding::{CMatrix, HbfDesign, PhaseResolution, Structure};

const SPLIT_STREAM: u64 = 0x5EED_0001;
const TRAIN_NOISE_STREAM: u64 = 0x5EED_0002;
const EVAL_NOISE_STREAM: u64 = 0x5EED_0003;
const SHUFFLE_STREAM: u64 = 0x5EED_0004;
const GUMBEL_STREAM: u64 = 0x5EED_0005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_t: usize,
    pub n_u: usize,
    pub n_rf: usize,
    pub structure: Structure,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub tau: f64,
    pub q_bits: PhaseResolution,
    /// Receiver noise power (W).
    pub sigma2: f64,
    /// Per-entry variance of the pilot estimation noise (W); `None` means `sigma2`.
    pub pilot_noise_power: Option<f64>,
    pub p_max: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub conv_channels: usize,
    pub dense_units: usize,
    /// Write wall-clock seconds into the metrics; when off the column is 0 so the
    /// metrics are byte-for-byte reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_t: 16,
            n_u: 2,
            n_rf: 4,
            structure: Structure::Fc,
            epochs: 50,
            batch_size: 250,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            optimizer: OptimizerKind::RAdam,
            tau: 1.5,
            q_bits: PhaseResolution::Bits(4),
            sigma2: 1.0,
            pilot_noise_power: None,
            p_max: 1.0,
            train_fraction: 0.85,
            seed: 0,
            conv_channels: 32,
            dense_units: 512,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        for (name, v) in [
            ("n_t", self.n_t),
            ("n_u", self.n_u),
            ("n_rf", self.n_rf),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("conv_channels", self.conv_channels),
            ("dense_units", self.dense_units),
        ] {
            if v == 0 {
                return bad(name, "must be positive".into());
            }
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", format!("{} must be ≥ 0", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight_decay", format!("{} must be ≥ 0", self.weight_decay));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad("tau", format!("{} must be > 0", self.tau));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return bad("sigma2", format!("{} must be > 0", self.sigma2));
        }
        if let Some(p) = self.pilot_noise_power {
            if !(p >= 0.0) || !p.is_finite() {
                return bad("pilot_noise_power", format!("{p} must be ≥ 0"));
            }
        }
        if !(self.p_max > 0.0) || !self.p_max.is_finite() {
            return bad("p_max", format!("{} must be > 0", self.p_max));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction", format!("{} must lie in (0, 1)", self.train_fraction));
        }
        self.net_config().validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            n_t: self.n_t,
            n_u: self.n_u,
            n_rf: self.n_rf,
            structure: self.structure,
            conv_channels: self.conv_channels,
            dense_units: self.dense_units,
            seed: self.seed,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let base = match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(self.learning_rate),
            OptimizerKind::RAdam => OptimizerConfig::radam(self.learning_rate),
        };
        base.with_weight_decay(self.weight_decay)
    }

    pub fn pilot_noise(&self) -> f64 {
        self.pilot_noise_power.unwrap_or(self.sigma2)
    }

    fn check_dataset(&self, data: &ChannelBatch) -> Result<()> {
        if (data.n_t, data.n_u) != (self.n_t, self.n_u) {
            return Err(Error::Config(format!(
                "dataset has N_T = {}, N_U = {} but the config expects N_T = {}, N_U = {}",
                data.n_t, data.n_u, self.n_t, self.n_u
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_sumrate: f64,
    pub eval_sumrate: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "epoch,train_loss,train_sumrate,eval_sumrate,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_sumrate, r.eval_sumrate, r.seconds
            );
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// State at a non-finite abort.
#[derive(Clone, Debug, PartialEq)]
pub struct NanDiagnostics {
    pub epoch: usize,
    pub batch: usize,
    pub message: String,
    /// Mean loss of the epoch's completed batches.
    pub running_loss: f64,
    /// Largest absolute value per parameter tensor.
    pub param_max_abs: Vec<f64>,
}

/// Seeded 85/15-style split of `0..n` into (train, eval) index sets.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_train = (n as f64 * fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Config(format!(
            "{n} samples cannot be split {fraction} into non-empty train and eval sets"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed ^ SPLIT_STREAM, 0));
    let mut eval = idx.split_off(n_train);
    let mut train = idx;
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

fn noisy_estimates(data: &ChannelBatch, indices: &[usize], power: f64, seed: u64, stream: u64) -> Result<Vec<CMatrix>> {
    indices
        .iter()
        .map(|&i| {
            let mut rng = stream_rng(seed ^ stream, i as u64);
            add_pilot_noise_with(&data.channels[i], power, &mut rng).map(|c| c.h_hat)
        })
        .collect()
}

/// Train a fresh network on the training split of `data`.
pub fn train(data: &ChannelBatch, cfg: &TrainConfig) -> Result<(HbfNet, MetricsLog)> {
    cfg.validate()?;
    cfg.check_dataset(data)?;
    let (train_idx, eval_idx) = split_indices(data.len(), cfg.train_fraction, cfg.seed)?;
    let mut net = HbfNet::new(cfg.net_config())?;
    let mut opt = OptimizerState::new(cfg.optimizer_config(), &net.params);
    let mut log = MetricsLog {
        records: Vec::with_capacity(cfg.epochs),
        train_indices: train_idx.clone(),
        eval_indices: eval_idx.clone(),
    };
    let mut order = train_idx.clone();
    let mut step = 0u64;
    let started = Instant::now();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed ^ SHUFFLE_STREAM, epoch as u64));
        let (mut loss_sum, mut rate_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let abort = |net: &HbfNet, message: String, running: f64| {
                Error::NanAbort(Box::new(NanDiagnostics {
                    epoch,
                    batch: b,
                    message,
                    running_loss: running,
                    param_max_abs: net.params.iter().map(|p| p.max_abs()).collect(),
                }))
            };
            let running = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
            let h_true: Vec<CMatrix> = chunk.iter().map(|&i| data.channels[i].clone()).collect();
            // fresh pilot noise every epoch: the stream index mixes epoch and sample
            let noise_seed = cfg.seed ^ TRAIN_NOISE_STREAM ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let h_hat = noisy_estimates(data, chunk, cfg.pilot_noise(), noise_seed, 0)?;
            let connection = ConnectionMode::Soft {
                tau: cfg.tau,
                noise: step_noise(cfg.seed ^ GUMBEL_STREAM, step, chunk.len(), cfg.n_t, cfg.n_rf),
            };
            let spec = LossSpec {
                h_true: &h_true,
                h_hat: &h_hat,
                bits: cfg.q_bits.bits(),
                connection,
                bn_mode: BatchNormMode::Train,
                sigma2: cfg.sigma2,
                p_max: cfg.p_max,
            };
            let mut g = Graph::new();
            let params = net.bind(&mut g)?;
            let (out, _, loss) = match network_loss(&net, &mut g, &params, &spec) {
                Ok(v) => v,
                Err(Error::Numeric(m)) => return Err(abort(&net, m, running)),
                Err(e) => return Err(e),
            };
            let grads = match g.backward(loss.loss) {
                Ok(v) => v,
                Err(Error::Numeric(m)) => return Err(abort(&net, m, running)),
                Err(e) => return Err(e),
            };
            let grads: Vec<_> = params.iter().map(|&p| grads.get(p)).collect();
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(abort(&net, "non-finite gradient".into(), running));
            }
            let loss_value = g.value(loss.loss).item()?;
            let rate_mean = g.value(loss.rates).sum() / chunk.len() as f64;
            net.update_running_stats(&g, &out)?;
            drop(g);
            opt.step(&mut net.params, &grads)?;
            if net.params.iter().any(|p| !p.is_finite()) {
                return Err(abort(&net, "non-finite parameter after the update".into(), running));
            }
            loss_sum += loss_value;
            rate_sum += rate_mean;
            batches += 1;
            step += 1;
        }
        let eval = evaluate_indices(&net, data, &eval_idx, cfg, cfg.q_bits)?;
        log.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_sumrate: rate_sum / batches as f64,
            eval_sumrate: mean(&eval),
            seconds: if cfg.record_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok((net, log))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Per-sample evaluation designs and their sum-rates against the true channels.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub designs: Vec<HbfDesign>,
    pub sum_rates: Vec<f64>,
}

/// Evaluate on the samples `indices` with hardened connections, inference-mode
/// batch-norm and phases quantized at `resolution`. Each sample's pilot noise is drawn
/// from its own fixed stream, so results do not depend on batching.
pub fn evaluate_designs(
    net: &HbfNet,
    data: &ChannelBatch,
    indices: &[usize],
    cfg: &TrainConfig,
    resolution: PhaseResolution,
) -> Result<Evaluation> {
    cfg.check_dataset(data)?;
    if net.config.structure != cfg.structure
        || (net.config.n_t, net.config.n_u, net.config.n_rf) != (cfg.n_t, cfg.n_u, cfg.n_rf)
    {
        return Err(Error::Config(format!(
            "model is {} with N_T = {}, N_U = {}, N_RF = {}; config asks for {} with N_T = {}, N_U = {}, N_RF = {}",
            net.config.structure, net.config.n_t, net.config.n_u, net.config.n_rf,
            cfg.structure, cfg.n_t, cfg.n_u, cfg.n_rf
        )));
    }
    let mut out = Evaluation {
        designs: Vec::with_capacity(indices.len()),
        sum_rates: Vec::with_capacity(indices.len()),
    };
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let h_true: Vec<CMatrix> = chunk.iter().map(|&i| data.channels[i].clone()).collect();
        let h_hat = noisy_estimates(data, chunk, cfg.pilot_noise(), cfg.seed, EVAL_NOISE_STREAM)?;
        let spec = LossSpec {
            h_true: &h_true,
            h_hat: &h_hat,
            bits: resolution.bits(),
            connection: ConnectionMode::Hard,
            bn_mode: BatchNormMode::Inference,
            sigma2: cfg.sigma2,
            p_max: cfg.p_max,
        };
        let mut g = Graph::new();
        let params = net.bind(&mut g)?;
        let (_, design, _) = network_loss(net, &mut g, &params, &spec)?;
        let designs = extract_designs(&g, &design, resolution, cfg.p_max)?;
        for (d, h) in designs.into_iter().zip(&h_true) {
            out.sum_rates.push(d.sum_rate(h, cfg.sigma2)?);
            out.designs.push(d);
        }
    }
    Ok(out)
}

/// Per-sample sum-rates on `indices`.
pub fn evaluate_indices(
    net: &HbfNet,
    data: &ChannelBatch,
    indices: &[usize],
    cfg: &TrainConfig,
    resolution: PhaseResolution,
) -> Result<Vec<f64>> {
    Ok(evaluate_designs(net, data, indices, cfg, resolution)?.sum_rates)
}

/// Per-sample sum-rates on every sample of `data`.
pub fn evaluate(net: &HbfNet, data: &ChannelBatch, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..data.len()).collect();
    evaluate_indices(net, data, &all, cfg, cfg.q_bits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Tau,
    Qbits,
    Sigma2,
    Structure,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Tau => "tau",
            SweepAxis::Qbits => "qbits",
            SweepAxis::Sigma2 => "sigma2",
            SweepAxis::Structure => "structure",
        }
    }

    /// Apply one textual axis value to a copy of `base`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        let parse_f = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{}: cannot parse {v:?} as a number", self.name())))
        };
        match self {
            SweepAxis::Tau => cfg.tau = parse_f(value)?,
            SweepAxis::Sigma2 => cfg.sigma2 = parse_f(value)?,
            SweepAxis::Qbits => {
                cfg.q_bits = match value.trim() {
                    "continuous" | "inf" => PhaseResolution::Continuous,
                    v => match v.parse::<u32>() {
                        Ok(q) if q >= 1 => PhaseResolution::Bits(q),
                        _ => {
                            return Err(Error::Config(format!(
                                "qbits: {v:?} is neither a positive integer nor \"continuous\""
                            )))
                        }
                    },
                }
            }
            SweepAxis::Structure => cfg.structure = value.trim().parse()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(SweepAxis::Tau),
            "qbits" => Ok(SweepAxis::Qbits),
            "sigma2" => Ok(SweepAxis::Sigma2),
            "structure" => Ok(SweepAxis::Structure),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?}; valid axes: tau, qbits, sigma2, structure"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    /// Training-phase mean sum-rate of the final epoch.
    pub train_sumrate: f64,
    pub eval_sumrate: f64,
    /// Mean sum-rate of each baseline on the evaluation split (perfect CSI).
    pub baselines: Vec<(BaselineMethod, f64)>,
}

/// Baselines reported next to each sweep row.
pub fn sweep_baselines(structure: Structure) -> [BaselineMethod; 3] {
    [
        BaselineMethod::ZfFdp,
        BaselineMethod::for_structure(structure),
        BaselineMethod::Random,
    ]
}

/// Mean baseline sum-rate over `indices`.
pub fn baseline_mean(method: BaselineMethod, data: &ChannelBatch, indices: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let mut settings = BaselineSettings::new(cfg.n_rf, cfg.q_bits, cfg.sigma2, cfg.p_max);
    settings.structure = cfg.structure;
    settings.seed = cfg.seed;
    let rates = indices
        .par_iter()
        .map(|&i| baseline_sum_rate(method, &data.channels[i], &settings, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&rates))
}

/// One train + evaluate per value; rows come back in the order of `values`.
pub fn sweep(axis: SweepAxis, values: &[String], base: &TrainConfig, data: &ChannelBatch) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    configs
        .par_iter()
        .zip(values)
        .map(|(cfg, value)| {
            let (net, log) = train(data, cfg)?;
            let eval = evaluate_indices(&net, data, &log.eval_indices, cfg, cfg.q_bits)?;
            let baselines = sweep_baselines(cfg.structure)
                .into_iter()
                .map(|m| Ok((m, baseline_mean(m, data, &log.eval_indices, cfg)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                value: value.trim().to_string(),
                train_sumrate: log.last().map_or(f64::NAN, |r| r.train_sumrate),
                eval_sumrate: mean(&eval),
                baselines,
            })
        })
        .collect()
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("{},train_sumrate,eval_sumrate,zf_fdp,altmin,altmin_method,random\n", axis.name());
    for r in rows {
        let get = |i: usize| r.baselines.get(i).map_or(f64::NAN, |b| b.1);
        let method = r.baselines.get(1).map_or("", |b| b.0.name());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.value,
            r.train_sumrate,
            r.eval_sumrate,
            get(0),
            get(1),
            method,
            get(2)
        );
    }
    s
}
