//! The hybrid-beamforming network: a two-layer convolutional trunk and two dense
//! layers feeding four linear heads (analog phases, digital real part, digital
//! imaginary part and, for the dynamic subarray, connection logits).
//!
//! Everything downstream of the heads, from phase quantization to the sum-rate, is
//! built in the autodiff graph so the negative sum-rate can be minimized directly.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, BatchNormParams, Graph, Tensor, Var};
use crate::channel::stream_rng;
use crate::error::{Error, Result};
use crate::precoding::{
    harden_connections, normalize_power, AnalogPrecoder, CMatrix, ConnectionMatrix, HbfDesign,
    PhaseResolution, Phases, Structure,
};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Floor on connection probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-10;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub n_t: usize,
    pub n_u: usize,
    pub n_rf: usize,
    pub structure: Structure,
    #[serde(default = "default_conv_channels")]
    pub conv_channels: usize,
    #[serde(default = "default_dense_units")]
    pub dense_units: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_conv_channels() -> usize {
    32
}

fn default_dense_units() -> usize {
    512
}

impl NetConfig {
    pub fn new(n_t: usize, n_u: usize, n_rf: usize, structure: Structure) -> Self {
        Self {
            n_t,
            n_u,
            n_rf,
            structure,
            conv_channels: default_conv_channels(),
            dense_units: default_dense_units(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_t", self.n_t),
            ("n_u", self.n_u),
            ("n_rf", self.n_rf),
            ("conv_channels", self.conv_channels),
            ("dense_units", self.dense_units),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_rf > self.n_t {
            return Err(Error::Config(format!(
                "n_rf = {} exceeds n_t = {}",
                self.n_rf, self.n_t
            )));
        }
        if self.structure == Structure::Fsa && !self.n_t.is_multiple_of(self.n_rf) {
            return Err(Error::Config(format!(
                "fixed subarray needs n_rf | n_t, got n_t = {}, n_rf = {}",
                self.n_t, self.n_rf
            )));
        }
        Ok(())
    }

    /// Width of the analog-phase head.
    pub fn phase_outputs(&self) -> usize {
        match self.structure {
            Structure::Fc => self.n_t * self.n_rf,
            Structure::Fsa | Structure::Dsa => self.n_t,
        }
    }

    pub fn digital_outputs(&self) -> usize {
        self.n_rf * self.n_u
    }

    pub fn connection_outputs(&self) -> Option<usize> {
        (self.structure == Structure::Dsa).then_some(self.n_t * self.n_rf)
    }

    fn flat_features(&self) -> usize {
        self.conv_channels * self.n_t * self.n_u
    }

    /// Names and shapes of every learned tensor, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (c, d) = (self.conv_channels, self.dense_units);
        let mut specs = vec![
            ("conv1.weight".to_string(), vec![c, 2, KERNEL, KERNEL]),
            ("conv1.bias".into(), vec![c]),
            ("bn1.gamma".into(), vec![c]),
            ("bn1.beta".into(), vec![c]),
            ("conv2.weight".into(), vec![c, c, KERNEL, KERNEL]),
            ("conv2.bias".into(), vec![c]),
            ("bn2.gamma".into(), vec![c]),
            ("bn2.beta".into(), vec![c]),
            ("fc1.weight".into(), vec![self.flat_features(), d]),
            ("fc1.bias".into(), vec![d]),
            ("bn3.gamma".into(), vec![d]),
            ("bn3.beta".into(), vec![d]),
            ("fc2.weight".into(), vec![d, d]),
            ("fc2.bias".into(), vec![d]),
            ("bn4.gamma".into(), vec![d]),
            ("bn4.beta".into(), vec![d]),
            ("head_phase.weight".into(), vec![d, self.phase_outputs()]),
            ("head_phase.bias".into(), vec![self.phase_outputs()]),
            ("head_dre.weight".into(), vec![d, self.digital_outputs()]),
            ("head_dre.bias".into(), vec![self.digital_outputs()]),
            ("head_dim.weight".into(), vec![d, self.digital_outputs()]),
            ("head_dim.bias".into(), vec![self.digital_outputs()]),
        ];
        if let Some(k) = self.connection_outputs() {
            specs.push(("head_conn.weight".into(), vec![d, k]));
            specs.push(("head_conn.bias".into(), vec![k]));
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Channel widths of the four batch-norm layers.
    pub fn bn_widths(&self) -> [usize; 4] {
        let (c, d) = (self.conv_channels, self.dense_units);
        [c, c, d, d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HbfNet {
    pub config: NetConfig,
    pub params: Vec<Tensor>,
    pub running: Vec<RunningStats>,
}

/// Head activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub phase_logits: Var,
    pub digital_re: Var,
    pub digital_im: Var,
    pub connection_logits: Option<Var>,
    /// The four batch-norm nodes, for running-statistics updates.
    pub bn_nodes: Vec<Var>,
}

impl HbfNet {
    /// Build a network with fan-in scaled uniform initialization seeded by `config.seed`.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut fan_in = 1;
        for (name, shape) in config.param_specs() {
            let t = if name.ends_with(".weight") {
                fan_in = if shape.len() == 4 {
                    shape[1] * shape[2] * shape[3]
                } else {
                    shape[0]
                };
                uniform(&shape, fan_in, &mut rng)
            } else if name.ends_with(".bias") {
                uniform(&shape, fan_in, &mut rng)
            } else if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else {
                Tensor::zeros(&shape)
            };
            params.push(t);
        }
        let running = config
            .bn_widths()
            .iter()
            .map(|&w| RunningStats {
                mean: vec![0.0; w],
                var: vec![1.0; w],
            })
            .collect();
        Ok(Self {
            config,
            params,
            running,
        })
    }

    /// Register the parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.params.iter().map(|p| g.parameter(p.clone())).collect()
    }

    /// Forward pass of `input: [B, 2, N_T, N_U]` using the parameter leaves `p`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], input: Var, mode: BatchNormMode) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if p.len() != cfg.param_specs().len() {
            return Err(Error::Dimension(format!(
                "{} parameter leaves for a network with {}",
                p.len(),
                cfg.param_specs().len()
            )));
        }
        let shape = g.shape(input).to_vec();
        if shape.len() != 4 || shape[1..] != [2, cfg.n_t, cfg.n_u] {
            return Err(Error::Dimension(format!(
                "network input {shape:?}, expected [B, 2, {}, {}]",
                cfg.n_t, cfg.n_u
            )));
        }
        let bn = BatchNormParams { eps: BN_EPS, mode };
        let mut bn_nodes = Vec::with_capacity(4);
        let mut norm_act = |g: &mut Graph, x: Var, layer: usize, gamma: Var, beta: Var| -> Result<Var> {
            let stats = &self.running[layer];
            let running = (mode == BatchNormMode::Inference).then_some((&stats.mean[..], &stats.var[..]));
            let y = g.batch_norm(x, gamma, beta, bn, running)?;
            bn_nodes.push(y);
            g.leaky_relu(y, LEAKY_SLOPE)
        };
        let x = g.conv2d(input, p[0], p[1])?;
        let x = norm_act(g, x, 0, p[2], p[3])?;
        let x = g.conv2d(x, p[4], p[5])?;
        let x = norm_act(g, x, 1, p[6], p[7])?;
        let x = g.flatten(x)?;
        let x = dense(g, x, p[8], p[9])?;
        let x = norm_act(g, x, 2, p[10], p[11])?;
        let x = dense(g, x, p[12], p[13])?;
        let x = norm_act(g, x, 3, p[14], p[15])?;
        let phase_logits = dense(g, x, p[16], p[17])?;
        let digital_re = dense(g, x, p[18], p[19])?;
        let digital_im = dense(g, x, p[20], p[21])?;
        let connection_logits = match cfg.structure {
            Structure::Dsa => Some(dense(g, x, p[22], p[23])?),
            _ => None,
        };
        Ok(ForwardOutput {
            phase_logits,
            digital_re,
            digital_im,
            connection_logits,
            bn_nodes,
        })
    }

    /// Fold the batch statistics of a train-mode pass into the running estimates
    /// (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn update_running_stats(&mut self, g: &Graph, out: &ForwardOutput) -> Result<()> {
        for (stats, &node) in self.running.iter_mut().zip(&out.bn_nodes) {
            let (mean, var) = g
                .batch_stats(node)
                .ok_or_else(|| Error::Contract("running stats need a train-mode pass".into()))?;
            let shape = g.shape(node);
            let n = (shape[0] * shape[2..].iter().product::<usize>()) as f64;
            let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for (r, &m) in stats.mean.iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, &v) in stats.var.iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
            }
        }
        Ok(())
    }
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape from spec")
}

fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Pack noisy estimates `Ĥ` (each `N_T × N_U`) as a `[B, 2, N_T, N_U]` tensor.
pub fn csi_tensor(h_hat: &[CMatrix]) -> Result<Tensor> {
    let first = h_hat
        .first()
        .ok_or_else(|| Error::Parameter("empty CSI batch".into()))?;
    let (n_t, n_u) = first.shape();
    let mut data = Vec::with_capacity(h_hat.len() * 2 * n_t * n_u);
    for h in h_hat {
        if h.shape() != (n_t, n_u) {
            return Err(Error::Dimension("CSI batch with mixed shapes".into()));
        }
        for n in 0..n_t {
            for u in 0..n_u {
                data.push(h[(n, u)].re);
            }
        }
        for n in 0..n_t {
            for u in 0..n_u {
                data.push(h[(n, u)].im);
            }
        }
    }
    Tensor::new(&[h_hat.len(), 2, n_t, n_u], data)
}

/// `Q_q(sigmoid(z))` with the straight-through surrogate `2π·sigmoid(z)` in backward.
/// `bits = None` gives continuous phases.
pub fn ste_phase_head(g: &mut Graph, z: Var, bits: Option<u32>) -> Result<Var> {
    if bits == Some(0) {
        return Err(Error::Parameter("phase resolution needs q ≥ 1".into()));
    }
    let t = g.sigmoid(z)?;
    g.phase_quantize(t, bits)
}

/// Numeric Gumbel-Softmax of one probability row with given noise.
pub fn gumbel_softmax_row(p: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature τ = {tau} must be > 0")));
    }
    if p.len() != noise.len() || p.is_empty() {
        return Err(Error::Dimension("probability and noise rows differ in length".into()));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Parameter("probabilities must be non-negative".into()));
    }
    let z: Vec<f64> = p
        .iter()
        .zip(noise)
        .map(|(&pi, &gi)| (pi.max(PROB_FLOOR).ln() + gi) / tau)
        .collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Standard Gumbel(0, 1) draws `−ln(−ln u)`.
pub fn sample_gumbel(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape, data).expect("positive shape")
}

/// Soft connection matrix: row softmax of `logits` (last axis = chains), ε-floored log,
/// Gumbel noise, temperature-scaled softmax.
pub fn connection_head(g: &mut Graph, logits: Var, tau: f64, noise: &Tensor) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature τ = {tau} must be > 0")));
    }
    if g.shape(logits) != noise.shape() {
        return Err(Error::Dimension(format!(
            "connection logits {:?} vs noise {:?}",
            g.shape(logits),
            noise.shape()
        )));
    }
    let log_p = g.log_softmax(logits)?;
    let log_p = g.clamp_min(log_p, PROB_FLOOR.ln())?;
    let noise = g.constant(noise.clone())?;
    let z = g.add(log_p, noise)?;
    let z = g.scale(z, 1.0 / tau)?;
    g.softmax(z)
}

/// How the connection matrix enters the loss.
#[derive(Clone, Debug)]
pub enum ConnectionMode {
    /// Gumbel-Softmax relaxation with the given noise (`[B, N_T, N_RF]`).
    Soft { tau: f64, noise: Tensor },
    /// One-hot rows at the argmax of the connection probabilities.
    Hard,
}

/// Precoder expressed as graph nodes.
#[derive(Clone, Debug)]
pub struct DesignNodes {
    pub structure: Structure,
    pub n_t: usize,
    pub n_rf: usize,
    pub n_u: usize,
    /// Pre-quantization phases in units of a full turn, `[B, P]` (`None` for constant designs).
    pub unit_phases: Option<Var>,
    /// Phases in radians after quantization, `[B, P]`.
    pub phases: Var,
    /// `[B, N_T, N_RF]` (subarray structures only).
    pub connections: Option<Var>,
    /// `[B, N_RF, N_U]`.
    pub digital_re: Var,
    pub digital_im: Var,
}

impl DesignNodes {
    pub fn batch(&self, g: &Graph) -> usize {
        g.shape(self.phases)[0]
    }
}

/// Turn head activations into a design: quantized phases, connections and `W`.
pub fn build_design(
    g: &mut Graph,
    cfg: &NetConfig,
    out: &ForwardOutput,
    bits: Option<u32>,
    mode: &ConnectionMode,
) -> Result<DesignNodes> {
    let batch = g.shape(out.phase_logits)[0];
    let unit = g.sigmoid(out.phase_logits)?;
    if bits == Some(0) {
        return Err(Error::Parameter("phase resolution needs q ≥ 1".into()));
    }
    let phases = g.phase_quantize(unit, bits)?;
    let connections = match cfg.structure {
        Structure::Fc => None,
        Structure::Fsa => {
            let s = ConnectionMatrix::squared(cfg.n_t, cfg.n_rf)?;
            Some(g.constant(Tensor::new(&[1, cfg.n_t, cfg.n_rf], s.to_real().transpose().as_slice().to_vec())?)?)
        }
        Structure::Dsa => {
            let logits = out
                .connection_logits
                .ok_or_else(|| Error::Contract("dynamic subarray needs connection logits".into()))?;
            let logits = g.reshape(logits, &[batch, cfg.n_t, cfg.n_rf])?;
            Some(match mode {
                ConnectionMode::Soft { tau, noise } => connection_head(g, logits, *tau, noise)?,
                ConnectionMode::Hard => {
                    let probs = g.softmax(logits)?;
                    let hard = harden_batch(g.value(probs), cfg.n_t, cfg.n_rf)?;
                    g.constant(hard)?
                }
            })
        }
    };
    let digital_re = g.reshape(out.digital_re, &[batch, cfg.n_rf, cfg.n_u])?;
    let digital_im = g.reshape(out.digital_im, &[batch, cfg.n_rf, cfg.n_u])?;
    Ok(DesignNodes {
        structure: cfg.structure,
        n_t: cfg.n_t,
        n_rf: cfg.n_rf,
        n_u: cfg.n_u,
        unit_phases: Some(unit),
        phases,
        connections,
        digital_re,
        digital_im,
    })
}

fn harden_batch(probs: &Tensor, n_t: usize, n_rf: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(probs.numel());
    for sample in probs.data().chunks(n_t * n_rf) {
        let p = DMatrix::from_row_slice(n_t, n_rf, sample);
        let s = harden_connections(&p)?;
        data.extend(s.entries().iter().map(|&e| e as f64));
    }
    Tensor::new(probs.shape(), data)
}

/// Place fixed designs (all of the same structure and dimensions) into the graph as constants.
pub fn constant_design(g: &mut Graph, structure: Structure, designs: &[HbfDesign]) -> Result<DesignNodes> {
    let first = designs
        .first()
        .ok_or_else(|| Error::Parameter("empty design batch".into()))?;
    let (n_t, n_rf, n_u) = (first.analog.n_t(), first.analog.n_rf(), first.digital.ncols());
    let b = designs.len();
    let mut phases = Vec::new();
    let mut conns = Vec::new();
    let mut w_re = Vec::new();
    let mut w_im = Vec::new();
    for d in designs {
        if (d.analog.n_t(), d.analog.n_rf(), d.digital.ncols()) != (n_t, n_rf, n_u) {
            return Err(Error::Dimension("design batch with mixed dimensions".into()));
        }
        if d.analog.chain_power_split {
            return Err(Error::Parameter("chain power split is not supported in-graph".into()));
        }
        match (&d.analog.phases, structure) {
            (Phases::Full(p), Structure::Fc) => {
                for n in 0..n_t {
                    for m in 0..n_rf {
                        phases.push(p[(n, m)]);
                    }
                }
            }
            (Phases::PerAntenna(p), Structure::Fsa | Structure::Dsa) => {
                phases.extend_from_slice(p);
                conns.extend(d.analog.connections.entries().iter().map(|&e| e as f64));
            }
            _ => return Err(Error::Structure(format!("design does not match {structure}"))),
        }
        for m in 0..n_rf {
            for u in 0..n_u {
                w_re.push(d.digital[(m, u)].re);
                w_im.push(d.digital[(m, u)].im);
            }
        }
    }
    let p_len = phases.len() / b;
    let phases = g.constant(Tensor::new(&[b, p_len], phases)?)?;
    let connections = if structure.is_subarray() {
        Some(g.constant(Tensor::new(&[b, n_t, n_rf], conns)?)?)
    } else {
        None
    };
    Ok(DesignNodes {
        structure,
        n_t,
        n_rf,
        n_u,
        unit_phases: None,
        phases,
        connections,
        digital_re: g.constant(Tensor::new(&[b, n_rf, n_u], w_re)?)?,
        digital_im: g.constant(Tensor::new(&[b, n_rf, n_u], w_im)?)?,
    })
}

/// Loss and per-sample sum-rates.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    /// `−mean_b R_b`.
    pub loss: Var,
    /// `[B]` per-sample sum-rates after power normalization.
    pub rates: Var,
}

fn complex_constant(g: &mut Graph, hs: &[CMatrix], part: fn(&Complex64) -> f64) -> Result<Var> {
    let (rows, cols) = hs[0].shape();
    let mut data = Vec::with_capacity(hs.len() * rows * cols);
    for h in hs {
        for r in 0..rows {
            for c in 0..cols {
                data.push(part(&h[(r, c)]));
            }
        }
    }
    g.constant(Tensor::new(&[hs.len(), rows, cols], data)?)
}

/// Complex batched product of paired real tensors.
fn complex_bmm(g: &mut Graph, (ar, ai): (Var, Var), (br, bi): (Var, Var)) -> Result<(Var, Var)> {
    let rr = g.batch_matmul(ar, br)?;
    let ii = g.batch_matmul(ai, bi)?;
    let ri = g.batch_matmul(ar, bi)?;
    let ir = g.batch_matmul(ai, br)?;
    Ok((g.sub(rr, ii)?, g.add(ri, ir)?))
}

/// Negative mean sum-rate of the designs against the true channels `h_true` (each `N_U × N_T`).
///
/// `W` is rescaled in-graph so that `‖A W‖²_F = P_max`, which enters the SINR as the
/// noise term `σ²·‖A W‖²_F / P_max`.
pub fn differentiable_sum_rate_loss(
    g: &mut Graph,
    h_true: &[CMatrix],
    design: &DesignNodes,
    sigma2: f64,
    p_max: f64,
) -> Result<LossNodes> {
    if !(sigma2 > 0.0) || !(p_max > 0.0) {
        return Err(Error::Parameter(format!(
            "σ² = {sigma2} and P_max = {p_max} must be positive"
        )));
    }
    let b = design.batch(g);
    let (n_t, n_rf, n_u) = (design.n_t, design.n_rf, design.n_u);
    if h_true.len() != b || h_true.iter().any(|h| h.shape() != (n_u, n_t)) {
        return Err(Error::Dimension(format!(
            "{} channels for a batch of {b} designs of {n_u} users × {n_t} antennas",
            h_true.len()
        )));
    }
    let cos = g.cos(design.phases)?;
    let sin = g.sin(design.phases)?;
    let (a_re, a_im) = match design.structure {
        Structure::Fc => (g.reshape(cos, &[b, n_t, n_rf])?, g.reshape(sin, &[b, n_t, n_rf])?),
        Structure::Fsa | Structure::Dsa => {
            let s = design
                .connections
                .ok_or_else(|| Error::Contract("subarray design without connections".into()))?;
            let cos = g.reshape(cos, &[b, n_t, 1])?;
            let sin = g.reshape(sin, &[b, n_t, 1])?;
            (g.mul(cos, s)?, g.mul(sin, s)?)
        }
    };
    let (f_re, f_im) = complex_bmm(g, (a_re, a_im), (design.digital_re, design.digital_im))?;
    let f_re2 = g.square(f_re)?;
    let f_im2 = g.square(f_im)?;
    let f_mag = g.add(f_re2, f_im2)?;
    let power = g.sum_axis(f_mag, 2, false)?;
    let power = g.sum_axis(power, 1, true)?;
    if let Some(bad) = g.value(power).data().iter().position(|&v| !(v > 1e-300)) {
        return Err(Error::Numeric(format!("sample {bad} has a zero precoder")));
    }
    let h_re = complex_constant(g, h_true, |z| z.re)?;
    let h_im = complex_constant(g, h_true, |z| z.im)?;
    let (g_re, g_im) = complex_bmm(g, (h_re, h_im), (f_re, f_im))?;
    let g_re2 = g.square(g_re)?;
    let g_im2 = g.square(g_im)?;
    let gain = g.add(g_re2, g_im2)?;
    let eye = Tensor::new(
        &[1, n_u, n_u],
        (0..n_u * n_u).map(|i| if i / n_u == i % n_u { 1.0 } else { 0.0 }).collect(),
    )?;
    let off = eye.map(|v| 1.0 - v);
    let eye = g.constant(eye)?;
    let off = g.constant(off)?;
    let signal = g.mul(gain, eye)?;
    let signal = g.sum_axis(signal, 2, false)?;
    let interference = g.mul(gain, off)?;
    let interference = g.sum_axis(interference, 2, false)?;
    let noise = g.scale(power, sigma2 / p_max)?;
    let denom = g.add(interference, noise)?;
    let sinr = g.div(signal, denom)?;
    let one_plus = g.add_scalar(sinr, 1.0)?;
    let per_user = g.log2(one_plus)?;
    let rates = g.sum_axis(per_user, 1, false)?;
    let mean = g.mean(rates)?;
    let loss = g.neg(mean)?;
    Ok(LossNodes { loss, rates })
}

/// Read the designs out of the graph as power-normalized [`HbfDesign`]s.
pub fn extract_designs(g: &Graph, design: &DesignNodes, resolution: PhaseResolution, p_max: f64) -> Result<Vec<HbfDesign>> {
    let b = design.batch(g);
    let (n_t, n_rf, n_u) = (design.n_t, design.n_rf, design.n_u);
    let phases = g.value(design.phases).data();
    let p_len = phases.len() / b;
    let (w_re, w_im) = (g.value(design.digital_re).data(), g.value(design.digital_im).data());
    let conns = design.connections.map(|c| g.value(c));
    (0..b)
        .map(|i| {
            let ph = &phases[i * p_len..][..p_len];
            let analog = match design.structure {
                Structure::Fc => {
                    AnalogPrecoder::fully_connected(DMatrix::from_row_slice(n_t, n_rf, ph), resolution)
                }
                structure => {
                    let c = conns.expect("subarray designs carry connections");
                    let slice = if c.shape()[0] == 1 { c.data() } else { &c.data()[i * n_t * n_rf..][..n_t * n_rf] };
                    let entries = slice
                        .iter()
                        .map(|&v| {
                            if v == 0.0 || v == 1.0 {
                                Ok(v as u8)
                            } else {
                                Err(Error::Structure(format!(
                                    "{structure} design has a soft connection entry {v}"
                                )))
                            }
                        })
                        .collect::<Result<Vec<u8>>>()?;
                    AnalogPrecoder::subarray(
                        ph.to_vec(),
                        ConnectionMatrix::from_entries(n_t, n_rf, entries)?,
                        resolution,
                    )
                }
            };
            let digital = CMatrix::from_fn(n_rf, n_u, |m, u| {
                Complex64::new(w_re[(i * n_rf + m) * n_u + u], w_im[(i * n_rf + m) * n_u + u])
            });
            normalize_power(&HbfDesign {
                analog,
                digital,
                p_max,
            })
        })
        .collect()
}

/// Per-step Gumbel noise for the connection head, reproducible from `(seed, step)`.
pub fn step_noise(seed: u64, step: u64, batch: usize, n_t: usize, n_rf: usize) -> Tensor {
    let mut rng = stream_rng(seed ^ 0x6A09_E667_F3BC_C908, step);
    sample_gumbel(&[batch, n_t, n_rf], &mut rng)
}

/// Everything needed to run one batch through the network and the loss.
#[derive(Clone, Debug)]
pub struct LossSpec<'a> {
    pub h_true: &'a [CMatrix],
    pub h_hat: &'a [CMatrix],
    pub bits: Option<u32>,
    pub connection: ConnectionMode,
    pub bn_mode: BatchNormMode,
    pub sigma2: f64,
    pub p_max: f64,
}

/// Full pipeline from parameter leaves to the loss: network, heads, design, sum-rate.
pub fn network_loss(
    net: &HbfNet,
    g: &mut Graph,
    params: &[Var],
    spec: &LossSpec<'_>,
) -> Result<(ForwardOutput, DesignNodes, LossNodes)> {
    let input = g.constant(csi_tensor(spec.h_hat)?)?;
    let out = net.forward(g, params, input, spec.bn_mode)?;
    let design = build_design(g, &net.config, &out, spec.bits, &spec.connection)?;
    let loss = differentiable_sum_rate_loss(g, spec.h_true, &design, spec.sigma2, spec.p_max)?;
    Ok((out, design, loss))
}
