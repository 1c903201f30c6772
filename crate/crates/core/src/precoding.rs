//! Hybrid beamformer data model and the exact sum-rate scorer.
//!
//! Channel convention: `H` is `N_U × N_T` and the complex gain from RF-precoder column
//! `w_j` to user `u` is `[H A w_j]_u`, i.e. row `u` of `H` is the conjugated channel
//! vector `h_u†`.

use std::f64::consts::TAU;
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

/// Largest candidate space [`brute_force_optimum`] agrees to enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1 << 20;

const GRID_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// Fully connected: every chain reaches every antenna.
    Fc,
    /// Fixed subarray with the "squared" block connection pattern.
    Fsa,
    /// Dynamic subarray: per-realization antenna-to-chain multiplexing.
    Dsa,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Fc, Structure::Fsa, Structure::Dsa];

    pub fn is_subarray(self) -> bool {
        !matches!(self, Structure::Fc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::Fc => "fc",
            Structure::Fsa => "fsa",
            Structure::Dsa => "dsa",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fc" => Ok(Structure::Fc),
            "fsa" => Ok(Structure::Fsa),
            "dsa" => Ok(Structure::Dsa),
            other => Err(Error::Parameter(format!(
                "unknown structure {other:?} (expected fc, fsa or dsa)"
            ))),
        }
    }
}

/// Phase-shifter resolution: `q` bits or ideal continuous phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ResolutionRepr", into = "ResolutionRepr")]
pub enum PhaseResolution {
    Bits(u32),
    Continuous,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ResolutionRepr {
    Bits(u32),
    Word(String),
}

impl TryFrom<ResolutionRepr> for PhaseResolution {
    type Error = String;

    fn try_from(r: ResolutionRepr) -> std::result::Result<Self, String> {
        match r {
            ResolutionRepr::Bits(0) => Err("phase resolution must be at least 1 bit".into()),
            ResolutionRepr::Bits(q) => Ok(PhaseResolution::Bits(q)),
            ResolutionRepr::Word(w) if w == "continuous" => Ok(PhaseResolution::Continuous),
            ResolutionRepr::Word(w) => Err(format!(
                "phase resolution {w:?}: expected a bit count or \"continuous\""
            )),
        }
    }
}

impl From<PhaseResolution> for ResolutionRepr {
    fn from(r: PhaseResolution) -> Self {
        match r {
            PhaseResolution::Bits(q) => ResolutionRepr::Bits(q),
            PhaseResolution::Continuous => ResolutionRepr::Word("continuous".into()),
        }
    }
}

impl PhaseResolution {
    pub fn bits(self) -> Option<u32> {
        match self {
            PhaseResolution::Bits(q) => Some(q),
            PhaseResolution::Continuous => None,
        }
    }

    fn on_grid(self, phase: f64) -> bool {
        match self {
            PhaseResolution::Continuous => phase.is_finite(),
            PhaseResolution::Bits(q) => {
                let k = phase * (1u64 << q) as f64 / TAU;
                (k - k.round()).abs() < GRID_TOLERANCE
                    && k.round() >= 0.0
                    && k.round() <= (1u64 << q) as f64
            }
        }
    }

    /// Map an arbitrary angle to the representable phase closest to it.
    pub fn snap(self, angle: f64) -> f64 {
        match self {
            PhaseResolution::Continuous => angle.rem_euclid(TAU),
            PhaseResolution::Bits(q) => nearest_grid_phase(angle, q),
        }
    }
}

impl fmt::Display for PhaseResolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseResolution::Bits(q) => write!(f, "{q}"),
            PhaseResolution::Continuous => f.write_str("continuous"),
        }
    }
}

/// `Q_q(t) = 2π⌈t·2^q⌉/2^q` without range checks.
pub(crate) fn quantize_unit(t: f64, q: u32) -> f64 {
    let levels = (1u64 << q) as f64;
    TAU * (t * levels).ceil() / levels
}

/// Ceiling quantizer of an activation `t ∈ [0, 1]` onto the `q`-bit phase grid.
pub fn quantize_phase(t: f64, q: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Parameter(format!("quantize_phase: t = {t} outside [0, 1]")));
    }
    if q == 0 || q > 52 {
        return Err(Error::Parameter(format!("quantize_phase: q = {q} bits")));
    }
    Ok(quantize_unit(t, q))
}

/// Closest point of `{2πk/2^q : k = 1..2^q}` to `angle` (2π stands in for 0).
pub fn nearest_grid_phase(angle: f64, q: u32) -> f64 {
    let levels = (1u64 << q) as f64;
    let k = (angle.rem_euclid(TAU) / TAU * levels).round();
    let k = if k == 0.0 { levels } else { k };
    TAU * k / levels
}

/// Binary `N_T × N_RF` antenna-to-chain connection matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConnectionMatrix {
    n_t: usize,
    n_rf: usize,
    entries: Vec<u8>,
}

impl ConnectionMatrix {
    pub fn all_ones(n_t: usize, n_rf: usize) -> Self {
        Self {
            n_t,
            n_rf,
            entries: vec![1; n_t * n_rf],
        }
    }

    /// Contiguous blocks of `N_T / N_RF` antennas per chain.
    pub fn squared(n_t: usize, n_rf: usize) -> Result<Self> {
        if n_rf == 0 || n_t == 0 || !n_t.is_multiple_of(n_rf) {
            return Err(Error::Parameter(format!(
                "squared subarray needs N_RF | N_T, got N_T = {n_t}, N_RF = {n_rf}"
            )));
        }
        let block = n_t / n_rf;
        let chains: Vec<usize> = (0..n_t).map(|n| n / block).collect();
        Self::from_assignment(&chains, n_rf)
    }

    /// Subarray matrix connecting antenna `n` to chain `chains[n]`.
    pub fn from_assignment(chains: &[usize], n_rf: usize) -> Result<Self> {
        let mut entries = vec![0; chains.len() * n_rf];
        for (n, &m) in chains.iter().enumerate() {
            if m >= n_rf {
                return Err(Error::Structure(format!(
                    "antenna {n} assigned to chain {m} of {n_rf}"
                )));
            }
            entries[n * n_rf + m] = 1;
        }
        Ok(Self {
            n_t: chains.len(),
            n_rf,
            entries,
        })
    }

    pub fn from_entries(n_t: usize, n_rf: usize, entries: Vec<u8>) -> Result<Self> {
        if entries.len() != n_t * n_rf {
            return Err(Error::Dimension(format!(
                "connection matrix {n_t}×{n_rf} from {} entries",
                entries.len()
            )));
        }
        if entries.iter().any(|&e| e > 1) {
            return Err(Error::Structure("connection matrix must be binary".into()));
        }
        Ok(Self { n_t, n_rf, entries })
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_rf(&self) -> usize {
        self.n_rf
    }

    pub fn get(&self, n: usize, m: usize) -> u8 {
        self.entries[n * self.n_rf + m]
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    /// Each antenna connects to exactly one chain.
    pub fn is_one_per_row(&self) -> bool {
        self.entries
            .chunks(self.n_rf)
            .all(|row| row.iter().map(|&e| e as usize).sum::<usize>() == 1)
    }

    /// Chain index of each antenna; `None` unless the matrix is a valid subarray.
    pub fn assignment(&self) -> Option<Vec<usize>> {
        self.entries
            .chunks(self.n_rf)
            .map(|row| {
                let mut ones = row.iter().enumerate().filter(|(_, &e)| e == 1);
                match (ones.next(), ones.next()) {
                    (Some((m, _)), None) => Some(m),
                    _ => None,
                }
            })
            .collect()
    }

    /// Number of antennas on each chain.
    pub fn chain_sizes(&self) -> Vec<usize> {
        (0..self.n_rf)
            .map(|m| (0..self.n_t).map(|n| self.get(n, m) as usize).sum())
            .collect()
    }

    pub fn to_real(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_t, self.n_rf, |n, m| self.get(n, m) as f64)
    }
}

/// Phase-shifter settings in radians.
#[derive(Clone, Debug, PartialEq)]
pub enum Phases {
    /// One shifter per (antenna, chain) pair: `N_T × N_RF`.
    Full(DMatrix<f64>),
    /// One shifter per antenna: length `N_T`.
    PerAntenna(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalogPrecoder {
    pub resolution: PhaseResolution,
    pub phases: Phases,
    pub connections: ConnectionMatrix,
    /// Scale chain `m`'s column by `1/√(antennas on m)` (subarray only).
    pub chain_power_split: bool,
}

impl AnalogPrecoder {
    pub fn fully_connected(phases: DMatrix<f64>, resolution: PhaseResolution) -> Self {
        let connections = ConnectionMatrix::all_ones(phases.nrows(), phases.ncols());
        Self {
            resolution,
            phases: Phases::Full(phases),
            connections,
            chain_power_split: false,
        }
    }

    pub fn subarray(
        phases: Vec<f64>,
        connections: ConnectionMatrix,
        resolution: PhaseResolution,
    ) -> Self {
        Self {
            resolution,
            phases: Phases::PerAntenna(phases),
            connections,
            chain_power_split: false,
        }
    }

    pub fn n_t(&self) -> usize {
        self.connections.n_t()
    }

    pub fn n_rf(&self) -> usize {
        self.connections.n_rf()
    }

    pub fn structure_is_subarray(&self) -> bool {
        matches!(self.phases, Phases::PerAntenna(_))
    }

    /// Check grid membership, shapes and the one-connection-per-antenna rule.
    pub fn validate(&self) -> Result<()> {
        let (n_t, n_rf) = (self.n_t(), self.n_rf());
        let phases: &[f64] = match &self.phases {
            Phases::Full(p) => {
                if p.shape() != (n_t, n_rf) {
                    return Err(Error::Structure(format!(
                        "full phase matrix {:?} vs connections {n_t}×{n_rf}",
                        p.shape()
                    )));
                }
                if self.connections.entries().iter().any(|&e| e != 1) {
                    return Err(Error::Structure(
                        "fully connected precoder needs an all-ones connection matrix".into(),
                    ));
                }
                p.as_slice()
            }
            Phases::PerAntenna(p) => {
                if p.len() != n_t {
                    return Err(Error::Structure(format!(
                        "{} antenna phases for {n_t} antennas",
                        p.len()
                    )));
                }
                if !self.connections.is_one_per_row() {
                    return Err(Error::Structure(
                        "subarray antennas must connect to exactly one chain".into(),
                    ));
                }
                p
            }
        };
        if let Some(bad) = phases.iter().find(|&&p| !self.resolution.on_grid(p)) {
            return Err(Error::Structure(format!(
                "phase {bad} is not on the {}-bit grid",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Realize `A = diag(a) S` (subarray) or `[A]_{n,m} = e^{jθ_{n,m}}` (fully connected).
pub fn realize_analog(analog: &AnalogPrecoder) -> Result<CMatrix> {
    analog.validate()?;
    let (n_t, n_rf) = (analog.n_t(), analog.n_rf());
    let mut a = match &analog.phases {
        Phases::Full(p) => CMatrix::from_fn(n_t, n_rf, |n, m| Complex64::from_polar(1.0, p[(n, m)])),
        Phases::PerAntenna(p) => CMatrix::from_fn(n_t, n_rf, |n, m| {
            Complex64::from_polar(analog.connections.get(n, m) as f64, p[n])
        }),
    };
    if analog.chain_power_split && analog.structure_is_subarray() {
        for (m, size) in analog.connections.chain_sizes().into_iter().enumerate() {
            if size > 0 {
                let s = 1.0 / (size as f64).sqrt();
                a.column_mut(m).iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    Ok(a)
}

fn check_dims(h: &CMatrix, a: &CMatrix, w: &CMatrix, sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0) {
        return Err(Error::Parameter(format!("noise power σ² = {sigma2} must be > 0")));
    }
    if h.ncols() != a.nrows() || a.ncols() != w.nrows() || w.ncols() != h.nrows() {
        return Err(Error::Dimension(format!(
            "H {:?}, A {:?}, W {:?}",
            h.shape(),
            a.shape(),
            w.shape()
        )));
    }
    Ok(())
}

fn sinr_from_gains(gains: &CMatrix, u: usize, sigma2: f64) -> f64 {
    let signal = gains[(u, u)].norm_sqr();
    let interference: f64 = (0..gains.ncols())
        .filter(|&j| j != u)
        .map(|j| gains[(u, j)].norm_sqr())
        .sum();
    signal / (interference + sigma2)
}

/// `|h_u† A w_u|² / (Σ_{j≠u} |h_u† A w_j|² + σ²)`.
pub fn sinr(h: &CMatrix, a: &CMatrix, w: &CMatrix, u: usize, sigma2: f64) -> Result<f64> {
    check_dims(h, a, w, sigma2)?;
    if u >= h.nrows() {
        return Err(Error::Parameter(format!("user {u} of {}", h.nrows())));
    }
    Ok(sinr_from_gains(&(h * a * w), u, sigma2))
}

/// `Σ_u log₂(1 + SINR_u)` in bit/s/Hz.
pub fn sum_rate(h: &CMatrix, a: &CMatrix, w: &CMatrix, sigma2: f64) -> Result<f64> {
    check_dims(h, a, w, sigma2)?;
    let gains = h * a * w;
    Ok((0..h.nrows())
        .map(|u| (1.0 + sinr_from_gains(&gains, u, sigma2)).log2())
        .sum())
}

/// `Σ_u ‖A w_u‖²`.
pub fn transmit_power(a: &CMatrix, w: &CMatrix) -> f64 {
    (a * w).norm_squared()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HbfDesign {
    pub analog: AnalogPrecoder,
    /// `N_RF × N_U`.
    pub digital: CMatrix,
    pub p_max: f64,
}

impl HbfDesign {
    pub fn realize(&self) -> Result<CMatrix> {
        realize_analog(&self.analog)
    }

    pub fn power(&self) -> Result<f64> {
        Ok(transmit_power(&self.realize()?, &self.digital))
    }

    pub fn sum_rate(&self, h: &CMatrix, sigma2: f64) -> Result<f64> {
        sum_rate(h, &self.realize()?, &self.digital, sigma2)
    }

    /// Grid phases, connection rule for `structure`, and the power budget.
    pub fn check_feasible(&self, structure: Structure) -> Result<()> {
        self.analog.validate()?;
        match (structure, &self.analog.phases) {
            (Structure::Fc, Phases::Full(_)) => {}
            (Structure::Fsa | Structure::Dsa, Phases::PerAntenna(_)) => {}
            _ => {
                return Err(Error::Structure(format!(
                    "design does not match the {structure} structure"
                )))
            }
        }
        if structure == Structure::Fsa {
            let squared = ConnectionMatrix::squared(self.analog.n_t(), self.analog.n_rf())?;
            if self.analog.connections != squared {
                return Err(Error::Structure(
                    "fixed subarray must use the squared connection pattern".into(),
                ));
            }
        }
        let power = self.power()?;
        if power > self.p_max * (1.0 + 1e-9) {
            return Err(Error::Structure(format!(
                "transmit power {power} exceeds P_max = {}",
                self.p_max
            )));
        }
        Ok(())
    }
}

/// Scale `W` so that `Σ_u ‖A w_u‖² = P_max`.
pub fn normalize_power(design: &HbfDesign) -> Result<HbfDesign> {
    if !(design.p_max > 0.0) {
        return Err(Error::Parameter(format!("P_max = {} must be > 0", design.p_max)));
    }
    let a = design.realize()?;
    let rho = transmit_power(&a, &design.digital);
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize a precoder with transmit power {rho}"
        )));
    }
    let mut out = design.clone();
    out.digital *= Complex64::from((design.p_max / rho).sqrt());
    Ok(out)
}

/// Optional subarray mode: column `m` of a realized analog matrix divided by the
/// square root of the number of antennas on chain `m`. Chains with no antennas are
/// left as zero columns. Equivalent to scaling row `m` of `W` by the same factor, so
/// it changes no achievable sum-rate once power is normalized.
pub fn scale_per_chain(a: &CMatrix, s: &ConnectionMatrix) -> Result<CMatrix> {
    if a.shape() != (s.n_t(), s.n_rf()) {
        return Err(Error::Dimension(format!(
            "analog matrix is {:?}, connections are {}×{}",
            a.shape(),
            s.n_t(),
            s.n_rf()
        )));
    }
    let mut out = a.clone();
    for (m, &count) in s.chain_sizes().iter().enumerate() {
        if count > 0 {
            out.column_mut(m).scale_mut(1.0 / (count as f64).sqrt());
        }
    }
    Ok(out)
}

/// One-hot rows at each row's argmax (lowest index wins ties).
pub fn harden_connections(p: &DMatrix<f64>) -> Result<ConnectionMatrix> {
    let mut chains = Vec::with_capacity(p.nrows());
    for (n, row) in p.row_iter().enumerate() {
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Parameter(format!("row {n} has a negative or non-finite entry")));
        }
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate(format!("row {n} is all zeros")));
        }
        let mut best = 0;
        for (m, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = m;
            }
        }
        chains.push(best);
    }
    ConnectionMatrix::from_assignment(&chains, p.ncols())
}

/// Zero-forcing digital precoder for the effective channel `H_eff = H A` (pseudo-inverse,
/// so rank-deficient effective channels still give a least-squares answer).
pub fn zero_forcing_digital(h_eff: &CMatrix) -> CMatrix {
    h_eff
        .clone()
        .pseudo_inverse(1e-12)
        .expect("non-negative pseudo-inverse tolerance")
}

/// Exhaustive search over every quantized analog precoder of `structure` (and every
/// connection matrix for DSA) with a zero-forcing, power-normalized digital stage.
pub fn brute_force_optimum(
    h: &CMatrix,
    structure: Structure,
    n_rf: usize,
    q: u32,
    sigma2: f64,
    p_max: f64,
) -> Result<(HbfDesign, f64)> {
    if q == 0 || n_rf == 0 {
        return Err(Error::Parameter("brute force needs q ≥ 1 and N_RF ≥ 1".into()));
    }
    let n_t = h.ncols();
    let levels = 1u128 << q;
    let shifters = match structure {
        Structure::Fc => n_t * n_rf,
        _ => n_t,
    } as u32;
    let guard = || Error::SearchGuard {
        candidates: u128::MAX,
        limit: BRUTE_FORCE_LIMIT,
    };
    let phase_count = levels.checked_pow(shifters).ok_or_else(guard)?;
    let partitions = match structure {
        Structure::Dsa => (n_rf as u128).checked_pow(n_t as u32).ok_or_else(guard)?,
        _ => 1,
    };
    let total = phase_count.checked_mul(partitions).ok_or_else(guard)?;
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchGuard {
            candidates: total,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let fixed = match structure {
        Structure::Fsa => Some(ConnectionMatrix::squared(n_t, n_rf)?),
        _ => None,
    };
    let resolution = PhaseResolution::Bits(q);

    let build = |index: u64| -> Result<HbfDesign> {
        let phase_idx = index % phase_count as u64;
        let part_idx = index / phase_count as u64;
        let phase_of = |s: u32| {
            let k = (phase_idx >> (q * s)) & ((1 << q) - 1);
            TAU * (k + 1) as f64 / levels as f64
        };
        let analog = match structure {
            Structure::Fc => AnalogPrecoder::fully_connected(
                DMatrix::from_fn(n_t, n_rf, |n, m| phase_of((n * n_rf + m) as u32)),
                resolution,
            ),
            Structure::Fsa => AnalogPrecoder::subarray(
                (0..n_t as u32).map(phase_of).collect(),
                fixed.clone().unwrap(),
                resolution,
            ),
            Structure::Dsa => {
                let mut rest = part_idx;
                let chains: Vec<usize> = (0..n_t)
                    .map(|_| {
                        let m = (rest % n_rf as u64) as usize;
                        rest /= n_rf as u64;
                        m
                    })
                    .collect();
                AnalogPrecoder::subarray(
                    (0..n_t as u32).map(phase_of).collect(),
                    ConnectionMatrix::from_assignment(&chains, n_rf)?,
                    resolution,
                )
            }
        };
        let a = realize_analog(&analog)?;
        let digital = zero_forcing_digital(&(h * &a));
        normalize_power(&HbfDesign {
            analog,
            digital,
            p_max,
        })
    };

    let best = (0..total as u64)
        .into_par_iter()
        .map(|i| match build(i) {
            Ok(design) => match design.sum_rate(h, sigma2) {
                Ok(rate) => Ok(Some((rate, i))),
                Err(e) => Err(e),
            },
            // all-zero effective channels cannot be normalized; they are never optimal
            Err(Error::Degenerate(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .try_reduce(
            || None,
            |a, b| {
                Ok(match (a, b) {
                    (None, x) | (x, None) => x,
                    (Some(x), Some(y)) => {
                        if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) {
                            Some(y)
                        } else {
                            Some(x)
                        }
                    }
                })
            },
        )?;
    let (rate, index) = best.ok_or_else(|| Error::Degenerate("no feasible candidate".into()))?;
    Ok((build(index)?, rate))
}
