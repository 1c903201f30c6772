//! Classical (non-learning) precoder designs used as comparison points.
//!
//! * `zf-fdp`: fully digital zero-forcing with water-filling power allocation.
//! * `omp`: greedy steering-codebook approximation of the fully digital precoder.
//! * `pe-altmin-ls`: phase-extraction alternating minimization with a least-squares
//!   digital step (fully connected).
//! * `fsa-altmin`: the same alternation restricted to a fixed subarray support.
//! * `dsa-greedy`: coordinate ascent over antenna-to-chain assignments, warm-started
//!   from the fixed-subarray solution.
//! * `random`: feasible random designs, a floor for everything else.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_normal, stream_rng};
use crate::error::{Error, Result};
use crate::precoding::{
    normalize_power, realize_analog, sum_rate, AnalogPrecoder, CMatrix, ConnectionMatrix,
    HbfDesign, PhaseResolution, Phases, Structure,
};

/// Inner alternating-minimization iterations per tentative reassignment in `dsa_greedy`.
pub const DSA_INNER_ITERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerAllocation {
    WaterFilling,
    Equal,
}

#[derive(Clone, Debug)]
pub struct FdpSolution {
    /// `N_T × N_U`, columns are the per-user precoders.
    pub u: CMatrix,
    pub powers: Vec<f64>,
}

impl FdpSolution {
    pub fn sum_rate(&self, h: &CMatrix, sigma2: f64) -> Result<f64> {
        sum_rate(h, &CMatrix::identity(self.u.nrows(), self.u.nrows()), &self.u, sigma2)
    }

    pub fn power(&self) -> f64 {
        self.u.norm_squared()
    }
}

/// `p_u = max(0, μ − σ²/g_u)` with `Σ p_u = P_max`.
pub fn water_filling(gains: &[f64], p_max: f64, sigma2: f64) -> Result<Vec<f64>> {
    if gains.is_empty() || gains.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::Parameter("water-filling gains must be positive".into()));
    }
    let floors: Vec<f64> = gains.iter().map(|g| sigma2 / g).collect();
    let mut order: Vec<usize> = (0..gains.len()).collect();
    order.sort_by(|&a, &b| floors[a].total_cmp(&floors[b]));
    // drop the weakest channels until the water level clears every remaining floor
    let mut active = order.len();
    let level = loop {
        let mu = (p_max + order[..active].iter().map(|&i| floors[i]).sum::<f64>()) / active as f64;
        if mu > floors[order[active - 1]] || active == 1 {
            break mu;
        }
        active -= 1;
    };
    Ok(floors.iter().map(|f| (level - f).max(0.0)).collect())
}

/// Fully digital zero-forcing `U = H†(HH†)⁻¹D`.
pub fn fdp_zf(h: &CMatrix, sigma2: f64, p_max: f64, allocation: PowerAllocation) -> Result<FdpSolution> {
    let (n_u, n_t) = h.shape();
    if n_t < n_u {
        return Err(Error::Parameter(format!(
            "zero-forcing needs N_T ≥ N_U, got {n_t} < {n_u}"
        )));
    }
    let gram = h * h.adjoint();
    let sv = gram.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let condition = smax / smin;
    if !(smin > 0.0) || condition > 1e12 {
        return Err(Error::Numeric(format!(
            "channel is rank deficient (condition number of HH† = {condition:e})"
        )));
    }
    let inverse = gram
        .try_inverse()
        .ok_or_else(|| Error::Numeric("HH† is singular".into()))?;
    let mut v = h.adjoint() * inverse;
    let mut gains = Vec::with_capacity(n_u);
    for mut col in v.column_iter_mut() {
        let norm = col.norm();
        col /= Complex64::from(norm);
        gains.push(1.0 / (norm * norm));
    }
    let powers = match allocation {
        PowerAllocation::WaterFilling => water_filling(&gains, p_max, sigma2)?,
        PowerAllocation::Equal => vec![p_max / n_u as f64; n_u],
    };
    for (mut col, p) in v.column_iter_mut().zip(&powers) {
        col *= Complex64::from(p.sqrt());
    }
    Ok(FdpSolution { u: v, powers })
}

/// Unit-modulus ULA steering vectors on a uniform angle grid.
#[derive(Clone, Debug)]
pub struct SteeringCodebook {
    pub angles: Vec<f64>,
    /// `N_T × G`.
    pub columns: CMatrix,
}

impl SteeringCodebook {
    /// `G` angles at the cell midpoints of `[−π/2, π/2]` (the endpoints alias on a
    /// half-wavelength array).
    pub fn uniform(n_t: usize, size: usize) -> Self {
        let angles: Vec<f64> = (0..size)
            .map(|g| -PI / 2.0 + PI * (g as f64 + 0.5) / size as f64)
            .collect();
        Self::from_angles(n_t, angles)
    }

    pub fn from_angles(n_t: usize, angles: Vec<f64>) -> Self {
        let columns = CMatrix::from_fn(n_t, angles.len(), |n, g| {
            Complex64::from_polar(1.0, PI * n as f64 * angles[g].sin())
        });
        Self { angles, columns }
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }
}

fn least_squares(a: &CMatrix, target: &CMatrix) -> CMatrix {
    a.clone()
        .pseudo_inverse(1e-12)
        .expect("non-negative pseudo-inverse tolerance")
        * target
}

#[derive(Clone, Debug)]
pub struct OmpOutput {
    pub design: HbfDesign,
    pub selected: Vec<usize>,
    /// `‖U − A W‖_F` after each greedy iteration (continuous phases).
    pub residual_trace: Vec<f64>,
}

/// Greedy codebook pursuit approximating `U_opt` with `N_RF` steering columns.
pub fn omp_hbf(
    u_opt: &CMatrix,
    codebook: &SteeringCodebook,
    n_rf: usize,
    resolution: PhaseResolution,
    p_max: f64,
) -> Result<OmpOutput> {
    if codebook.len() < n_rf {
        return Err(Error::Parameter(format!(
            "codebook of {} columns cannot supply {n_rf} chains",
            codebook.len()
        )));
    }
    if codebook.columns.nrows() != u_opt.nrows() {
        return Err(Error::Dimension("codebook and U_opt disagree on N_T".into()));
    }
    let mut residual = u_opt.clone();
    let mut selected: Vec<usize> = Vec::with_capacity(n_rf);
    let mut trace = Vec::with_capacity(n_rf);
    for _ in 0..n_rf {
        let corr = codebook.columns.adjoint() * &residual;
        let best = (0..codebook.len())
            .filter(|g| !selected.contains(g))
            .max_by(|&a, &b| corr.row(a).norm_squared().total_cmp(&corr.row(b).norm_squared()))
            .expect("codebook larger than N_RF");
        selected.push(best);
        let a = codebook.columns.select_columns(&selected);
        let w = least_squares(&a, u_opt);
        residual = u_opt - &a * &w;
        trace.push(residual.norm());
    }
    let n_t = u_opt.nrows();
    let phases = DMatrix::from_fn(n_t, n_rf, |n, m| {
        resolution.snap(codebook.columns[(n, selected[m])].arg())
    });
    let design = finish_design(
        AnalogPrecoder::fully_connected(phases, resolution),
        u_opt,
        p_max,
    )?;
    Ok(OmpOutput {
        design,
        selected,
        residual_trace: trace,
    })
}

/// Least-squares digital stage for a fixed analog precoder, then power normalization.
fn finish_design(analog: AnalogPrecoder, u_opt: &CMatrix, p_max: f64) -> Result<HbfDesign> {
    let a = realize_analog(&analog)?;
    let digital = least_squares(&a, u_opt);
    normalize_power(&HbfDesign {
        analog,
        digital,
        p_max,
    })
}

#[derive(Clone, Debug)]
pub struct AltMinOutput {
    pub design: HbfDesign,
    /// `‖U − A W‖²_F` after each iteration, continuous phases.
    pub objective_trace: Vec<f64>,
    /// Objective after snapping the phases to the grid and re-solving `W`.
    pub quantized_objective: f64,
}

fn unit_phase(z: Complex64, previous: f64) -> f64 {
    if z.norm() > 1e-300 {
        z.arg()
    } else {
        previous
    }
}

/// Phase-extraction alternating minimization for the fully connected structure.
///
/// The phase step is a majorize-minimize update
/// `A ← exp(j·arg(U W† + A(λI − W W†)))`, `λ = ‖W‖²₂`, which reduces to plain phase
/// extraction `exp(j·arg(U W†))` for semi-unitary `W` and never increases the objective.
pub fn pe_altmin_fc(
    u_opt: &CMatrix,
    n_rf: usize,
    resolution: PhaseResolution,
    iters: usize,
    p_max: f64,
) -> Result<AltMinOutput> {
    if iters == 0 || n_rf == 0 {
        return Err(Error::Parameter("pe_altmin_fc needs iters ≥ 1 and N_RF ≥ 1".into()));
    }
    let (n_t, n_u) = u_opt.shape();
    let mut phases = DMatrix::from_fn(n_t, n_rf, |n, m| {
        u_opt[(n, m % n_u)].arg() + 2.0 * PI * (n * (m / n_u)) as f64 / n_t as f64
    });
    let realize = |p: &DMatrix<f64>| p.map(|t| Complex64::from_polar(1.0, t));
    let mut a = realize(&phases);
    let mut w = least_squares(&a, u_opt);
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let lambda = w.singular_values().max().powi(2);
        let target = u_opt * w.adjoint() + &a * (CMatrix::identity(n_rf, n_rf) * Complex64::from(lambda) - &w * w.adjoint());
        phases = DMatrix::from_fn(n_t, n_rf, |n, m| unit_phase(target[(n, m)], phases[(n, m)]));
        a = realize(&phases);
        w = least_squares(&a, u_opt);
        trace.push((u_opt - &a * &w).norm_squared());
    }
    let mut snapped = phases.map(|t| resolution.snap(t));
    if resolution.bits().is_some() {
        refine_on_grid(u_opt, &mut snapped, resolution);
    }
    let analog = AnalogPrecoder::fully_connected(snapped, resolution);
    let aq = realize_analog(&analog)?;
    let quantized_objective = (u_opt - &aq * least_squares(&aq, u_opt)).norm_squared();
    Ok(AltMinOutput {
        design: finish_design(analog, u_opt, p_max)?,
        objective_trace: trace,
        quantized_objective,
    })
}

/// Passes of grid-constrained coordinate descent after snapping the phases.
const GRID_REFINE_PASSES: usize = 10;

/// Coordinate descent over grid phases with `W` re-solved between passes. For fixed `W`
/// the best grid value of one entry is the grid point nearest in angle to its
/// extracted phase, so no pass increases the objective.
fn refine_on_grid(u_opt: &CMatrix, phases: &mut DMatrix<f64>, resolution: PhaseResolution) {
    let (n_t, n_rf) = phases.shape();
    let mut a = phases.map(|t| Complex64::from_polar(1.0, t));
    for _ in 0..GRID_REFINE_PASSES {
        let w = least_squares(&a, u_opt);
        let mut changed = false;
        for n in 0..n_t {
            let mut residual = u_opt.row(n) - a.row(n) * &w;
            for m in 0..n_rf {
                residual += w.row(m) * a[(n, m)];
                let z = (&residual * w.row(m).adjoint())[(0, 0)];
                if z.norm() > 1e-300 {
                    let p = resolution.snap(z.arg());
                    if p != phases[(n, m)] {
                        phases[(n, m)] = p;
                        a[(n, m)] = Complex64::from_polar(1.0, p);
                        changed = true;
                    }
                }
                residual -= w.row(m) * a[(n, m)];
            }
        }
        if !changed {
            break;
        }
    }
}

fn subarray_matrix(phases: &[f64], chains: &[usize], n_rf: usize) -> CMatrix {
    let mut a = CMatrix::zeros(phases.len(), n_rf);
    for (n, (&p, &m)) in phases.iter().zip(chains).enumerate() {
        a[(n, m)] = Complex64::from_polar(1.0, p);
    }
    a
}

/// Alternate exact per-antenna phase extraction and least-squares `W` on a subarray
/// support. Appends each iteration's objective to `trace`.
fn subarray_altmin(
    u_opt: &CMatrix,
    chains: &[usize],
    n_rf: usize,
    mut phases: Vec<f64>,
    iters: usize,
    trace: &mut Vec<f64>,
) -> Vec<f64> {
    let mut a = subarray_matrix(&phases, chains, n_rf);
    let mut w = least_squares(&a, u_opt);
    for _ in 0..iters {
        let target = u_opt * w.adjoint();
        for (n, &m) in chains.iter().enumerate() {
            phases[n] = unit_phase(target[(n, m)], phases[n]);
        }
        a = subarray_matrix(&phases, chains, n_rf);
        w = least_squares(&a, u_opt);
        trace.push((u_opt - &a * &w).norm_squared());
    }
    phases
}

fn subarray_init(u_opt: &CMatrix, chains: &[usize]) -> Vec<f64> {
    let n_u = u_opt.ncols();
    chains
        .iter()
        .enumerate()
        .map(|(n, &m)| u_opt[(n, m % n_u)].arg())
        .collect()
}

fn finish_subarray(
    u_opt: &CMatrix,
    phases: &[f64],
    connections: ConnectionMatrix,
    resolution: PhaseResolution,
    p_max: f64,
) -> Result<(HbfDesign, f64)> {
    let snapped: Vec<f64> = phases.iter().map(|&p| resolution.snap(p)).collect();
    let analog = AnalogPrecoder::subarray(snapped, connections, resolution);
    let aq = realize_analog(&analog)?;
    let quantized_objective = (u_opt - &aq * least_squares(&aq, u_opt)).norm_squared();
    Ok((finish_design(analog, u_opt, p_max)?, quantized_objective))
}

/// Alternating minimization restricted to the support of a subarray connection matrix.
pub fn fsa_altmin(
    u_opt: &CMatrix,
    connections: &ConnectionMatrix,
    resolution: PhaseResolution,
    iters: usize,
    p_max: f64,
) -> Result<AltMinOutput> {
    if iters == 0 {
        return Err(Error::Parameter("fsa_altmin needs iters ≥ 1".into()));
    }
    let chains = connections.assignment().ok_or_else(|| {
        Error::Structure("fsa_altmin needs exactly one chain per antenna".into())
    })?;
    if chains.len() != u_opt.nrows() {
        return Err(Error::Dimension("connection matrix and U_opt disagree on N_T".into()));
    }
    let mut trace = Vec::with_capacity(iters);
    let phases = subarray_altmin(
        u_opt,
        &chains,
        connections.n_rf(),
        subarray_init(u_opt, &chains),
        iters,
        &mut trace,
    );
    let (design, quantized_objective) =
        finish_subarray(u_opt, &phases, connections.clone(), resolution, p_max)?;
    Ok(AltMinOutput {
        design,
        objective_trace: trace,
        quantized_objective,
    })
}

#[derive(Clone, Debug)]
pub struct DsaGreedyOutput {
    pub design: HbfDesign,
    pub sum_rate: f64,
    /// Exact sum-rate of the initial fixed-subarray design.
    pub initial_sum_rate: f64,
    /// Exact sum-rate after each accepted reassignment.
    pub accepted_rates: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct DsaGreedyOptions {
    pub n_rf: usize,
    pub resolution: PhaseResolution,
    pub passes: usize,
    /// Alternating iterations for the fixed-subarray initialization.
    pub init_iters: usize,
}

/// Coordinate ascent over antenna-to-chain assignments scored by exact sum-rate.
pub fn dsa_greedy(h: &CMatrix, sigma2: f64, p_max: f64, opts: DsaGreedyOptions) -> Result<DsaGreedyOutput> {
    if opts.passes == 0 {
        return Err(Error::Parameter("dsa_greedy needs passes ≥ 1".into()));
    }
    let n_t = h.ncols();
    let n_rf = opts.n_rf;
    let u_opt = fdp_zf(h, sigma2, p_max, PowerAllocation::WaterFilling)?.u;
    let squared = ConnectionMatrix::squared(n_t, n_rf)?;
    let mut chains = squared.assignment().expect("squared pattern is a subarray");

    let mut scratch = Vec::new();
    let init = subarray_altmin(
        &u_opt,
        &chains,
        n_rf,
        subarray_init(&u_opt, &chains),
        opts.init_iters.max(1),
        &mut scratch,
    );
    let mut phases = init;
    let (mut design, _) = finish_subarray(&u_opt, &phases, squared, opts.resolution, p_max)?;
    let mut rate = design.sum_rate(h, sigma2)?;
    let initial_sum_rate = rate;
    let mut accepted = Vec::new();

    for _ in 0..opts.passes {
        let mut improved = false;
        for n in 0..n_t {
            let current = chains[n];
            let mut best: Option<(f64, usize, Vec<f64>, HbfDesign)> = None;
            for m in (0..n_rf).filter(|&m| m != current) {
                let mut trial = chains.clone();
                trial[n] = m;
                let trial_phases = subarray_altmin(&u_opt, &trial, n_rf, phases.clone(), DSA_INNER_ITERS, &mut scratch);
                let connections = ConnectionMatrix::from_assignment(&trial, n_rf)?;
                let candidate = match finish_subarray(&u_opt, &trial_phases, connections, opts.resolution, p_max) {
                    Ok((d, _)) => d,
                    Err(Error::Degenerate(_)) => continue,
                    Err(e) => return Err(e),
                };
                let r = candidate.sum_rate(h, sigma2)?;
                if r > best.as_ref().map_or(rate, |b| b.0) {
                    best = Some((r, m, trial_phases, candidate));
                }
            }
            if let Some((r, m, p, d)) = best {
                chains[n] = m;
                phases = p;
                design = d;
                rate = r;
                accepted.push(r);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    Ok(DsaGreedyOutput {
        design,
        sum_rate: rate,
        initial_sum_rate,
        accepted_rates: accepted,
    })
}

/// Feasible random design: uniform grid phases, uniform random connections (DSA) and a
/// complex Gaussian digital precoder at full power.
pub fn random_precoder(
    structure: Structure,
    n_t: usize,
    n_rf: usize,
    n_u: usize,
    resolution: PhaseResolution,
    p_max: f64,
    seed: u64,
) -> Result<HbfDesign> {
    let mut rng = stream_rng(seed, 0);
    let phase = |rng: &mut rand_chacha::ChaCha8Rng| match resolution {
        PhaseResolution::Bits(q) => {
            let levels = 1u64 << q;
            2.0 * PI * rng.gen_range(1..=levels) as f64 / levels as f64
        }
        PhaseResolution::Continuous => rng.gen_range(0.0..2.0 * PI),
    };
    let analog = match structure {
        Structure::Fc => {
            let p = DMatrix::from_fn(n_t, n_rf, |_, _| phase(&mut rng));
            AnalogPrecoder::fully_connected(p, resolution)
        }
        Structure::Fsa => {
            let p = (0..n_t).map(|_| phase(&mut rng)).collect();
            AnalogPrecoder::subarray(p, ConnectionMatrix::squared(n_t, n_rf)?, resolution)
        }
        Structure::Dsa => {
            let p = (0..n_t).map(|_| phase(&mut rng)).collect();
            let chains: Vec<usize> = (0..n_t).map(|_| rng.gen_range(0..n_rf)).collect();
            AnalogPrecoder::subarray(p, ConnectionMatrix::from_assignment(&chains, n_rf)?, resolution)
        }
    };
    let digital = CMatrix::from_fn(n_rf, n_u, |_, _| complex_normal(&mut rng, 1.0));
    normalize_power(&HbfDesign {
        analog,
        digital,
        p_max,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineMethod {
    ZfFdp,
    Omp,
    PeAltminLs,
    FsaAltmin,
    DsaGreedy,
    Random,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 6] = [
        BaselineMethod::ZfFdp,
        BaselineMethod::Omp,
        BaselineMethod::PeAltminLs,
        BaselineMethod::FsaAltmin,
        BaselineMethod::DsaGreedy,
        BaselineMethod::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::ZfFdp => "zf-fdp",
            BaselineMethod::Omp => "omp",
            BaselineMethod::PeAltminLs => "pe-altmin-ls",
            BaselineMethod::FsaAltmin => "fsa-altmin",
            BaselineMethod::DsaGreedy => "dsa-greedy",
            BaselineMethod::Random => "random",
        }
    }

    /// One-line description; substitutes for published algorithms say so.
    pub fn description(self) -> &'static str {
        match self {
            BaselineMethod::ZfFdp => "fully digital zero-forcing with water-filling (substitute FDP solver)",
            BaselineMethod::Omp => "orthogonal matching pursuit over a steering codebook",
            BaselineMethod::PeAltminLs => {
                "phase-extraction alternating minimization with least-squares digital step (simplified PE-AltMin)"
            }
            BaselineMethod::FsaAltmin => {
                "alternating minimization on the fixed subarray (substitute for CR-AltMin)"
            }
            BaselineMethod::DsaGreedy => {
                "greedy antenna reassignment with alternating refinement (substitute for dynamic subarray partitioning)"
            }
            BaselineMethod::Random => "random feasible design",
        }
    }

    /// The alternating baseline that matches a hardware structure.
    pub fn for_structure(structure: Structure) -> Self {
        match structure {
            Structure::Fc => BaselineMethod::PeAltminLs,
            Structure::Fsa => BaselineMethod::FsaAltmin,
            Structure::Dsa => BaselineMethod::DsaGreedy,
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|m| m.name()).join(", ")
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown baseline method {s:?}; valid methods: {}",
                    Self::valid_names()
                ))
            })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BaselineSettings {
    pub n_rf: usize,
    pub resolution: PhaseResolution,
    pub sigma2: f64,
    pub p_max: f64,
    /// Structure used by the random baseline.
    pub structure: Structure,
    pub power_allocation: PowerAllocation,
    pub altmin_iters: usize,
    pub dsa_passes: usize,
    /// Codebook size for OMP; `None` means `4·N_T`.
    pub codebook_size: Option<usize>,
    pub seed: u64,
}

impl BaselineSettings {
    pub fn new(n_rf: usize, resolution: PhaseResolution, sigma2: f64, p_max: f64) -> Self {
        Self {
            n_rf,
            resolution,
            sigma2,
            p_max,
            structure: Structure::Fc,
            power_allocation: PowerAllocation::WaterFilling,
            altmin_iters: 20,
            dsa_passes: 2,
            codebook_size: None,
            seed: 0,
        }
    }
}

/// Sum-rate a baseline achieves on channel `h` (perfect CSI). `sample` decorrelates
/// the random baseline across samples.
pub fn baseline_sum_rate(method: BaselineMethod, h: &CMatrix, s: &BaselineSettings, sample: u64) -> Result<f64> {
    let fdp = || fdp_zf(h, s.sigma2, s.p_max, s.power_allocation);
    let design = match method {
        BaselineMethod::ZfFdp => return fdp()?.sum_rate(h, s.sigma2),
        BaselineMethod::Omp => {
            let cb = SteeringCodebook::uniform(h.ncols(), s.codebook_size.unwrap_or(4 * h.ncols()));
            omp_hbf(&fdp()?.u, &cb, s.n_rf, s.resolution, s.p_max)?.design
        }
        BaselineMethod::PeAltminLs => {
            pe_altmin_fc(&fdp()?.u, s.n_rf, s.resolution, s.altmin_iters, s.p_max)?.design
        }
        BaselineMethod::FsaAltmin => {
            let squared = ConnectionMatrix::squared(h.ncols(), s.n_rf)?;
            fsa_altmin(&fdp()?.u, &squared, s.resolution, s.altmin_iters, s.p_max)?.design
        }
        BaselineMethod::DsaGreedy => {
            let opts = DsaGreedyOptions {
                n_rf: s.n_rf,
                resolution: s.resolution,
                passes: s.dsa_passes,
                init_iters: s.altmin_iters,
            };
            return Ok(dsa_greedy(h, s.sigma2, s.p_max, opts)?.sum_rate);
        }
        BaselineMethod::Random => random_precoder(
            s.structure,
            h.ncols(),
            s.n_rf,
            h.nrows(),
            s.resolution,
            s.p_max,
            s.seed ^ sample.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        )?,
    };
    design.sum_rate(h, s.sigma2)
}

/// Phases of a design's analog stage, whatever its structure.
pub fn analog_phases(design: &HbfDesign) -> Vec<f64> {
    match &design.analog.phases {
        Phases::Full(p) => p.iter().copied().collect(),
        Phases::PerAntenna(p) => p.clone(),
    }
}
