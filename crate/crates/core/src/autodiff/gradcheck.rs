//! Central finite-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, StePolicy, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so gradients that are zero up to
    /// round-off do not register as failures.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per parameter (all if `None`).
    pub max_entries_per_param: Option<usize>,
    /// Additionally compare the derivative along one random direction through all
    /// parameters at once.
    pub directional: bool,
    pub ste_policy: StePolicy,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries_per_param: None,
            directional: true,
            ste_policy: StePolicy::Surrogate,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub entries_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub directional_rel_error: Option<f64>,
    /// The graph contains a hard quantizer whose staircase has no useful derivative.
    pub non_differentiable: bool,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare autodiff gradients of `build`'s scalar output against central differences.
///
/// `build` receives a fresh graph and the parameter leaves and must be deterministic.
pub fn gradient_check<F>(params: &[Tensor], build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_ste_policy(opts.ste_policy);
        let vars = ps
            .iter()
            .map(|p| g.parameter(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut g = Graph::with_ste_policy(opts.ste_policy);
    let vars = params
        .iter()
        .map(|p| g.parameter(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    if g.has_hard_quantizer() {
        return Ok(GradCheckReport {
            params: Vec::new(),
            directional_rel_error: None,
            non_differentiable: true,
            max_rel_error: f64::INFINITY,
            passed: false,
        });
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &e in &entries {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + opts.step;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - opts.step;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[pi].data()[e], numeric, opts.floor));
        }
        reports.push(ParamCheck {
            index: pi,
            entries_checked: entries.len(),
            max_rel_error: worst,
        });
    }

    let directional_rel_error = if opts.directional {
        let dirs: Vec<Vec<f64>> = params
            .iter()
            .map(|p| (0..p.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let shifted = |sign: f64| -> Vec<Tensor> {
            params
                .iter()
                .zip(&dirs)
                .map(|(p, d)| {
                    let mut q = p.clone();
                    for (x, dx) in q.data_mut().iter_mut().zip(d) {
                        *x += sign * opts.step * dx;
                    }
                    q
                })
                .collect()
        };
        let numeric = (eval(&shifted(1.0))? - eval(&shifted(-1.0))?) / (2.0 * opts.step);
        let exact: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.data().iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        Some(relative_error(exact, numeric, opts.floor))
    } else {
        None
    };

    let max_rel_error = reports
        .iter()
        .map(|r| r.max_rel_error)
        .chain(directional_rel_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: reports,
        directional_rel_error,
        non_differentiable: false,
        max_rel_error,
        passed: max_rel_error < opts.tolerance,
    })
}
