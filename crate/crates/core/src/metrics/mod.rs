//! Empirical quantities the theorems bound: conditional-variance error
//! terms, Wasserstein distances, chaos gaps, control gaps, and empirical
//! functional-inequality checks.

pub mod wasserstein;

use crate::distributed::{AgentMarginal, ControlField};
use crate::hjb::ValueGrid;
use crate::sde::rng::CounterRng;
use crate::sde::{ParticleEnsemble, StatePassing};
use serde::Serialize;
use thiserror::Error;
use wasserstein::{wasserstein2, GroundMetric, W2Error};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ensembles disagree in shape: {0}")]
    GridMismatch(String),
    #[error("flow snapshot has {got} marginals, the grid covers {expected} agents")]
    NonProductFlow { got: usize, expected: usize },
    #[error("no variance across the test battery")]
    DegenerateSample,
    #[error("empty test battery")]
    EmptyBattery,
    #[error(transparent)]
    W2(#[from] W2Error),
}

/// How a gap estimate was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EstimateMethod {
    PairedMc,
    IndependentMc,
    Quadrature,
}

/// A measured gap with its sampling error.
#[derive(Clone, Debug, Serialize)]
pub struct GapEstimate {
    pub value: f64,
    pub stderr: f64,
    pub method: EstimateMethod,
    pub samples: usize,
    /// Seed of the paired run, recorded for `PairedMc` estimates.
    pub paired_seed: Option<u64>,
}

impl GapEstimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0, method: EstimateMethod::Quadrature, samples: 0, paired_seed: None }
    }
}

// ---------------------------------------------------------------------------
// The conditional-variance error term
// ---------------------------------------------------------------------------

/// `E_Q(s, m) = (n/2) Σᵢ E[|D_iV(s,ξ)|² - |E[D_iV(s,ξ)|ξⁱ]|²]` for a product
/// flow snapshot, by tensor quadrature on the value grid: the outer integral
/// runs over `mⁱ`, the inner conditional expectation contracts the other
/// agents' axes. Nonnegative up to rounding (a sum of conditional
/// variances).
pub fn eq_error(
    v: &ValueGrid,
    snapshot: &[AgentMarginal],
    t_idx: usize,
) -> Result<f64, MetricsError> {
    let problem = &v.problem;
    let n = problem.n;
    let d = problem.d;
    let nd = n * d;
    if snapshot.len() != n {
        return Err(MetricsError::NonProductFlow { got: snapshot.len(), expected: n });
    }
    // align weights onto the value grid's per-agent subgrids
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (i, m) in snapshot.iter().enumerate() {
        let sub = v.grid.subgrid(i * d, d);
        if m.grid == sub {
            weights.push(m.weights.clone());
        } else {
            let mut w = vec![0.0; sub.total];
            let mut x = vec![0.0; d];
            crate::hjb::grid::deposit_points(
                &sub,
                (0..m.grid.total).filter(|node| m.weights[*node] > 0.0).map(|node| {
                    m.grid.node_coords(node, &mut x);
                    (m.weights[node], x.clone())
                }),
                &mut w,
            );
            weights.push(w);
        }
    }
    let grad = v.gradient_slice(t_idx);
    let mut idx = vec![0usize; nd];
    let mut total = 0.0;
    let mut contracted: Vec<f64> = Vec::new();
    for i in 0..n {
        // ⟨∏m, |D_iV|²⟩
        let mut term1 = 0.0;
        for flat in 0..v.grid.total {
            v.grid.decompose(flat, &mut idx);
            let mut w = 1.0;
            for j in 0..n {
                let mut sub_flat = 0;
                for k in 0..d {
                    sub_flat = sub_flat * v.grid.dims[j * d + k] + idx[j * d + k];
                }
                w *= weights[j][sub_flat];
                if w == 0.0 {
                    break;
                }
            }
            if w == 0.0 {
                continue;
            }
            let g = &grad[flat * nd + i * d..flat * nd + (i + 1) * d];
            term1 += w * g.iter().map(|v| v * v).sum::<f64>();
        }
        // ⟨mᵢ, |⟨m⁻ⁱ, D_iV⟩|²⟩
        crate::distributed::contract_gradient_slice(
            &v.grid,
            grad,
            nd,
            i,
            d,
            &weights,
            &mut contracted,
        );
        let sub_total: usize = v.grid.dims[i * d..(i + 1) * d].iter().product();
        let mut term2 = 0.0;
        for own in 0..sub_total {
            let w = weights[i][own];
            if w == 0.0 {
                continue;
            }
            let g = &contracted[own * d..(own + 1) * d];
            term2 += w * g.iter().map(|v| v * v).sum::<f64>();
        }
        total += term1 - term2;
    }
    Ok(0.5 * n as f64 * total)
}

// ---------------------------------------------------------------------------
// Chaos metrics
// ---------------------------------------------------------------------------

const SUBSET_BUDGET_EXHAUSTIVE: usize = 64;
const CHAOS_PATH_SUBSAMPLE: usize = 256;

/// Budget-sampled average over agent subsets `S` of size `k` of
/// `W₂²(law((X̂ⁱ)_{i∈S}), law((Xⁱ)_{i∈S}))`, with whole paths compared in the
/// discrete sup-over-time-nodes metric. Laws are empirical over a
/// deterministic subsample of paths.
pub fn marginal_chaos_gap(
    x: &ParticleEnsemble,
    x_hat: &ParticleEnsemble,
    k: usize,
    subset_budget: usize,
) -> Result<f64, MetricsError> {
    if x.n_agents != x_hat.n_agents
        || x.time_nodes() != x_hat.time_nodes()
        || x.dim != x_hat.dim
        || (x.dt - x_hat.dt).abs() > 1e-12
    {
        return Err(MetricsError::GridMismatch(format!(
            "agents {}/{}, nodes {}/{}",
            x.n_agents,
            x_hat.n_agents,
            x.time_nodes(),
            x_hat.time_nodes()
        )));
    }
    let n = x.n_agents;
    assert!(k >= 1 && k <= n);
    let subsets = enumerate_or_sample_subsets(n, k, subset_budget.max(1));
    let mut acc = 0.0;
    for subset in &subsets {
        let a = subset_paths(x, subset);
        let b = subset_paths(x_hat, subset);
        let w2 = wasserstein2(&a, &b, GroundMetric::SupOverBlocks { block: k * x.dim })?;
        acc += w2 * w2;
    }
    Ok(acc / subsets.len() as f64)
}

pub(crate) fn enumerate_or_sample_subsets(n: usize, k: usize, budget: usize) -> Vec<Vec<usize>> {
    let total = binomial(n, k);
    if total <= SUBSET_BUDGET_EXHAUSTIVE.min(budget) {
        let mut out = Vec::with_capacity(total);
        let mut cur = Vec::with_capacity(k);
        enumerate_subsets(n, k, 0, &mut cur, &mut out);
        return out;
    }
    // uniform sampling without replacement inside each draw
    let rng = CounterRng::new(0x5EB5E7);
    let mut out = Vec::with_capacity(budget);
    for trial in 0..budget {
        let mut pool: Vec<usize> = (0..n).collect();
        let mut pick = Vec::with_capacity(k);
        for j in 0..k {
            let r = rng.raw(trial as u64, j as u64, 0, 0) as usize % pool.len();
            pick.push(pool.swap_remove(r));
        }
        pick.sort_unstable();
        out.push(pick);
    }
    out
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut num = 1usize;
    for j in 0..k {
        num = num.saturating_mul(n - j) / (j + 1);
    }
    num
}

fn enumerate_subsets(
    n: usize,
    k: usize,
    start: usize,
    cur: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        cur.push(i);
        enumerate_subsets(n, k, i + 1, cur, out);
        cur.pop();
    }
}

fn subset_paths(ens: &ParticleEnsemble, agents: &[usize]) -> Vec<Vec<f64>> {
    let nodes = ens.time_nodes();
    let d = ens.dim;
    let m = ens.n_particles.min(CHAOS_PATH_SUBSAMPLE);
    (0..m)
        .map(|j| {
            let p = j * ens.n_particles / m;
            let mut path = Vec::with_capacity(nodes * agents.len() * d);
            for t in 0..nodes {
                for &i in agents {
                    for c in 0..d {
                        path.push(ens.coord(p, t, i, c));
                    }
                }
            }
            path
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Control gaps
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ControlGap {
    /// `(1/n) Σᵢ E ∫ |αⁱ - ᾱⁱ|² dt` with both fields evaluated along the
    /// reference paths.
    pub per_agent_mean: GapEstimate,
    /// The agent sum `Σᵢ E ∫ |αⁱ - ᾱⁱ|² dt` (the maximum-principle
    /// estimate's left side).
    pub total: f64,
}

/// L² gap between two feedback fields along a common state ensemble. Both
/// fields see the ensemble's paths: the full-information field reads the
/// whole state, a distributed field only the own block.
pub fn control_l2_gap(
    field_a: &dyn ControlField,
    field_b: &dyn ControlField,
    ensemble: &ParticleEnsemble,
) -> ControlGap {
    let n = ensemble.n_agents;
    let d = ensemble.dim;
    let nodes = ensemble.time_nodes();
    let dt = ensemble.dt;
    let mut per_particle = vec![0.0; ensemble.n_particles];
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    for (p, acc) in per_particle.iter_mut().enumerate() {
        let mut integrand_prev = 0.0;
        for t_idx in 0..nodes {
            let t = ensemble.t0 + t_idx as f64 * dt;
            let state = ensemble.state(p, t_idx);
            let mut sum_sq = 0.0;
            for i in 0..n {
                let visible_a = match field_a.mode() {
                    StatePassing::FullState => state,
                    StatePassing::PerAgent => &state[i * d..(i + 1) * d],
                };
                field_a.eval(t, i, visible_a, &mut a);
                let visible_b = match field_b.mode() {
                    StatePassing::FullState => state,
                    StatePassing::PerAgent => &state[i * d..(i + 1) * d],
                };
                field_b.eval(t, i, visible_b, &mut b);
                sum_sq += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
            if t_idx > 0 {
                *acc += 0.5 * dt * (integrand_prev + sum_sq);
            }
            integrand_prev = sum_sq;
        }
    }
    let m = per_particle.len() as f64;
    let total_mean = per_particle.iter().sum::<f64>() / m;
    let var =
        per_particle.iter().map(|v| (v - total_mean) * (v - total_mean)).sum::<f64>() / (m - 1.0);
    let per_agent = GapEstimate {
        value: total_mean / n as f64,
        stderr: (var / m).sqrt() / n as f64,
        method: EstimateMethod::IndependentMc,
        samples: per_particle.len(),
        paired_seed: Some(ensemble.seed),
    };
    ControlGap { per_agent_mean: per_agent, total: total_mean }
}

/// Paired-run variant: each field is integrated along its own state process
/// (the ensembles share Brownian increments through their seed).
pub fn control_l2_gap_paired(
    field_a: &dyn ControlField,
    ens_a: &ParticleEnsemble,
    field_b: &dyn ControlField,
    ens_b: &ParticleEnsemble,
) -> Result<ControlGap, MetricsError> {
    if ens_a.n_particles != ens_b.n_particles
        || ens_a.time_nodes() != ens_b.time_nodes()
        || ens_a.n_agents != ens_b.n_agents
    {
        return Err(MetricsError::GridMismatch("paired ensembles differ in shape".into()));
    }
    let n = ens_a.n_agents;
    let d = ens_a.dim;
    let nodes = ens_a.time_nodes();
    let dt = ens_a.dt;
    let mut per_particle = vec![0.0; ens_a.n_particles];
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    for (p, acc) in per_particle.iter_mut().enumerate() {
        let mut integrand_prev = 0.0;
        for t_idx in 0..nodes {
            let t = ens_a.t0 + t_idx as f64 * dt;
            let state_a = ens_a.state(p, t_idx);
            let state_b = ens_b.state(p, t_idx);
            let mut sum_sq = 0.0;
            for i in 0..n {
                let va = match field_a.mode() {
                    StatePassing::FullState => state_a,
                    StatePassing::PerAgent => &state_a[i * d..(i + 1) * d],
                };
                field_a.eval(t, i, va, &mut a);
                let vb = match field_b.mode() {
                    StatePassing::FullState => state_b,
                    StatePassing::PerAgent => &state_b[i * d..(i + 1) * d],
                };
                field_b.eval(t, i, vb, &mut b);
                sum_sq += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
            if t_idx > 0 {
                *acc += 0.5 * dt * (integrand_prev + sum_sq);
            }
            integrand_prev = sum_sq;
        }
    }
    let m = per_particle.len() as f64;
    let total_mean = per_particle.iter().sum::<f64>() / m;
    let var =
        per_particle.iter().map(|v| (v - total_mean) * (v - total_mean)).sum::<f64>() / (m - 1.0);
    Ok(ControlGap {
        per_agent_mean: GapEstimate {
            value: total_mean / n as f64,
            stderr: (var / m).sqrt() / n as f64,
            method: EstimateMethod::PairedMc,
            samples: per_particle.len(),
            paired_seed: Some(ens_a.seed),
        },
        total: total_mean,
    })
}

// ---------------------------------------------------------------------------
// Empirical Poincaré ratios
// ---------------------------------------------------------------------------

/// A smooth test function with its analytic gradient.
#[derive(Clone, Copy, Debug, Serialize)]
pub enum BatteryFn {
    /// `x_k`
    Linear { coord: usize },
    /// `tanh(x_k)`
    Tanh { coord: usize },
    /// `sin(ω x_k)`
    Sine { coord: usize, freq: f64 },
}

impl BatteryFn {
    fn value(&self, x: &[f64]) -> f64 {
        match self {
            BatteryFn::Linear { coord } => x[*coord],
            BatteryFn::Tanh { coord } => x[*coord].tanh(),
            BatteryFn::Sine { coord, freq } => (freq * x[*coord]).sin(),
        }
    }

    fn grad_sq(&self, x: &[f64]) -> f64 {
        match self {
            BatteryFn::Linear { .. } => 1.0,
            BatteryFn::Tanh { coord } => {
                let c = x[*coord].cosh();
                let g = 1.0 / (c * c);
                g * g
            }
            BatteryFn::Sine { coord, freq } => {
                let g = freq * (freq * x[*coord]).cos();
                g * g
            }
        }
    }
}

/// The fixed battery: linear, tanh, and three sine frequencies per
/// coordinate.
pub fn default_battery(dim: usize) -> Vec<BatteryFn> {
    let mut out = Vec::new();
    for coord in 0..dim {
        out.push(BatteryFn::Linear { coord });
        out.push(BatteryFn::Tanh { coord });
        for freq in [1.0, 2.0, 3.0] {
            out.push(BatteryFn::Sine { coord, freq });
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct PoincareReport {
    /// Worst `Var(g)/E|∇g|²` over the battery — a lower estimate of the
    /// Poincaré constant.
    pub worst_ratio: f64,
    /// Bootstrap confidence interval (2.5%, 97.5%) of the worst ratio.
    pub ci: (f64, f64),
    pub per_function: Vec<f64>,
    pub samples: usize,
}

/// Empirical Poincaré ratios of a sample cloud over a battery of test
/// functions with analytic gradients.
pub fn empirical_poincare(
    samples: &[Vec<f64>],
    battery: &[BatteryFn],
) -> Result<PoincareReport, MetricsError> {
    if battery.is_empty() {
        return Err(MetricsError::EmptyBattery);
    }
    let ratio_of = |indices: Option<&[usize]>| -> (f64, Vec<f64>) {
        let mut per = Vec::with_capacity(battery.len());
        let mut worst = 0.0f64;
        for g in battery {
            let (mut s1, mut s2, mut gsq) = (0.0, 0.0, 0.0);
            let m = indices.map_or(samples.len(), |ix| ix.len());
            for j in 0..m {
                let x = match indices {
                    Some(ix) => &samples[ix[j]],
                    None => &samples[j],
                };
                let v = g.value(x);
                s1 += v;
                s2 += v * v;
                gsq += g.grad_sq(x);
            }
            let mf = m as f64;
            let var = (s2 / mf - (s1 / mf) * (s1 / mf)).max(0.0);
            let denom = gsq / mf;
            let r = if denom > 0.0 { var / denom } else { 0.0 };
            per.push(r);
            worst = worst.max(r);
        }
        (worst, per)
    };
    let (worst, per_function) = ratio_of(None);
    if per_function.iter().all(|r| *r == 0.0) && samples.len() > 1 {
        // a genuine Dirac cloud has ratio zero; only an empty or constant
        // battery denominator is degenerate
        let any_denominator = battery.iter().any(|g| {
            samples.iter().map(|x| g.grad_sq(x)).sum::<f64>() > 0.0
        });
        if !any_denominator {
            return Err(MetricsError::DegenerateSample);
        }
    }
    // bootstrap over particles
    let rng = CounterRng::new(0xB00757);
    let b = 200;
    let mut worsts = Vec::with_capacity(b);
    let mut indices = vec![0usize; samples.len()];
    for rep in 0..b {
        for (j, ix) in indices.iter_mut().enumerate() {
            *ix = rng.raw(rep as u64, j as u64, 0, 1) as usize % samples.len();
        }
        worsts.push(ratio_of(Some(&indices)).0);
    }
    worsts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = worsts[(0.025 * b as f64) as usize];
    let hi = worsts[((0.975 * b as f64) as usize).min(b - 1)];
    Ok(PoincareReport { worst_ratio: worst, ci: (lo, hi), per_function, samples: samples.len() })
}

/// JSON record for exported estimates.
#[derive(Clone, Debug, Serialize)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub stderr: f64,
    pub config_hash: String,
}
