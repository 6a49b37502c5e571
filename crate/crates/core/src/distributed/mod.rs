//! The distributed control problem: the coupled-marginal fixed point over
//! per-agent scalar HJB equations, the conditional-drift intermediate
//! process, Monte Carlo cost evaluation, and the McKean-Vlasov FBSDE
//! cross-solver.

pub(crate) mod effective;
pub mod fbsde;
pub(crate) mod fokker_planck;

use crate::bounds::FlowCrossStats;
use crate::hjb::grid::{deposit_points, TensorGrid};
use crate::hjb::stepper::ScaledHamiltonian;
use crate::hjb::{integrate_backward, GridSpec, HjbError, SchemeConfig, ValueGrid};
use crate::metrics::wasserstein::wasserstein2_weighted_1d;
use crate::metrics::{EstimateMethod, GapEstimate};
use crate::model::{hamiltonian_eval, ControlProblem, InitialLaw, MarginalSpec, ModelError};
use crate::sde::rng::CounterRng;
use crate::sde::{ParticleEnsemble, SdeError, StatePassing};
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistributedError {
    #[error("fixed point stalled: residual {residual:e} after {iters} iterations (tol {tol:e})")]
    PicardStalled { residual: f64, iters: usize, tol: f64 },
    #[error("Picard iteration diverged at iteration {0}")]
    PicardDiverged(usize),
    #[error("flow mass {mass:e} reached the truncated domain boundary")]
    MarginalEscape { mass: f64 },
    #[error("{frac:.2}% of particle coordinates left the quadrature domain")]
    QuadratureSupport { frac: f64 },
    #[error("regression system ill-conditioned at time index {0}")]
    RegressionIllConditioned(usize),
    #[error("maximum principle needs a convex problem (or a diagnostic-only config)")]
    NotConvex,
    #[error("tensor fallback needs {need} evaluations, budget {cap}")]
    TensorBudget { need: usize, cap: usize },
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("cost is not finite")]
    NonfiniteCost,
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sde(#[from] SdeError),
}

// ---------------------------------------------------------------------------
// Marginal flows
// ---------------------------------------------------------------------------

/// One agent's law at one time: a histogram on the agent's grid.
#[derive(Clone, Debug)]
pub struct AgentMarginal {
    pub grid: TensorGrid,
    pub weights: Vec<f64>,
}

impl AgentMarginal {
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn expectation(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let mut x = vec![0.0; self.grid.ndim()];
        let mut acc = 0.0;
        for node in 0..self.grid.total {
            let w = self.weights[node];
            if w == 0.0 {
                continue;
            }
            self.grid.node_coords(node, &mut x);
            acc += w * f(&x);
        }
        acc
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.grid.ndim();
        let mut m = vec![0.0; d];
        let mut x = vec![0.0; d];
        for node in 0..self.grid.total {
            let w = self.weights[node];
            if w == 0.0 {
                continue;
            }
            self.grid.node_coords(node, &mut x);
            for k in 0..d {
                m[k] += w * x[k];
            }
        }
        m
    }

    pub fn variance_trace(&self) -> f64 {
        let mean = self.mean();
        self.expectation(|x| {
            x.iter().zip(&mean).map(|(xi, mi)| (xi - mi) * (xi - mi)).sum::<f64>()
        })
    }

    /// `W₂` to another marginal: exact quantile coupling in one dimension,
    /// entropic transport over the active supports otherwise.
    pub fn w2(&self, other: &AgentMarginal) -> f64 {
        let d = self.grid.ndim();
        if d == 1 {
            let xa: Vec<f64> = (0..self.grid.total).map(|i| self.grid.coord(0, i)).collect();
            let xb: Vec<f64> = (0..other.grid.total).map(|i| other.grid.coord(0, i)).collect();
            return wasserstein2_weighted_1d(&xa, &self.weights, &xb, &other.weights)
                .max(0.0)
                .sqrt();
        }
        let collect = |m: &AgentMarginal| {
            let mut pts = Vec::new();
            let mut ws = Vec::new();
            let mut x = vec![0.0; d];
            for node in 0..m.grid.total {
                if m.weights[node] > 1e-12 {
                    m.grid.node_coords(node, &mut x);
                    pts.push(x.clone());
                    ws.push(m.weights[node]);
                }
            }
            let s: f64 = ws.iter().sum();
            for w in &mut ws {
                *w /= s;
            }
            (pts, ws)
        };
        let (pa, wa) = collect(self);
        let (pb, wb) = collect(other);
        if pa.is_empty() || pb.is_empty() {
            return 0.0;
        }
        let mut cost = vec![0.0; pa.len() * pb.len()];
        let mut spread = 0.0f64;
        for (i, a) in pa.iter().enumerate() {
            for (j, b) in pb.iter().enumerate() {
                let c: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                cost[i * pb.len() + j] = c;
                spread = spread.max(c);
            }
        }
        crate::metrics::wasserstein::sinkhorn_cost(
            &cost,
            pa.len(),
            pb.len(),
            Some(&wa),
            Some(&wb),
            5e-3 * spread.max(1e-12),
        )
        .max(0.0)
        .sqrt()
    }

    /// Mass sitting on the outermost layer of nodes.
    pub fn boundary_mass(&self) -> f64 {
        (0..self.grid.total)
            .filter(|f| !self.grid.is_interior(*f))
            .map(|f| self.weights[f])
            .sum()
    }
}

/// Time-indexed per-agent marginal laws.
#[derive(Clone, Debug)]
pub struct MarginalFlow {
    pub times: Vec<f64>,
    /// `marginals[time][agent]`
    pub marginals: Vec<Vec<AgentMarginal>>,
}

impl MarginalFlow {
    pub fn n_agents(&self) -> usize {
        self.marginals[0].len()
    }

    pub fn validate(&self) -> Result<(), DistributedError> {
        for slice in &self.marginals {
            for m in slice {
                let mass = m.mass();
                if (mass - 1.0).abs() > 1e-9 || m.weights.iter().any(|w| *w < 0.0) {
                    return Err(DistributedError::MarginalEscape { mass: (mass - 1.0).abs() });
                }
            }
        }
        Ok(())
    }

    /// CSV rows `agent, time, bin_center..., weight` (active bins only).
    pub fn to_csv(&self) -> String {
        let d = self.marginals[0][0].grid.ndim();
        let mut out = String::from("agent,time");
        for k in 0..d {
            out.push_str(&format!(",bin_center_{k}"));
        }
        out.push_str(",weight\n");
        let mut x = vec![0.0; d];
        for (k, slice) in self.marginals.iter().enumerate() {
            for (i, m) in slice.iter().enumerate() {
                for node in 0..m.grid.total {
                    if m.weights[node] == 0.0 {
                        continue;
                    }
                    m.grid.node_coords(node, &mut x);
                    out.push_str(&format!("{i},{}", self.times[k]));
                    for c in &x {
                        out.push_str(&format!(",{c}"));
                    }
                    out.push_str(&format!(",{}\n", m.weights[node]));
                }
            }
        }
        out
    }
}

/// Exact histogram deposition of an initial marginal (Gaussians via
/// cell-boundary CDF differences, point sets via cloud-in-cell).
pub(crate) fn deposit_marginal(grid: &TensorGrid, spec: &MarginalSpec) -> Vec<f64> {
    let mut w = vec![0.0; grid.total];
    match spec {
        MarginalSpec::Dirac { point } => {
            deposit_points(grid, std::iter::once((1.0, point.clone())), &mut w);
        }
        MarginalSpec::Particles { points, weights } => {
            deposit_points(
                grid,
                points.iter().zip(weights).map(|(p, wt)| (*wt, p.clone())),
                &mut w,
            );
        }
        MarginalSpec::Gaussian { mean, variance } => {
            let d = grid.ndim();
            let sd = variance.sqrt();
            let axis_masses: Vec<Vec<f64>> = (0..d)
                .map(|a| {
                    let m = grid.dims[a];
                    (0..m)
                        .map(|i| {
                            let x = grid.coord(a, i);
                            let lo =
                                if i == 0 { f64::NEG_INFINITY } else { x - grid.h[a] / 2.0 };
                            let hi =
                                if i + 1 == m { f64::INFINITY } else { x + grid.h[a] / 2.0 };
                            normal_cdf((hi - mean[a]) / sd) - normal_cdf((lo - mean[a]) / sd)
                        })
                        .collect()
                })
                .collect();
            let mut idx = vec![0usize; d];
            for flat in 0..grid.total {
                grid.decompose(flat, &mut idx);
                w[flat] = (0..d).map(|a| axis_masses[a][idx[a]]).product();
            }
        }
    }
    let mass: f64 = w.iter().sum();
    if mass > 0.0 {
        for v in &mut w {
            *v /= mass;
        }
    }
    w
}

fn normal_cdf(z: f64) -> f64 {
    if z == f64::NEG_INFINITY {
        return 0.0;
    }
    if z == f64::INFINITY {
        return 1.0;
    }
    0.5 * erfc_local(-z / std::f64::consts::SQRT_2)
}

fn erfc_local(x: f64) -> f64 {
    let neg = x < 0.0;
    let ax = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * ax);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let erfc = poly * (-ax * ax).exp();
    if neg {
        2.0 - erfc
    } else {
        erfc
    }
}

// ---------------------------------------------------------------------------
// Distributed fixed point
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DistributedConfig {
    pub bins_per_axis: usize,
    pub time_steps: usize,
    /// Initial damping λ of the flow update; halved when the residual rises.
    pub damping: f64,
    pub max_iters: usize,
    /// Convergence threshold on the time-averaged `W₂` difference between
    /// successive flows, summed over agents.
    pub tol: f64,
    pub scheme: SchemeConfig,
    /// Solve one representative agent instead of `n` (valid for exchangeable
    /// problems started from identical marginals).
    pub symmetric: bool,
    pub domain_pad: f64,
}

impl DistributedConfig {
    pub fn for_dim(d: usize) -> Self {
        Self {
            bins_per_axis: if d == 1 { 513 } else { 65 },
            time_steps: 200,
            damping: 0.5,
            max_iters: 40,
            tol: 1e-4,
            scheme: SchemeConfig::default(),
            symmetric: false,
            domain_pad: 6.0,
        }
    }
}

pub struct DistributedSolution {
    /// Per-agent value grids (a single representative in symmetric mode).
    pub v_grids: Vec<Arc<ValueGrid>>,
    pub flow: MarginalFlow,
    /// The distributed value, by running/terminal cost quadrature along the
    /// converged flow.
    pub value: f64,
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

fn agent_grid(problem: &ControlProblem, m: &MarginalSpec, cfg: &DistributedConfig) -> TensorGrid {
    let mean = m.mean();
    let radius = cfg.domain_pad * (problem.horizon + m.max_variance()).sqrt();
    let bounds: Vec<(f64, f64)> =
        (0..problem.d).map(|k| (mean[k] - radius, mean[k] + radius)).collect();
    TensorGrid::new(&bounds, cfg.bins_per_axis)
}

fn symmetric_applicable(problem: &ControlProblem, m0: &InitialLaw) -> bool {
    use crate::model::CostKind;
    let first = &m0.marginals()[0];
    let identical = m0.marginals().iter().all(|m| m == first);
    let shared_lagr = matches!(problem.lagrangians, crate::model::LagrangianSet::Shared(_));
    let cost_ok = |c: &crate::model::CostSpec| match &c.kind {
        CostKind::Zero | CostKind::MeanField { .. } => true,
        CostKind::Separable { per_agent } => per_agent.iter().all(|a| a == &per_agent[0]),
        CostKind::PairwiseGraph { matrix, .. } => matrix.doubly_stochastic,
        CostKind::Custom(_) => false,
    };
    identical && shared_lagr && cost_ok(&problem.running_cost) && cost_ok(&problem.terminal_cost)
}

/// Solve the distributed problem as a damped fixed point: freeze the flow,
/// solve each agent's scalar HJB with flow-averaged costs, push every
/// marginal forward under the resulting feedback, damp, and repeat until
/// successive flows agree.
pub fn solve_distributed_pde(
    problem: &Arc<ControlProblem>,
    m0: &InitialLaw,
    cfg: &DistributedConfig,
) -> Result<DistributedSolution, DistributedError> {
    let n = problem.n;
    let d = problem.d;
    if d > 2 {
        return Err(DistributedError::Unsupported(format!(
            "per-agent dimension {d} exceeds the histogram cap of 2"
        )));
    }
    if m0.marginals().len() != n {
        return Err(DistributedError::Unsupported("initial law size mismatch".into()));
    }
    if cfg.symmetric && !symmetric_applicable(problem, m0) {
        return Err(DistributedError::Unsupported(
            "symmetric mode needs identical marginals and an exchangeable cost".into(),
        ));
    }
    let reps = if cfg.symmetric { 1 } else { n };
    let grids: Vec<TensorGrid> =
        (0..reps).map(|i| agent_grid(problem, &m0.marginals()[i], cfg)).collect();
    let steps = cfg.time_steps;
    let dt = problem.horizon / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let decoupled = problem.running_cost.is_decoupled() && problem.terminal_cost.is_decoupled();

    // initial flow guess: zero-drift (pure heat) push
    let mut flow: Vec<Vec<AgentMarginal>> = Vec::with_capacity(steps + 1);
    {
        let first: Vec<AgentMarginal> = (0..reps)
            .map(|i| AgentMarginal {
                grid: grids[i].clone(),
                weights: deposit_marginal(&grids[i], &m0.marginals()[i]),
            })
            .collect();
        flow.push(first);
        for k in 0..steps {
            let mut next = flow[k].clone();
            for (i, m) in next.iter_mut().enumerate() {
                let zero = vec![0.0; grids[i].total * d];
                fokker_planck::fp_step(&grids[i], &mut m.weights, &zero, dt);
            }
            flow.push(next);
        }
    }

    let full_slice = |slice: &[AgentMarginal]| -> Vec<AgentMarginal> {
        if cfg.symmetric {
            vec![slice[0].clone(); n]
        } else {
            slice.to_vec()
        }
    };

    let mut damping = cfg.damping;
    let mut residuals: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut improving_streak = 0usize;

    for iter in 0..cfg.max_iters {
        iterations = iter + 1;
        let terminal_slice = full_slice(&flow[steps]);
        let results: Result<Vec<Vec<Vec<f64>>>, DistributedError> = (0..reps)
            .into_par_iter()
            .map(|i| {
                let slices = solve_agent_pde(problem, i, &grids[i], &flow, &terminal_slice, cfg, steps, dt, &full_slice)?;
                let mut weights = deposit_marginal(&grids[i], &m0.marginals()[i]);
                let mut pushed: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
                pushed.push(weights.clone());
                let mut drift = vec![0.0; grids[i].total * d];
                for k in 0..steps {
                    feedback_drift_on_grid(problem, i, &grids[i], &slices[k], &mut drift)?;
                    fokker_planck::fp_step(&grids[i], &mut weights, &drift, dt);
                    pushed.push(weights.clone());
                }
                Ok(pushed)
            })
            .collect();
        let pushed_flows = results?;

        let mut residual = 0.0;
        for (i, pushed) in pushed_flows.iter().enumerate() {
            for k in 0..=steps {
                let new_m = AgentMarginal { grid: grids[i].clone(), weights: pushed[k].clone() };
                residual += dt * flow[k][i].w2(&new_m);
            }
        }
        residual *= (n / reps) as f64 / problem.horizon;
        if !residual.is_finite() {
            return Err(DistributedError::PicardDiverged(iter));
        }
        if let Some(last) = residuals.last() {
            if residual > *last * 1.05 {
                damping = (damping / 2.0).max(0.05);
                improving_streak = 0;
            } else if residual < *last {
                improving_streak += 1;
                // a monotone tail tolerates a more aggressive update
                if improving_streak >= 2 {
                    damping = (damping * 1.25).min(0.95);
                }
            }
        }
        residuals.push(residual);

        for k in 0..=steps {
            for i in 0..reps {
                for (old, new) in flow[k][i].weights.iter_mut().zip(&pushed_flows[i][k]) {
                    *old = (1.0 - damping) * *old + damping * *new;
                }
            }
        }
        let boundary_mass: f64 =
            (0..reps).map(|i| flow[steps][i].boundary_mass()).fold(0.0, f64::max);
        if boundary_mass > 1e-6 {
            return Err(DistributedError::MarginalEscape { mass: boundary_mass });
        }
        if decoupled || residual <= cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(DistributedError::PicardStalled {
            residual: *residuals.last().unwrap_or(&f64::NAN),
            iters: iterations,
            tol: cfg.tol,
        });
    }

    // final self-consistent pass against the converged flow, undamped
    let terminal_slice = full_slice(&flow[steps]);
    let mut v_grids: Vec<Arc<ValueGrid>> = Vec::with_capacity(reps);
    let mut final_flow: Vec<Vec<AgentMarginal>> =
        (0..=steps).map(|_| Vec::with_capacity(reps)).collect();
    for i in 0..reps {
        let grid = &grids[i];
        let slices =
            solve_agent_pde(problem, i, grid, &flow, &terminal_slice, cfg, steps, dt, &full_slice)?;
        let mut weights = deposit_marginal(grid, &m0.marginals()[i]);
        final_flow[0].push(AgentMarginal { grid: grid.clone(), weights: weights.clone() });
        let mut drift = vec![0.0; grid.total * d];
        for k in 0..steps {
            feedback_drift_on_grid(problem, i, grid, &slices[k], &mut drift)?;
            fokker_planck::fp_step(grid, &mut weights, &drift, dt);
            final_flow[k + 1]
                .push(AgentMarginal { grid: grid.clone(), weights: weights.clone() });
        }
        let spec = GridSpec::new(
            (0..d).map(|k| (grid.lo[k], grid.hi(k))).collect(),
            cfg.bins_per_axis,
            steps,
        );
        v_grids.push(Arc::new(ValueGrid::from_solution(
            Arc::clone(problem),
            spec,
            grid.clone(),
            times.clone(),
            slices,
            format!("distributed_agent_{i}"),
        )));
    }
    let flow = MarginalFlow { times, marginals: final_flow };
    flow.validate()?;

    let value = flow_value(problem, &v_grids, &flow, cfg.symmetric)?;
    Ok(DistributedSolution { v_grids, flow, value, iterations, residuals })
}

#[allow(clippy::too_many_arguments)]
fn solve_agent_pde(
    problem: &Arc<ControlProblem>,
    agent: usize,
    grid: &TensorGrid,
    flow: &[Vec<AgentMarginal>],
    terminal_slice: &[AgentMarginal],
    cfg: &DistributedConfig,
    steps: usize,
    dt: f64,
    full_slice: &dyn Fn(&[AgentMarginal]) -> Vec<AgentMarginal>,
) -> Result<Vec<Vec<f64>>, DistributedError> {
    let nodes = node_coords_flat(grid);
    let terminal =
        effective::conditional_cost(&problem.terminal_cost, agent, terminal_slice, &nodes)?;
    let lagr = problem.lagrangian(agent);
    let ham = ScaledHamiltonian {
        lagrangian: lagr,
        weight: 1.0 / problem.n as f64,
        costate_scale: problem.n as f64,
    };
    let f_zero = problem.running_cost.is_zero();
    let mut source_err = None;
    let slices = integrate_backward(
        grid,
        &ham,
        terminal,
        |k_next| {
            if f_zero {
                return None;
            }
            let slice = full_slice(&flow[k_next]);
            match effective::conditional_cost(&problem.running_cost, agent, &slice, &nodes) {
                Ok(v) => Some(v),
                Err(e) => {
                    source_err = Some(e);
                    None
                }
            }
        },
        steps,
        dt,
        crate::hjb::BoundaryMode::LinearExtrapolation,
        &cfg.scheme,
    )?;
    if let Some(e) = source_err {
        return Err(e);
    }
    Ok(slices)
}

fn node_coords_flat(grid: &TensorGrid) -> Vec<f64> {
    let d = grid.ndim();
    let mut out = vec![0.0; grid.total * d];
    let mut x = vec![0.0; d];
    for flat in 0..grid.total {
        grid.node_coords(flat, &mut x);
        out[flat * d..(flat + 1) * d].copy_from_slice(&x);
    }
    out
}

/// Feedback drift `a*(x) = -D_p Hⁱ(x, n Dvⁱ)` on all grid nodes.
fn feedback_drift_on_grid(
    problem: &ControlProblem,
    agent: usize,
    grid: &TensorGrid,
    v_slice: &[f64],
    out: &mut [f64],
) -> Result<(), DistributedError> {
    let d = grid.ndim();
    let n = problem.n as f64;
    let lagr = problem.lagrangian(agent);
    let quadratic = lagr.is_quadratic();
    let mut x = vec![0.0; d];
    let mut p = vec![0.0; d];
    for flat in 0..grid.total {
        for a in 0..d {
            let s = grid.strides[a];
            let i = grid.axis_index(flat, a);
            let g = if i == 0 {
                (v_slice[flat + s] - v_slice[flat]) / grid.h[a]
            } else if i + 1 == grid.dims[a] {
                (v_slice[flat] - v_slice[flat - s]) / grid.h[a]
            } else {
                (v_slice[flat + s] - v_slice[flat - s]) / (2.0 * grid.h[a])
            };
            p[a] = n * g;
        }
        if quadratic {
            for a in 0..d {
                out[flat * d + a] = -p[a];
            }
        } else {
            grid.node_coords(flat, &mut x);
            let eval = hamiltonian_eval(lagr, &x, &p)?;
            out[flat * d..(flat + 1) * d].copy_from_slice(&eval.minimizer);
        }
    }
    Ok(())
}

/// Cost quadrature along a flow: `∫ [Σᵢ ⟨mᵢ, L(·,αᵢ)/n⟩ + ⟨∏m, F⟩] dt`
/// (trapezoidal) plus `⟨∏m_T, G⟩`.
fn flow_value(
    problem: &ControlProblem,
    v_grids: &[Arc<ValueGrid>],
    flow: &MarginalFlow,
    symmetric: bool,
) -> Result<f64, DistributedError> {
    let n = problem.n;
    let reps = v_grids.len();
    let d = problem.d;
    let steps = flow.times.len() - 1;
    let dt = flow.times[1] - flow.times[0];
    let nf = n as f64;
    let full_slice = |slice: &[AgentMarginal]| -> Vec<AgentMarginal> {
        if symmetric {
            vec![slice[0].clone(); n]
        } else {
            slice.to_vec()
        }
    };
    let mut running_at = vec![0.0; steps + 1];
    for k in 0..=steps {
        let mut r = 0.0;
        for i in 0..reps {
            let grid = &v_grids[i].grid;
            let v_slice = v_grids[i].values_at(k);
            let mut drift = vec![0.0; grid.total * d];
            feedback_drift_on_grid(problem, i, grid, v_slice, &mut drift)?;
            let lagr = problem.lagrangian(i);
            let m = &flow.marginals[k][i];
            let mut x = vec![0.0; d];
            let mut contrib = 0.0;
            for node in 0..grid.total {
                let w = m.weights[node];
                if w == 0.0 {
                    continue;
                }
                grid.node_coords(node, &mut x);
                contrib += w * lagr.lagrangian_value(&x, &drift[node * d..(node + 1) * d]) / nf;
            }
            r += contrib * (n / reps) as f64;
        }
        if !problem.running_cost.is_zero() {
            let slice = full_slice(&flow.marginals[k]);
            r += effective::product_expectation(&problem.running_cost, &slice)?;
        }
        running_at[k] = r;
    }
    let mut value = 0.0;
    for k in 0..steps {
        value += 0.5 * dt * (running_at[k] + running_at[k + 1]);
    }
    let slice_t = full_slice(&flow.marginals[steps]);
    value += effective::product_expectation(&problem.terminal_cost, &slice_t)?;
    Ok(value)
}

// ---------------------------------------------------------------------------
// The conditional-drift process
// ---------------------------------------------------------------------------

pub struct HatXRun {
    pub ensemble: ParticleEnsemble,
    pub flow: MarginalFlow,
}

/// Simulate the distributed state process whose drift is the conditional
/// expectation of the full-information feedback: per time step, `D_i V` is
/// contracted over the other agents' current empirical marginals by tensor
/// quadrature on the value grid, and per-agent particle populations evolve
/// independently (the product structure is preserved by construction).
pub fn simulate_hat_x(
    v: &ValueGrid,
    m0: &InitialLaw,
    particles: usize,
    seed: u64,
) -> Result<HatXRun, DistributedError> {
    let problem = &v.problem;
    let n = problem.n;
    let d = problem.d;
    let nd = n * d;
    let steps = v.time_slices() - 1;
    let dt = v.dt();
    let rng = CounterRng::new(seed);
    let subgrids: Vec<TensorGrid> = (0..n).map(|i| v.grid.subgrid(i * d, d)).collect();

    let mut positions: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0; particles * d]).collect();
    for (i, marginal) in m0.marginals().iter().enumerate() {
        for p in 0..particles {
            marginal.sample_into(
                |draw| rng.uniform(p as u64, i as u64, u64::MAX, draw),
                |draw| rng.normal(p as u64, i as u64, u64::MAX, draw),
                &mut positions[i][p * d..(p + 1) * d],
            );
        }
    }

    let mut path_data = vec![0.0; particles * (steps + 1) * nd];
    let mut flow_marginals: Vec<Vec<AgentMarginal>> = Vec::with_capacity(steps + 1);
    let mut escaped = 0usize;
    let mut weights: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; subgrids[i].total]).collect();
    let mut contracted: Vec<f64> = Vec::new();
    let sqrt_dt = dt.sqrt();

    for step in 0..=steps {
        for p in 0..particles {
            for i in 0..n {
                let base = (p * (steps + 1) + step) * nd + i * d;
                path_data[base..base + d].copy_from_slice(&positions[i][p * d..(p + 1) * d]);
            }
        }
        for i in 0..n {
            let pts = (0..particles)
                .map(|p| (1.0 / particles as f64, positions[i][p * d..(p + 1) * d].to_vec()));
            deposit_points(&subgrids[i], pts, &mut weights[i]);
        }
        flow_marginals.push(
            (0..n)
                .map(|i| AgentMarginal {
                    grid: subgrids[i].clone(),
                    weights: weights[i].clone(),
                })
                .collect(),
        );
        if step == steps {
            break;
        }
        for i in 0..n {
            for p in 0..particles {
                for k in 0..d {
                    let x = positions[i][p * d + k];
                    let axis = i * d + k;
                    if x < v.grid.lo[axis] || x > v.grid.hi(axis) {
                        escaped += 1;
                    }
                }
            }
        }

        let grad = v.gradient_slice(step);
        for i in 0..n {
            contract_gradient_slice(&v.grid, grad, nd, i, d, &weights, &mut contracted);
            let lagr = problem.lagrangian(i);
            let quadratic = lagr.is_quadratic();
            let sub = &subgrids[i];
            let pos = &mut positions[i];
            let mut g = vec![0.0; d];
            let mut noise = vec![0.0; d];
            for p in 0..particles {
                let x = pos[p * d..(p + 1) * d].to_vec();
                sub.interp_vector(&contracted, d, &x, &mut g);
                let drift: Vec<f64> = if quadratic {
                    g.iter().map(|v| -(n as f64) * v).collect()
                } else {
                    let costate: Vec<f64> = g.iter().map(|v| n as f64 * v).collect();
                    hamiltonian_eval(lagr, &x, &costate)?.minimizer
                };
                rng.normals(p as u64, i as u64, step as u64, &mut noise);
                for k in 0..d {
                    pos[p * d + k] += dt * drift[k] + sqrt_dt * noise[k];
                }
            }
        }
    }
    let escape_frac = escaped as f64 / (particles * n * steps.max(1)) as f64;
    if escape_frac > 1e-3 {
        return Err(DistributedError::QuadratureSupport { frac: 100.0 * escape_frac });
    }

    let ensemble = ParticleEnsemble::from_parts(
        particles,
        n,
        d,
        dt,
        v.times[0],
        seed,
        "hat_x".to_string(),
        path_data,
    );
    let flow = MarginalFlow { times: v.times.clone(), marginals: flow_marginals };
    flow.validate()?;
    Ok(HatXRun { ensemble, flow })
}

/// `out[node_i·d + k] = Σ_{other nodes} D_iV[flat][i·d+k] · Π_{j≠i} w_j`.
pub(crate) fn contract_gradient_slice(
    grid: &TensorGrid,
    grad_slice: &[f64],
    nd: usize,
    agent: usize,
    d: usize,
    weights: &[Vec<f64>],
    out: &mut Vec<f64>,
) {
    let n = weights.len();
    let sub_total: usize = grid.dims[agent * d..(agent + 1) * d].iter().product();
    out.clear();
    out.resize(sub_total * d, 0.0);
    let mut idx = vec![0usize; nd];
    for flat in 0..grid.total {
        grid.decompose(flat, &mut idx);
        let mut w = 1.0;
        for j in 0..n {
            if j == agent {
                continue;
            }
            let mut sub_flat = 0;
            for k in 0..d {
                sub_flat = sub_flat * grid.dims[j * d + k] + idx[j * d + k];
            }
            w *= weights[j][sub_flat];
            if w == 0.0 {
                break;
            }
        }
        if w == 0.0 {
            continue;
        }
        let mut own_flat = 0;
        for k in 0..d {
            own_flat = own_flat * grid.dims[agent * d + k] + idx[agent * d + k];
        }
        for k in 0..d {
            out[own_flat * d + k] += w * grad_slice[flat * nd + agent * d + k];
        }
    }
}

// ---------------------------------------------------------------------------
// Control fields and Monte Carlo cost evaluation
// ---------------------------------------------------------------------------

/// A feedback control field; `state` is the full vector for `FullState`
/// fields and the agent's own block for `PerAgent` fields.
pub trait ControlField: Sync {
    fn mode(&self) -> StatePassing;
    fn eval(&self, t: f64, agent: usize, state: &[f64], out: &mut [f64]);
}

/// Full-information optimal feedback read from a solved value grid.
pub struct HjbFeedback<'a> {
    pub v: &'a ValueGrid,
}

impl ControlField for HjbFeedback<'_> {
    fn mode(&self) -> StatePassing {
        StatePassing::FullState
    }

    fn eval(&self, t: f64, agent: usize, state: &[f64], out: &mut [f64]) {
        let problem = &self.v.problem;
        let d = problem.d;
        let t_idx = self.v.time_index(t);
        let mut block = vec![0.0; d];
        self.v.gradient_block_at_point(t_idx, agent, state, &mut block);
        let lagr = problem.lagrangian(agent);
        if lagr.is_quadratic() {
            for k in 0..d {
                out[k] = -(problem.n as f64) * block[k];
            }
        } else {
            let p: Vec<f64> = block.iter().map(|g| problem.n as f64 * g).collect();
            let own = &state[agent * d..(agent + 1) * d];
            let eval = hamiltonian_eval(lagr, own, &p).expect("feedback Hamiltonian");
            out.copy_from_slice(&eval.minimizer);
        }
    }
}

/// Distributed optimal feedback from per-agent value grids (one shared grid
/// in symmetric mode).
pub struct DistributedFeedback<'a> {
    pub problem: &'a ControlProblem,
    pub v_grids: &'a [Arc<ValueGrid>],
}

impl ControlField for DistributedFeedback<'_> {
    fn mode(&self) -> StatePassing {
        StatePassing::PerAgent
    }

    fn eval(&self, t: f64, agent: usize, state: &[f64], out: &mut [f64]) {
        let d = self.problem.d;
        let v = &self.v_grids[agent.min(self.v_grids.len() - 1)];
        let t_idx = v.time_index(t);
        let mut g = vec![0.0; d];
        v.gradient_block_at_point(t_idx, 0, state, &mut g);
        let lagr = self.problem.lagrangian(agent);
        if lagr.is_quadratic() {
            for k in 0..d {
                out[k] = -(self.problem.n as f64) * g[k];
            }
        } else {
            let p: Vec<f64> = g.iter().map(|v| self.problem.n as f64 * v).collect();
            let eval = hamiltonian_eval(lagr, state, &p).expect("feedback Hamiltonian");
            out.copy_from_slice(&eval.minimizer);
        }
    }
}

pub struct ZeroControl;

impl ControlField for ZeroControl {
    fn mode(&self) -> StatePassing {
        StatePassing::PerAgent
    }

    fn eval(&self, _t: f64, _agent: usize, _state: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct McConfig {
    pub particles: usize,
    pub time_steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CostEstimate {
    pub value: f64,
    pub stderr: f64,
    pub particles: usize,
}

/// Per-particle realized costs of a control field, streamed (paths are not
/// stored). Identical `(m0, particles, steps, seed)` consume identical
/// Brownian increments, so comparisons across fields share their noise.
fn per_particle_costs(
    problem: &ControlProblem,
    field: &dyn ControlField,
    m0: &InitialLaw,
    mc: &McConfig,
) -> Result<Vec<f64>, DistributedError> {
    let n = problem.n;
    let d = problem.d;
    let nd = n * d;
    let steps = mc.time_steps;
    let dt = problem.horizon / steps as f64;
    let sqrt_dt = dt.sqrt();
    let rng = CounterRng::new(mc.seed);
    let nf = n as f64;
    let costs: Vec<f64> = (0..mc.particles)
        .into_par_iter()
        .map(|p| {
            let mut state = vec![0.0; nd];
            for (i, marginal) in m0.marginals().iter().enumerate() {
                marginal.sample_into(
                    |draw| rng.uniform(p as u64, i as u64, u64::MAX, draw),
                    |draw| rng.normal(p as u64, i as u64, u64::MAX, draw),
                    &mut state[i * d..(i + 1) * d],
                );
            }
            let mut running = 0.0;
            let mut drift = vec![0.0; d];
            let mut noise = vec![0.0; d];
            let mut drifts = vec![0.0; nd];
            for step in 0..steps {
                let t = step as f64 * dt;
                for i in 0..n {
                    let visible = match field.mode() {
                        StatePassing::FullState => &state[..],
                        StatePassing::PerAgent => &state[i * d..(i + 1) * d],
                    };
                    field.eval(t, i, visible, &mut drift);
                    drifts[i * d..(i + 1) * d].copy_from_slice(&drift);
                    running += dt
                        * problem
                            .lagrangian(i)
                            .lagrangian_value(&state[i * d..(i + 1) * d], &drift)
                        / nf;
                }
                if !problem.running_cost.is_zero() {
                    running += dt * problem.running_cost.value(&state);
                }
                for i in 0..n {
                    rng.normals(p as u64, i as u64, step as u64, &mut noise);
                    for k in 0..d {
                        state[i * d + k] += dt * drifts[i * d + k] + sqrt_dt * noise[k];
                    }
                }
            }
            running + problem.terminal_cost.value(&state)
        })
        .collect();
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(DistributedError::NonfiniteCost);
    }
    Ok(costs)
}

/// Monte Carlo estimate of the cost functional of a control field, unbiased
/// over particles at the simulated time resolution.
pub fn evaluate_cost(
    problem: &ControlProblem,
    field: &dyn ControlField,
    m0: &InitialLaw,
    mc: &McConfig,
) -> Result<CostEstimate, DistributedError> {
    let costs = per_particle_costs(problem, field, m0, mc)?;
    let m = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / m;
    let var = costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (m - 1.0);
    Ok(CostEstimate { value: mean, stderr: (var / m).sqrt(), particles: costs.len() })
}

/// Paired-run gap `J(a) - J(b)` on common Brownian increments.
pub fn paired_cost_gap(
    problem: &ControlProblem,
    field_a: &dyn ControlField,
    field_b: &dyn ControlField,
    m0: &InitialLaw,
    mc: &McConfig,
) -> Result<GapEstimate, DistributedError> {
    let a = per_particle_costs(problem, field_a, m0, mc)?;
    let b = per_particle_costs(problem, field_b, m0, mc)?;
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let m = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / m;
    let var = diffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    Ok(GapEstimate {
        value: mean,
        stderr: (var / m).sqrt(),
        method: EstimateMethod::PairedMc,
        samples: diffs.len(),
        paired_seed: Some(mc.seed),
    })
}

/// Cross-derivative statistics of an ensemble run:
/// `Σ_{i<j} E|D_ij G(X_T)|²` plus the time profile for `F`.
pub fn flow_cross_stats(problem: &ControlProblem, ensemble: &ParticleEnsemble) -> FlowCrossStats {
    let n = problem.n;
    let d = problem.d;
    let nodes = ensemble.time_nodes();
    let sample = ensemble.n_particles.min(20_000);
    let mut block = vec![0.0; d * d];
    let frob_sq = |b: &[f64]| b.iter().map(|v| v * v).sum::<f64>();

    let g_cross_sq = {
        let mut acc = 0.0;
        for p in 0..sample {
            let x = ensemble.state(p, nodes - 1);
            for i in 0..n {
                for j in (i + 1)..n {
                    problem.terminal_cost.hess_block(i, j, x, &mut block);
                    acc += frob_sq(&block);
                }
            }
        }
        acc / sample as f64
    };
    let times = ensemble.times();
    let f_values: Vec<f64> = if problem.running_cost.is_zero() {
        vec![0.0; nodes]
    } else {
        (0..nodes)
            .map(|k| {
                let mut acc = 0.0;
                for p in 0..sample {
                    let x = ensemble.state(p, k);
                    for i in 0..n {
                        for j in (i + 1)..n {
                            problem.running_cost.hess_block(i, j, x, &mut block);
                            acc += frob_sq(&block);
                        }
                    }
                }
                acc / sample as f64
            })
            .collect()
    };
    FlowCrossStats::from_flow_expectations(g_cross_sq, times, f_values)
}
