//! Mean-field experiment drivers: symmetric value ladders over the agent
//! count, convergence-rate fitting, the representative-agent fixed point for
//! the limiting control problem, and chaos metrics against independent
//! mean-field copies.

use crate::distributed::{
    effective, fokker_planck, solve_distributed_pde, AgentMarginal, DistributedConfig,
    DistributedError,
};
use crate::hjb::grid::TensorGrid;
use crate::hjb::stepper::ScaledHamiltonian;
use crate::hjb::{integrate_backward, solve_full_hjb, BoundaryMode, GridSpec, HjbError, ValueGrid};
use crate::metrics::wasserstein::{wasserstein2, GroundMetric, W2Error};
use crate::model::{
    ControlProblem, CostKind, CostSpec, InitialLaw, LagrangianSet, LagrangianSpec, MarginalSpec,
    ModelError, ScalarAtom,
};
use crate::oracles::{cole_hopf_lift, cole_hopf_value_mc, OracleError, QuadratureConfig};
use crate::sde::{euler_maruyama, ParticleEnsemble, SimConfig, StatePassing};
use serde::Serialize;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeanfieldError {
    #[error("need at least 3 gaps above 5× their standard error, have {0}")]
    GapsBelowNoise(usize),
    #[error("no full-information route for n = {n}: {reason}")]
    NoFullInfoRoute { n: usize, reason: String },
    #[error("chaos comparison needs a symmetric (empirical-measure or doubly stochastic) cost")]
    AsymmetricProblem,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Distributed(#[from] DistributedError),
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error(transparent)]
    W2(#[from] W2Error),
}

// ---------------------------------------------------------------------------
// Symmetric problem families
// ---------------------------------------------------------------------------

/// How the pairwise interaction is normalized at finite `n`. Both choices
/// share the same limit functional `⟨m ⊗ m, G₂(· - ·)⟩`; they differ in the
/// finite-`n` pair weights and hence in the shape of the 1/n corrections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairNormalization {
    /// `(1/n²) Σ_{i,j} G₂(xⁱ - xʲ)` — the empirical-measure form, diagonal
    /// included.
    EmpiricalMeasure,
    /// `(1/n) Σ_{i,j} J_ij G₂(xⁱ - xʲ)` with `J` the complete graph over
    /// `n-1` — the doubly stochastic form, whose distributed value equals
    /// the limit exactly.
    CompleteGraph,
}

/// A symmetric family indexed by the agent count: costs are functionals of
/// the empirical measure built from linear and pairwise atoms,
/// `𝒢(m) = ⟨m, g⟩ + ⟨m ⊗ m, G₂(· - ·)⟩`, with the quadratic action.
#[derive(Clone, Debug)]
pub struct MeanFieldFamily {
    pub terminal_linear: ScalarAtom,
    pub terminal_pair: ScalarAtom,
    pub running_linear: ScalarAtom,
    pub running_pair: ScalarAtom,
    pub horizon: f64,
    pub normalization: PairNormalization,
}

impl MeanFieldFamily {
    pub fn terminal_only(linear: ScalarAtom, pair: ScalarAtom, horizon: f64) -> Self {
        Self {
            terminal_linear: linear,
            terminal_pair: pair,
            running_linear: ScalarAtom::Zero,
            running_pair: ScalarAtom::Zero,
            horizon,
            normalization: PairNormalization::EmpiricalMeasure,
        }
    }

    pub fn with_normalization(mut self, normalization: PairNormalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn is_cole_hopf(&self) -> bool {
        matches!(self.running_linear, ScalarAtom::Zero)
            && matches!(self.running_pair, ScalarAtom::Zero)
    }

    fn cost(&self, linear: &ScalarAtom, pair: &ScalarAtom, n: usize) -> Result<CostSpec, ModelError> {
        Ok(match self.normalization {
            PairNormalization::EmpiricalMeasure => {
                CostSpec::mean_field(linear.clone(), pair.clone(), n, 1)
            }
            PairNormalization::CompleteGraph => CostSpec::pairwise(
                linear.clone(),
                pair.clone(),
                crate::model::InteractionMatrix::complete(n)?,
                1,
            ),
        })
    }

    pub fn problem(&self, n: usize) -> Result<Arc<ControlProblem>, ModelError> {
        let running = if self.is_cole_hopf() {
            CostSpec::zero(n, 1)
        } else {
            self.cost(&self.running_linear, &self.running_pair, n)?
        };
        Ok(Arc::new(ControlProblem::new(
            n,
            1,
            self.horizon,
            LagrangianSet::Shared(LagrangianSpec::quadratic()),
            running,
            self.cost(&self.terminal_linear, &self.terminal_pair, n)?,
        )?))
    }
}

// ---------------------------------------------------------------------------
// Representative-agent limit problem
// ---------------------------------------------------------------------------

pub struct MfcSolution {
    /// The limiting value `U(t, m)` by cost quadrature along the converged
    /// representative flow.
    pub value: f64,
    /// Representative value grid `w` (feedback `-Dw`).
    pub v: Arc<ValueGrid>,
    pub flow_times: Vec<f64>,
    pub flow: Vec<AgentMarginal>,
    pub iterations: usize,
}

/// Fixed point for the limiting control problem of a symmetric pairwise
/// family: freeze the representative flow `μ`, solve the scalar HJB whose
/// terminal and running costs are the measure derivatives
/// `δ𝒢/δm(μ_T, ·)` and `δ𝒻/δm(μ_s, ·)`, push `μ` forward under the
/// resulting feedback, damp and repeat. For pairwise functionals the measure
/// derivative is exactly the flow-averaged symmetrized pair kernel, so the
/// converged control satisfies the limiting maximum principle; displacement
/// convexity of the atoms makes it the optimizer.
pub fn solve_mfc_representative(
    family: &MeanFieldFamily,
    m0: &MarginalSpec,
    cfg: &DistributedConfig,
) -> Result<MfcSolution, MeanfieldError> {
    let mean = m0.mean()[0];
    let radius = cfg.domain_pad * (family.horizon + m0.max_variance()).sqrt();
    let grid = TensorGrid::new(&[(mean - radius, mean + radius)], cfg.bins_per_axis);
    let steps = cfg.time_steps;
    let dt = family.horizon / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let nodes: Vec<f64> = (0..grid.total).map(|i| grid.coord(0, i)).collect();
    let node_weights = |m: &AgentMarginal| -> (Vec<f64>, Vec<f64>) {
        let mut pts = Vec::new();
        let mut ws = Vec::new();
        for node in 0..m.grid.total {
            if m.weights[node] > 0.0 {
                pts.push(m.grid.coord(0, node));
                ws.push(m.weights[node]);
            }
        }
        (pts, ws)
    };
    // measure derivative of ⟨m,g⟩ + ⟨m⊗m,G₂(·-·)⟩ on the grid nodes
    let effective_cost = |linear: &ScalarAtom, pair: &ScalarAtom, m: &AgentMarginal| -> Vec<f64> {
        let (pts, ws) = node_weights(m);
        nodes
            .iter()
            .map(|&x| {
                linear.value(&[x]) + effective::pair_integral(pair, &[x], &pts, &ws)
            })
            .collect()
    };
    // the functional itself, for the value quadrature
    let functional = |linear: &ScalarAtom, pair: &ScalarAtom, m: &AgentMarginal| -> f64 {
        let (pts, ws) = node_weights(m);
        let mut acc = 0.0;
        for (i, &x) in pts.iter().enumerate() {
            acc += ws[i] * linear.value(&[x]);
            // ordered double sum ⟨m⊗m, G₂(x-y)⟩
            let mut inner = 0.0;
            for (j, &y) in pts.iter().enumerate() {
                inner += ws[j] * pair.value(&[x - y]);
            }
            acc += ws[i] * inner;
        }
        acc
    };

    let lagr = LagrangianSpec::quadratic();
    let ham = ScaledHamiltonian { lagrangian: &lagr, weight: 1.0, costate_scale: 1.0 };
    let deposit = |spec: &MarginalSpec| -> Vec<f64> {
        let mut m = AgentMarginal { grid: grid.clone(), weights: vec![0.0; grid.total] };
        // reuse the distributed module's exact depositions through a 1-bin
        // pushforward: a zero-drift zero-time step is identity, so deposit
        // directly via the same kernel the flows use
        m.weights = crate::distributed::deposit_marginal(&grid, spec);
        m.weights
    };

    // flow init: heat semigroup from m0
    let mut flow: Vec<AgentMarginal> = Vec::with_capacity(steps + 1);
    {
        let mut w = deposit(m0);
        flow.push(AgentMarginal { grid: grid.clone(), weights: w.clone() });
        let zero = vec![0.0; grid.total];
        for _ in 0..steps {
            fokker_planck::fp_step(&grid, &mut w, &zero, dt);
            flow.push(AgentMarginal { grid: grid.clone(), weights: w.clone() });
        }
    }

    let f_zero = family.is_cole_hopf();
    let mut damping = cfg.damping;
    let mut last_residual = f64::INFINITY;
    let mut improving_streak = 0usize;
    let mut iterations = 0;
    let mut converged = false;
    let mut kept_slices: Vec<Vec<f64>> = Vec::new();
    for iter in 0..cfg.max_iters {
        iterations = iter + 1;
        let terminal =
            effective_cost(&family.terminal_linear, &family.terminal_pair, &flow[steps]);
        let slices = integrate_backward(
            &grid,
            &ham,
            terminal,
            |k_next| {
                if f_zero {
                    None
                } else {
                    Some(effective_cost(
                        &family.running_linear,
                        &family.running_pair,
                        &flow[k_next],
                    ))
                }
            },
            steps,
            dt,
            BoundaryMode::LinearExtrapolation,
            &cfg.scheme,
        )?;
        // push forward under -Dw
        let mut w = deposit(m0);
        let mut pushed: Vec<Vec<f64>> = vec![w.clone()];
        let mut drift = vec![0.0; grid.total];
        for k in 0..steps {
            gradient_drift(&grid, &slices[k], &mut drift);
            fokker_planck::fp_step(&grid, &mut w, &drift, dt);
            pushed.push(w.clone());
        }
        let mut residual = 0.0;
        for k in 0..=steps {
            let new_m = AgentMarginal { grid: grid.clone(), weights: pushed[k].clone() };
            residual += dt * flow[k].w2(&new_m);
        }
        residual /= family.horizon;
        if residual > last_residual * 1.05 {
            damping = (damping / 2.0).max(0.05);
            improving_streak = 0;
        } else if residual < last_residual {
            improving_streak += 1;
            if improving_streak >= 2 {
                damping = (damping * 1.25).min(cfg.damping);
            }
        }
        last_residual = residual;
        for k in 0..=steps {
            for (old, new) in flow[k].weights.iter_mut().zip(&pushed[k]) {
                *old = (1.0 - damping) * *old + damping * *new;
            }
        }
        kept_slices = slices;
        if residual <= cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MeanfieldError::Distributed(DistributedError::PicardStalled {
            residual: last_residual,
            iters: iterations,
            tol: cfg.tol,
        }));
    }
    // final undamped pass
    let terminal = effective_cost(&family.terminal_linear, &family.terminal_pair, &flow[steps]);
    let slices = integrate_backward(
        &grid,
        &ham,
        terminal,
        |k_next| {
            if f_zero {
                None
            } else {
                Some(effective_cost(&family.running_linear, &family.running_pair, &flow[k_next]))
            }
        },
        steps,
        dt,
        BoundaryMode::LinearExtrapolation,
        &cfg.scheme,
    )?;
    let _ = kept_slices;
    let mut w = deposit(m0);
    let mut final_flow = vec![AgentMarginal { grid: grid.clone(), weights: w.clone() }];
    let mut drift = vec![0.0; grid.total];
    for k in 0..steps {
        gradient_drift(&grid, &slices[k], &mut drift);
        fokker_planck::fp_step(&grid, &mut w, &drift, dt);
        final_flow.push(AgentMarginal { grid: grid.clone(), weights: w.clone() });
    }

    // U = ∫ [⟨μ, ½|Dw|²⟩ + 𝒻(μ)] dt + 𝒢(μ_T)
    let mut running_at = vec![0.0; steps + 1];
    for k in 0..=steps {
        gradient_drift(&grid, &slices[k], &mut drift);
        let m = &final_flow[k];
        let mut acc = 0.0;
        for node in 0..grid.total {
            let wgt = m.weights[node];
            if wgt > 0.0 {
                acc += wgt * 0.5 * drift[node] * drift[node];
            }
        }
        if !f_zero {
            acc += functional(&family.running_linear, &family.running_pair, m);
        }
        running_at[k] = acc;
    }
    let mut value = 0.0;
    for k in 0..steps {
        value += 0.5 * dt * (running_at[k] + running_at[k + 1]);
    }
    value += functional(&family.terminal_linear, &family.terminal_pair, &final_flow[steps]);

    // a single-agent problem shell so the grid can be reused as a feedback
    let shell = Arc::new(
        ControlProblem::new(
            1,
            1,
            family.horizon,
            LagrangianSet::Shared(LagrangianSpec::quadratic()),
            CostSpec::zero(1, 1),
            CostSpec::zero(1, 1),
        )
        .expect("shell problem"),
    );
    let spec = GridSpec::new(vec![(grid.lo[0], grid.hi(0))], cfg.bins_per_axis, steps);
    let v = Arc::new(ValueGrid::from_solution(
        shell,
        spec,
        grid,
        times.clone(),
        slices,
        "mfc_representative".to_string(),
    ));
    Ok(MfcSolution { value, v, flow_times: times, flow: final_flow, iterations })
}

fn gradient_drift(grid: &TensorGrid, v_slice: &[f64], out: &mut [f64]) {
    let m = grid.dims[0];
    let h = grid.h[0];
    for i in 0..grid.total {
        let g = if i == 0 {
            (v_slice[1] - v_slice[0]) / h
        } else if i + 1 == m {
            (v_slice[i] - v_slice[i - 1]) / h
        } else {
            (v_slice[i + 1] - v_slice[i - 1]) / (2.0 * h)
        };
        out[i] = -g;
    }
}

/// `k` independent copies of the mean-field optimal process.
pub fn simulate_meanfield_copies(
    mfc: &MfcSolution,
    m0: &MarginalSpec,
    copies: usize,
    particles: usize,
    seed: u64,
) -> Result<ParticleEnsemble, MeanfieldError> {
    let v = Arc::clone(&mfc.v);
    let law = InitialLaw::shared(m0.clone(), copies)?;
    let steps = v.time_slices() - 1;
    let dt = v.dt();
    let drift = move |t: f64, _agent: usize, own: &[f64], out: &mut [f64]| {
        let t_idx = v.time_index(t);
        let mut g = [0.0];
        v.gradient_block_at_point(t_idx, 0, own, &mut g);
        out[0] = -g[0];
    };
    Ok(euler_maruyama(
        &drift,
        &law,
        &SimConfig::new(particles, dt, steps, seed, StatePassing::PerAgent),
        "meanfield_copies",
    )
    .map_err(DistributedError::Sde)?)
}

// ---------------------------------------------------------------------------
// Value ladders
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ValueRow {
    pub n: usize,
    pub v_full: f64,
    pub v_full_err: f64,
    pub v_dist: f64,
    pub v_dist_err: f64,
    pub u: Option<f64>,
    pub method: String,
}

#[derive(Clone, Debug)]
pub struct SequenceConfig {
    pub dist: DistributedConfig,
    pub quadrature: QuadratureConfig,
    /// Monte Carlo samples for the Gibbs route beyond the quadrature cap.
    pub mc_samples: usize,
    pub seed: u64,
    /// Grid resolution of the full-information PDE route (non-Gibbs case).
    pub hjb_points: usize,
    pub hjb_steps: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        let mut dist = DistributedConfig::for_dim(1);
        dist.symmetric = true;
        Self {
            dist,
            quadrature: QuadratureConfig::default(),
            mc_samples: 1_000_000,
            seed: 11,
            hjb_points: 61,
            hjb_steps: 200,
        }
    }
}

/// The per-`n` table of full-information, distributed, and limiting values
/// for a symmetric family started from `n` copies of one marginal.
pub fn value_sequence(
    family: &MeanFieldFamily,
    m: &MarginalSpec,
    ns: &[usize],
    cfg: &SequenceConfig,
) -> Result<Vec<ValueRow>, MeanfieldError> {
    let u = solve_mfc_representative(family, m, &cfg.dist)?.value;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let problem = family.problem(n)?;
        let m0 = InitialLaw::shared(m.clone(), n)?;
        let (v_full, v_full_err, method) = if family.is_cole_hopf() {
            if n <= cfg.quadrature.dim_cap {
                (cole_hopf_lift(&problem, 0.0, &m0, &cfg.quadrature)?, 0.0, "gibbs_quadrature")
            } else {
                let x0 = match m {
                    MarginalSpec::Dirac { point } => {
                        let mut v = Vec::with_capacity(n);
                        for _ in 0..n {
                            v.extend_from_slice(point);
                        }
                        v
                    }
                    _ => {
                        return Err(MeanfieldError::NoFullInfoRoute {
                            n,
                            reason: "Gibbs Monte Carlo needs a point start".into(),
                        })
                    }
                };
                let (v, e) = cole_hopf_value_mc(&problem, 0.0, &x0, cfg.mc_samples, cfg.seed)?;
                (v, e, "gibbs_mc")
            }
        } else if n <= 4 {
            let spec = GridSpec::for_problem(&problem, &m0, cfg.hjb_points, cfg.hjb_steps);
            let v = solve_full_hjb(&problem, &spec, &cfg.dist.scheme)?;
            (crate::hjb::lift_value(&v, 0, &m0)?, 0.0, "full_pde")
        } else {
            return Err(MeanfieldError::NoFullInfoRoute {
                n,
                reason: "tensor grid capped at n·d ≤ 4 and the Gibbs route needs F ≡ 0".into(),
            });
        };
        let dist = solve_distributed_pde(&problem, &m0, &cfg.dist)?;
        rows.push(ValueRow {
            n,
            v_full,
            v_full_err,
            v_dist: dist.value,
            v_dist_err: 0.0,
            u: Some(u),
            method: method.to_string(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Rate fitting
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct RateFit {
    pub ns: Vec<usize>,
    pub gaps: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// Slope of `log |gap|` against `log n`.
    pub exponent: f64,
    /// `exp` of the fitted intercept.
    pub constant: f64,
    /// RMS residual of the log-log fit.
    pub residual: f64,
}

/// Least-squares power-law fit of a gap sequence; entries whose gap is not
/// at least five standard errors above zero are dropped.
pub fn fit_rate(ns: &[usize], gaps: &[f64], stderrs: &[f64]) -> Result<RateFit, MeanfieldError> {
    assert_eq!(ns.len(), gaps.len());
    assert_eq!(ns.len(), stderrs.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut kept_n = Vec::new();
    let mut kept_g = Vec::new();
    let mut kept_e = Vec::new();
    for ((&n, &g), &e) in ns.iter().zip(gaps).zip(stderrs) {
        if g.abs() > 5.0 * e && g.abs() > 0.0 {
            xs.push((n as f64).ln());
            ys.push(g.abs().ln());
            kept_n.push(n);
            kept_g.push(g);
            kept_e.push(e);
        }
    }
    if xs.len() < 3 {
        return Err(MeanfieldError::GapsBelowNoise(xs.len()));
    }
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let fit = intercept + slope * x;
            (y - fit) * (y - fit)
        })
        .sum::<f64>()
        / m)
        .sqrt();
    Ok(RateFit {
        ns: kept_n,
        gaps: kept_g,
        stderrs: kept_e,
        exponent: slope,
        constant: intercept.exp(),
        residual,
    })
}

// ---------------------------------------------------------------------------
// Chaos against mean-field copies
// ---------------------------------------------------------------------------

/// `W₂²` between `k`-agent path marginals of the `n`-agent optimal ensemble
/// and the `k`-fold product of the mean-field optimal law, averaged over
/// budget-sampled agent subsets, in the discrete sup-over-time metric.
pub fn chaos_vs_meanfield(
    problem: &ControlProblem,
    n_ensemble: &ParticleEnsemble,
    mf_copies: &ParticleEnsemble,
    k: usize,
    subset_budget: usize,
) -> Result<f64, MeanfieldError> {
    let symmetric = match (&problem.running_cost.kind, &problem.terminal_cost.kind) {
        (CostKind::Zero | CostKind::MeanField { .. }, CostKind::MeanField { .. }) => true,
        (_, CostKind::PairwiseGraph { matrix, .. }) => matrix.doubly_stochastic,
        _ => false,
    };
    if !symmetric {
        return Err(MeanfieldError::AsymmetricProblem);
    }
    if mf_copies.n_agents != k || mf_copies.time_nodes() != n_ensemble.time_nodes() {
        return Err(MeanfieldError::Distributed(DistributedError::Unsupported(
            "mean-field copies must have k agents on the same time grid".into(),
        )));
    }
    let subsets = crate::metrics::enumerate_or_sample_subsets(n_ensemble.n_agents, k, subset_budget);
    let mf_paths = paths_of(mf_copies, &(0..k).collect::<Vec<_>>());
    let mut acc = 0.0;
    for subset in &subsets {
        let a = paths_of(n_ensemble, subset);
        let w2 = wasserstein2(
            &a,
            &mf_paths,
            GroundMetric::SupOverBlocks { block: k * n_ensemble.dim },
        )?;
        acc += w2 * w2;
    }
    Ok(acc / subsets.len() as f64)
}

fn paths_of(ens: &ParticleEnsemble, agents: &[usize]) -> Vec<Vec<f64>> {
    let nodes = ens.time_nodes();
    let d = ens.dim;
    let m = ens.n_particles.min(256);
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

#[cfg(test)]
mod tests;
