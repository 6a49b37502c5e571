//! Finite-difference solver for the full-information HJB equation
//!
//! ```text
//! -∂_t V - ½ ΔV + (1/n) Σᵢ Hⁱ(xⁱ, n D_i V) = F,   V(T,·) = G,
//! ```
//!
//! on a truncated tensor grid, plus the value lift over product laws and the
//! Hessian sandwich diagnostic. The same backward driver integrates the
//! scalar per-agent equations of the distributed fixed point.

pub mod grid;
pub(crate) mod stepper;

use crate::bounds::ConstantsLedger;
use crate::model::{sym_eigenvalues, ControlProblem, InitialLaw, MarginalSpec, ModelError};
use crate::oracles::GaussHermite;
use grid::TensorGrid;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::sync::{Arc, OnceLock};
use stepper::{FullHamiltonian, HamiltonianField, Stepper};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HjbError {
    #[error("grid would need {need} stored doubles, cap is {cap}")]
    GridTooLarge { need: usize, cap: usize },
    #[error("bad grid: {0}")]
    BadGrid(String),
    #[error("CFL violated: max |drift|·dt/h = {ratio:.3} exceeds {limit}")]
    CflViolation { ratio: f64, limit: f64 },
    #[error("implicit-stage residual {residual:e} exceeds tolerance {tol:e}")]
    ResidualTooLarge { residual: f64, tol: f64 },
    #[error("value grid contains non-finite entries")]
    NonFiniteValues,
    #[error("initial-law mass {tail:e} escapes the truncated domain")]
    SupportEscapesGrid { tail: f64 },
    #[error("time index {idx} out of range ({len} slices)")]
    TimeIndexOutOfRange { idx: usize, len: usize },
    #[error("Hamiltonian evaluation failed: {0}")]
    Hamiltonian(ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Ghost nodes from linear extrapolation (vanishing second derivative at
    /// the edge) — matches the linear-growth far-field of the value function.
    LinearExtrapolation,
    /// No ghosts; one-sided gradients and a reflecting diffusion closure.
    OneSidedDifferences,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// First-order upwind. Monotone under the CFL limit.
    Upwind1,
    /// Second-order upwind-biased stencil (default).
    Upwind2,
    /// Plain central differences; fine at small grid Péclet numbers.
    Central,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    /// Per-axis `[lo, hi]`, one entry per grid axis.
    pub bounds: Vec<(f64, f64)>,
    pub points_per_axis: usize,
    pub time_steps: usize,
    pub boundary: BoundaryMode,
}

impl GridSpec {
    pub fn new(bounds: Vec<(f64, f64)>, points_per_axis: usize, time_steps: usize) -> Self {
        Self { bounds, points_per_axis, time_steps, boundary: BoundaryMode::LinearExtrapolation }
    }

    /// Domain `[mean ± pad·√(T + var₀)]` per axis from the initial law.
    pub fn for_problem(
        problem: &ControlProblem,
        m0: &InitialLaw,
        points_per_axis: usize,
        time_steps: usize,
    ) -> Self {
        let pad = 6.0;
        let mut bounds = Vec::with_capacity(problem.n * problem.d);
        for marginal in m0.marginals() {
            let mean = marginal.mean();
            let radius = pad * (problem.horizon + marginal.max_variance()).sqrt();
            for k in 0..problem.d {
                bounds.push((mean[k] - radius, mean[k] + radius));
            }
        }
        Self::new(bounds, points_per_axis, time_steps)
    }

    fn validate(&self, memory_cap: usize) -> Result<(), HjbError> {
        if self.points_per_axis < 5 {
            return Err(HjbError::BadGrid(format!(
                "need at least 5 points per axis, got {}",
                self.points_per_axis
            )));
        }
        if self.time_steps < 1 {
            return Err(HjbError::BadGrid("need at least one time step".into()));
        }
        for (lo, hi) in &self.bounds {
            if !(lo < hi) {
                return Err(HjbError::BadGrid(format!("bad axis bounds [{lo}, {hi}]")));
            }
        }
        let nd = self.bounds.len();
        let total: usize = self.points_per_axis.pow(nd as u32);
        // stored doubles: values plus one gradient slice cache per time
        let need = (self.time_steps + 1) * total * (1 + nd);
        if need > memory_cap {
            return Err(HjbError::GridTooLarge { need, cap: memory_cap });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub gradient: GradientMode,
    /// Relative residual tolerance of the factored implicit solve.
    pub residual_tol: f64,
    /// Allowed `max |drift| dt / h`.
    pub cfl_limit: f64,
    /// Cap on stored doubles per solve.
    pub memory_cap: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            gradient: GradientMode::Upwind2,
            residual_tol: 1e-9,
            cfl_limit: 0.5,
            memory_cap: 400_000_000,
        }
    }
}

/// A value function tabulated on time × space, with lazily cached gradient
/// and diagonal-Hessian slices.
pub struct ValueGrid {
    pub problem: Arc<ControlProblem>,
    pub spec: GridSpec,
    pub grid: TensorGrid,
    pub times: Vec<f64>,
    pub label: String,
    values: Vec<Vec<f64>>,
    gradients: Vec<OnceLock<Vec<f64>>>,
    hessian_diag: Vec<OnceLock<Vec<f64>>>,
}

impl ValueGrid {
    fn new(
        problem: Arc<ControlProblem>,
        spec: GridSpec,
        grid: TensorGrid,
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
        label: String,
    ) -> Self {
        let slices = values.len();
        ValueGrid {
            problem,
            spec,
            grid,
            times,
            label,
            values,
            gradients: (0..slices).map(|_| OnceLock::new()).collect(),
            hessian_diag: (0..slices).map(|_| OnceLock::new()).collect(),
        }
    }

    /// Assemble a grid from an external solve (the distributed fixed point
    /// uses this for its per-agent equations).
    pub(crate) fn from_solution(
        problem: Arc<ControlProblem>,
        spec: GridSpec,
        grid: TensorGrid,
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
        label: String,
    ) -> Self {
        ValueGrid::new(problem, spec, grid, times, values, label)
    }

    pub fn time_slices(&self) -> usize {
        self.values.len()
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn values_at(&self, t_idx: usize) -> &[f64] {
        &self.values[t_idx]
    }

    /// Time index of the grid time nearest to `t`.
    pub fn time_index(&self, t: f64) -> usize {
        let dt = self.dt();
        (((t - self.times[0]) / dt).round().max(0.0) as usize).min(self.times.len() - 1)
    }

    /// Cached gradient slice, node-major `[node][axis]`: central differences
    /// in the interior, one-sided at the boundary.
    pub fn gradient_slice(&self, t_idx: usize) -> &[f64] {
        self.gradients[t_idx].get_or_init(|| self.fresh_gradient_slice(t_idx))
    }

    /// The same stencil evaluated directly, bypassing the cache.
    pub fn fresh_gradient_slice(&self, t_idx: usize) -> Vec<f64> {
        let grid = &self.grid;
        let nd = grid.ndim();
        let v = &self.values[t_idx];
        let mut out = vec![0.0; grid.total * nd];
        for flat in 0..grid.total {
            for a in 0..nd {
                let s = grid.strides[a];
                let i = grid.axis_index(flat, a);
                out[flat * nd + a] = if i == 0 {
                    (v[flat + s] - v[flat]) / grid.h[a]
                } else if i + 1 == grid.dims[a] {
                    (v[flat] - v[flat - s]) / grid.h[a]
                } else {
                    (v[flat + s] - v[flat - s]) / (2.0 * grid.h[a])
                };
            }
        }
        out
    }

    /// Cached diagonal second-difference slice, node-major `[node][axis]`
    /// (zero on the boundary where the stencil does not fit).
    pub fn hessian_diag_slice(&self, t_idx: usize) -> &[f64] {
        self.hessian_diag[t_idx].get_or_init(|| {
            let grid = &self.grid;
            let nd = grid.ndim();
            let v = &self.values[t_idx];
            let mut out = vec![0.0; grid.total * nd];
            for flat in 0..grid.total {
                for a in 0..nd {
                    let s = grid.strides[a];
                    let i = grid.axis_index(flat, a);
                    if i > 0 && i + 1 < grid.dims[a] {
                        out[flat * nd + a] =
                            (v[flat + s] - 2.0 * v[flat] + v[flat - s]) / (grid.h[a] * grid.h[a]);
                    }
                }
            }
            out
        })
    }

    pub fn value_at_point(&self, t_idx: usize, x: &[f64]) -> f64 {
        self.grid.interp(&self.values[t_idx], x)
    }

    /// Interpolated `D_i V` block (`d` components for agent `i`).
    pub fn gradient_block_at_point(&self, t_idx: usize, agent: usize, x: &[f64], out: &mut [f64]) {
        let nd = self.grid.ndim();
        let d = out.len();
        let slice = self.gradient_slice(t_idx);
        let mut full = [0.0f64; 8];
        self.grid.interp_vector(slice, nd, x, &mut full[..nd]);
        out.copy_from_slice(&full[agent * d..(agent + 1) * d]);
    }

    /// Binary dump (`.bin` payload + `.json` sidecar).
    pub fn save(&self, base: &std::path::Path) -> Result<(), HjbError> {
        let mut bin = std::fs::File::create(base.with_extension("bin"))?;
        let nd = self.grid.ndim() as u64;
        for v in [0x4443_544c_5647_0001u64, nd, self.grid.dims[0] as u64, self.times.len() as u64] {
            bin.write_all(&v.to_le_bytes())?;
        }
        for (lo, hi) in &self.spec.bounds {
            bin.write_all(&lo.to_le_bytes())?;
            bin.write_all(&hi.to_le_bytes())?;
        }
        for t in &self.times {
            bin.write_all(&t.to_le_bytes())?;
        }
        for slice in &self.values {
            for v in slice {
                bin.write_all(&v.to_le_bytes())?;
            }
        }
        let sidecar = serde_json::json!({
            "label": self.label,
            "spec": self.spec,
            "n": self.problem.n,
            "d": self.problem.d,
            "horizon": self.problem.horizon,
        });
        std::fs::write(
            base.with_extension("json"),
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )?;
        Ok(())
    }

    pub fn load(base: &std::path::Path, problem: Arc<ControlProblem>) -> Result<Self, HjbError> {
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)
                .map_err(|e| HjbError::BadGrid(format!("sidecar: {e}")))?;
        let spec: GridSpec = serde_json::from_value(sidecar["spec"].clone())
            .map_err(|e| HjbError::BadGrid(format!("sidecar spec: {e}")))?;
        let mut bin = std::fs::File::open(base.with_extension("bin"))?;
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |f: &mut std::fs::File| -> Result<u64, HjbError> {
            f.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let magic = read_u64(&mut bin)?;
        if magic != 0x4443_544c_5647_0001 {
            return Err(HjbError::BadGrid("bad magic".into()));
        }
        let nd = read_u64(&mut bin)? as usize;
        let _points = read_u64(&mut bin)? as usize;
        let slices = read_u64(&mut bin)? as usize;
        let mut f64buf = [0u8; 8];
        let mut read_f64 = |f: &mut std::fs::File| -> Result<f64, HjbError> {
            f.read_exact(&mut f64buf)?;
            Ok(f64::from_le_bytes(f64buf))
        };
        for _ in 0..nd {
            read_f64(&mut bin)?;
            read_f64(&mut bin)?;
        }
        let mut times = Vec::with_capacity(slices);
        for _ in 0..slices {
            times.push(read_f64(&mut bin)?);
        }
        let grid = TensorGrid::new(&spec.bounds, spec.points_per_axis);
        let mut values = Vec::with_capacity(slices);
        for _ in 0..slices {
            let mut slice = vec![0.0; grid.total];
            for v in slice.iter_mut() {
                *v = read_f64(&mut bin)?;
            }
            values.push(slice);
        }
        let label = sidecar["label"].as_str().unwrap_or("loaded").to_string();
        Ok(ValueGrid::new(problem, spec, grid, times, values, label))
    }
}

/// Backward IMEX integration over all time slices. `source_at(k_next)` is the
/// right-hand side sampled on the grid at time index `k_next` (the explicit
/// side of the step from `k_next` to `k_next - 1`); `None` means zero.
///
/// Steps that trip the advective CFL monitor are retried with enough
/// substeps to satisfy `max|a*|·Δt ≤ cfl_limit·h`; the stored time grid is
/// unchanged. A step still violating after substepping is an error.
pub(crate) fn integrate_backward(
    grid: &TensorGrid,
    ham: &dyn HamiltonianField,
    terminal: Vec<f64>,
    mut source_at: impl FnMut(usize) -> Option<Vec<f64>>,
    time_steps: usize,
    dt: f64,
    boundary: BoundaryMode,
    scheme: &SchemeConfig,
) -> Result<Vec<Vec<f64>>, HjbError> {
    const MAX_SUBSTEPS: usize = 64;
    let stepper = Stepper {
        grid,
        boundary,
        gradient: scheme.gradient,
        dt,
        residual_tol: scheme.residual_tol,
    };
    let mut slices = vec![Vec::new(); time_steps + 1];
    slices[time_steps] = terminal;
    for k in (0..time_steps).rev() {
        let source = source_at(k + 1);
        let mut out = vec![0.0; grid.total];
        let report = stepper.backward_step(ham, source.as_deref(), &slices[k + 1], &mut out)?;
        if report.worst_cfl > scheme.cfl_limit {
            let substeps =
                ((report.worst_cfl / scheme.cfl_limit) * 1.1).ceil().max(2.0) as usize;
            if substeps > MAX_SUBSTEPS {
                return Err(HjbError::CflViolation {
                    ratio: report.worst_cfl,
                    limit: scheme.cfl_limit,
                });
            }
            let sub = Stepper { dt: dt / substeps as f64, ..stepper };
            let mut cur = slices[k + 1].clone();
            for _ in 0..substeps {
                let mut next = vec![0.0; grid.total];
                let rep = sub.backward_step(ham, source.as_deref(), &cur, &mut next)?;
                if rep.worst_cfl > scheme.cfl_limit * 1.5 {
                    return Err(HjbError::CflViolation {
                        ratio: rep.worst_cfl * substeps as f64,
                        limit: scheme.cfl_limit,
                    });
                }
                cur = next;
            }
            out = cur;
        }
        slices[k] = out;
    }
    Ok(slices)
}

/// Solve the full-information HJB equation on a tensor grid over `(ℝᵈ)ⁿ`.
pub fn solve_full_hjb(
    problem: &Arc<ControlProblem>,
    spec: &GridSpec,
    scheme: &SchemeConfig,
) -> Result<ValueGrid, HjbError> {
    let nd = problem.n * problem.d;
    if spec.bounds.len() != nd {
        return Err(HjbError::BadGrid(format!(
            "grid has {} axes, problem needs {nd}",
            spec.bounds.len()
        )));
    }
    spec.validate(scheme.memory_cap)?;
    let grid = TensorGrid::new(&spec.bounds, spec.points_per_axis);
    let dt = problem.horizon / spec.time_steps as f64;
    let times: Vec<f64> = (0..=spec.time_steps).map(|k| k as f64 * dt).collect();

    let mut x = vec![0.0; nd];
    let mut terminal = vec![0.0; grid.total];
    for flat in 0..grid.total {
        grid.node_coords(flat, &mut x);
        terminal[flat] = problem.terminal_cost.value(&x);
    }
    let source = if problem.running_cost.is_zero() {
        None
    } else {
        let mut f = vec![0.0; grid.total];
        for flat in 0..grid.total {
            grid.node_coords(flat, &mut x);
            f[flat] = problem.running_cost.value(&x);
        }
        Some(f)
    };

    let ham = FullHamiltonian { problem };
    let values = integrate_backward(
        &grid,
        &ham,
        terminal,
        |_k| source.clone(),
        spec.time_steps,
        dt,
        spec.boundary,
        scheme,
    )?;
    Ok(ValueGrid::new(
        Arc::clone(problem),
        spec.clone(),
        grid,
        times,
        values,
        "full_hjb".to_string(),
    ))
}

// ---------------------------------------------------------------------------
// Value lift over product laws
// ---------------------------------------------------------------------------

const LIFT_TAIL_TOLERANCE: f64 = 1e-6;
const LIFT_GH_NODES: usize = 32;

/// `⟨m, V(t,·)⟩` by tensor quadrature over the product of per-agent
/// marginals: Gauss-Hermite for Gaussians, weighted sums for particle clouds.
pub fn lift_value(v: &ValueGrid, t_idx: usize, m0: &InitialLaw) -> Result<f64, HjbError> {
    if t_idx >= v.time_slices() {
        return Err(HjbError::TimeIndexOutOfRange { idx: t_idx, len: v.time_slices() });
    }
    let d = v.problem.d;
    let n_agents = v.grid.ndim() / d;
    if m0.marginals().len() != n_agents {
        return Err(HjbError::BadGrid(format!(
            "law has {} marginals, grid covers {n_agents} agents",
            m0.marginals().len()
        )));
    }
    // tail mass check per agent against its axis box
    let mut tail = 0.0;
    for (i, marginal) in m0.marginals().iter().enumerate() {
        let lo: Vec<f64> = (0..d).map(|k| v.grid.lo[i * d + k]).collect();
        let hi: Vec<f64> = (0..d).map(|k| v.grid.hi(i * d + k)).collect();
        tail += marginal.tail_mass_outside(&lo, &hi);
    }
    if tail > LIFT_TAIL_TOLERANCE {
        return Err(HjbError::SupportEscapesGrid { tail });
    }

    // per-agent quadrature points
    let gh = GaussHermite::new(LIFT_GH_NODES);
    let inv = 1.0 / std::f64::consts::PI.sqrt();
    let mut agent_points: Vec<Vec<(f64, Vec<f64>)>> = Vec::with_capacity(n_agents);
    for marginal in m0.marginals() {
        let pts = match marginal {
            MarginalSpec::Dirac { point } => vec![(1.0, point.clone())],
            MarginalSpec::Gaussian { mean, variance } => {
                let sd = (2.0 * variance).sqrt();
                let mut pts = vec![(1.0, vec![0.0; d])];
                for k in 0..d {
                    let mut next = Vec::with_capacity(pts.len() * LIFT_GH_NODES);
                    for (w, base) in &pts {
                        for (node, wt) in gh.nodes.iter().zip(&gh.weights) {
                            let mut p = base.clone();
                            p[k] = mean[k] + sd * node;
                            next.push((w * inv * wt, p));
                        }
                    }
                    pts = next;
                }
                pts
            }
            MarginalSpec::Particles { points, weights } => points
                .iter()
                .zip(weights)
                .map(|(p, w)| (*w, p.clone()))
                .collect(),
        };
        agent_points.push(pts);
    }

    // tensor accumulation across agents
    let values = v.values_at(t_idx);
    let mut x = vec![0.0; n_agents * d];
    fn recurse(
        agent: usize,
        w: f64,
        agent_points: &[Vec<(f64, Vec<f64>)>],
        x: &mut Vec<f64>,
        d: usize,
        grid: &TensorGrid,
        values: &[f64],
    ) -> f64 {
        if agent == agent_points.len() {
            return w * grid.interp(values, x);
        }
        let mut acc = 0.0;
        for (wp, p) in &agent_points[agent] {
            x[agent * d..(agent + 1) * d].copy_from_slice(p);
            acc += recurse(agent + 1, w * wp, agent_points, x, d, grid, values);
        }
        acc
    }
    Ok(recurse(0, 1.0, &agent_points, &mut x, d, &v.grid, values))
}

// ---------------------------------------------------------------------------
// Spectral sandwich diagnostic
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SpectralReport {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// Upper bound `C_S / n` being checked against.
    pub upper: f64,
    /// Discretization slack `10·h` applied on both sides.
    pub slack: f64,
    pub sampled_nodes: usize,
    pub violations: Vec<(usize, usize)>,
}

/// Check `0 ≤ D²V(t,·) ≤ (C_S/n) I` at sampled interior nodes via
/// second-order finite-difference Hessians.
pub fn check_spectral_sandwich(v: &ValueGrid, ledger: &ConstantsLedger) -> SpectralReport {
    let grid = &v.grid;
    let nd = grid.ndim();
    let upper = ledger.c_s / ledger.n as f64;
    let h_max = grid.h.iter().cloned().fold(0.0, f64::max);
    let slack = 10.0 * h_max;
    let slices = v.time_slices();
    let time_samples: Vec<usize> = if slices <= 5 {
        (0..slices).collect()
    } else {
        (0..5).map(|k| k * (slices - 1) / 4).collect()
    };

    let mut min_eig = f64::INFINITY;
    let mut max_eig = f64::NEG_INFINITY;
    let mut violations = Vec::new();
    let mut sampled = 0;
    let mut hess = vec![0.0; nd * nd];
    for &t_idx in &time_samples {
        let vals = v.values_at(t_idx);
        let stride_sample = (grid.total / 2048).max(1);
        for flat in (0..grid.total).step_by(stride_sample) {
            if !grid.is_interior(flat) {
                continue;
            }
            sampled += 1;
            for a in 0..nd {
                let sa = grid.strides[a];
                let ha = grid.h[a];
                hess[a * nd + a] =
                    (vals[flat + sa] - 2.0 * vals[flat] + vals[flat - sa]) / (ha * ha);
                for b in (a + 1)..nd {
                    let sb = grid.strides[b];
                    let hb = grid.h[b];
                    let mixed = (vals[flat + sa + sb] - vals[flat + sa - sb]
                        - vals[flat - sa + sb]
                        + vals[flat - sa - sb])
                        / (4.0 * ha * hb);
                    hess[a * nd + b] = mixed;
                    hess[b * nd + a] = mixed;
                }
            }
            let eigs = sym_eigenvalues(&hess, nd);
            for e in eigs {
                min_eig = min_eig.min(e);
                max_eig = max_eig.max(e);
                if e < -slack || e > upper + slack {
                    violations.push((t_idx, flat));
                }
            }
        }
    }
    SpectralReport {
        min_eigenvalue: min_eig,
        max_eigenvalue: max_eig,
        upper,
        slack,
        sampled_nodes: sampled,
        violations,
    }
}
