//! Exact and semi-exact reference solutions used as ground truth: the Gibbs
//! log-integral value for the quadratic-action zero-running-cost case, the
//! matrix Riccati closed form for linear-quadratic problems, and a
//! mean/variance reduction for Gaussian mean-field LQ problems.

use crate::model::{
    ControlProblem, CostKind, InitialLaw, LagrangianKind, MarginalSpec, ModelError, ScalarAtom,
};
use crate::sde::rng::CounterRng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("tensor quadrature capped at n·d ≤ {cap}, problem has {got}")]
    QuadratureDimCap { cap: usize, got: usize },
    #[error("the Gibbs representation needs quadratic Lagrangians")]
    NonQuadraticLagrangian,
    #[error("the Gibbs representation needs F ≡ 0")]
    RunningCostNotZero,
    #[error("cost is not a pure quadratic form: {0}")]
    NotQuadratic(String),
    #[error("Riccati integration blew up at t = {0}")]
    RiccatiBlowUp(f64),
    #[error("mean-field LQ oracle needs a Gaussian (or Dirac) initial law")]
    NonGaussianInitial,
    #[error("mean-field LQ oracle is one-dimensional")]
    NonScalarState,
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ---------------------------------------------------------------------------
// Gauss-Hermite quadrature
// ---------------------------------------------------------------------------

/// Nodes and weights for the physicists' rule `∫ e^{-u²} f(u) du ≈ Σ w f(u)`.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub-Welsch on the Jacobi matrix: symmetric tridiagonal with
    /// off-diagonals `√(k/2)`; weights are `√π` times the squared first
    /// eigenvector components.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut diag = vec![0.0; n];
        let mut off: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
        let mut first_row = vec![0.0; n];
        first_row[0] = 1.0;
        tql_first_row(&mut diag, &mut off, &mut first_row);
        let mut pairs: Vec<(f64, f64)> = diag
            .into_iter()
            .zip(first_row)
            .map(|(x, v)| (x, std::f64::consts::PI.sqrt() * v * v))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// `E[f(Z)]` for `Z ~ N(mean, variance)`.
    pub fn gaussian_expectation(&self, mean: f64, variance: f64, f: impl Fn(f64) -> f64) -> f64 {
        let s = (2.0 * variance).sqrt();
        let inv = 1.0 / std::f64::consts::PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(u, w)| inv * w * f(mean + s * u))
            .sum()
    }
}

/// Symmetric tridiagonal QL with implicit shifts, accumulating only the first
/// row of the eigenvector matrix (all Golub-Welsch needs).
fn tql_first_row(d: &mut [f64], e: &mut Vec<f64>, z: &mut [f64]) {
    let n = d.len();
    e.push(0.0);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m < n - 1 {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter < 100, "tridiagonal QL failed to converge");
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0, 1.0);
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                f = z[i + 1];
                z[i + 1] = s * z[i] + c * f;
                z[i] = c * z[i] - s * f;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Gibbs log-integral value (quadratic action, F ≡ 0)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct QuadratureConfig {
    pub nodes_per_axis: usize,
    /// Tensor quadrature is refused above this total dimension.
    pub dim_cap: usize,
    /// If doubling the node count moves the value by at least this, the
    /// doubled rule's value is kept (the check runs for n·d ≤ 4).
    pub doubling_tol: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { nodes_per_axis: 32, dim_cap: 6, doubling_tol: 1e-8 }
    }
}

fn require_cole_hopf(problem: &ControlProblem) -> Result<(), OracleError> {
    if !problem.running_cost.is_zero() {
        return Err(OracleError::RunningCostNotZero);
    }
    if !problem.all_quadratic() {
        return Err(OracleError::NonQuadraticLagrangian);
    }
    Ok(())
}

/// `V(t, x0) = -(1/n) log ∫ exp(-n G(x0 + z)) γ_{T-t}(dz)` by tensor
/// Gauss-Hermite quadrature — the Gibbs variational value
/// `inf_m { ∫G dm + (1/n) H(m | law of x0 + W_{T-t}) }`.
pub fn cole_hopf_value(
    problem: &ControlProblem,
    t: f64,
    x0: &[f64],
    cfg: &QuadratureConfig,
) -> Result<f64, OracleError> {
    require_cole_hopf(problem)?;
    let nd = problem.n * problem.d;
    if nd > cfg.dim_cap {
        return Err(OracleError::QuadratureDimCap { cap: cfg.dim_cap, got: nd });
    }
    let tau = problem.horizon - t;
    let value = gibbs_tensor(problem, x0, tau, cfg.nodes_per_axis);
    if nd <= 4 {
        let doubled = gibbs_tensor(problem, x0, tau, cfg.nodes_per_axis * 2);
        if (doubled - value).abs() >= cfg.doubling_tol {
            return Ok(doubled);
        }
    }
    Ok(value)
}

fn gibbs_tensor(problem: &ControlProblem, x0: &[f64], tau: f64, nodes: usize) -> f64 {
    let nd = problem.n * problem.d;
    let n = problem.n as f64;
    if tau <= 0.0 {
        return problem.terminal_cost.value(x0);
    }
    let rule = GaussHermite::new(nodes);
    let log_w: Vec<f64> =
        rule.weights.iter().map(|w| (w / std::f64::consts::PI.sqrt()).ln()).collect();
    let scale = (2.0 * tau).sqrt();
    let mut idx = vec![0usize; nd];
    let mut x: Vec<f64> = (0..nd).map(|a| x0[a] + scale * rule.nodes[0]).collect();
    // streaming log-sum-exp with a running max
    let mut max_seen = f64::NEG_INFINITY;
    let mut acc = 0.0f64;
    loop {
        let mut lw = 0.0;
        for &i in idx.iter() {
            lw += log_w[i];
        }
        let e = lw - n * problem.terminal_cost.value(&x);
        if e > max_seen {
            acc = acc * (max_seen - e).exp() + 1.0;
            max_seen = e;
        } else {
            acc += (e - max_seen).exp();
        }
        let mut axis = 0;
        loop {
            idx[axis] += 1;
            if idx[axis] < nodes {
                x[axis] = x0[axis] + scale * rule.nodes[idx[axis]];
                break;
            }
            idx[axis] = 0;
            x[axis] = x0[axis] + scale * rule.nodes[0];
            axis += 1;
            if axis == nd {
                return -(max_seen + acc.ln()) / n;
            }
        }
    }
}

/// Monte Carlo form of the Gibbs value for dimensions beyond the quadrature
/// cap, with a linearization control variate whose Gaussian mean is closed
/// form. Returns `(value, standard error)`.
pub fn cole_hopf_value_mc(
    problem: &ControlProblem,
    t: f64,
    x0: &[f64],
    samples: usize,
    seed: u64,
) -> Result<(f64, f64), OracleError> {
    require_cole_hopf(problem)?;
    let nd = problem.n * problem.d;
    let n = problem.n as f64;
    let tau = problem.horizon - t;
    if tau <= 0.0 {
        return Ok((problem.terminal_cost.value(x0), 0.0));
    }
    let rng = CounterRng::new(seed);
    let sd = tau.sqrt();

    // control variate: exp(-n [G(x0) + DG(x0)·z]), E = exp(-nG0 + n²τ|DG|²/2)
    let g0 = problem.terminal_cost.value(x0);
    let mut grad0 = vec![0.0; nd];
    problem.terminal_cost.full_gradient(x0, &mut grad0);
    let grad_sq: f64 = grad0.iter().map(|v| v * v).sum();
    let shift = -n * g0; // work relative to the x0 exponent

    let mut sum_f = 0.0;
    let mut sum_f2 = 0.0;
    let mut sum_g = 0.0;
    let mut sum_g2 = 0.0;
    let mut sum_fg = 0.0;
    let mut x = vec![0.0; nd];
    for s in 0..samples {
        let mut lin = 0.0;
        for (axis, xi) in x.iter_mut().enumerate() {
            let z = sd * rng.normal(s as u64, axis as u64, 0, 3);
            *xi = x0[axis] + z;
            lin += grad0[axis] * z;
        }
        let f = (-n * problem.terminal_cost.value(&x) - shift).exp();
        let g = (-n * lin).exp();
        sum_f += f;
        sum_f2 += f * f;
        sum_g += g;
        sum_g2 += g * g;
        sum_fg += f * g;
    }
    let m = samples as f64;
    let mean_f = sum_f / m;
    let mean_g = sum_g / m;
    let var_f = (sum_f2 / m - mean_f * mean_f).max(0.0);
    let var_g = (sum_g2 / m - mean_g * mean_g).max(0.0);
    let cov = sum_fg / m - mean_f * mean_g;
    let beta = if var_g > 0.0 { cov / var_g } else { 0.0 };
    let exact_mean_g = (0.5 * n * n * tau * grad_sq).exp();
    let est = mean_f - beta * (mean_g - exact_mean_g);
    let var_est = (var_f - 2.0 * beta * cov + beta * beta * var_g).max(0.0);
    let se_mean = (var_est / m).sqrt();
    let value = -(shift + est.ln()) / n;
    let stderr = se_mean / (est * n);
    Ok((value, stderr))
}

/// Lift of the Gibbs value over a product initial law: outer Gauss-Hermite
/// quadrature over Gaussian marginals, inner Gibbs integral. Dirac marginals
/// collapse their outer axes.
pub fn cole_hopf_lift(
    problem: &ControlProblem,
    t: f64,
    m0: &InitialLaw,
    cfg: &QuadratureConfig,
) -> Result<f64, OracleError> {
    require_cole_hopf(problem)?;
    let d = problem.d;
    let nd = problem.n * d;
    let all_dirac = m0.marginals().iter().all(|m| matches!(m, MarginalSpec::Dirac { .. }));
    let mut x0 = vec![0.0; nd];
    if all_dirac {
        for (i, m) in m0.marginals().iter().enumerate() {
            if let MarginalSpec::Dirac { point } = m {
                x0[i * d..(i + 1) * d].copy_from_slice(point);
            }
        }
        return cole_hopf_value(problem, t, &x0, cfg);
    }
    if nd > 3 {
        return Err(OracleError::QuadratureDimCap { cap: 3, got: nd });
    }
    let outer_nodes = 24;
    let rule = GaussHermite::new(outer_nodes);
    let inv = 1.0 / std::f64::consts::PI.sqrt();
    let axis_len: Vec<usize> = (0..nd)
        .map(|axis| match &m0.marginals()[axis / d] {
            MarginalSpec::Dirac { .. } => 1,
            _ => outer_nodes,
        })
        .collect();
    let mut idx = vec![0usize; nd];
    let mut total = 0.0;
    'outer: loop {
        let mut w = 1.0;
        for (i, m) in m0.marginals().iter().enumerate() {
            for k in 0..d {
                let axis = i * d + k;
                match m {
                    MarginalSpec::Dirac { point } => x0[axis] = point[k],
                    MarginalSpec::Gaussian { mean, variance } => {
                        x0[axis] = mean[k] + (2.0 * variance).sqrt() * rule.nodes[idx[axis]];
                        w *= inv * rule.weights[idx[axis]];
                    }
                    MarginalSpec::Particles { .. } => return Err(OracleError::NonGaussianInitial),
                }
            }
        }
        total += w * cole_hopf_value(problem, t, &x0, cfg)?;
        let mut axis = 0;
        loop {
            idx[axis] += 1;
            if idx[axis] < axis_len[axis] {
                break;
            }
            idx[axis] = 0;
            axis += 1;
            if axis == nd {
                break 'outer;
            }
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Linear-quadratic Riccati
// ---------------------------------------------------------------------------

/// Pure-quadratic problem data: `G = ½ xᵀQ_G x`, `F = ½ xᵀQ_F x`,
/// `Lⁱ(x,a) = ½ aᵀRa`. Matrices are `nd × nd` row-major.
#[derive(Clone, Debug)]
pub struct LqSpec {
    pub n: usize,
    pub d: usize,
    pub horizon: f64,
    pub q_terminal: Vec<f64>,
    pub q_running: Vec<f64>,
    /// Block-diagonal `R⁻¹` over agents (identity for the plain quadratic
    /// Lagrangian).
    pub r_inv: Vec<f64>,
}

impl LqSpec {
    pub fn from_problem(problem: &ControlProblem) -> Result<Self, OracleError> {
        let nd = problem.n * problem.d;
        let q_terminal = quadratic_form_of(&problem.terminal_cost.kind, problem.n, problem.d)?;
        let q_running = quadratic_form_of(&problem.running_cost.kind, problem.n, problem.d)?;
        let mut r_inv = vec![0.0; nd * nd];
        for i in 0..problem.n {
            match &problem.lagrangian(i).kind {
                LagrangianKind::Quadratic => {
                    for k in 0..problem.d {
                        let a = i * problem.d + k;
                        r_inv[a * nd + a] = 1.0;
                    }
                }
                LagrangianKind::QuadraticWeighted { r } => {
                    let inv = crate::model::invert_spd(r, problem.d)?;
                    for k in 0..problem.d {
                        for l in 0..problem.d {
                            let (a, b) = (i * problem.d + k, i * problem.d + l);
                            r_inv[a * nd + b] = inv[k * problem.d + l];
                        }
                    }
                }
                LagrangianKind::Custom(_) => {
                    return Err(OracleError::NotQuadratic("custom Lagrangian".into()))
                }
            }
        }
        Ok(Self {
            n: problem.n,
            d: problem.d,
            horizon: problem.horizon,
            q_terminal,
            q_running,
            r_inv,
        })
    }
}

fn quadratic_form_of(kind: &CostKind, n: usize, d: usize) -> Result<Vec<f64>, OracleError> {
    let nd = n * d;
    let nf = n as f64;
    let mut q = vec![0.0; nd * nd];
    let quad_coeff = |atom: &ScalarAtom, what: &str| -> Result<f64, OracleError> {
        match atom {
            ScalarAtom::Zero => Ok(0.0),
            ScalarAtom::Quadratic { coeff } => Ok(*coeff),
            other => Err(OracleError::NotQuadratic(format!("{what}: {other:?}"))),
        }
    };
    match kind {
        CostKind::Zero => {}
        CostKind::Separable { per_agent } => {
            for (i, atom) in per_agent.iter().enumerate() {
                let c = quad_coeff(atom, "separable atom")?;
                for k in 0..d {
                    let a = i * d + k;
                    q[a * nd + a] = c / nf;
                }
            }
        }
        CostKind::PairwiseGraph { own, pair, matrix } => {
            // Q = (c₁/n) I + (2c₂/n)(D - J) ⊗ I_d with D = diag(row sums)
            let c1 = quad_coeff(own, "own atom")?;
            let c2 = quad_coeff(pair, "pair atom")?;
            for i in 0..n {
                let row: f64 = (0..n).map(|j| matrix.get(i, j)).sum();
                for k in 0..d {
                    let a = i * d + k;
                    q[a * nd + a] = c1 / nf + 2.0 * c2 * row / nf;
                }
                for j in 0..n {
                    let w = matrix.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let (a, b) = (i * d + k, j * d + k);
                        q[a * nd + b] -= 2.0 * c2 * w / nf;
                    }
                }
            }
        }
        CostKind::MeanField { linear, pair } => {
            // Q = (c₁/n) I + (2c₂/n²)(n I - 1 1ᵀ) ⊗ I_d
            let c1 = quad_coeff(linear, "linear atom")?;
            let c2 = quad_coeff(pair, "pair atom")?;
            for i in 0..n {
                for j in 0..n {
                    for k in 0..d {
                        let (a, b) = (i * d + k, j * d + k);
                        let kron = if i == j { 1.0 } else { 0.0 };
                        q[a * nd + b] +=
                            kron * c1 / nf + 2.0 * c2 / (nf * nf) * (nf * kron - 1.0);
                    }
                }
            }
        }
        CostKind::Custom(_) => return Err(OracleError::NotQuadratic("custom cost".into())),
    }
    Ok(q)
}

/// Backward Riccati path `P(t)` plus the heat-trace offset:
/// `V(t,x) = ½ xᵀP(t)x + offset(t)`.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub nd: usize,
    pub times: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl RiccatiSolution {
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let (p, offset) = self.at(t);
        let nd = self.nd;
        let mut s = 0.0;
        for a in 0..nd {
            for b in 0..nd {
                s += x[a] * p[a * nd + b] * x[b];
            }
        }
        0.5 * s + offset
    }

    /// `(P(t), offset(t))`, linearly interpolated between stored nodes.
    pub fn at(&self, t: f64) -> (Vec<f64>, f64) {
        let times = &self.times;
        if t <= times[0] {
            return (self.p[0].clone(), self.offset[0]);
        }
        if t >= *times.last().unwrap() {
            return (self.p.last().unwrap().clone(), *self.offset.last().unwrap());
        }
        let pos = times.partition_point(|v| *v <= t) - 1;
        let (t0, t1) = (times[pos], times[pos + 1]);
        let w = (t - t0) / (t1 - t0);
        let p = self.p[pos]
            .iter()
            .zip(&self.p[pos + 1])
            .map(|(a, b)| a * (1.0 - w) + b * w)
            .collect();
        (p, self.offset[pos] * (1.0 - w) + self.offset[pos + 1] * w)
    }
}

const RICCATI_STEPS: usize = 100_000;
const RICCATI_STORE_EVERY: usize = 100;

/// Integrate `Ṗ = n P R⁻¹ P - Q_F` backward from `P(T) = Q_G` by RK4, and
/// accumulate `offset(t) = ½ ∫_t^T Tr P(s) ds`.
pub fn lq_riccati(spec: &LqSpec) -> Result<RiccatiSolution, OracleError> {
    let nd = spec.n * spec.d;
    let n = spec.n as f64;
    let h = spec.horizon / RICCATI_STEPS as f64;
    let matmul = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; nd * nd];
        for r in 0..nd {
            for c in 0..nd {
                let mut s = 0.0;
                for k in 0..nd {
                    s += a[r * nd + k] * b[k * nd + c];
                }
                out[r * nd + c] = s;
            }
        }
        out
    };
    // dP/dτ = Q_F - n P R⁻¹ P, integrating in τ = T - t
    let rhs = |p: &[f64]| -> Vec<f64> {
        let prp = matmul(&matmul(p, &spec.r_inv), p);
        spec.q_running
            .iter()
            .zip(&prp)
            .map(|(qf, v)| qf - n * v)
            .collect()
    };
    let trace = |p: &[f64]| (0..nd).map(|a| p[a * nd + a]).sum::<f64>();

    let mut p = spec.q_terminal.clone();
    let mut offset = 0.0;
    let mut rev_times = vec![spec.horizon];
    let mut rev_p = vec![p.clone()];
    let mut rev_offset = vec![0.0];
    for step in 0..RICCATI_STEPS {
        let k1 = rhs(&p);
        let p2: Vec<f64> = p.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
        let k2 = rhs(&p2);
        let p3: Vec<f64> = p.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
        let k3 = rhs(&p3);
        let p4: Vec<f64> = p.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
        let k4 = rhs(&p4);
        let tr_before = trace(&p);
        for a in 0..nd * nd {
            p[a] += h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
        }
        for a in 0..nd {
            for b in (a + 1)..nd {
                let avg = 0.5 * (p[a * nd + b] + p[b * nd + a]);
                p[a * nd + b] = avg;
                p[b * nd + a] = avg;
            }
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(OracleError::RiccatiBlowUp(spec.horizon - (step + 1) as f64 * h));
        }
        offset += 0.25 * h * (tr_before + trace(&p)); // trapezoid on ½ Tr P
        if (step + 1) % RICCATI_STORE_EVERY == 0 || step + 1 == RICCATI_STEPS {
            rev_times.push(spec.horizon - (step + 1) as f64 * h);
            rev_p.push(p.clone());
            rev_offset.push(offset);
        }
    }
    rev_times.reverse();
    rev_p.reverse();
    rev_offset.reverse();
    Ok(RiccatiSolution { nd, times: rev_times, p: rev_p, offset: rev_offset })
}

// ---------------------------------------------------------------------------
// Mean-field LQ (mean/variance reduction)
// ---------------------------------------------------------------------------

/// Degree-≤2 functional of a one-dimensional law through its mean and
/// variance: `c0 + c_mean·μ + c_mean2·μ² + c_var·Var`.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanVarPoly {
    pub constant: f64,
    pub mean_lin: f64,
    pub mean_quad: f64,
    pub var_lin: f64,
}

impl MeanVarPoly {
    pub fn eval(&self, mean: f64, var: f64) -> f64 {
        self.constant + self.mean_lin * mean + self.mean_quad * mean * mean + self.var_lin * var
    }
}

/// Value of the mean-field control problem with quadratic action, running
/// cost `f(μ_s, Var_s)` and terminal cost `g(μ_T, Var_T)`, from a Gaussian
/// start. The affine-feedback optimum decouples into a deterministic LQ
/// problem for the mean (scalar Riccati) and a Pontryagin system for the
/// variance, both integrated by RK4 and re-simulated forward for the value.
pub fn meanfield_lq(
    g: &MeanVarPoly,
    f: &MeanVarPoly,
    m0: &MarginalSpec,
    horizon: f64,
    t: f64,
) -> Result<f64, OracleError> {
    if m0.dim() != 1 {
        return Err(OracleError::NonScalarState);
    }
    let (mu0, v0) = match m0 {
        MarginalSpec::Dirac { point } => (point[0], 0.0),
        MarginalSpec::Gaussian { mean, variance } => (mean[0], *variance),
        MarginalSpec::Particles { .. } => return Err(OracleError::NonGaussianInitial),
    };
    let tau = horizon - t;
    if tau <= 0.0 {
        return Ok(g.eval(mu0, v0));
    }
    let steps = 100_000usize;
    let h = tau / steps as f64;

    // Backward sweep in τ = T - s:
    //   mean Riccati   da/dτ = 2 c₂ - a²,     a(τ=0) = 2 g_mean2
    //   mean affine    db/dτ = c₁ - a b,      b(0) = g_mean
    //   variance costate dp/dτ = c_v - 2p²,   p(0) = g_var
    let c2 = f.mean_quad;
    let c1 = f.mean_lin;
    let cv = f.var_lin;
    let mut a = 2.0 * g.mean_quad;
    let mut b = g.mean_lin;
    let mut p = g.var_lin;
    let mut a_path = Vec::with_capacity(steps + 1);
    let mut b_path = Vec::with_capacity(steps + 1);
    let mut p_path = Vec::with_capacity(steps + 1);
    a_path.push(a);
    b_path.push(b);
    p_path.push(p);
    let da = |a: f64| 2.0 * c2 - a * a;
    let db = |a: f64, b: f64| c1 - a * b;
    let dp = |p: f64| cv - 2.0 * p * p;
    for _ in 0..steps {
        let (ka1, kb1, kp1) = (da(a), db(a, b), dp(p));
        let (ka2, kb2, kp2) = (
            da(a + 0.5 * h * ka1),
            db(a + 0.5 * h * ka1, b + 0.5 * h * kb1),
            dp(p + 0.5 * h * kp1),
        );
        let (ka3, kb3, kp3) = (
            da(a + 0.5 * h * ka2),
            db(a + 0.5 * h * ka2, b + 0.5 * h * kb2),
            dp(p + 0.5 * h * kp2),
        );
        let (ka4, kb4, kp4) =
            (da(a + h * ka3), db(a + h * ka3, b + h * kb3), dp(p + h * kp3));
        a += h / 6.0 * (ka1 + 2.0 * ka2 + 2.0 * ka3 + ka4);
        b += h / 6.0 * (kb1 + 2.0 * kb2 + 2.0 * kb3 + kb4);
        p += h / 6.0 * (kp1 + 2.0 * kp2 + 2.0 * kp3 + kp4);
        if !(a.is_finite() && b.is_finite() && p.is_finite()) {
            return Err(OracleError::RiccatiBlowUp(0.0));
        }
        a_path.push(a);
        b_path.push(b);
        p_path.push(p);
    }
    // path index k holds τ = k h, i.e. s = T - k h; forward step j sits at
    // s = t + j h, so its costates live at index steps - j.
    let at = |path: &[f64], j: usize| path[steps - j];

    // Forward sweep accumulating the cost along the optimal flow
    //   μ̇ = -(aμ + b),  v̇ = -4pv + 1,  running ½u² + ½k²v + f(μ,v).
    let mut mu = mu0;
    let mut v = v0;
    let mut cost = 0.0;
    let running = |mu: f64, v: f64, j: usize| {
        let u = -(at(&a_path, j) * mu + at(&b_path, j));
        let k = -2.0 * at(&p_path, j);
        0.5 * u * u + 0.5 * k * k * v + f.eval(mu, v)
    };
    for j in 0..steps {
        let dmu0 = -(at(&a_path, j) * mu + at(&b_path, j));
        let dv0 = -4.0 * at(&p_path, j) * v + 1.0;
        let mu_pred = mu + h * dmu0;
        let v_pred = v + h * dv0;
        let dmu1 = -(at(&a_path, j + 1) * mu_pred + at(&b_path, j + 1));
        let dv1 = -4.0 * at(&p_path, j + 1) * v_pred + 1.0;
        let r0 = running(mu, v, j);
        mu += 0.5 * h * (dmu0 + dmu1);
        v += 0.5 * h * (dv0 + dv1);
        let r1 = running(mu, v, j + 1);
        cost += 0.5 * h * (r0 + r1);
    }
    Ok(cost + g.eval(mu, v))
}

#[cfg(test)]
mod tests;
