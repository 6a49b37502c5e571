//! Control problem definitions: Lagrangians and their Hamiltonians, cost
//! structures over `(ℝᵈ)ⁿ`, interaction matrices, initial laws, and the
//! derivative-bound metadata the bound calculators consume.

pub mod atoms;

pub use atoms::ScalarAtom;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("convexity modulus must be positive, got {0}")]
    NonpositiveModulus(f64),
    #[error("inner optimizer diverged: residual {residual:e} after {iters} iterations")]
    InnerOptimizerDiverged { residual: f64, iters: usize },
    #[error("interaction matrix is not symmetric at ({i},{j})")]
    AsymmetricMatrix { i: usize, j: usize },
    #[error("interaction matrix has negative entry at ({i},{j})")]
    NegativeEntry { i: usize, j: usize },
    #[error("interaction matrix has nonzero diagonal at {i}")]
    NonzeroDiagonal { i: usize },
    #[error("custom cost declares no spectral bound")]
    MissingBound,
    #[error("sampled Hessian norms did not saturate across expanding clouds (last ratio {0:.3})")]
    UnboundedHessian(f64),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("marginal dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("particle weights must be nonnegative and sum to 1 (sum = {0})")]
    BadWeights(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

// ---------------------------------------------------------------------------
// Lagrangians and Hamiltonians
// ---------------------------------------------------------------------------

/// Analytic evaluators for a custom Lagrangian. Gradients are supplied, not
/// differenced, so the inner Newton solve sees exact first-order data.
#[derive(Clone)]
pub struct CustomLagrangian {
    pub value: Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>,
    pub grad_a: Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>,
    pub grad_x: Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>,
}

impl fmt::Debug for CustomLagrangian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomLagrangian{..}")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LagrangianKind {
    /// `L(x,a) = |a|²/2`
    Quadratic,
    /// `L(x,a) = ½ aᵀRa` with `R` symmetric positive definite (row-major).
    QuadraticWeighted { r: Vec<f64> },
    #[serde(skip)]
    Custom(CustomLagrangian),
}

/// Sup-norms of the second derivatives entering the explicit constants.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, Default)]
pub struct SecondDerivativeBounds {
    pub d_xx_l: f64,
    pub d_xp_h: f64,
    pub d_pp_h: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LagrangianSpec {
    pub kind: LagrangianKind,
    /// The strong-convexity constant of `a ↦ L(x,a)`.
    pub convexity_modulus: f64,
    pub bounds: SecondDerivativeBounds,
    /// Iteration budget for the inner optimizer on custom kinds.
    pub inner_budget: usize,
}

impl LagrangianSpec {
    pub fn quadratic() -> Self {
        Self {
            kind: LagrangianKind::Quadratic,
            convexity_modulus: 1.0,
            bounds: SecondDerivativeBounds { d_xx_l: 0.0, d_xp_h: 0.0, d_pp_h: 1.0 },
            inner_budget: 0,
        }
    }

    /// `½ aᵀRa`. The Hamiltonian is `½ pᵀR⁻¹p` with bounds derived from the
    /// extreme eigenvalues of `R`.
    pub fn quadratic_weighted(r: Vec<f64>, d: usize) -> Result<Self, ModelError> {
        assert_eq!(r.len(), d * d);
        let r_inv = invert_spd(&r, d)?;
        let lam_min = 1.0 / sym_op_norm(&r_inv, d);
        Ok(Self {
            kind: LagrangianKind::QuadraticWeighted { r },
            convexity_modulus: lam_min,
            bounds: SecondDerivativeBounds {
                d_xx_l: 0.0,
                d_xp_h: 0.0,
                d_pp_h: 1.0 / lam_min,
            },
            inner_budget: 0,
        })
    }

    pub fn custom(
        custom: CustomLagrangian,
        convexity_modulus: f64,
        bounds: SecondDerivativeBounds,
    ) -> Result<Self, ModelError> {
        if convexity_modulus <= 0.0 {
            return Err(ModelError::NonpositiveModulus(convexity_modulus));
        }
        Ok(Self { kind: LagrangianKind::Custom(custom), convexity_modulus, bounds, inner_budget: 200 })
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self.kind, LagrangianKind::Quadratic)
    }

    pub fn lagrangian_value(&self, x: &[f64], a: &[f64]) -> f64 {
        match &self.kind {
            LagrangianKind::Quadratic => 0.5 * a.iter().map(|v| v * v).sum::<f64>(),
            LagrangianKind::QuadraticWeighted { r } => {
                let d = a.len();
                let mut s = 0.0;
                for k in 0..d {
                    for l in 0..d {
                        s += a[k] * r[k * d + l] * a[l];
                    }
                }
                0.5 * s
            }
            LagrangianKind::Custom(c) => (c.value)(x, a),
        }
    }

    pub fn grad_x(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        match &self.kind {
            LagrangianKind::Quadratic | LagrangianKind::QuadraticWeighted { .. } => out.fill(0.0),
            LagrangianKind::Custom(c) => (c.grad_x)(x, a, out),
        }
    }
}

/// Result of a Hamiltonian evaluation: the sup value and its attaining
/// control, which is also the optimal drift `a* = -D_p H(x,p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianEval {
    pub value: f64,
    pub minimizer: Vec<f64>,
}

/// `H(x,p) = sup_a ( -a·p - L(x,a) )`, with the attaining control.
pub fn hamiltonian_eval(
    lagrangian: &LagrangianSpec,
    x: &[f64],
    p: &[f64],
) -> Result<HamiltonianEval, ModelError> {
    match &lagrangian.kind {
        LagrangianKind::Quadratic => Ok(HamiltonianEval {
            value: 0.5 * p.iter().map(|v| v * v).sum::<f64>(),
            minimizer: p.iter().map(|v| -v).collect(),
        }),
        LagrangianKind::QuadraticWeighted { r } => {
            let d = p.len();
            let r_inv = invert_spd(r, d)?;
            let mut a = vec![0.0; d];
            for k in 0..d {
                for l in 0..d {
                    a[k] -= r_inv[k * d + l] * p[l];
                }
            }
            let value = -0.5 * a.iter().zip(p).map(|(ak, pk)| ak * pk).sum::<f64>();
            Ok(HamiltonianEval { value, minimizer: a })
        }
        LagrangianKind::Custom(c) => {
            let a = minimize_inner(c, lagrangian.inner_budget, x, p)?;
            let value = -(dot(&a, p) + (c.value)(x, &a));
            Ok(HamiltonianEval { value, minimizer: a })
        }
    }
}

const INNER_TOL: f64 = 1e-10;

/// Minimize `φ(a) = a·p + L(x,a)` by damped Newton (Hessian from differenced
/// analytic gradients), falling back to per-coordinate golden-section search.
fn minimize_inner(
    c: &CustomLagrangian,
    budget: usize,
    x: &[f64],
    p: &[f64],
) -> Result<Vec<f64>, ModelError> {
    let d = p.len();
    let phi = |a: &[f64]| dot(a, p) + (c.value)(x, a);
    let grad = |a: &[f64], out: &mut [f64]| {
        (c.grad_a)(x, a, out);
        for (o, pk) in out.iter_mut().zip(p) {
            *o += pk;
        }
    };
    let tol = INNER_TOL * (1.0 + norm(p));

    let mut a = vec![0.0; d];
    let mut g = vec![0.0; d];
    for iter in 0..budget {
        grad(&a, &mut g);
        let gn = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gn <= tol {
            return Ok(a);
        }
        // finite-difference Jacobian of the analytic gradient
        let mut hess = vec![0.0; d * d];
        let mut gp = vec![0.0; d];
        let mut gm = vec![0.0; d];
        for k in 0..d {
            let h = 1e-6 * (1.0 + a[k].abs());
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[k] += h;
            am[k] -= h;
            grad(&ap, &mut gp);
            grad(&am, &mut gm);
            for l in 0..d {
                hess[l * d + k] = (gp[l] - gm[l]) / (2.0 * h);
            }
        }
        let step = match solve_dense(&hess, &g, d) {
            Some(s) => s,
            None => break,
        };
        // damped update with Armijo backtracking
        let f0 = phi(&a);
        let slope: f64 = -dot(&g, &step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = a.iter().zip(&step).map(|(ai, si)| ai - t * si).collect();
            if phi(&cand) <= f0 + 1e-4 * t * slope {
                a = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || !a.iter().all(|v| v.is_finite()) {
            break;
        }
        if iter == budget - 1 {
            break;
        }
    }

    // golden-section fallback, cyclic over coordinates
    for _sweep in 0..budget {
        for k in 0..d {
            let f1d = |v: f64| {
                let mut b = a.clone();
                b[k] = v;
                phi(&b)
            };
            a[k] = golden_section(f1d, a[k]);
        }
        grad(&a, &mut g);
        if g.iter().all(|v| v.abs() <= tol) {
            return Ok(a);
        }
    }
    grad(&a, &mut g);
    let residual = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if residual <= tol {
        Ok(a)
    } else {
        Err(ModelError::InnerOptimizerDiverged { residual, iters: budget })
    }
}

fn golden_section(f: impl Fn(f64) -> f64, start: f64) -> f64 {
    // bracket by doubling
    let mut radius = 1.0;
    let (mut lo, mut hi) = (start - radius, start + radius);
    for _ in 0..60 {
        if f(lo) > f(start) && f(hi) > f(start) {
            break;
        }
        radius *= 2.0;
        lo = start - radius;
        hi = start + radius;
        if radius > 1e12 {
            break;
        }
    }
    let inv_phi = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-13 * (1.0 + a.abs() + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

// ---------------------------------------------------------------------------
// Interaction matrices
// ---------------------------------------------------------------------------

/// Symmetric nonnegative interaction matrix with zero diagonal.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InteractionMatrix {
    pub n: usize,
    /// Row-major entries.
    pub entries: Vec<f64>,
    pub doubly_stochastic: bool,
}

impl InteractionMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self, ModelError> {
        assert_eq!(entries.len(), n * n);
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(ModelError::NonzeroDiagonal { i });
            }
            for j in 0..n {
                let e = entries[i * n + j];
                if e < 0.0 {
                    return Err(ModelError::NegativeEntry { i, j });
                }
                if (e - entries[j * n + i]).abs() > 1e-14 * (1.0 + e.abs()) {
                    return Err(ModelError::AsymmetricMatrix { i, j });
                }
            }
        }
        let mut doubly_stochastic = true;
        for i in 0..n {
            let row: f64 = entries[i * n..(i + 1) * n].iter().sum();
            if (row - 1.0).abs() > 1e-12 {
                doubly_stochastic = false;
            }
        }
        Ok(Self { n, entries, doubly_stochastic })
    }

    /// `A/m` for the circulant graph where each vertex joins its `m/2`
    /// nearest neighbours on both sides (`m` even, or `m = n-1` complete).
    pub fn regular_circulant(n: usize, m: usize) -> Result<Self, ModelError> {
        if m == n - 1 {
            return Self::complete(n);
        }
        if m == 0 || m % 2 != 0 || m >= n {
            return Err(ModelError::InvalidProblem(format!(
                "circulant degree {m} invalid for n = {n}"
            )));
        }
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for off in 1..=(m / 2) {
                let j1 = (i + off) % n;
                let j2 = (i + n - off) % n;
                entries[i * n + j1] = 1.0 / m as f64;
                entries[i * n + j2] = 1.0 / m as f64;
            }
        }
        Self::new(n, entries)
    }

    /// Complete graph normalized by degree: `J = A/(n-1)`.
    pub fn complete(n: usize) -> Result<Self, ModelError> {
        let mut entries = vec![1.0 / (n - 1) as f64; n * n];
        for i in 0..n {
            entries[i * n + i] = 0.0;
        }
        Self::new(n, entries)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn trace_squared(&self) -> f64 {
        // Tr(J²) = Σ_{ij} J_ij² for symmetric J
        self.entries.iter().map(|v| v * v).sum()
    }

    pub fn max_row_sum(&self) -> f64 {
        (0..self.n)
            .map(|i| self.entries[i * self.n..(i + 1) * self.n].iter().sum())
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Costs
// ---------------------------------------------------------------------------

/// Black-box cost evaluators with declared bound metadata.
#[derive(Clone)]
pub struct CustomCost {
    pub value: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    /// `D_i` block of the gradient.
    pub grad_block: Arc<dyn Fn(usize, &[f64], &mut [f64]) + Send + Sync>,
    /// `D_ij` Hessian block, row-major `d × d`.
    pub hess_block: Arc<dyn Fn(usize, usize, &[f64], &mut [f64]) + Send + Sync>,
    pub declared_spectral_bound: Option<f64>,
}

impl fmt::Debug for CustomCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomCost{..}")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostKind {
    /// Identically zero.
    Zero,
    /// `F(x) = (1/n) Σ_i f_i(xⁱ)`
    Separable { per_agent: Vec<ScalarAtom> },
    /// `F(x) = (1/n) Σ_i G₁(xⁱ) + (1/n) Σ_{i,j} J_ij G₂(xⁱ - xʲ)`
    PairwiseGraph { own: ScalarAtom, pair: ScalarAtom, matrix: InteractionMatrix },
    /// Empirical-measure functional `⟨m, g⟩ + ⟨m ⊗ m, G₂(· - ·)⟩` evaluated at
    /// `m = (1/n) Σ δ_{xⁱ}`, diagonal included.
    MeanField { linear: ScalarAtom, pair: ScalarAtom },
    #[serde(skip)]
    Custom(CustomCost),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostSpec {
    pub kind: CostKind,
    pub n: usize,
    pub d: usize,
}

impl CostSpec {
    pub fn zero(n: usize, d: usize) -> Self {
        Self { kind: CostKind::Zero, n, d }
    }

    pub fn separable(atoms: Vec<ScalarAtom>, d: usize) -> Self {
        let n = atoms.len();
        Self { kind: CostKind::Separable { per_agent: atoms }, n, d }
    }

    pub fn separable_shared(atom: ScalarAtom, n: usize, d: usize) -> Self {
        Self::separable(vec![atom; n], d)
    }

    pub fn pairwise(own: ScalarAtom, pair: ScalarAtom, matrix: InteractionMatrix, d: usize) -> Self {
        let n = matrix.n;
        Self { kind: CostKind::PairwiseGraph { own, pair, matrix }, n, d }
    }

    pub fn mean_field(linear: ScalarAtom, pair: ScalarAtom, n: usize, d: usize) -> Self {
        Self { kind: CostKind::MeanField { linear, pair }, n, d }
    }

    pub fn custom(custom: CustomCost, n: usize, d: usize) -> Self {
        Self { kind: CostKind::Custom(custom), n, d }
    }

    pub fn is_zero(&self) -> bool {
        match &self.kind {
            CostKind::Zero => true,
            CostKind::Separable { per_agent } => {
                per_agent.iter().all(|a| matches!(a, ScalarAtom::Zero))
            }
            _ => false,
        }
    }

    /// Whether the cost couples distinct agents at all.
    pub fn is_decoupled(&self) -> bool {
        match &self.kind {
            CostKind::Zero | CostKind::Separable { .. } => true,
            CostKind::PairwiseGraph { pair, matrix, .. } => {
                matches!(pair, ScalarAtom::Zero) || matrix.entries.iter().all(|v| *v == 0.0)
            }
            CostKind::MeanField { pair, .. } => matches!(pair, ScalarAtom::Zero),
            CostKind::Custom(_) => false,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let (n, d) = (self.n, self.d);
        let nf = n as f64;
        match &self.kind {
            CostKind::Zero => 0.0,
            CostKind::Separable { per_agent } => {
                let mut s = 0.0;
                for i in 0..n {
                    s += per_agent[i].value(&x[i * d..(i + 1) * d]);
                }
                s / nf
            }
            CostKind::PairwiseGraph { own, pair, matrix } => {
                let mut s = 0.0;
                for i in 0..n {
                    s += own.value(&x[i * d..(i + 1) * d]);
                }
                let mut u = vec![0.0; d];
                for i in 0..n {
                    for j in 0..n {
                        let w = matrix.get(i, j);
                        if w != 0.0 {
                            diff_into(x, i, j, d, &mut u);
                            s += w * pair.value(&u);
                        }
                    }
                }
                s / nf
            }
            CostKind::MeanField { linear, pair } => {
                let mut s = 0.0;
                for i in 0..n {
                    s += linear.value(&x[i * d..(i + 1) * d]) / nf;
                }
                let mut u = vec![0.0; d];
                for i in 0..n {
                    for j in 0..n {
                        diff_into(x, i, j, d, &mut u);
                        s += pair.value(&u) / (nf * nf);
                    }
                }
                s
            }
            CostKind::Custom(c) => (c.value)(x),
        }
    }

    /// `D_i` of the cost.
    pub fn grad_block(&self, i: usize, x: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        let nf = n as f64;
        match &self.kind {
            CostKind::Zero => out.fill(0.0),
            CostKind::Separable { per_agent } => {
                per_agent[i].gradient(&x[i * d..(i + 1) * d], out);
                scale(out, 1.0 / nf);
            }
            CostKind::PairwiseGraph { own, pair, matrix } => {
                own.gradient(&x[i * d..(i + 1) * d], out);
                let mut u = vec![0.0; d];
                let mut g = vec![0.0; d];
                for j in 0..n {
                    let w = matrix.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    // D_i [J_ij G₂(xⁱ-xʲ) + J_ji G₂(xʲ-xⁱ)]
                    diff_into(x, i, j, d, &mut u);
                    pair.gradient(&u, &mut g);
                    for k in 0..d {
                        out[k] += w * g[k];
                    }
                    diff_into(x, j, i, d, &mut u);
                    pair.gradient(&u, &mut g);
                    for k in 0..d {
                        out[k] -= w * g[k];
                    }
                }
                scale(out, 1.0 / nf);
            }
            CostKind::MeanField { linear, pair } => {
                linear.gradient(&x[i * d..(i + 1) * d], out);
                scale(out, 1.0 / nf);
                let mut u = vec![0.0; d];
                let mut g = vec![0.0; d];
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    diff_into(x, i, j, d, &mut u);
                    pair.gradient(&u, &mut g);
                    for k in 0..d {
                        out[k] += g[k] / (nf * nf);
                    }
                    diff_into(x, j, i, d, &mut u);
                    pair.gradient(&u, &mut g);
                    for k in 0..d {
                        out[k] -= g[k] / (nf * nf);
                    }
                }
            }
            CostKind::Custom(c) => (c.grad_block)(i, x, out),
        }
    }

    pub fn full_gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        let mut block = vec![0.0; d];
        for i in 0..self.n {
            self.grad_block(i, x, &mut block);
            out[i * d..(i + 1) * d].copy_from_slice(&block);
        }
    }

    /// `D_ij` Hessian block (row-major `d × d`).
    pub fn hess_block(&self, i: usize, j: usize, x: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        let nf = n as f64;
        out.fill(0.0);
        match &self.kind {
            CostKind::Zero => {}
            CostKind::Separable { per_agent } => {
                if i == j {
                    per_agent[i].hessian(&x[i * d..(i + 1) * d], out);
                    scale(out, 1.0 / nf);
                }
            }
            CostKind::PairwiseGraph { own, pair, matrix } => {
                let mut h = vec![0.0; d * d];
                let mut u = vec![0.0; d];
                if i == j {
                    own.hessian(&x[i * d..(i + 1) * d], out);
                    for l in 0..n {
                        let w = matrix.get(i, l);
                        if w == 0.0 {
                            continue;
                        }
                        diff_into(x, i, l, d, &mut u);
                        pair.hessian(&u, &mut h);
                        axpy(out, &h, w);
                        diff_into(x, l, i, d, &mut u);
                        pair.hessian(&u, &mut h);
                        axpy(out, &h, w);
                    }
                } else {
                    let w = matrix.get(i, j);
                    if w != 0.0 {
                        diff_into(x, i, j, d, &mut u);
                        pair.hessian(&u, &mut h);
                        axpy(out, &h, -w);
                        diff_into(x, j, i, d, &mut u);
                        pair.hessian(&u, &mut h);
                        axpy(out, &h, -w);
                    }
                }
                scale(out, 1.0 / nf);
            }
            CostKind::MeanField { linear, pair } => {
                let mut h = vec![0.0; d * d];
                let mut u = vec![0.0; d];
                if i == j {
                    linear.hessian(&x[i * d..(i + 1) * d], out);
                    scale(out, 1.0 / nf);
                    for l in 0..n {
                        if l == i {
                            continue;
                        }
                        diff_into(x, i, l, d, &mut u);
                        pair.hessian(&u, &mut h);
                        axpy(out, &h, 1.0 / (nf * nf));
                        diff_into(x, l, i, d, &mut u);
                        pair.hessian(&u, &mut h);
                        axpy(out, &h, 1.0 / (nf * nf));
                    }
                } else {
                    diff_into(x, i, j, d, &mut u);
                    pair.hessian(&u, &mut h);
                    axpy(out, &h, -1.0 / (nf * nf));
                    diff_into(x, j, i, d, &mut u);
                    pair.hessian(&u, &mut h);
                    axpy(out, &h, -1.0 / (nf * nf));
                }
            }
            CostKind::Custom(c) => (c.hess_block)(i, j, x, out),
        }
    }

    /// Spectral constant `C` with `0 ≤ D²F ≤ (C/n) I`, exact for registry
    /// kinds, declared for custom ones.
    pub fn spectral_bound(&self) -> Result<f64, ModelError> {
        match &self.kind {
            CostKind::Zero => Ok(0.0),
            CostKind::Separable { per_agent } => {
                Ok(per_agent.iter().map(|a| a.hessian_sup()).fold(0.0, f64::max))
            }
            CostKind::PairwiseGraph { own, pair, matrix } => {
                Ok(own.hessian_sup() + 4.0 * pair.hessian_sup() * matrix.max_row_sum())
            }
            CostKind::MeanField { linear, pair } => {
                Ok(linear.hessian_sup() + 4.0 * pair.hessian_sup())
            }
            CostKind::Custom(c) => c.declared_spectral_bound.ok_or(ModelError::MissingBound),
        }
    }

    pub fn is_convex_kind(&self) -> bool {
        match &self.kind {
            CostKind::Zero => true,
            CostKind::Separable { per_agent } => per_agent.iter().all(|a| a.is_convex()),
            CostKind::PairwiseGraph { own, pair, .. } => own.is_convex() && pair.is_convex(),
            CostKind::MeanField { linear, pair } => linear.is_convex() && pair.is_convex(),
            CostKind::Custom(_) => false,
        }
    }
}

#[inline]
fn diff_into(x: &[f64], i: usize, j: usize, d: usize, out: &mut [f64]) {
    for k in 0..d {
        out[k] = x[i * d + k] - x[j * d + k];
    }
}

#[inline]
fn scale(v: &mut [f64], s: f64) {
    for x in v {
        *x *= s;
    }
}

#[inline]
fn axpy(acc: &mut [f64], v: &[f64], s: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += s * b;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// Cross-derivative tables
// ---------------------------------------------------------------------------

/// Upper bounds on `‖D_ij·‖∞` (Frobenius norm of the block, sup over states)
/// for `i < j`. `certified` is false when the entries are sampled estimates
/// rather than closed-form sups.
#[derive(Clone, Debug, Serialize)]
pub struct CrossDerivativeTable {
    pub n: usize,
    /// Row-major strictly-upper-triangular entries, `(i,j)` with `i < j`.
    entries: Vec<f64>,
    pub certified: bool,
}

impl CrossDerivativeTable {
    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        // offset of row i in the packed strict upper triangle
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        self.entries[self.index(i, j)]
    }

    /// `Σ_{i<j} ‖D_ij·‖∞²`
    pub fn sum_squares(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|v| *v == 0.0)
    }
}

/// `‖D_ij·‖∞` estimates for every pair. Closed-form kinds give certified
/// sups; custom costs are sampled over expanding point clouds and flagged.
pub fn cross_derivative_table(cost: &CostSpec, n: usize) -> Result<CrossDerivativeTable, ModelError> {
    assert_eq!(cost.n, n);
    let d = cost.d;
    let m = n * (n - 1) / 2;
    let mut entries = vec![0.0; m];
    let mut certified = true;
    let frob_factor = (d as f64).sqrt(); // |A|_F ≤ √d |A|_op for d×d blocks

    match &cost.kind {
        CostKind::Zero | CostKind::Separable { .. } => {}
        CostKind::PairwiseGraph { pair, matrix, .. } => {
            let sup = pair.hessian_sup() * frob_factor;
            let mut idx = 0;
            for i in 0..n {
                for j in (i + 1)..n {
                    entries[idx] = 2.0 / n as f64 * matrix.get(i, j) * sup;
                    idx += 1;
                }
            }
        }
        CostKind::MeanField { pair, .. } => {
            let sup = 2.0 / (n as f64 * n as f64) * pair.hessian_sup() * frob_factor;
            entries.fill(sup);
        }
        CostKind::Custom(c) => {
            certified = false;
            let rng = crate::sde::rng::CounterRng::new(0x5EED);
            let mut block = vec![0.0; d * d];
            let mut prev_stage = 0.0f64;
            let mut last_ratio = 1.0f64;
            for (stage, radius) in [1.0f64, 2.0, 4.0, 8.0].iter().enumerate() {
                let mut stage_max: Vec<f64> = vec![0.0; m];
                for s in 0..64u64 {
                    let x: Vec<f64> = (0..n * d)
                        .map(|k| radius * rng.normal(s, stage as u64, k as u64, 0))
                        .collect();
                    let mut idx = 0;
                    for i in 0..n {
                        for j in (i + 1)..n {
                            (c.hess_block)(i, j, &x, &mut block);
                            let frob = norm(&block);
                            stage_max[idx] = stage_max[idx].max(frob);
                            entries[idx] = entries[idx].max(frob);
                            idx += 1;
                        }
                    }
                }
                let total: f64 = stage_max.iter().sum();
                if stage > 0 && prev_stage > 0.0 {
                    last_ratio = total / prev_stage;
                }
                prev_stage = total;
            }
            if last_ratio > 1.2 {
                return Err(ModelError::UnboundedHessian(last_ratio));
            }
        }
    }
    Ok(CrossDerivativeTable { n, entries, certified })
}

// ---------------------------------------------------------------------------
// Control problems
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LagrangianSet {
    Shared(LagrangianSpec),
    PerAgent(Vec<LagrangianSpec>),
}

impl LagrangianSet {
    pub fn get(&self, i: usize) -> &LagrangianSpec {
        match self {
            LagrangianSet::Shared(l) => l,
            LagrangianSet::PerAgent(ls) => &ls[i],
        }
    }

    fn iter(&self, n: usize) -> impl Iterator<Item = &LagrangianSpec> {
        (0..n).map(move |i| self.get(i))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlProblem {
    pub n: usize,
    pub d: usize,
    /// Horizon `T`.
    pub horizon: f64,
    pub lagrangians: LagrangianSet,
    pub running_cost: CostSpec,
    pub terminal_cost: CostSpec,
    pub convex_flag: bool,
}

impl ControlProblem {
    pub fn new(
        n: usize,
        d: usize,
        horizon: f64,
        lagrangians: LagrangianSet,
        running_cost: CostSpec,
        terminal_cost: CostSpec,
    ) -> Result<Self, ModelError> {
        if n < 1 || d < 1 || horizon <= 0.0 {
            return Err(ModelError::InvalidProblem(format!(
                "need n ≥ 1, d ≥ 1, T > 0 (got n={n}, d={d}, T={horizon})"
            )));
        }
        if running_cost.n != n || terminal_cost.n != n || running_cost.d != d || terminal_cost.d != d
        {
            return Err(ModelError::InvalidProblem("cost shape mismatch".into()));
        }
        for l in lagrangians.iter(n) {
            if l.convexity_modulus <= 0.0 {
                return Err(ModelError::NonpositiveModulus(l.convexity_modulus));
            }
        }
        let convex_flag = running_cost.is_convex_kind() && terminal_cost.is_convex_kind();
        let problem = Self { n, d, horizon, lagrangians, running_cost, terminal_cost, convex_flag };
        if convex_flag {
            problem.spot_check_convexity()?;
        }
        Ok(problem)
    }

    pub fn lagrangian(&self, i: usize) -> &LagrangianSpec {
        self.lagrangians.get(i)
    }

    pub fn all_quadratic(&self) -> bool {
        self.lagrangians.iter(self.n).all(|l| l.is_quadratic())
    }

    /// Max over agents of each second-derivative sup.
    pub fn lagrangian_bounds(&self) -> SecondDerivativeBounds {
        let mut b = SecondDerivativeBounds::default();
        for l in self.lagrangians.iter(self.n) {
            b.d_xx_l = b.d_xx_l.max(l.bounds.d_xx_l);
            b.d_xp_h = b.d_xp_h.max(l.bounds.d_xp_h);
            b.d_pp_h = b.d_pp_h.max(l.bounds.d_pp_h);
        }
        b
    }

    pub fn min_convexity_modulus(&self) -> f64 {
        self.lagrangians
            .iter(self.n)
            .map(|l| l.convexity_modulus)
            .fold(f64::INFINITY, f64::min)
    }

    /// Assemble the full `nd × nd` Hessian of a cost at `x` and check it is
    /// positive semidefinite at a handful of sampled points.
    fn spot_check_convexity(&self) -> Result<(), ModelError> {
        let nd = self.n * self.d;
        let rng = crate::sde::rng::CounterRng::new(0xC0FFEE);
        let mut block = vec![0.0; self.d * self.d];
        for (which, cost) in [(0u64, &self.running_cost), (1u64, &self.terminal_cost)] {
            for s in 0..8u64 {
                let x: Vec<f64> = (0..nd).map(|k| 2.0 * rng.normal(s, which, k as u64, 1)).collect();
                let mut hess = vec![0.0; nd * nd];
                for i in 0..self.n {
                    for j in 0..self.n {
                        cost.hess_block(i, j, &x, &mut block);
                        for k in 0..self.d {
                            for l in 0..self.d {
                                hess[(i * self.d + k) * nd + (j * self.d + l)] = block[k * self.d + l];
                            }
                        }
                    }
                }
                let eigs = sym_eigenvalues(&hess, nd);
                if eigs.iter().any(|e| *e < -1e-9) {
                    return Err(ModelError::InvalidProblem(format!(
                        "convex_flag asserted but sampled Hessian has eigenvalue {:.3e}",
                        eigs.iter().cloned().fold(f64::INFINITY, f64::min)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Assemble the graph-interaction problem
/// `Fⁿ = Σ F₁(xⁱ)/n + Σ J_ij F₂(xⁱ-xʲ)/n` (and likewise `Gⁿ`).
pub fn build_hetero_problem(
    g1: ScalarAtom,
    g2: ScalarAtom,
    f1: ScalarAtom,
    f2: ScalarAtom,
    j: InteractionMatrix,
    lagrangian: LagrangianSpec,
    horizon: f64,
    d: usize,
) -> Result<ControlProblem, ModelError> {
    let n = j.n;
    let running = if matches!(f1, ScalarAtom::Zero) && matches!(f2, ScalarAtom::Zero) {
        CostSpec::zero(n, d)
    } else {
        CostSpec::pairwise(f1, f2, j.clone(), d)
    };
    let terminal = CostSpec::pairwise(g1, g2, j, d);
    ControlProblem::new(n, d, horizon, LagrangianSet::Shared(lagrangian), running, terminal)
}

// ---------------------------------------------------------------------------
// Initial laws
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarginalSpec {
    Dirac { point: Vec<f64> },
    /// Isotropic Gaussian.
    Gaussian { mean: Vec<f64>, variance: f64 },
    Particles { points: Vec<Vec<f64>>, weights: Vec<f64> },
}

impl MarginalSpec {
    pub fn dirac(point: Vec<f64>) -> Self {
        MarginalSpec::Dirac { point }
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Self {
        MarginalSpec::Gaussian { mean, variance }
    }

    pub fn dim(&self) -> usize {
        match self {
            MarginalSpec::Dirac { point } => point.len(),
            MarginalSpec::Gaussian { mean, .. } => mean.len(),
            MarginalSpec::Particles { points, .. } => points.first().map_or(0, |p| p.len()),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            MarginalSpec::Dirac { point } => point.clone(),
            MarginalSpec::Gaussian { mean, .. } => mean.clone(),
            MarginalSpec::Particles { points, weights } => {
                let d = self.dim();
                let mut m = vec![0.0; d];
                for (p, w) in points.iter().zip(weights) {
                    for k in 0..d {
                        m[k] += w * p[k];
                    }
                }
                m
            }
        }
    }

    /// Largest per-coordinate variance.
    pub fn max_variance(&self) -> f64 {
        match self {
            MarginalSpec::Dirac { .. } => 0.0,
            MarginalSpec::Gaussian { variance, .. } => *variance,
            MarginalSpec::Particles { points, weights } => {
                let d = self.dim();
                let mean = self.mean();
                (0..d)
                    .map(|k| {
                        points
                            .iter()
                            .zip(weights)
                            .map(|(p, w)| w * (p[k] - mean[k]).powi(2))
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max)
            }
        }
    }

    pub fn second_moment(&self) -> f64 {
        match self {
            MarginalSpec::Dirac { point } => point.iter().map(|v| v * v).sum(),
            MarginalSpec::Gaussian { mean, variance } => {
                mean.iter().map(|v| v * v).sum::<f64>() + *variance * mean.len() as f64
            }
            MarginalSpec::Particles { points, weights } => points
                .iter()
                .zip(weights)
                .map(|(p, w)| w * p.iter().map(|v| v * v).sum::<f64>())
                .sum(),
        }
    }

    /// Poincaré constant, when known in closed form.
    pub fn poincare_constant(&self) -> Option<f64> {
        match self {
            MarginalSpec::Dirac { .. } => Some(0.0),
            MarginalSpec::Gaussian { variance, .. } => Some(*variance),
            MarginalSpec::Particles { .. } => None,
        }
    }

    /// Talagrand T₂ constant, when known in closed form.
    pub fn t2_constant(&self) -> Option<f64> {
        match self {
            MarginalSpec::Dirac { .. } => Some(0.0),
            MarginalSpec::Gaussian { variance, .. } => Some(2.0 * variance),
            MarginalSpec::Particles { .. } => None,
        }
    }

    /// Mass lying outside the box `[lo_k, hi_k]` per coordinate, summed.
    pub fn tail_mass_outside(&self, lo: &[f64], hi: &[f64]) -> f64 {
        match self {
            MarginalSpec::Dirac { point } => {
                let inside = point.iter().enumerate().all(|(k, v)| *v >= lo[k] && *v <= hi[k]);
                if inside {
                    0.0
                } else {
                    1.0
                }
            }
            MarginalSpec::Gaussian { mean, variance } => {
                let sd = variance.sqrt();
                let mut mass = 0.0;
                for (k, m) in mean.iter().enumerate() {
                    if sd == 0.0 {
                        continue;
                    }
                    // mass below lo plus mass above hi
                    mass += gaussian_tail((m - lo[k]) / sd).min(1.0)
                        + gaussian_tail((hi[k] - m) / sd).min(1.0);
                }
                mass
            }
            MarginalSpec::Particles { points, weights } => points
                .iter()
                .zip(weights)
                .filter(|(p, _)| p.iter().enumerate().any(|(k, v)| *v < lo[k] || *v > hi[k]))
                .map(|(_, w)| *w)
                .sum(),
        }
    }

    /// Draw into `out` using the supplied keyed uniform/normal sources.
    pub fn sample_into(
        &self,
        uniform: impl Fn(u64) -> f64,
        normal: impl Fn(u64) -> f64,
        out: &mut [f64],
    ) {
        match self {
            MarginalSpec::Dirac { point } => out.copy_from_slice(point),
            MarginalSpec::Gaussian { mean, variance } => {
                let sd = variance.sqrt();
                for (k, o) in out.iter_mut().enumerate() {
                    *o = mean[k] + sd * normal(k as u64);
                }
            }
            MarginalSpec::Particles { points, weights } => {
                let u = uniform(0);
                let mut acc = 0.0;
                let mut chosen = points.len() - 1;
                for (idx, w) in weights.iter().enumerate() {
                    acc += w;
                    if u <= acc {
                        chosen = idx;
                        break;
                    }
                }
                out.copy_from_slice(&points[chosen]);
            }
        }
    }
}

// standard normal upper tail P(Z > z) for z possibly negative
fn gaussian_tail(z: f64) -> f64 {
    // lower tail below level z means P(Z < z) = tail(-z)
    0.5 * erfc_approx(z / std::f64::consts::SQRT_2)
}

// Abramowitz-Stegun 7.1.26 style rational approximation, |err| < 1.5e-7.
fn erfc_approx(x: f64) -> f64 {
    let sign_neg = x < 0.0;
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let erf = 1.0 - poly * (-x * x).exp();
    let erfc = 1.0 - erf;
    if sign_neg {
        2.0 - erfc
    } else {
        erfc
    }
}

/// A vector of independent per-agent marginals, identified with their product.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitialLaw {
    marginals: Vec<MarginalSpec>,
    /// Overrides for particle marginals whose constants are not closed-form.
    pub declared_poincare: Option<f64>,
    pub declared_t2: Option<f64>,
}

impl InitialLaw {
    pub fn new(marginals: Vec<MarginalSpec>) -> Result<Self, ModelError> {
        if marginals.is_empty() {
            return Err(ModelError::InvalidProblem("empty initial law".into()));
        }
        let d = marginals[0].dim();
        for m in &marginals {
            if m.dim() != d {
                return Err(ModelError::DimensionMismatch { expected: d, got: m.dim() });
            }
            if let MarginalSpec::Particles { points, weights } = m {
                let sum: f64 = weights.iter().sum();
                if weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-12 || points.is_empty()
                {
                    return Err(ModelError::BadWeights(sum));
                }
            }
        }
        Ok(Self { marginals, declared_poincare: None, declared_t2: None })
    }

    pub fn dirac(points: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        Self::new(points.into_iter().map(|p| MarginalSpec::Dirac { point: p }).collect())
    }

    pub fn shared(marginal: MarginalSpec, n: usize) -> Result<Self, ModelError> {
        Self::new(vec![marginal; n])
    }

    pub fn marginals(&self) -> &[MarginalSpec] {
        &self.marginals
    }

    pub fn dim(&self) -> usize {
        self.marginals[0].dim()
    }

    /// Product Poincaré constant = max over marginals (tensorization).
    pub fn poincare_constant(&self) -> Option<f64> {
        if let Some(c) = self.declared_poincare {
            return Some(c);
        }
        self.marginals
            .iter()
            .map(|m| m.poincare_constant())
            .try_fold(0.0f64, |acc, c| c.map(|c| acc.max(c)))
    }

    pub fn t2_constant(&self) -> Option<f64> {
        if let Some(c) = self.declared_t2 {
            return Some(c);
        }
        self.marginals
            .iter()
            .map(|m| m.t2_constant())
            .try_fold(0.0f64, |acc, c| c.map(|c| acc.max(c)))
    }

    pub fn max_variance(&self) -> f64 {
        self.marginals.iter().map(|m| m.max_variance()).fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Small dense linear algebra (dimensions here are ≤ nd ≤ 4, or tiny bases)
// ---------------------------------------------------------------------------

/// Gaussian elimination with partial pivoting; `None` on a singular system.
pub(crate) fn solve_dense(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
            }
            rhs.swap(col, piv);
        }
        let diag = m[col * n + col];
        for r in (col + 1)..n {
            let f = m[r * n + col] / diag;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = rhs[r];
        for c in (r + 1)..n {
            s -= m[r * n + c] * x[c];
        }
        x[r] = s / m[r * n + r];
    }
    Some(x)
}

pub(crate) fn invert_spd(a: &[f64], n: usize) -> Result<Vec<f64>, ModelError> {
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let x = solve_dense(a, &e, n).ok_or(ModelError::NotPositiveDefinite)?;
        for r in 0..n {
            inv[r * n + col] = x[r];
        }
    }
    // SPD sanity: diagonal of the inverse must be positive
    for k in 0..n {
        if inv[k * n + k] <= 0.0 {
            return Err(ModelError::NotPositiveDefinite);
        }
    }
    Ok(inv)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|k| m[k * n + k]).collect()
}

pub(crate) fn sym_op_norm(a: &[f64], n: usize) -> f64 {
    sym_eigenvalues(a, n).into_iter().map(f64::abs).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests;
