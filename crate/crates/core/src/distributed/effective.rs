//! Conditional expectations of costs against product flows:
//! `⟨m⁻ⁱ, F⟩(x)`, `⟨m⁻ⁱ, D_i F⟩(x)` and `⟨∏m, F⟩`, exploiting the additive
//! pair structure of the registry kinds so everything stays `O(points ·
//! bins)`. Custom costs fall back to a full tensor product over the other
//! agents' supports, guarded by a budget.

use super::{AgentMarginal, DistributedError};
use crate::model::{CostKind, CostSpec, ScalarAtom};

/// Mixture `Σ_{j≠i} c_j m^j` collapsed onto sampled support points. Every
/// marginal keeps its own support; the mixture is a flat weighted point list.
fn mixture(
    slice: &[AgentMarginal],
    skip: usize,
    coeff: impl Fn(usize) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let d = slice[0].grid.ndim();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (j, m) in slice.iter().enumerate() {
        if j == skip {
            continue;
        }
        let c = coeff(j);
        if c == 0.0 {
            continue;
        }
        let mut x = vec![0.0; d];
        for node in 0..m.grid.total {
            let w = m.weights[node];
            if w == 0.0 {
                continue;
            }
            m.grid.node_coords(node, &mut x);
            points.extend_from_slice(&x);
            weights.push(c * w);
        }
    }
    (points, weights)
}

/// `Σ_w w·[φ(x - y) + φ(y - x)]` over a weighted support.
pub(crate) fn pair_integral(atom: &ScalarAtom, x: &[f64], points: &[f64], weights: &[f64]) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    let mut u = vec![0.0; d];
    for (idx, w) in weights.iter().enumerate() {
        let y = &points[idx * d..(idx + 1) * d];
        for k in 0..d {
            u[k] = x[k] - y[k];
        }
        let forward = atom.value(&u);
        for k in 0..d {
            u[k] = -u[k];
        }
        acc += w * (forward + atom.value(&u));
    }
    acc
}

/// `Σ_w w·[∇φ(x - y) - ∇φ(y - x)]` (the `D_x` of the symmetrized pair term).
pub(crate) fn pair_gradient(atom: &ScalarAtom, x: &[f64], points: &[f64], weights: &[f64], out: &mut [f64]) {
    let d = x.len();
    out.fill(0.0);
    let mut u = vec![0.0; d];
    let mut g = vec![0.0; d];
    for (idx, w) in weights.iter().enumerate() {
        let y = &points[idx * d..(idx + 1) * d];
        for k in 0..d {
            u[k] = x[k] - y[k];
        }
        atom.gradient(&u, &mut g);
        for k in 0..d {
            out[k] += w * g[k];
        }
        for k in 0..d {
            u[k] = -u[k];
        }
        atom.gradient(&u, &mut g);
        for k in 0..d {
            out[k] -= w * g[k];
        }
    }
}

const TENSOR_BUDGET: usize = 2_000_000;

/// `⟨m⁻ⁱ, F⟩` at each of `points` (flat, `d` per point), up to an additive
/// constant in `x` (terms not involving agent `i` are dropped; they shift
/// the per-agent value function but not its gradient, feedback, or any
/// exported value, which are all recomputed from the original cost).
pub(crate) fn conditional_cost(
    cost: &CostSpec,
    agent: usize,
    slice: &[AgentMarginal],
    points: &[f64],
) -> Result<Vec<f64>, DistributedError> {
    let d = cost.d;
    let n = cost.n as f64;
    let npts = points.len() / d;
    let mut out = vec![0.0; npts];
    match &cost.kind {
        CostKind::Zero => {}
        CostKind::Separable { per_agent } => {
            for p in 0..npts {
                out[p] = per_agent[agent].value(&points[p * d..(p + 1) * d]) / n;
            }
        }
        CostKind::PairwiseGraph { own, pair, matrix } => {
            let (mix_pts, mix_w) = mixture(slice, agent, |j| matrix.get(agent, j));
            for p in 0..npts {
                let x = &points[p * d..(p + 1) * d];
                out[p] = (own.value(x) + pair_integral(pair, x, &mix_pts, &mix_w)) / n;
            }
        }
        CostKind::MeanField { linear, pair } => {
            let (mix_pts, mix_w) = mixture(slice, agent, |_| 1.0 / n);
            for p in 0..npts {
                let x = &points[p * d..(p + 1) * d];
                out[p] = (linear.value(x) + pair_integral(pair, x, &mix_pts, &mix_w)) / n;
            }
        }
        CostKind::Custom(_) => {
            tensor_conditional(cost, agent, slice, points, &mut out, false)?;
        }
    }
    Ok(out)
}

/// `⟨m⁻ⁱ, D_i F⟩` at each point (flat output, `d` per point).
pub(crate) fn conditional_grad(
    cost: &CostSpec,
    agent: usize,
    slice: &[AgentMarginal],
    points: &[f64],
) -> Result<Vec<f64>, DistributedError> {
    let d = cost.d;
    let n = cost.n as f64;
    let npts = points.len() / d;
    let mut out = vec![0.0; npts * d];
    match &cost.kind {
        CostKind::Zero => {}
        CostKind::Separable { per_agent } => {
            let mut g = vec![0.0; d];
            for p in 0..npts {
                per_agent[agent].gradient(&points[p * d..(p + 1) * d], &mut g);
                for k in 0..d {
                    out[p * d + k] = g[k] / n;
                }
            }
        }
        CostKind::PairwiseGraph { own, pair, matrix } => {
            let (mix_pts, mix_w) = mixture(slice, agent, |j| matrix.get(agent, j));
            let mut g_own = vec![0.0; d];
            let mut g_pair = vec![0.0; d];
            for p in 0..npts {
                let x = &points[p * d..(p + 1) * d];
                own.gradient(x, &mut g_own);
                pair_gradient(pair, x, &mix_pts, &mix_w, &mut g_pair);
                for k in 0..d {
                    out[p * d + k] = (g_own[k] + g_pair[k]) / n;
                }
            }
        }
        CostKind::MeanField { linear, pair } => {
            let (mix_pts, mix_w) = mixture(slice, agent, |_| 1.0 / n);
            let mut g_own = vec![0.0; d];
            let mut g_pair = vec![0.0; d];
            for p in 0..npts {
                let x = &points[p * d..(p + 1) * d];
                linear.gradient(x, &mut g_own);
                pair_gradient(pair, x, &mix_pts, &mix_w, &mut g_pair);
                for k in 0..d {
                    out[p * d + k] = (g_own[k] + g_pair[k]) / n;
                }
            }
        }
        CostKind::Custom(_) => {
            tensor_conditional(cost, agent, slice, points, &mut out, true)?;
        }
    }
    Ok(out)
}

/// `⟨∏ m, F⟩` — full product expectation of the cost against the flow slice.
pub(crate) fn product_expectation(
    cost: &CostSpec,
    slice: &[AgentMarginal],
) -> Result<f64, DistributedError> {
    let d = cost.d;
    let n = cost.n as f64;
    match &cost.kind {
        CostKind::Zero => Ok(0.0),
        CostKind::Separable { per_agent } => {
            let mut acc = 0.0;
            for (i, m) in slice.iter().enumerate() {
                acc += m.expectation(|x| per_agent[i].value(x)) / n;
            }
            Ok(acc)
        }
        CostKind::PairwiseGraph { own, pair, matrix } => {
            let mut acc = 0.0;
            for (i, m) in slice.iter().enumerate() {
                acc += m.expectation(|x| own.value(x)) / n;
                // ordered pair sum Σ_j J_ij ⟨mᵢ ⊗ mⱼ, G₂(x-y)⟩
                let (mix_pts, mix_w) = mixture(slice, i, |j| matrix.get(i, j));
                let mut u = vec![0.0; d];
                acc += m.expectation(|x| {
                    let mut s = 0.0;
                    for (idx, w) in mix_w.iter().enumerate() {
                        for k in 0..d {
                            u[k] = x[k] - mix_pts[idx * d + k];
                        }
                        s += w * pair.value(&u);
                    }
                    s
                }) / n;
            }
            Ok(acc)
        }
        CostKind::MeanField { linear, pair } => {
            let mut acc = 0.0;
            let mut zero = vec![0.0; d];
            for (i, m) in slice.iter().enumerate() {
                acc += m.expectation(|x| linear.value(x)) / n;
                let (mix_pts, mix_w) = mixture(slice, i, |_| 1.0 / n);
                let mut u = vec![0.0; d];
                acc += m.expectation(|x| {
                    let mut s = 0.0;
                    for (idx, w) in mix_w.iter().enumerate() {
                        for k in 0..d {
                            u[k] = x[k] - mix_pts[idx * d + k];
                        }
                        s += w * pair.value(&u);
                    }
                    s
                }) / n;
            }
            // diagonal of the empirical double sum
            zero.fill(0.0);
            acc += pair.value(&zero) / n;
            Ok(acc)
        }
        CostKind::Custom(_) => {
            let combos: usize = slice
                .iter()
                .map(|m| m.weights.iter().filter(|w| **w > 0.0).count())
                .product();
            if combos > TENSOR_BUDGET {
                return Err(DistributedError::TensorBudget { need: combos, cap: TENSOR_BUDGET });
            }
            let nd = slice.len() * d;
            let mut x = vec![0.0; nd];
            let mut acc = 0.0;
            tensor_recurse(cost, slice, 0, 1.0, &mut x, &mut |w, x| acc += w * cost.value(x));
            Ok(acc)
        }
    }
}

fn tensor_recurse(
    cost: &CostSpec,
    slice: &[AgentMarginal],
    agent: usize,
    w: f64,
    x: &mut Vec<f64>,
    visit: &mut impl FnMut(f64, &[f64]),
) {
    let d = cost.d;
    if agent == slice.len() {
        visit(w, x);
        return;
    }
    let m = &slice[agent];
    let mut coords = vec![0.0; d];
    for node in 0..m.grid.total {
        let wn = m.weights[node];
        if wn == 0.0 {
            continue;
        }
        m.grid.node_coords(node, &mut coords);
        x[agent * d..(agent + 1) * d].copy_from_slice(&coords);
        tensor_recurse(cost, slice, agent + 1, w * wn, x, visit);
    }
}

/// Brute-force conditional expectation for custom costs: integrate the cost
/// (or its `D_i` block) over the tensor product of the other agents'
/// supports.
fn tensor_conditional(
    cost: &CostSpec,
    agent: usize,
    slice: &[AgentMarginal],
    points: &[f64],
    out: &mut [f64],
    grad: bool,
) -> Result<(), DistributedError> {
    let d = cost.d;
    let npts = points.len() / d;
    let combos: usize = slice
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != agent)
        .map(|(_, m)| m.weights.iter().filter(|w| **w > 0.0).count())
        .product();
    if combos.saturating_mul(npts) > TENSOR_BUDGET {
        return Err(DistributedError::TensorBudget {
            need: combos.saturating_mul(npts),
            cap: TENSOR_BUDGET,
        });
    }
    // enumerate other-agent configurations once, reuse per point
    let mut configs: Vec<(f64, Vec<f64>)> = Vec::new();
    let nd = slice.len() * d;
    {
        let mut x = vec![0.0; nd];
        let others: Vec<usize> = (0..slice.len()).filter(|j| *j != agent).collect();
        fn rec(
            others: &[usize],
            slice: &[AgentMarginal],
            d: usize,
            w: f64,
            x: &mut Vec<f64>,
            configs: &mut Vec<(f64, Vec<f64>)>,
        ) {
            if others.is_empty() {
                configs.push((w, x.clone()));
                return;
            }
            let j = others[0];
            let m = &slice[j];
            let mut coords = vec![0.0; d];
            for node in 0..m.grid.total {
                let wn = m.weights[node];
                if wn == 0.0 {
                    continue;
                }
                m.grid.node_coords(node, &mut coords);
                x[j * d..(j + 1) * d].copy_from_slice(&coords);
                rec(&others[1..], slice, d, w * wn, x, configs);
            }
        }
        rec(&others, slice, d, 1.0, &mut x, &mut configs);
    }
    let mut block = vec![0.0; d];
    for p in 0..npts {
        let xp = &points[p * d..(p + 1) * d];
        if grad {
            for k in 0..d {
                out[p * d + k] = 0.0;
            }
        }
        let mut acc = 0.0;
        for (w, base) in configs.iter_mut() {
            base[agent * d..(agent + 1) * d].copy_from_slice(xp);
            if grad {
                cost.grad_block(agent, base, &mut block);
                for k in 0..d {
                    out[p * d + k] += *w * block[k];
                }
            } else {
                acc += *w * cost.value(base);
            }
        }
        if !grad {
            out[p] = acc;
        }
    }
    Ok(())
}
