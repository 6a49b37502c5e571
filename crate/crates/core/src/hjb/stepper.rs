//! One backward IMEX step: Hamiltonian explicit with upwind-selected
//! gradients, diffusion implicit through factored per-axis tridiagonal
//! solves.

use super::grid::TensorGrid;
use super::{BoundaryMode, GradientMode, HjbError};
use crate::model::{hamiltonian_eval, ControlProblem, LagrangianSpec, ModelError};

/// The Hamiltonian term of a backward equation, already carrying its weights:
/// the PDE solved is `-∂_t v - ½Δv + ham(x, Dv) = source`.
pub(crate) trait HamiltonianField: Sync {
    fn value(&self, x: &[f64], grad: &[f64]) -> Result<f64, ModelError>;
    /// Optimal drift per axis (`a* = -D_p H` blockwise), used for upwind
    /// direction selection and the CFL monitor.
    fn drift(&self, x: &[f64], grad: &[f64], out: &mut [f64]) -> Result<(), ModelError>;
}

/// `(1/n) Σᵢ Hⁱ(xⁱ, n D_i v)` over the full `(ℝᵈ)ⁿ` grid.
pub(crate) struct FullHamiltonian<'p> {
    pub problem: &'p ControlProblem,
}

impl HamiltonianField for FullHamiltonian<'_> {
    fn value(&self, x: &[f64], grad: &[f64]) -> Result<f64, ModelError> {
        let (n, d) = (self.problem.n, self.problem.d);
        let nf = n as f64;
        let mut total = 0.0;
        let mut p = vec![0.0; d];
        for i in 0..n {
            let lagr = self.problem.lagrangian(i);
            if lagr.is_quadratic() {
                let s: f64 = grad[i * d..(i + 1) * d].iter().map(|g| g * g).sum();
                total += 0.5 * nf * s; // (1/n)·|n g|²/2
            } else {
                for k in 0..d {
                    p[k] = nf * grad[i * d + k];
                }
                total += hamiltonian_eval(lagr, &x[i * d..(i + 1) * d], &p)?.value / nf;
            }
        }
        Ok(total)
    }

    fn drift(&self, x: &[f64], grad: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        let (n, d) = (self.problem.n, self.problem.d);
        let nf = n as f64;
        let mut p = vec![0.0; d];
        for i in 0..n {
            let lagr = self.problem.lagrangian(i);
            if lagr.is_quadratic() {
                for k in 0..d {
                    out[i * d + k] = -nf * grad[i * d + k];
                }
            } else {
                for k in 0..d {
                    p[k] = nf * grad[i * d + k];
                }
                let eval = hamiltonian_eval(lagr, &x[i * d..(i + 1) * d], &p)?;
                out[i * d..(i + 1) * d].copy_from_slice(&eval.minimizer);
            }
        }
        Ok(())
    }
}

/// `weight · H(x, scale · Dv)` on a single agent's `ℝᵈ` grid — the scalar
/// equation each agent solves inside the distributed fixed point.
pub(crate) struct ScaledHamiltonian<'l> {
    pub lagrangian: &'l LagrangianSpec,
    pub weight: f64,
    pub costate_scale: f64,
}

impl HamiltonianField for ScaledHamiltonian<'_> {
    fn value(&self, x: &[f64], grad: &[f64]) -> Result<f64, ModelError> {
        if self.lagrangian.is_quadratic() {
            let s: f64 = grad.iter().map(|g| g * g).sum();
            return Ok(self.weight * 0.5 * self.costate_scale * self.costate_scale * s);
        }
        let p: Vec<f64> = grad.iter().map(|g| self.costate_scale * g).collect();
        Ok(self.weight * hamiltonian_eval(self.lagrangian, x, &p)?.value)
    }

    fn drift(&self, x: &[f64], grad: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        if self.lagrangian.is_quadratic() {
            for (o, g) in out.iter_mut().zip(grad) {
                *o = -self.costate_scale * g;
            }
            return Ok(());
        }
        let p: Vec<f64> = grad.iter().map(|g| self.costate_scale * g).collect();
        let eval = hamiltonian_eval(self.lagrangian, x, &p)?;
        out.copy_from_slice(&eval.minimizer);
        Ok(())
    }
}

pub(crate) struct Stepper<'g> {
    pub grid: &'g TensorGrid,
    pub boundary: BoundaryMode,
    pub gradient: GradientMode,
    pub dt: f64,
    pub residual_tol: f64,
}

pub(crate) struct StepReport {
    /// Worst `|a*| dt / h` seen over nodes and axes.
    pub worst_cfl: f64,
}

impl Stepper<'_> {
    /// March one step backward: `v_next` at `t_{k+1}` to `v_out` at `t_k`.
    /// `source` (the right-hand side `F`) is sampled at `t_{k+1}` nodes.
    pub fn backward_step(
        &self,
        ham: &dyn HamiltonianField,
        source: Option<&[f64]>,
        v_next: &[f64],
        v_out: &mut [f64],
    ) -> Result<StepReport, HjbError> {
        let grid = self.grid;
        let nd = grid.ndim();
        let mut x = vec![0.0; nd];
        let mut g_central = vec![0.0; nd];
        let mut g_upwind = vec![0.0; nd];
        let mut drift = vec![0.0; nd];
        let mut idx = vec![0usize; nd];
        let mut worst_cfl = 0.0f64;

        for flat in 0..grid.total {
            grid.decompose(flat, &mut idx);
            for a in 0..nd {
                x[a] = grid.coord(a, idx[a]);
            }
            for a in 0..nd {
                g_central[a] = self.first_difference(v_next, flat, idx[a], a, Side::Central);
            }
            ham.drift(&x, &g_central, &mut drift).map_err(HjbError::Hamiltonian)?;
            for a in 0..nd {
                let side = if drift[a] >= 0.0 { Side::Forward } else { Side::Backward };
                g_upwind[a] = match self.gradient {
                    GradientMode::Central => g_central[a],
                    GradientMode::Upwind1 => {
                        self.one_sided(v_next, flat, idx[a], a, side, false)
                    }
                    GradientMode::Upwind2 => self.one_sided(v_next, flat, idx[a], a, side, true),
                };
                let speed = drift[a].abs();
                worst_cfl = worst_cfl.max(speed * self.dt / grid.h[a]);
            }
            let hval = ham.value(&x, &g_upwind).map_err(HjbError::Hamiltonian)?;
            let src = source.map_or(0.0, |s| s[flat]);
            v_out[flat] = v_next[flat] + self.dt * (src - hval);
        }

        // implicit diffusion: (I - (dt/2) D2_axis) factored sweeps
        let rhs_check = if self.residual_tol.is_finite() { Some(v_out.to_vec()) } else { None };
        let mut line_rhs = Vec::new();
        let mut line_sol = Vec::new();
        let mut scratch = Vec::new();
        for axis in 0..nd {
            self.diffuse_axis(axis, v_out, &mut line_rhs, &mut line_sol, &mut scratch);
        }
        if let Some(rhs) = rhs_check {
            self.verify_factored_residual(&rhs, v_out)?;
        }
        if !v_out.iter().all(|v| v.is_finite()) {
            return Err(HjbError::NonFiniteValues);
        }
        Ok(StepReport { worst_cfl })
    }

    #[inline]
    fn first_difference(&self, v: &[f64], flat: usize, ai: usize, axis: usize, side: Side) -> f64 {
        let s = self.grid.strides[axis];
        let m = self.grid.dims[axis];
        let h = self.grid.h[axis];
        match side {
            Side::Central => {
                if ai == 0 {
                    (v[flat + s] - v[flat]) / h
                } else if ai + 1 == m {
                    (v[flat] - v[flat - s]) / h
                } else {
                    (v[flat + s] - v[flat - s]) / (2.0 * h)
                }
            }
            _ => unreachable!(),
        }
    }

    /// One-sided difference in the requested direction; `second_order`
    /// selects the three-point biased stencil where two nodes exist.
    #[inline]
    fn one_sided(
        &self,
        v: &[f64],
        flat: usize,
        ai: usize,
        axis: usize,
        side: Side,
        second_order: bool,
    ) -> f64 {
        let s = self.grid.strides[axis];
        let m = self.grid.dims[axis];
        let h = self.grid.h[axis];
        match side {
            Side::Forward => {
                if ai + 1 >= m {
                    // fall back toward the interior at the top edge
                    (v[flat] - v[flat - s]) / h
                } else if second_order && ai + 2 < m {
                    (-3.0 * v[flat] + 4.0 * v[flat + s] - v[flat + 2 * s]) / (2.0 * h)
                } else {
                    (v[flat + s] - v[flat]) / h
                }
            }
            Side::Backward => {
                if ai == 0 {
                    (v[flat + s] - v[flat]) / h
                } else if second_order && ai >= 2 {
                    (3.0 * v[flat] - 4.0 * v[flat - s] + v[flat - 2 * s]) / (2.0 * h)
                } else {
                    (v[flat] - v[flat - s]) / h
                }
            }
            Side::Central => unreachable!(),
        }
    }

    /// Thomas solves of `(I - (dt/2) ∂²_axis) v = rhs` along every grid line.
    fn diffuse_axis(
        &self,
        axis: usize,
        v: &mut [f64],
        rhs: &mut Vec<f64>,
        sol: &mut Vec<f64>,
        scratch: &mut Vec<f64>,
    ) {
        let grid = self.grid;
        let m = grid.dims[axis];
        let s = grid.strides[axis];
        let c = self.dt / (2.0 * grid.h[axis] * grid.h[axis]);
        rhs.resize(m, 0.0);
        sol.resize(m, 0.0);
        scratch.resize(m, 0.0);
        // enumerate line starts: flat indices whose axis component is zero
        let n_lines = grid.total / m;
        for line in 0..n_lines {
            // map line rank to a flat start index by skipping the axis stride
            let mut rem = line;
            let mut start = 0;
            for a in (0..grid.ndim()).rev() {
                if a == axis {
                    continue;
                }
                let da = grid.dims[a];
                start += (rem % da) * grid.strides[a];
                rem /= da;
            }
            for i in 0..m {
                rhs[i] = v[start + i * s];
            }
            self.thomas(c, rhs, sol, scratch);
            for i in 0..m {
                v[start + i * s] = sol[i];
            }
        }
    }

    /// Tridiagonal solve for the implicit heat factor with the configured
    /// boundary closure.
    fn thomas(&self, c: f64, rhs: &[f64], sol: &mut [f64], cp: &mut [f64]) {
        let m = rhs.len();
        // rows: boundary rows depend on the closure; interior rows are
        // (-c, 1+2c, -c).
        let (b0, u0) = match self.boundary {
            BoundaryMode::LinearExtrapolation => (1.0, 0.0),
            BoundaryMode::OneSidedDifferences => (1.0 + 2.0 * c, -2.0 * c),
        };
        // forward elimination
        cp[0] = u0 / b0;
        sol[0] = rhs[0] / b0;
        for i in 1..m {
            let (lower, diag, upper) = if i + 1 == m {
                match self.boundary {
                    BoundaryMode::LinearExtrapolation => (0.0, 1.0, 0.0),
                    BoundaryMode::OneSidedDifferences => (-2.0 * c, 1.0 + 2.0 * c, 0.0),
                }
            } else {
                (-c, 1.0 + 2.0 * c, -c)
            };
            let w = diag - lower * cp[i - 1];
            cp[i] = upper / w;
            sol[i] = (rhs[i] - lower * sol[i - 1]) / w;
        }
        for i in (0..m - 1).rev() {
            sol[i] -= cp[i] * sol[i + 1];
        }
    }

    /// Apply the factored implicit operator to the solution and compare with
    /// the stored right-hand side.
    fn verify_factored_residual(&self, rhs: &[f64], v: &[f64]) -> Result<(), HjbError> {
        let grid = self.grid;
        let nd = grid.ndim();
        let mut w = v.to_vec();
        let mut out = vec![0.0; grid.total];
        for axis in (0..nd).rev() {
            let m = grid.dims[axis];
            let s = grid.strides[axis];
            let c = self.dt / (2.0 * grid.h[axis] * grid.h[axis]);
            for flat in 0..grid.total {
                let ai = grid.axis_index(flat, axis);
                let interior = ai > 0 && ai + 1 < m;
                out[flat] = if interior {
                    w[flat] - c * (w[flat + s] - 2.0 * w[flat] + w[flat - s])
                } else {
                    match self.boundary {
                        BoundaryMode::LinearExtrapolation => w[flat],
                        BoundaryMode::OneSidedDifferences => {
                            let inner = if ai == 0 { flat + s } else { flat - s };
                            (1.0 + 2.0 * c) * w[flat] - 2.0 * c * w[inner]
                        }
                    }
                };
            }
            std::mem::swap(&mut w, &mut out);
        }
        let scale = rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let worst = rhs
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if worst > self.residual_tol * scale {
            return Err(HjbError::ResidualTooLarge { residual: worst, tol: self.residual_tol * scale });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Forward,
    Backward,
    Central,
}
