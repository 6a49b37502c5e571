//! Picard-regression solver for the McKean-Vlasov forward-backward system of
//! the distributed maximum principle: simulate forward under the current
//! control guess, regress the costate backward on per-agent polynomial
//! bases, update the control through the Hamiltonian, damp, repeat.
//!
//! Conditional couplings `⟨m⁻ⁱ, D_i·⟩` are evaluated by cross-population
//! averaging against histogram-compressed marginals of the other agents'
//! particles. One-dimensional agents only.

use super::{effective, AgentMarginal, DistributedError};
use crate::hjb::grid::{deposit_points, TensorGrid};
use crate::model::{hamiltonian_eval, solve_dense, ControlProblem, InitialLaw};
use crate::sde::rng::CounterRng;
use serde::Serialize;
use std::sync::Arc;

#[derive(Clone, Debug)]
pub struct FbsdeConfig {
    pub particles: usize,
    pub time_steps: usize,
    /// Polynomial degree of the per-agent regression basis.
    pub basis_degree: usize,
    pub picard_iters: usize,
    /// L²-in-(time, particles) tolerance on the control-field update.
    pub tol: f64,
    pub damping: f64,
    pub seed: u64,
    /// Allow non-convex problems (the maximum principle is then only a
    /// necessary condition and the run is diagnostic).
    pub diagnostic_only: bool,
    /// Bins for histogram compression of cross-population averages.
    pub histogram_bins: usize,
    pub domain_pad: f64,
}

impl Default for FbsdeConfig {
    fn default() -> Self {
        Self {
            particles: 4000,
            time_steps: 100,
            basis_degree: 3,
            picard_iters: 40,
            tol: 2e-3,
            damping: 0.5,
            seed: 7,
            diagnostic_only: false,
            histogram_bins: 257,
            domain_pad: 6.0,
        }
    }
}

/// Costate and martingale-integrand fits per agent and time node, stored as
/// raw monomial coefficients so fields from different iterations combine
/// linearly.
pub struct FbsdeSolution {
    pub problem: Arc<ControlProblem>,
    pub times: Vec<f64>,
    /// `y_coeffs[agent][time][k]`: `Y(t,x) = Σ_k c_k x^k`
    pub y_coeffs: Vec<Vec<Vec<f64>>>,
    pub z_coeffs: Vec<Vec<Vec<f64>>>,
    /// Per-iteration L² change of the control field.
    pub picard_residuals: Vec<f64>,
    /// RMS misfit of the terminal costate regression against the exact
    /// conditional terminal gradient.
    pub terminal_fit_rms: f64,
    pub iterations: usize,
}

impl FbsdeSolution {
    pub fn y_at(&self, agent: usize, t_idx: usize, x: f64) -> f64 {
        horner(&self.y_coeffs[agent][t_idx], x)
    }

    pub fn z_at(&self, agent: usize, t_idx: usize, x: f64) -> f64 {
        horner(&self.z_coeffs[agent][t_idx], x)
    }

    /// The feedback control `α = -D_p H(x, nY(t,x))`.
    pub fn control_at(&self, agent: usize, t_idx: usize, x: f64) -> f64 {
        let n = self.problem.n as f64;
        let y = self.y_at(agent, t_idx, x);
        let lagr = self.problem.lagrangian(agent);
        if lagr.is_quadratic() {
            -n * y
        } else {
            hamiltonian_eval(lagr, &[x], &[n * y]).expect("fbsde control").minimizer[0]
        }
    }

    pub fn residual_history_json(&self) -> String {
        #[derive(Serialize)]
        struct Hist<'a> {
            iterations: usize,
            residuals: &'a [f64],
            terminal_fit_rms: f64,
        }
        serde_json::to_string_pretty(&Hist {
            iterations: self.iterations,
            residuals: &self.picard_residuals,
            terminal_fit_rms: self.terminal_fit_rms,
        })
        .expect("history serializes")
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Least squares of `targets` on the degree-`deg` polynomial basis,
/// standardized internally, reported as raw monomial coefficients. Degenerate
/// clouds (all points equal) collapse to a constant fit.
fn polyfit(
    xs: &[f64],
    targets: &[f64],
    deg: usize,
    t_idx: usize,
) -> Result<Vec<f64>, DistributedError> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-9 {
        let c = targets.iter().sum::<f64>() / n;
        let mut out = vec![0.0; deg + 1];
        out[0] = c;
        return Ok(out);
    }
    let m = deg + 1;
    // normal equations on the standardized basis u^k, u = (x - mean)/sd
    let mut ata = vec![0.0; m * m];
    let mut atb = vec![0.0; m];
    let mut pows = vec![0.0; 2 * m];
    for (x, y) in xs.iter().zip(targets) {
        let u = (x - mean) / sd;
        pows[0] = 1.0;
        for k in 1..2 * m {
            pows[k] = pows[k - 1] * u;
        }
        for r in 0..m {
            for c in 0..m {
                ata[r * m + c] += pows[r + c];
            }
            atb[r] += pows[r] * y;
        }
    }
    // ridge whisker keeps near-degenerate clouds solvable
    for r in 0..m {
        ata[r * m + r] += 1e-10 * n;
    }
    let coeffs_std =
        solve_dense(&ata, &atb, m).ok_or(DistributedError::RegressionIllConditioned(t_idx))?;
    // convert Σ a_k u^k with u = (x-mean)/sd to raw monomials by binomial
    // expansion
    let mut raw = vec![0.0; m];
    for (k, a) in coeffs_std.iter().enumerate() {
        // a * (x - mean)^k / sd^k
        let scale = a / sd.powi(k as i32);
        let mut binom = 1.0f64;
        for j in 0..=k {
            // C(k, j) x^j (-mean)^(k-j)
            raw[j] += scale * binom * (-mean).powi((k - j) as i32);
            binom = binom * (k - j) as f64 / (j + 1) as f64;
        }
    }
    Ok(raw)
}

/// Histogram compression of every agent's particle cloud at one time node.
fn compress_populations(
    positions: &[Vec<f64>],
    grids: &[TensorGrid],
) -> Vec<AgentMarginal> {
    positions
        .iter()
        .zip(grids)
        .map(|(pop, grid)| {
            let mut w = vec![0.0; grid.total];
            deposit_points(
                grid,
                pop.iter().map(|x| (1.0 / pop.len() as f64, vec![*x])),
                &mut w,
            );
            AgentMarginal { grid: grid.clone(), weights: w }
        })
        .collect()
}

/// Solve the distributed maximum-principle FBSDE by damped Picard iteration
/// on the control field.
pub fn solve_mkv_fbsde(
    problem: &Arc<ControlProblem>,
    m0: &InitialLaw,
    cfg: &FbsdeConfig,
) -> Result<FbsdeSolution, DistributedError> {
    if problem.d != 1 {
        return Err(DistributedError::Unsupported(
            "FBSDE regression basis is one-dimensional".into(),
        ));
    }
    if !problem.convex_flag && !cfg.diagnostic_only {
        return Err(DistributedError::NotConvex);
    }
    let n = problem.n;
    let steps = cfg.time_steps;
    let npart = cfg.particles;
    let dt = problem.horizon / steps as f64;
    let sqrt_dt = dt.sqrt();
    let rng = CounterRng::new(cfg.seed);
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let deg = cfg.basis_degree;

    let grids: Vec<TensorGrid> = (0..n)
        .map(|i| {
            let m = &m0.marginals()[i];
            let mean = m.mean()[0];
            let r = cfg.domain_pad * (problem.horizon + m.max_variance()).sqrt();
            TensorGrid::new(&[(mean - r, mean + r)], cfg.histogram_bins)
        })
        .collect();

    // control field as Y-coefficient tables; empty until the first fit
    let mut y_coeffs: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; deg + 1]; steps + 1]; n];
    let mut z_coeffs: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; deg + 1]; steps + 1]; n];
    let mut residuals = Vec::new();
    let mut terminal_fit_rms = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    let f_zero = problem.running_cost.is_zero();

    for iter in 0..cfg.picard_iters {
        iterations = iter + 1;
        // 1. forward pass under the current control, same increments each
        // iteration
        let mut positions: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(steps + 1); n];
        {
            let mut current: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..npart)
                        .map(|p| {
                            let mut x = [0.0];
                            m0.marginals()[i].sample_into(
                                |draw| rng.uniform(p as u64, i as u64, u64::MAX, draw),
                                |draw| rng.normal(p as u64, i as u64, u64::MAX, draw),
                                &mut x,
                            );
                            x[0]
                        })
                        .collect()
                })
                .collect();
            for i in 0..n {
                positions[i].push(current[i].clone());
            }
            for k in 0..steps {
                for (i, pop) in current.iter_mut().enumerate() {
                    let lagr = problem.lagrangian(i);
                    let quadratic = lagr.is_quadratic();
                    for (p, x) in pop.iter_mut().enumerate() {
                        let y = horner(&y_coeffs[i][k], *x);
                        let a = if quadratic {
                            -(n as f64) * y
                        } else {
                            hamiltonian_eval(lagr, &[*x], &[n as f64 * y])?.minimizer[0]
                        };
                        let w = rng.normal(p as u64, i as u64, k as u64, 0);
                        *x += dt * a + sqrt_dt * w;
                    }
                }
                for i in 0..n {
                    positions[i].push(current[i].clone());
                }
            }
        }

        // 2. terminal costate: exact conditional gradient of G against the
        // compressed terminal populations
        let terminal_clouds: Vec<Vec<f64>> =
            (0..n).map(|i| positions[i][steps].clone()).collect();
        let terminal_slice = compress_populations(&terminal_clouds, &grids);
        let mut new_y: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); steps + 1]; n];
        let mut new_z: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; deg + 1]; steps + 1]; n];
        let mut y_realized: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut fit_rms = 0.0;
        for i in 0..n {
            let xs = &positions[i][steps];
            let g_vals = effective::conditional_grad(
                &problem.terminal_cost,
                i,
                &terminal_slice,
                xs,
            )?;
            let coeffs = polyfit(xs, &g_vals, deg, steps)?;
            let fitted: Vec<f64> = xs.iter().map(|x| horner(&coeffs, *x)).collect();
            fit_rms += fitted
                .iter()
                .zip(&g_vals)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / npart as f64;
            new_y[i][steps] = coeffs;
            y_realized.push(fitted);
        }
        terminal_fit_rms = (fit_rms / n as f64).sqrt();

        // 3. backward regression sweep
        for k in (0..steps).rev() {
            // flow slice for the running-cost coupling
            let slice = if f_zero {
                None
            } else {
                let clouds: Vec<Vec<f64>> = (0..n).map(|i| positions[i][k].clone()).collect();
                Some(compress_populations(&clouds, &grids))
            };
            for i in 0..n {
                let xs_now = &positions[i][k];
                let xs_next = &positions[i][k + 1];
                let lagr = problem.lagrangian(i);
                let quadratic = lagr.is_quadratic();
                // driver f = (1/n) D_x L(X, α) + ⟨m⁻ⁱ, D_i F⟩
                let coupling = match &slice {
                    Some(s) => {
                        effective::conditional_grad(&problem.running_cost, i, s, xs_now)?
                    }
                    None => vec![0.0; npart],
                };
                let mut targets_y = vec![0.0; npart];
                let mut targets_z = vec![0.0; npart];
                for p in 0..npart {
                    let y_next = y_realized[i][p];
                    let mut driver = coupling[p];
                    if !quadratic {
                        let y_now = horner(&y_coeffs[i][k], xs_now[p]);
                        let a = hamiltonian_eval(lagr, &[xs_now[p]], &[n as f64 * y_now])?
                            .minimizer[0];
                        let mut gx = [0.0];
                        lagr.grad_x(&[xs_now[p]], &[a], &mut gx);
                        driver += gx[0] / n as f64;
                    }
                    targets_y[p] = y_next + dt * driver;
                    let dw = xs_next[p]
                        - xs_now[p]
                        - dt * {
                            let y_now = horner(&y_coeffs[i][k], xs_now[p]);
                            if quadratic {
                                -(n as f64) * y_now
                            } else {
                                hamiltonian_eval(lagr, &[xs_now[p]], &[n as f64 * y_now])?
                                    .minimizer[0]
                            }
                        };
                    targets_z[p] = y_next * dw / dt;
                }
                let coeffs = polyfit(xs_now, &targets_y, deg, k)?;
                y_realized[i] = xs_now.iter().map(|x| horner(&coeffs, *x)).collect();
                new_y[i][k] = coeffs;
                new_z[i][k] = polyfit(xs_now, &targets_z, deg, k)?;
            }
        }
        // carry terminal Z as the last fitted level
        for i in 0..n {
            new_z[i][steps] = new_z[i][steps.saturating_sub(1)].clone();
        }

        // 4. control-field residual and damped update
        let mut res_sq = 0.0;
        for i in 0..n {
            let lagr = problem.lagrangian(i);
            let quadratic = lagr.is_quadratic();
            for k in 0..=steps {
                let xs = &positions[i][k];
                let mut acc = 0.0;
                for &x in xs.iter() {
                    let a_old = {
                        let y = horner(&y_coeffs[i][k], x);
                        if quadratic {
                            -(n as f64) * y
                        } else {
                            hamiltonian_eval(lagr, &[x], &[n as f64 * y])?.minimizer[0]
                        }
                    };
                    let a_new = {
                        let y = horner(&new_y[i][k], x);
                        if quadratic {
                            -(n as f64) * y
                        } else {
                            hamiltonian_eval(lagr, &[x], &[n as f64 * y])?.minimizer[0]
                        }
                    };
                    acc += (a_new - a_old) * (a_new - a_old);
                }
                let weight = if k == 0 || k == steps { 0.5 } else { 1.0 };
                res_sq += weight * dt * acc / npart as f64;
            }
        }
        let residual = (res_sq / n as f64).sqrt();
        if !residual.is_finite() || residual > 1e8 {
            return Err(DistributedError::PicardDiverged(iter));
        }
        residuals.push(residual);

        let lambda = cfg.damping;
        for i in 0..n {
            for k in 0..=steps {
                for c in 0..=deg {
                    y_coeffs[i][k][c] =
                        (1.0 - lambda) * y_coeffs[i][k][c] + lambda * new_y[i][k][c];
                    z_coeffs[i][k][c] =
                        (1.0 - lambda) * z_coeffs[i][k][c] + lambda * new_z[i][k][c];
                }
            }
        }
        if residual <= cfg.tol {
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
    Ok(FbsdeSolution {
        problem: Arc::clone(problem),
        times,
        y_coeffs,
        z_coeffs,
        picard_residuals: residuals,
        terminal_fit_rms,
        iterations,
    })
}
