//! Registry of closed-form convex scalar atoms used to assemble cost
//! functions. Each atom maps `ℝᵈ → ℝ` and carries symbolic first and second
//! derivatives plus the exact sup of its Hessian operator norm, so bound
//! calculations never rely on numerical differentiation.

use serde::{Deserialize, Serialize};

/// A convex function `ℝᵈ → ℝ` from the closed-form registry.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "atom", rename_all = "snake_case")]
pub enum ScalarAtom {
    Zero,
    /// `c · u`
    Linear { coeffs: Vec<f64> },
    /// `(coeff / 2) |u|²`, `coeff ≥ 0`
    Quadratic { coeff: f64 },
    /// `scale · √(1 + |u|²)`, `scale ≥ 0`
    SqrtOnePlusSq { scale: f64 },
    /// `scale · Σ_k log cosh(u_k)`, `scale ≥ 0`
    LogCosh { scale: f64 },
}

impl ScalarAtom {
    pub fn value(&self, u: &[f64]) -> f64 {
        match self {
            ScalarAtom::Zero => 0.0,
            ScalarAtom::Linear { coeffs } => {
                coeffs.iter().zip(u).map(|(c, x)| c * x).sum()
            }
            ScalarAtom::Quadratic { coeff } => {
                0.5 * coeff * u.iter().map(|x| x * x).sum::<f64>()
            }
            ScalarAtom::SqrtOnePlusSq { scale } => {
                scale * (1.0 + u.iter().map(|x| x * x).sum::<f64>()).sqrt()
            }
            ScalarAtom::LogCosh { scale } => {
                // log cosh via the overflow-safe form |x| + log(1 + e^{-2|x|}) - log 2
                scale
                    * u.iter()
                        .map(|x| x.abs() + (-2.0 * x.abs()).exp().ln_1p() - std::f64::consts::LN_2)
                        .sum::<f64>()
            }
        }
    }

    pub fn gradient(&self, u: &[f64], out: &mut [f64]) {
        match self {
            ScalarAtom::Zero => out.fill(0.0),
            ScalarAtom::Linear { coeffs } => out.copy_from_slice(coeffs),
            ScalarAtom::Quadratic { coeff } => {
                for (o, x) in out.iter_mut().zip(u) {
                    *o = coeff * x;
                }
            }
            ScalarAtom::SqrtOnePlusSq { scale } => {
                let r = (1.0 + u.iter().map(|x| x * x).sum::<f64>()).sqrt();
                for (o, x) in out.iter_mut().zip(u) {
                    *o = scale * x / r;
                }
            }
            ScalarAtom::LogCosh { scale } => {
                for (o, x) in out.iter_mut().zip(u) {
                    *o = scale * x.tanh();
                }
            }
        }
    }

    /// Hessian as a dense row-major `d × d` block.
    pub fn hessian(&self, u: &[f64], out: &mut [f64]) {
        let d = u.len();
        out.fill(0.0);
        match self {
            ScalarAtom::Zero | ScalarAtom::Linear { .. } => {}
            ScalarAtom::Quadratic { coeff } => {
                for k in 0..d {
                    out[k * d + k] = *coeff;
                }
            }
            ScalarAtom::SqrtOnePlusSq { scale } => {
                let s = 1.0 + u.iter().map(|x| x * x).sum::<f64>();
                let r = s.sqrt();
                for k in 0..d {
                    for l in 0..d {
                        let kron = if k == l { 1.0 } else { 0.0 };
                        out[k * d + l] = scale * (kron / r - u[k] * u[l] / (r * s));
                    }
                }
            }
            ScalarAtom::LogCosh { scale } => {
                for k in 0..d {
                    let c = u[k].cosh();
                    out[k * d + k] = scale / (c * c);
                }
            }
        }
    }

    /// Exact `sup_u |D²·|_op`. For every registry atom the sup is attained at
    /// the origin or is constant.
    pub fn hessian_sup(&self) -> f64 {
        match self {
            ScalarAtom::Zero | ScalarAtom::Linear { .. } => 0.0,
            ScalarAtom::Quadratic { coeff } => *coeff,
            ScalarAtom::SqrtOnePlusSq { scale } => *scale,
            ScalarAtom::LogCosh { scale } => *scale,
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            ScalarAtom::Zero | ScalarAtom::Linear { .. } => true,
            ScalarAtom::Quadratic { coeff } => *coeff >= 0.0,
            ScalarAtom::SqrtOnePlusSq { scale } => *scale >= 0.0,
            ScalarAtom::LogCosh { scale } => *scale >= 0.0,
        }
    }
}
