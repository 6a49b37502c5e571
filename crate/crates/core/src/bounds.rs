//! Explicit constants and theorem right-hand sides, computed verbatim from
//! problem metadata and flow statistics.

use crate::metrics::GapEstimate;
use crate::model::{ControlProblem, CrossDerivativeTable, InitialLaw, InteractionMatrix, ModelError};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("missing declared bound: {0}")]
    MissingBound(String),
    #[error("quadratic-cost bound needs all Lagrangians quadratic")]
    NotQuadratic,
    #[error("heterogeneous bound needs a doubly stochastic interaction matrix")]
    NotDoublyStochastic,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Threshold below which the removable singularity of `C_P` is evaluated by
/// its series expansion.
const SINGULARITY_SWITCH: f64 = 1e-8;

/// Every explicit constant for a given problem and initial law.
#[derive(Clone, Debug, Serialize)]
pub struct ConstantsLedger {
    pub n: usize,
    pub horizon: f64,
    /// Strong-convexity constant of the Lagrangians (min over agents).
    pub c_l: f64,
    pub c_f: f64,
    pub c_g: f64,
    pub d_xx_l: f64,
    pub d_xp_h: f64,
    pub d_pp_h: f64,
    /// `C_S = C_G + T (‖D_xx L‖ + C_F)`
    pub c_s: f64,
    /// `C_P = (e^{2Tκ} - 1) / (2κ)`, `κ = ‖D_xp H‖ + ‖D_pp H‖ C_S`
    pub c_p: f64,
    pub c0_poincare: f64,
    pub c0_t2: f64,
    /// `C_P(m) = C_P + c₀ e^{2Tκ}`
    pub c_p_m: f64,
    /// `C_{T₂}(m) = 3 (c₀ ∧ 2T) e^{3Tκ²}`
    pub c_t2_m: f64,
    /// `C_t(m)` evaluated at `t = 0`.
    pub c_t_at_zero: f64,
    pub all_quadratic: bool,
    /// Semi-concavity lower-bound constants (`D²F ≥ -(C/n)I`), zero for
    /// convex data; used only by the smallness check.
    pub c_f_lower: f64,
    pub c_g_lower: f64,
}

impl ConstantsLedger {
    /// `C_t(m) = ‖D_pp H‖ C_P(m) exp((T-t)(1 + 2 C_S ‖D_pp H‖ + 2 ‖D_xp H‖))`
    pub fn c_t(&self, t: f64) -> f64 {
        self.d_pp_h
            * self.c_p_m
            * ((self.horizon - t) * (1.0 + 2.0 * self.c_s * self.d_pp_h + 2.0 * self.d_xp_h)).exp()
    }
}

/// Evaluate the convention constants for a problem and initial law. Particle
/// initial laws must carry declared Poincaré/T₂ constants.
pub fn constants_ledger(
    problem: &ControlProblem,
    m0: &InitialLaw,
) -> Result<ConstantsLedger, BoundsError> {
    let c0_poincare = m0
        .poincare_constant()
        .ok_or_else(|| BoundsError::MissingBound("initial-law Poincaré constant".into()))?;
    let c0_t2 = m0
        .t2_constant()
        .ok_or_else(|| BoundsError::MissingBound("initial-law T₂ constant".into()))?;
    let c_f = problem.running_cost.spectral_bound()?;
    let c_g = problem.terminal_cost.spectral_bound()?;
    let lb = problem.lagrangian_bounds();
    let t = problem.horizon;
    let c_s = c_g + t * (lb.d_xx_l + c_f);
    let kappa = lb.d_xp_h + lb.d_pp_h * c_s;
    let c_p = c_p_formula(t, kappa);
    let growth = (2.0 * t * kappa).exp();
    let c_p_m = c_p + c0_poincare * growth;
    let c_t2_m = 3.0 * c0_t2.min(2.0 * t) * (3.0 * t * kappa * kappa).exp();
    let mut ledger = ConstantsLedger {
        n: problem.n,
        horizon: t,
        c_l: problem.min_convexity_modulus(),
        c_f,
        c_g,
        d_xx_l: lb.d_xx_l,
        d_xp_h: lb.d_xp_h,
        d_pp_h: lb.d_pp_h,
        c_s,
        c_p,
        c0_poincare,
        c0_t2,
        c_p_m,
        c_t2_m,
        c_t_at_zero: 0.0,
        all_quadratic: problem.all_quadratic(),
        c_f_lower: 0.0,
        c_g_lower: 0.0,
    };
    ledger.c_t_at_zero = ledger.c_t(0.0);
    Ok(ledger)
}

fn c_p_formula(t: f64, kappa: f64) -> f64 {
    if kappa.abs() < SINGULARITY_SWITCH {
        // (e^{2Tκ} - 1)/(2κ) = T + T²κ + (2/3)T³κ² + O(κ³)
        t + t * t * kappa + 2.0 / 3.0 * t * t * t * kappa * kappa
    } else {
        (2.0 * t * kappa).exp_m1() / (2.0 * kappa)
    }
}

// ---------------------------------------------------------------------------
// Flow statistics feeding the theorem bounds
// ---------------------------------------------------------------------------

/// The cross-derivative statistics of a run of the conditional-drift process:
/// `Σ_{i<j} E|D_ij G(X̂_T)|²` and the time profile of
/// `Σ_{i<j} E|D_ij F(X̂_s)|²`, or their sup-norm majorants.
#[derive(Clone, Debug, Serialize)]
pub struct FlowCrossStats {
    pub g_cross_sq: f64,
    pub f_profile: CrossProfile,
    pub source: StatsSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StatsSource {
    FlowExpectation,
    SupNorm,
}

#[derive(Clone, Debug, Serialize)]
pub enum CrossProfile {
    Constant { value: f64, t0: f64, t1: f64 },
    PerTime { times: Vec<f64>, values: Vec<f64> },
}

impl CrossProfile {
    /// `∫_t^T (s - t) f(s) ds`
    pub fn integral_linear_weight(&self, t: f64) -> f64 {
        match self {
            CrossProfile::Constant { value, t1, .. } => {
                let tau = (t1 - t).max(0.0);
                value * tau * tau / 2.0
            }
            CrossProfile::PerTime { times, values } => {
                trapezoid(times, values, |s, v| if s >= t { (s - t) * v } else { 0.0 })
            }
        }
    }

    /// `∫_t^T √((s - t + c₀) f(s)) ds`
    pub fn integral_sqrt_weight(&self, t: f64, c0: f64) -> f64 {
        match self {
            CrossProfile::Constant { value, t1, .. } => {
                let tau = (t1 - t).max(0.0);
                // ∫₀^τ √((u + c0) v) du = (2/3)√v [(τ+c0)^{3/2} - c0^{3/2}]
                2.0 / 3.0 * value.sqrt() * ((tau + c0).powf(1.5) - c0.powf(1.5))
            }
            CrossProfile::PerTime { times, values } => trapezoid(times, values, |s, v| {
                if s >= t {
                    ((s - t + c0) * v).sqrt()
                } else {
                    0.0
                }
            }),
        }
    }
}

fn trapezoid(times: &[f64], values: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = 0.0;
    for w in times.windows(2).zip(values.windows(2)) {
        let (ts, vs) = w;
        acc += 0.5 * (ts[1] - ts[0]) * (f(ts[0], vs[0]) + f(ts[1], vs[1]));
    }
    acc
}

impl FlowCrossStats {
    /// Sup-norm majorant: `E|D_ij·|² ≤ ‖D_ij·‖∞²`.
    pub fn from_sup_norms(
        f_table: &CrossDerivativeTable,
        g_table: &CrossDerivativeTable,
        t0: f64,
        horizon: f64,
    ) -> Self {
        FlowCrossStats {
            g_cross_sq: g_table.sum_squares(),
            f_profile: CrossProfile::Constant { value: f_table.sum_squares(), t0, t1: horizon },
            source: StatsSource::SupNorm,
        }
    }

    pub fn from_flow_expectations(g_cross_sq: f64, times: Vec<f64>, f_values: Vec<f64>) -> Self {
        FlowCrossStats {
            g_cross_sq,
            f_profile: CrossProfile::PerTime { times, values: f_values },
            source: StatsSource::FlowExpectation,
        }
    }
}

// ---------------------------------------------------------------------------
// Theorem right-hand sides
// ---------------------------------------------------------------------------

/// General value-gap bound
/// `ℛ(t,m) = n C_t(m) Σ_{i<j} [(T-t) E|D_ij G|² + ∫ (s-t) E|D_ij F|² ds]`.
pub fn gap_bound_general(ledger: &ConstantsLedger, stats: &FlowCrossStats, t: f64) -> f64 {
    let tau = ledger.horizon - t;
    ledger.n as f64
        * ledger.c_t(t)
        * (tau * stats.g_cross_sq + stats.f_profile.integral_linear_weight(t))
}

/// Sharper bound for quadratic Lagrangians:
/// `n (T-t) [√((T-t+c₀) Σ E|D_ij G|²) + ∫ √((s-t+c₀) Σ E|D_ij F|²) ds]²`.
pub fn gap_bound_quadratic(
    ledger: &ConstantsLedger,
    stats: &FlowCrossStats,
    t: f64,
) -> Result<f64, BoundsError> {
    if !ledger.all_quadratic {
        return Err(BoundsError::NotQuadratic);
    }
    let tau = ledger.horizon - t;
    let c0 = ledger.c0_poincare;
    let g_part = ((tau + c0) * stats.g_cross_sq).sqrt();
    let f_part = stats.f_profile.integral_sqrt_weight(t, c0);
    Ok(ledger.n as f64 * tau * (g_part + f_part) * (g_part + f_part))
}

/// Doubly-stochastic graph-interaction bound, `∝ Tr(J²)/n`: the Frobenius
/// estimate `n Σ_{i<j} ‖D_ij G‖² ≤ (4/n) ‖D²G₂‖² Tr(J²)` fed through the
/// general bound.
pub fn gap_bound_hetero(
    j: &InteractionMatrix,
    d2_g2_sup: f64,
    d2_f2_sup: f64,
    ledger: &ConstantsLedger,
    t: f64,
) -> Result<f64, BoundsError> {
    if !j.doubly_stochastic {
        return Err(BoundsError::NotDoublyStochastic);
    }
    let tau = ledger.horizon - t;
    let tr = j.trace_squared();
    let n = ledger.n as f64;
    let g_sum = 4.0 / n * d2_g2_sup * d2_g2_sup * tr; // n Σ_{i<j} ‖D_ij G‖²
    let f_sum = 4.0 / n * d2_f2_sup * d2_f2_sup * tr;
    Ok(ledger.c_t(t) * (tau * g_sum + tau * tau / 2.0 * f_sum))
}

/// Mean-field bound `C(m)/n` with
/// `C(m) = [((T-t)/2)‖D_mm G‖² + ((T-t)²/4)‖D_mm F‖²] ‖D_pp H‖ C_P(m)
///          e^{(T-t)(1 + 2C_S + 2‖D_xp H‖)}`.
pub fn gap_bound_meanfield(
    dmm_g: f64,
    dmm_f: f64,
    ledger: &ConstantsLedger,
    t: f64,
) -> f64 {
    let tau = ledger.horizon - t;
    let c_m = (tau / 2.0 * dmm_g * dmm_g + tau * tau / 4.0 * dmm_f * dmm_f)
        * ledger.d_pp_h
        * ledger.c_p_m
        * (tau * (1.0 + 2.0 * ledger.c_s + 2.0 * ledger.d_xp_h)).exp();
    c_m / ledger.n as f64
}

/// Control-gap constants of the maximum-principle estimate:
/// `C₁ = C_P T³ / (2 C_L²)`, `C₂ = C_P T / C_L²`, bound
/// `C₁ n² Σ‖D_ij F‖² + C₂ n² Σ‖D_ij G‖²`.
pub fn control_gap_bound(
    ledger: &ConstantsLedger,
    f_table: &CrossDerivativeTable,
    g_table: &CrossDerivativeTable,
) -> f64 {
    let t = ledger.horizon;
    let n2 = (ledger.n * ledger.n) as f64;
    let c1 = ledger.c_p * t * t * t / (2.0 * ledger.c_l * ledger.c_l);
    let c2 = ledger.c_p * t / (ledger.c_l * ledger.c_l);
    c1 * n2 * f_table.sum_squares() + c2 * n2 * g_table.sum_squares()
}

/// Small-horizon condition for the non-convex regime:
/// passes iff `½ C_F T² + C_G T < C_L`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SmallnessReport {
    pub passes: bool,
    pub margin: f64,
}

pub fn smallness_check(ledger: &ConstantsLedger) -> SmallnessReport {
    let lhs = 0.5 * ledger.c_f_lower * ledger.horizon * ledger.horizon
        + ledger.c_g_lower * ledger.horizon;
    SmallnessReport { passes: lhs < ledger.c_l, margin: ledger.c_l - lhs }
}

// ---------------------------------------------------------------------------
// Bound reports
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Holds,
    HoldsWithinCi,
    Violated,
}

/// A measured gap against a theorem's right-hand side.
#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub theorem: String,
    pub gap: GapEstimate,
    pub bound: f64,
    pub slack: f64,
    pub verdict: Verdict,
}

impl BoundReport {
    /// `Violated` only when `measured - 3·stderr > bound`.
    pub fn new(theorem: impl Into<String>, gap: GapEstimate, bound: f64) -> Self {
        let verdict = if gap.value <= bound {
            Verdict::Holds
        } else if gap.value - 3.0 * gap.stderr <= bound {
            Verdict::HoldsWithinCi
        } else {
            Verdict::Violated
        };
        BoundReport { theorem: theorem.into(), slack: bound - gap.value, gap, bound, verdict }
    }
}
