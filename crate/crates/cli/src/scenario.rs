//! Scenario schema: a strict TOML description of a problem, an initial law,
//! solver configurations, and an ordered experiment list. Unknown keys are
//! rejected everywhere.

use distctl_core::distributed::DistributedConfig;
use distctl_core::hjb::SchemeConfig;
use distctl_core::model::{
    ControlProblem, CostSpec, InitialLaw, InteractionMatrix, LagrangianSet, LagrangianSpec,
    MarginalSpec, ModelError, ScalarAtom,
};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("schema: {0}")]
    Schema(#[from] toml::de::Error),
    #[error("problem construction: {0}")]
    Model(#[from] ModelError),
    #[error("scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub problem: ProblemSchema,
    pub initial_law: LawSchema,
    #[serde(default)]
    pub solvers: SolverSchema,
    #[serde(default)]
    pub experiments: Vec<Experiment>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSchema {
    pub agents: usize,
    pub dim: usize,
    pub horizon: f64,
    pub lagrangian: LagrangianSchema,
    pub running_cost: CostSchema,
    pub terminal_cost: CostSchema,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LagrangianSchema {
    Quadratic,
    /// `½ aᵀRa`, row-major `dim × dim`.
    Weighted { r: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostSchema {
    Zero,
    /// One atom shared by every agent: `(1/n) Σᵢ f(xⁱ)`.
    Separable { atom: ScalarAtom },
    PairwiseGraph { own: ScalarAtom, pair: ScalarAtom, matrix: MatrixSchema },
    MeanField { linear: ScalarAtom, pair: ScalarAtom },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixSchema {
    /// `A/(n-1)` of the complete graph.
    Complete,
    /// `A/m` of the circulant `m`-regular graph.
    Circulant { degree: usize },
    Rows { rows: Vec<Vec<f64>> },
}

impl MatrixSchema {
    pub fn build(&self, n: usize) -> Result<InteractionMatrix, ModelError> {
        match self {
            MatrixSchema::Complete => InteractionMatrix::complete(n),
            MatrixSchema::Circulant { degree } => InteractionMatrix::regular_circulant(n, *degree),
            MatrixSchema::Rows { rows } => {
                let mut entries = Vec::with_capacity(n * n);
                for row in rows {
                    entries.extend_from_slice(row);
                }
                InteractionMatrix::new(n, entries)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LawSchema {
    Dirac { points: Vec<Vec<f64>> },
    SharedDirac { point: Vec<f64> },
    SharedGaussian { mean: Vec<f64>, variance: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSchema {
    /// Full-information tensor grid.
    pub grid_points: usize,
    pub grid_steps: usize,
    /// Distributed fixed point.
    pub dist_bins: usize,
    pub dist_steps: usize,
    pub picard_damping: f64,
    pub picard_max_iters: usize,
    pub picard_tol: f64,
    /// Monte Carlo cost evaluation.
    pub mc_particles: usize,
    pub mc_steps: usize,
    /// Conditional-drift process particles.
    pub hat_particles: usize,
    /// Agreed numerical slack on deterministic value comparisons.
    pub value_tolerance: f64,
    /// Write the converged marginal flow as a CSV table.
    pub export_flow_csv: bool,
    /// Per-axis grid overrides from the command line (`--grid`), never part
    /// of the file schema.
    #[serde(skip)]
    pub grid_overrides: Vec<GridOverride>,
}

/// A `--grid axis=lo:hi:npts` override.
#[derive(Clone, Debug)]
pub struct GridOverride {
    pub axis: usize,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl std::str::FromStr for GridOverride {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (axis, rest) =
            s.split_once('=').ok_or_else(|| format!("expected axis=lo:hi:npts, got `{s}`"))?;
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected lo:hi:npts after `=`, got `{rest}`"));
        }
        Ok(GridOverride {
            axis: axis.parse().map_err(|e| format!("axis: {e}"))?,
            lo: parts[0].parse().map_err(|e| format!("lo: {e}"))?,
            hi: parts[1].parse().map_err(|e| format!("hi: {e}"))?,
            points: parts[2].parse().map_err(|e| format!("npts: {e}"))?,
        })
    }
}

impl Default for SolverSchema {
    fn default() -> Self {
        Self {
            grid_points: 161,
            grid_steps: 400,
            dist_bins: 513,
            dist_steps: 200,
            picard_damping: 0.5,
            picard_max_iters: 40,
            picard_tol: 1e-4,
            mc_particles: 100_000,
            mc_steps: 200,
            hat_particles: 10_000,
            value_tolerance: 5e-3,
            export_flow_csv: false,
            grid_overrides: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Full vs distributed value with the general theorem bound.
    GapSandwich,
    /// The quadratic-action bound and its dominance by the general one.
    QuadraticBound,
    /// Graph-degree sweep with Gibbs Monte Carlo full values.
    HeteroSweep {
        degrees: Vec<usize>,
        gibbs_samples: usize,
        /// Tolerance of the distributed-equals-limit identity check.
        identity_tol: f64,
    },
    /// Value ladder over agent counts with rate fit.
    MeanFieldRate { ns: Vec<usize>, max_exponent: f64 },
    /// Subset-averaged path chaos against the transport bound.
    ChaosMetric { k: usize, subset_budget: usize },
    /// Maximum-principle solver against the fixed-point solver.
    FbsdeCrossCheck { particles: usize, steps: usize, tol: f64 },
    /// Horizon-smallness condition for the non-convex regime.
    SmallnessCheck { c_f_lower: f64, c_g_lower: f64 },
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.build_problem()?;
        self.build_initial_law()?;
        Ok(())
    }

    pub fn build_problem(&self) -> Result<Arc<ControlProblem>, ScenarioError> {
        let p = &self.problem;
        let lagrangian = match &p.lagrangian {
            LagrangianSchema::Quadratic => LagrangianSpec::quadratic(),
            LagrangianSchema::Weighted { r } => LagrangianSpec::quadratic_weighted(r.clone(), p.dim)?,
        };
        let build_cost = |schema: &CostSchema| -> Result<CostSpec, ScenarioError> {
            Ok(match schema {
                CostSchema::Zero => CostSpec::zero(p.agents, p.dim),
                CostSchema::Separable { atom } => {
                    CostSpec::separable_shared(atom.clone(), p.agents, p.dim)
                }
                CostSchema::PairwiseGraph { own, pair, matrix } => CostSpec::pairwise(
                    own.clone(),
                    pair.clone(),
                    matrix.build(p.agents)?,
                    p.dim,
                ),
                CostSchema::MeanField { linear, pair } => {
                    CostSpec::mean_field(linear.clone(), pair.clone(), p.agents, p.dim)
                }
            })
        };
        Ok(Arc::new(ControlProblem::new(
            p.agents,
            p.dim,
            p.horizon,
            LagrangianSet::Shared(lagrangian),
            build_cost(&p.running_cost)?,
            build_cost(&p.terminal_cost)?,
        )?))
    }

    pub fn build_initial_law(&self) -> Result<InitialLaw, ScenarioError> {
        let n = self.problem.agents;
        let law = match &self.initial_law {
            LawSchema::Dirac { points } => {
                if points.len() != n {
                    return Err(ScenarioError::Invalid(format!(
                        "initial law has {} points for {n} agents",
                        points.len()
                    )));
                }
                InitialLaw::dirac(points.clone())?
            }
            LawSchema::SharedDirac { point } => {
                InitialLaw::shared(MarginalSpec::dirac(point.clone()), n)?
            }
            LawSchema::SharedGaussian { mean, variance } => {
                InitialLaw::shared(MarginalSpec::gaussian(mean.clone(), *variance), n)?
            }
        };
        Ok(law)
    }

    pub fn shared_marginal(&self) -> Option<MarginalSpec> {
        match &self.initial_law {
            LawSchema::SharedDirac { point } => Some(MarginalSpec::dirac(point.clone())),
            LawSchema::SharedGaussian { mean, variance } => {
                Some(MarginalSpec::gaussian(mean.clone(), *variance))
            }
            LawSchema::Dirac { points } => {
                let first = &points[0];
                points.iter().all(|p| p == first).then(|| MarginalSpec::dirac(first.clone()))
            }
        }
    }

    pub fn distributed_config(&self) -> DistributedConfig {
        let s = &self.solvers;
        DistributedConfig {
            bins_per_axis: s.dist_bins,
            time_steps: s.dist_steps,
            damping: s.picard_damping,
            max_iters: s.picard_max_iters,
            tol: s.picard_tol,
            scheme: SchemeConfig::default(),
            symmetric: false,
            domain_pad: 6.0,
        }
    }
}
