//! Particle simulation backbone: Euler-Maruyama with deterministic keyed RNG
//! streams, whole-path storage, and common-random-number paired runs.

pub mod rng;

use crate::model::InitialLaw;
use rayon::prelude::*;
use rng::CounterRng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("state norm exceeded cap {cap:e} at step {step} (particle {particle})")]
    BlowUp { step: usize, particle: usize, cap: f64 },
    #[error("paired run configs differ: {0}")]
    ConfigMismatch(String),
    #[error("initial law has {got} agents, expected {expected}")]
    InitialLawMismatch { got: usize, expected: usize },
}

/// How much of the state vector a drift field sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StatePassing {
    /// The drift of agent `i` reads the whole `(ℝᵈ)ⁿ` vector.
    FullState,
    /// The drift of agent `i` reads only agent `i`'s own `ℝᵈ` block.
    PerAgent,
}

/// A Markovian drift field. `state` is the full vector in `FullState` mode
/// and the agent's own block in `PerAgent` mode; the output block is the
/// agent's `d` drift components.
pub trait Drift: Sync {
    fn eval(&self, t: f64, agent: usize, state: &[f64], out: &mut [f64]);
}

impl<F> Drift for F
where
    F: Fn(f64, usize, &[f64], &mut [f64]) + Sync,
{
    fn eval(&self, t: f64, agent: usize, state: &[f64], out: &mut [f64]) {
        self(t, agent, state, out)
    }
}

/// Simulation configuration shared by paired runs.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub particles: usize,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    pub mode: StatePassing,
    /// Simulation aborts with `BlowUp` if any |state| exceeds this.
    pub blowup_cap: f64,
    /// Simulation start time (paths run on `t0 + k·dt`).
    pub t0: f64,
}

impl SimConfig {
    pub fn new(particles: usize, dt: f64, steps: usize, seed: u64, mode: StatePassing) -> Self {
        Self { particles, dt, steps, seed, mode, blowup_cap: 1e8, t0: 0.0 }
    }

    fn matches(&self, other: &Self) -> Result<(), SdeError> {
        if self.particles != other.particles
            || self.dt != other.dt
            || self.steps != other.steps
            || self.seed != other.seed
            || self.mode != other.mode
            || self.t0 != other.t0
        {
            return Err(SdeError::ConfigMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// Stored particle paths: `N × n agents × d dims × (steps+1)` time nodes.
#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    pub n_particles: usize,
    pub n_agents: usize,
    pub dim: usize,
    pub dt: f64,
    pub t0: f64,
    pub seed: u64,
    pub origin: String,
    /// Layout: `[particle][time][agent][dim]`, flattened row-major.
    data: Vec<f64>,
}

impl ParticleEnsemble {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        n_particles: usize,
        n_agents: usize,
        dim: usize,
        dt: f64,
        t0: f64,
        seed: u64,
        origin: String,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len() % (n_particles * n_agents * dim), 0);
        Self { n_particles, n_agents, dim, dt, t0, seed, origin, data }
    }

    pub fn time_nodes(&self) -> usize {
        self.data.len() / (self.n_particles * self.n_agents * self.dim)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.time_nodes()).map(|k| self.t0 + k as f64 * self.dt).collect()
    }

    #[inline]
    pub fn state(&self, particle: usize, time_idx: usize) -> &[f64] {
        let nd = self.n_agents * self.dim;
        let base = (particle * self.time_nodes() + time_idx) * nd;
        &self.data[base..base + nd]
    }

    #[inline]
    pub fn coord(&self, particle: usize, time_idx: usize, agent: usize, k: usize) -> f64 {
        self.state(particle, time_idx)[agent * self.dim + k]
    }

    /// Terminal slice of agent-major states, one row per particle.
    pub fn terminal_states(&self) -> Vec<&[f64]> {
        let last = self.time_nodes() - 1;
        (0..self.n_particles).map(|p| self.state(p, last)).collect()
    }

    /// Binary dump: little-endian header (counts) then the path payload.
    pub fn write_binary<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        for v in [
            self.n_particles as u64,
            self.n_agents as u64,
            self.dim as u64,
            self.time_nodes() as u64,
            self.seed,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&self.t0.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

fn draw_initial(law: &InitialLaw, rng: &CounterRng, particle: usize, dim: usize, out: &mut [f64]) {
    // Initial draws live on the reserved step index u64::MAX so they never
    // collide with increment streams.
    for (i, marginal) in law.marginals().iter().enumerate() {
        let block = &mut out[i * dim..(i + 1) * dim];
        marginal.sample_into(
            |draw| rng.uniform(particle as u64, i as u64, u64::MAX, draw),
            |draw| rng.normal(particle as u64, i as u64, u64::MAX, draw),
            block,
        );
    }
}

/// Standard Euler-Maruyama over all particles. Brownian increments come from
/// the counter stream keyed `(seed, particle, agent, step)`, so output is
/// bit-identical for any thread count.
pub fn euler_maruyama(
    drift: &dyn Drift,
    m0: &InitialLaw,
    cfg: &SimConfig,
    origin: &str,
) -> Result<ParticleEnsemble, SdeError> {
    let n_agents = m0.marginals().len();
    let dim = m0.dim();
    let nd = n_agents * dim;
    let nodes = cfg.steps + 1;
    let rng = CounterRng::new(cfg.seed);
    let sqrt_dt = cfg.dt.sqrt();

    let paths: Result<Vec<Vec<f64>>, SdeError> = (0..cfg.particles)
        .into_par_iter()
        .map(|p| {
            let mut path = vec![0.0; nodes * nd];
            let mut state = vec![0.0; nd];
            let mut drift_block = vec![0.0; dim];
            let mut noise = vec![0.0; dim];
            draw_initial(m0, &rng, p, dim, &mut state);
            path[..nd].copy_from_slice(&state);
            for step in 0..cfg.steps {
                let t = cfg.t0 + step as f64 * cfg.dt;
                let prev = state.clone();
                for agent in 0..n_agents {
                    let visible = match cfg.mode {
                        StatePassing::FullState => &prev[..],
                        StatePassing::PerAgent => &prev[agent * dim..(agent + 1) * dim],
                    };
                    drift.eval(t, agent, visible, &mut drift_block);
                    rng.normals(p as u64, agent as u64, step as u64, &mut noise);
                    for k in 0..dim {
                        state[agent * dim + k] =
                            prev[agent * dim + k] + cfg.dt * drift_block[k] + sqrt_dt * noise[k];
                    }
                }
                let norm2: f64 = state.iter().map(|v| v * v).sum();
                if !norm2.is_finite() || norm2 > cfg.blowup_cap * cfg.blowup_cap {
                    return Err(SdeError::BlowUp { step, particle: p, cap: cfg.blowup_cap });
                }
                path[(step + 1) * nd..(step + 2) * nd].copy_from_slice(&state);
            }
            Ok(path)
        })
        .collect();

    let paths = paths?;
    let mut data = Vec::with_capacity(cfg.particles * nodes * nd);
    for p in paths {
        data.extend_from_slice(&p);
    }
    Ok(ParticleEnsemble {
        n_particles: cfg.particles,
        n_agents,
        dim,
        dt: cfg.dt,
        t0: cfg.t0,
        seed: cfg.seed,
        origin: origin.to_string(),
        data,
    })
}

/// Two ensembles driven by identical Brownian increments (and identical
/// initial draws), for low-variance gap estimation.
pub fn paired_run(
    drift_a: &dyn Drift,
    cfg_a: &SimConfig,
    drift_b: &dyn Drift,
    cfg_b: &SimConfig,
    m0: &InitialLaw,
    origin: &str,
) -> Result<(ParticleEnsemble, ParticleEnsemble), SdeError> {
    cfg_a.matches(cfg_b)?;
    let a = euler_maruyama(drift_a, m0, cfg_a, &format!("{origin}/a"))?;
    let b = euler_maruyama(drift_b, m0, cfg_b, &format!("{origin}/b"))?;
    Ok((a, b))
}
