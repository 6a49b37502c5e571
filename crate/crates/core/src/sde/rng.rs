//! Counter-based random number generation.
//!
//! Every Gaussian increment is produced from a pure function of
//! `(seed, particle, agent, step, draw)`, so simulations are reproducible
//! under any parallel schedule: a particle's path depends only on its keys,
//! never on which thread produced it.

/// Stateless counter RNG. Mixing is SplitMix64-style applied to a key built
/// from the stream coordinates.
#[derive(Clone, Copy, Debug)]
pub struct CounterRng {
    seed: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Raw 64-bit output for the keyed stream position.
    #[inline]
    pub fn raw(&self, particle: u64, agent: u64, step: u64, draw: u64) -> u64 {
        // Distinct keys map to distinct inputs of the mixer: the coordinates
        // are combined with pairwise-independent odd multipliers before mixing.
        let k = self
            .seed
            .wrapping_mul(GOLDEN)
            .wrapping_add(particle.wrapping_mul(0xD129_0965_F1D1_36E9))
            .wrapping_add(agent.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7))
            .wrapping_add(step.wrapping_mul(0x667F_15C6_26CF_3F35))
            .wrapping_add(draw.wrapping_mul(0x2545_F491_4F6C_DD1D));
        mix(mix(k) ^ GOLDEN)
    }

    /// Uniform in (0, 1); never returns 0 so it is safe inside `ln`.
    #[inline]
    pub fn uniform(&self, particle: u64, agent: u64, step: u64, draw: u64) -> f64 {
        let u = self.raw(particle, agent, step, draw) >> 11; // 53 bits
        (u as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal via Box-Muller on two draws of the keyed stream.
    #[inline]
    pub fn normal(&self, particle: u64, agent: u64, step: u64, draw: u64) -> f64 {
        let u1 = self.uniform(particle, agent, step, 2 * draw);
        let u2 = self.uniform(particle, agent, step, 2 * draw + 1);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fill `out` with independent standard normals for one (particle, agent,
    /// step) cell, one draw per dimension.
    #[inline]
    pub fn normals(&self, particle: u64, agent: u64, step: u64, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.normal(particle, agent, step, k as u64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic_by_key() {
        let rng = CounterRng::new(42);
        assert_eq!(rng.raw(1, 2, 3, 0), rng.raw(1, 2, 3, 0));
        assert_ne!(rng.raw(1, 2, 3, 0), rng.raw(1, 2, 4, 0));
        assert_ne!(CounterRng::new(42).raw(0, 0, 0, 0), CounterRng::new(43).raw(0, 0, 0, 0));
    }

    // Stream disjointness: 1e7 draws across distinct (particle, agent, step)
    // keys produce no repeated 64-bit output. Deterministic for the fixed
    // seed, and a collision would indicate key aliasing in the mixer.
    #[test]
    fn stream_disjointness_ten_million() {
        let rng = CounterRng::new(0xDEADBEEF);
        let mut seen = HashSet::with_capacity(10_000_000);
        for particle in 0..1000u64 {
            for agent in 0..10u64 {
                for step in 0..1000u64 {
                    assert!(seen.insert(rng.raw(particle, agent, step, 0)));
                }
            }
        }
        assert_eq!(seen.len(), 10_000_000);
    }

    #[test]
    fn normal_moments() {
        let rng = CounterRng::new(7);
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..n {
            let z = rng.normal(i, 0, 0, 0);
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 6.0 / (n as f64).sqrt());
    }
}
