//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with the measured quantity and its threshold.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use distctl_core::bounds::{
    constants_ledger, control_gap_bound, gap_bound_general, gap_bound_hetero,
    gap_bound_quadratic,
};
use distctl_core::distributed::{
    flow_cross_stats, paired_cost_gap, simulate_hat_x, solve_distributed_pde, ControlField,
    DistributedConfig, DistributedFeedback, DistributedSolution, HjbFeedback, McConfig,
};
use distctl_core::hjb::{
    check_spectral_sandwich, lift_value, solve_full_hjb, GridSpec, SchemeConfig, ValueGrid,
};
use distctl_core::meanfield::{
    fit_rate, solve_mfc_representative, value_sequence, MeanFieldFamily, PairNormalization,
    SequenceConfig,
};
use distctl_core::metrics::{
    control_l2_gap, default_battery, empirical_poincare, eq_error,
    wasserstein::{wasserstein2, GroundMetric},
};
use distctl_core::model::{
    build_hetero_problem, cross_derivative_table, ControlProblem, CostSpec, InitialLaw,
    InteractionMatrix, LagrangianSet, LagrangianSpec, MarginalSpec, ScalarAtom,
};
use distctl_core::oracles::{self, QuadratureConfig};
use distctl_core::sde::rng::CounterRng;
use distctl_core::sde::{euler_maruyama, SimConfig, StatePassing};
use std::sync::Arc;
use std::time::Instant;

/// Deterministic solver slack agreed for value comparisons: the full grid
/// runs at h ≈ 0.075 with 400 backward-Euler steps and the distributed
/// fixed point at 513 bins / 200 steps, placing both routes within a few
/// multiples of 1e-3 of the continuum value.
const SOLVER_TOL: f64 = 5e-3;

fn verdict_line(criterion: &str, pass: bool, detail: &str) {
    println!("criterion {criterion}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn quad_problem(n: usize, terminal: CostSpec, horizon: f64) -> Arc<ControlProblem> {
    Arc::new(
        ControlProblem::new(
            n,
            1,
            horizon,
            LagrangianSet::Shared(LagrangianSpec::quadratic()),
            CostSpec::zero(n, 1),
            terminal,
        )
        .unwrap(),
    )
}

/// The n = 2 benchmark: F ≡ 0, quadratic action,
/// G(x) = ½·√(1 + (x¹-x²)²) + 0.1·(x¹+x²), T = 1, start at the origin.
fn benchmark_n2() -> Arc<ControlProblem> {
    let j = InteractionMatrix::complete(2).unwrap();
    quad_problem(
        2,
        CostSpec::pairwise(
            ScalarAtom::Linear { coeffs: vec![0.2] },
            ScalarAtom::SqrtOnePlusSq { scale: 0.5 },
            j,
            1,
        ),
        1.0,
    )
}

struct Bench {
    problem: Arc<ControlProblem>,
    m0: InitialLaw,
    v: ValueGrid,
    dist: DistributedSolution,
}

fn solve_bench(
    problem: Arc<ControlProblem>,
    m0: InitialLaw,
    grid_points: usize,
    grid_steps: usize,
) -> Bench {
    let spec = GridSpec::for_problem(&problem, &m0, grid_points, grid_steps);
    let v = solve_full_hjb(&problem, &spec, &SchemeConfig::default()).unwrap();
    let dist_cfg = DistributedConfig::for_dim(1);
    let dist = solve_distributed_pde(&problem, &m0, &dist_cfg).unwrap();
    Bench { problem, m0, v, dist }
}

#[test]
fn criterion_1_cole_hopf_oracle_agreement() {
    let start = Instant::now();
    let problem = benchmark_n2();
    let m0 = InitialLaw::dirac(vec![vec![0.0], vec![0.0]]).unwrap();
    let spec = GridSpec::for_problem(&problem, &m0, 161, 400);
    let v = solve_full_hjb(&problem, &spec, &SchemeConfig::default()).unwrap();
    let hjb_value = v.value_at_point(0, &[0.0, 0.0]);
    let gibbs =
        oracles::cole_hopf_value(&problem, 0.0, &[0.0, 0.0], &QuadratureConfig::default())
            .unwrap();
    let err = (hjb_value - gibbs).abs();
    let elapsed = start.elapsed().as_secs_f64();
    verdict_line(
        "1 (Gibbs oracle agreement)",
        err <= 1e-2 && elapsed < 60.0,
        &format!("|HJB - Gibbs| = {err:.2e} (tol 1e-2), solve+quadrature {elapsed:.1}s (cap 60s)"),
    );
}

#[test]
fn criterion_2_riccati_oracle_agreement() {
    let start = Instant::now();
    let problem = quad_problem(
        1,
        CostSpec::separable_shared(ScalarAtom::Quadratic { coeff: 1.0 }, 1, 1),
        1.0,
    );
    let spec = GridSpec::new(vec![(-7.0, 7.0)], 561, 2000);
    let v = solve_full_hjb(&problem, &spec, &SchemeConfig::default()).unwrap();
    let riccati =
        oracles::lq_riccati(&oracles::LqSpec::from_problem(&problem).unwrap()).unwrap();
    let rng = CounterRng::new(20);
    let mut worst = 0.0f64;
    for s in 0..20u64 {
        let t = 0.999 * rng.uniform(s, 0, 0, 0);
        let x = 4.0 * (rng.uniform(s, 1, 0, 0) - 0.5);
        let t_idx = v.time_index(t);
        let got = v.value_at_point(t_idx, &[x]);
        let exact = riccati.value(v.times[t_idx], &[x]);
        worst = worst.max((got - exact).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict_line(
        "2 (Riccati oracle agreement)",
        worst <= 1e-3 && elapsed < 10.0,
        &format!(
            "max |HJB - Riccati| = {worst:.2e} over 20 samples (tol 1e-3), {elapsed:.1}s (cap 10s)"
        ),
    );
}

/// The three coupled convex scenarios for the value sandwich.
fn sandwich_scenarios() -> Vec<(&'static str, Arc<ControlProblem>, InitialLaw, usize, usize)> {
    let j2 = InteractionMatrix::complete(2).unwrap();
    let logcosh = quad_problem(
        2,
        CostSpec::pairwise(ScalarAtom::Zero, ScalarAtom::LogCosh { scale: 0.8 }, j2, 1),
        1.0,
    );
    let j3 = InteractionMatrix::complete(3).unwrap();
    let lq3 = quad_problem(
        3,
        CostSpec::pairwise(
            ScalarAtom::Quadratic { coeff: 0.2 },
            ScalarAtom::Quadratic { coeff: 0.3 },
            j3,
            1,
        ),
        1.0,
    );
    vec![
        ("benchmark_n2", benchmark_n2(), InitialLaw::dirac(vec![vec![0.0]; 2]).unwrap(), 161, 400),
        ("logcosh_n2", logcosh, InitialLaw::dirac(vec![vec![0.0]; 2]).unwrap(), 161, 400),
        ("lq_pairwise_n3", lq3, InitialLaw::dirac(vec![vec![0.5]; 3]).unwrap(), 41, 100),
    ]
}

#[test]
fn criterion_3_gap_sandwich() {
    for (name, problem, m0, points, steps) in sandwich_scenarios() {
        let start = Instant::now();
        let bench = solve_bench(problem, m0, points, steps);
        let mc = McConfig { particles: 100_000, time_steps: 200, seed: 7 };
        let full_field = HjbFeedback { v: &bench.v };
        let dist_field =
            DistributedFeedback { problem: &bench.problem, v_grids: &bench.dist.v_grids };
        let gap =
            paired_cost_gap(&bench.problem, &dist_field, &full_field, &bench.m0, &mc).unwrap();
        let hat = simulate_hat_x(&bench.v, &bench.m0, 10_000, 3).unwrap();
        let stats = flow_cross_stats(&bench.problem, &hat.ensemble);
        let ledger = constants_ledger(&bench.problem, &bench.m0).unwrap();
        let bound = gap_bound_general(&ledger, &stats, 0.0);
        let elapsed = start.elapsed().as_secs_f64();
        let lower_ok = gap.value + 3.0 * gap.stderr >= 0.0;
        let upper_ok = gap.value - 3.0 * gap.stderr <= bound;
        verdict_line(
            &format!("3 (gap sandwich, {name})"),
            lower_ok && upper_ok && elapsed < 300.0,
            &format!(
                "gap {:.4} ± {:.4} ∈ [0, ℛ = {:.3}] with 1e5 paired particles, {elapsed:.0}s (cap 300s)",
                gap.value, gap.stderr, bound
            ),
        );
    }
}

#[test]
fn criterion_4_zero_gap_separable() {
    let scenarios: Vec<(&str, CostSpec, usize)> = vec![
        ("linear", CostSpec::separable_shared(ScalarAtom::Linear { coeffs: vec![0.8] }, 2, 1), 2),
        ("quadratic", CostSpec::separable_shared(ScalarAtom::Quadratic { coeff: 1.0 }, 2, 1), 2),
        ("logcosh", CostSpec::separable_shared(ScalarAtom::LogCosh { scale: 1.0 }, 2, 1), 2),
    ];
    for (name, terminal, n) in scenarios {
        let problem = quad_problem(n, terminal, 1.0);
        let m0 = InitialLaw::dirac(vec![vec![0.0]; n]).unwrap();
        let bench = solve_bench(problem, m0, 121, 200);
        let v_full = lift_value(&bench.v, 0, &bench.m0).unwrap();
        let gap = (bench.dist.value - v_full).abs();
        let tol = 2.0 * SOLVER_TOL; // deterministic routes: no MC stderr term
        verdict_line(
            &format!("4 (zero gap, {name})"),
            gap <= tol && bench.dist.iterations == 1,
            &format!(
                "|V_dist - V| = {gap:.2e} ≤ 2·(tol {SOLVER_TOL:.0e}) with {} fixed-point iteration(s)",
                bench.dist.iterations
            ),
        );
    }
}

#[test]
fn criterion_5_quadratic_bound_dominance() {
    for (name, problem, m0, points, steps) in sandwich_scenarios() {
        let bench = solve_bench(problem, m0, points, steps);
        let mc = McConfig { particles: 100_000, time_steps: 200, seed: 7 };
        let full_field = HjbFeedback { v: &bench.v };
        let dist_field =
            DistributedFeedback { problem: &bench.problem, v_grids: &bench.dist.v_grids };
        let gap =
            paired_cost_gap(&bench.problem, &dist_field, &full_field, &bench.m0, &mc).unwrap();
        let hat = simulate_hat_x(&bench.v, &bench.m0, 10_000, 3).unwrap();
        let stats = flow_cross_stats(&bench.problem, &hat.ensemble);
        let ledger = constants_ledger(&bench.problem, &bench.m0).unwrap();
        let quad = gap_bound_quadratic(&ledger, &stats, 0.0).unwrap();
        let general = gap_bound_general(&ledger, &stats, 0.0);
        verdict_line(
            &format!("5 (quadratic dominance, {name})"),
            gap.value - 3.0 * gap.stderr <= quad && quad <= general,
            &format!(
                "gap {:.4} ≤ quadratic bound {quad:.4} ≤ general bound {general:.3}",
                gap.value
            ),
        );
    }
}

#[test]
fn criterion_6_heterogeneous_sweep() {
    let start = Instant::now();
    let n = 8;
    let pair = ScalarAtom::SqrtOnePlusSq { scale: 1.0 };
    let marginal = MarginalSpec::dirac(vec![0.0]);
    let family =
        MeanFieldFamily::terminal_only(ScalarAtom::Zero, pair.clone(), 1.0);
    let mut dist_cfg = DistributedConfig::for_dim(1);
    dist_cfg.symmetric = true;
    let mfc = solve_mfc_representative(&family, &marginal, &dist_cfg).unwrap();

    let mut results: Vec<(usize, f64, f64, f64, f64)> = Vec::new(); // m, gap, err, bound, v_dist
    for m in [2usize, 4, 7] {
        let j = InteractionMatrix::regular_circulant(n, m).unwrap();
        let problem = Arc::new(
            build_hetero_problem(
                ScalarAtom::Zero,
                pair.clone(),
                ScalarAtom::Zero,
                ScalarAtom::Zero,
                j.clone(),
                LagrangianSpec::quadratic(),
                1.0,
                1,
            )
            .unwrap(),
        );
        let m0 = InitialLaw::shared(marginal.clone(), n).unwrap();
        let dist = solve_distributed_pde(&problem, &m0, &dist_cfg).unwrap();
        let (v_full, v_err) =
            oracles::cole_hopf_value_mc(&problem, 0.0, &vec![0.0; n], 1_000_000, 17 ^ m as u64)
                .unwrap();
        let ledger = constants_ledger(&problem, &m0).unwrap();
        let bound = gap_bound_hetero(&j, pair.hessian_sup(), 0.0, &ledger, 0.0).unwrap();
        results.push((m, dist.value - v_full, v_err, bound, dist.value));
    }
    // nonincreasing within confidence bands
    let mut monotone = true;
    for w in results.windows(2) {
        let (_, gap_lo, err_lo, _, _) = w[0];
        let (_, gap_hi, err_hi, _, _) = w[1];
        if gap_hi - gap_lo > 3.0 * (err_lo * err_lo + err_hi * err_hi).sqrt() {
            monotone = false;
        }
    }
    // bound exactly proportional to 1/m
    let base = results[0].3 * results[0].0 as f64;
    let proportional = results
        .iter()
        .all(|(m, _, _, b, _)| (b * *m as f64 / base - 1.0).abs() <= 1e-12);
    // distributed value equals the limit on the complete graph
    let complete = results.iter().find(|r| r.0 == n - 1).unwrap();
    let identity_err = (complete.4 - mfc.value).abs();
    let elapsed = start.elapsed().as_secs_f64();
    verdict_line(
        "6 (heterogeneous sweep)",
        monotone && proportional && identity_err <= 2e-2,
        &format!(
            "gaps {:?} nonincreasing: {monotone}; bound ∝ 1/m exactly: {proportional}; |V_dist(m=7) - U| = {identity_err:.2e} (tol 2e-2); {elapsed:.0}s",
            results.iter().map(|r| format!("{:.4}", r.1)).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_7_mean_field_rate() {
    let start = Instant::now();
    let family = MeanFieldFamily::terminal_only(
        ScalarAtom::Zero,
        ScalarAtom::SqrtOnePlusSq { scale: 1.0 },
        1.0,
    )
    .with_normalization(PairNormalization::CompleteGraph);
    let marginal = MarginalSpec::dirac(vec![0.0]);
    let mut cfg = SequenceConfig::default();
    cfg.mc_samples = 1_000_000;
    let rows = value_sequence(&family, &marginal, &[2, 4, 8], &cfg).unwrap();
    let u = rows[0].u.unwrap();
    // n |Vⁿ - U| bounded across the ladder: the last entry may not exceed
    // the earlier plateau beyond 10% headroom plus confidence bands
    let scaled: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.n as f64 * (r.v_full - u).abs(), r.n as f64 * r.v_full_err))
        .collect();
    let earlier_max = scaled[..scaled.len() - 1].iter().map(|s| s.0).fold(0.0f64, f64::max);
    let (last, last_err) = *scaled.last().unwrap();
    let no_growth = last <= 1.1 * earlier_max + 3.0 * last_err;
    // fitted exponent of |V_dist - Vⁿ|
    let gaps: Vec<f64> = rows.iter().map(|r| r.v_dist - r.v_full).collect();
    let errs: Vec<f64> = rows.iter().map(|r| r.v_full_err.max(1e-9)).collect();
    let fit = fit_rate(&[2, 4, 8], &gaps, &errs).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    verdict_line(
        "7 (mean-field rate)",
        no_growth && fit.exponent <= -0.8,
        &format!(
            "n·|Vⁿ-U| = {:?} (no growth: {no_growth}); gap exponent {:.2} ≤ -0.8; {elapsed:.0}s",
            scaled.iter().map(|s| format!("{:.4}", s.0)).collect::<Vec<_>>(),
            fit.exponent
        ),
    );
}

#[test]
fn criterion_8_control_gap() {
    let problem = benchmark_n2();
    let m0 = InitialLaw::dirac(vec![vec![0.0]; 2]).unwrap();
    let bench = solve_bench(Arc::clone(&problem), m0, 161, 400);
    let full_field = HjbFeedback { v: &bench.v };
    let dist_field = DistributedFeedback { problem: &problem, v_grids: &bench.dist.v_grids };
    let ens = euler_maruyama(
        &|t: f64, agent: usize, state: &[f64], out: &mut [f64]| {
            full_field.eval(t, agent, state, out)
        },
        &bench.m0,
        &SimConfig::new(20_000, 1.0 / 200.0, 200, 29, StatePassing::FullState),
        "optimal",
    )
    .unwrap();
    let cg = control_l2_gap(&full_field, &dist_field, &ens);
    let ledger = constants_ledger(&problem, &bench.m0).unwrap();
    let ft = cross_derivative_table(&problem.running_cost, 2).unwrap();
    let gt = cross_derivative_table(&problem.terminal_cost, 2).unwrap();
    let bound = control_gap_bound(&ledger, &ft, &gt);
    verdict_line(
        "8 (control gap)",
        cg.total <= bound,
        &format!(
            "Σᵢ E∫|αⁱ-ᾱⁱ|² = {:.4} ≤ C₁n²Σ‖D_ijF‖² + C₂n²Σ‖D_ijG‖² = {bound:.3}",
            cg.total
        ),
    );
}

#[test]
fn criterion_9_property_suites() {
    // (a) conditional-variance error term nonnegative on 1e3 random snapshots
    let problem = benchmark_n2();
    let m0 = InitialLaw::dirac(vec![vec![0.0]; 2]).unwrap();
    let spec = GridSpec::for_problem(&problem, &m0, 81, 100);
    let v = solve_full_hjb(&problem, &spec, &SchemeConfig::default()).unwrap();
    let rng = CounterRng::new(90);
    let mut min_eq = f64::INFINITY;
    for trial in 0..1000u64 {
        let d = problem.d;
        let snapshot: Vec<distctl_core::distributed::AgentMarginal> = (0..2)
            .map(|i| {
                let sub = v.grid.subgrid(i * d, d);
                let mean = 2.5 * rng.normal(trial, i as u64, 0, 0);
                let sd = 0.2 + 1.3 * rng.uniform(trial, i as u64, 1, 0);
                let mut weights = vec![0.0; sub.total];
                for node in 0..sub.total {
                    let z = (sub.coord(0, node) - mean) / sd;
                    weights[node] = (-0.5 * z * z).exp();
                }
                let mass: f64 = weights.iter().sum();
                for w in &mut weights {
                    *w /= mass;
                }
                distctl_core::distributed::AgentMarginal { grid: sub, weights }
            })
            .collect();
        let t_idx = (rng.raw(trial, 9, 0, 0) % v.time_slices() as u64) as usize;
        min_eq = min_eq.min(eq_error(&v, &snapshot, t_idx).unwrap());
    }
    let eq_ok = min_eq >= -1e-12;

    // (b) spectral sandwich on every convex solve of the suite
    let mut sandwich_ok = true;
    let mut sandwich_detail = String::new();
    for (name, problem, m0, points, steps) in sandwich_scenarios() {
        let spec = GridSpec::for_problem(&problem, &m0, points, steps);
        let v = solve_full_hjb(&problem, &spec, &SchemeConfig::default()).unwrap();
        let ledger = constants_ledger(&problem, &m0).unwrap();
        let report = check_spectral_sandwich(&v, &ledger);
        if !report.violations.is_empty() {
            sandwich_ok = false;
            sandwich_detail = format!("{name}: {} violations", report.violations.len());
        }
    }

    // (c) metric axioms on 100 random triples
    let mut axioms_ok = true;
    for trial in 0..100u64 {
        let gen = |tag: u64| -> Vec<Vec<f64>> {
            (0..5)
                .map(|k| vec![rng.normal(trial, k, tag, 1), rng.normal(trial, k, tag, 2)])
                .collect()
        };
        let (a, b, c) = (gen(11), gen(12), gen(13));
        let dab = wasserstein2(&a, &b, GroundMetric::Euclidean).unwrap();
        let dba = wasserstein2(&b, &a, GroundMetric::Euclidean).unwrap();
        let dbc = wasserstein2(&b, &c, GroundMetric::Euclidean).unwrap();
        let dac = wasserstein2(&a, &c, GroundMetric::Euclidean).unwrap();
        if (dab - dba).abs() > 1e-12 || dac > dab + dbc + 1e-9 {
            axioms_ok = false;
        }
    }

    // (d) weak order of the particle scheme: dt-halving error ratios
    let exact = (1.0 - (-2.0f64).exp()) / 2.0;
    let mut errors = Vec::new();
    for steps in [10usize, 20, 40] {
        let ens = euler_maruyama(
            &|_t: f64, _i: usize, x: &[f64], out: &mut [f64]| out[0] = -x[0],
            &InitialLaw::dirac(vec![vec![0.0]]).unwrap(),
            &SimConfig::new(800_000, 1.0 / steps as f64, steps, 91, StatePassing::PerAgent),
            "ou",
        )
        .unwrap();
        let last = ens.time_nodes() - 1;
        let npart = ens.n_particles as f64;
        let mean: f64 =
            (0..ens.n_particles).map(|p| ens.coord(p, last, 0, 0)).sum::<f64>() / npart;
        let var: f64 = (0..ens.n_particles)
            .map(|p| ens.coord(p, last, 0, 0).powi(2))
            .sum::<f64>()
            / npart
            - mean * mean;
        errors.push((var - exact).abs());
    }
    let r1 = errors[0] / errors[1];
    let r2 = errors[1] / errors[2];
    let weak_ok = (1.6..=2.4).contains(&r1) && (1.6..=2.4).contains(&r2);

    // (e) bit-identical reruns across thread counts
    let drift = |_t: f64, _i: usize, x: &[f64], out: &mut [f64]| out[0] = -0.3 * x[0] + 0.1;
    let m0b = InitialLaw::dirac(vec![vec![0.0]; 2]).unwrap();
    let cfg = SimConfig::new(2048, 0.01, 50, 17, StatePassing::PerAgent);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| euler_maruyama(&drift, &m0b, &cfg, "det").unwrap())
    };
    let a = run(1);
    let b = run(4);
    let c = run(2);
    let det_ok = a.state(0, 50) == b.state(0, 50)
        && (0..a.n_particles).all(|p| a.state(p, 50) == b.state(p, 50))
        && (0..a.n_particles).all(|p| a.state(p, 50) == c.state(p, 50));

    verdict_line(
        "9 (property suites)",
        eq_ok && sandwich_ok && axioms_ok && weak_ok && det_ok,
        &format!(
            "E_Q min {min_eq:.1e} ≥ -1e-12: {eq_ok}; spectral sandwich: {sandwich_ok} {sandwich_detail}; W₂ axioms (100 triples): {axioms_ok}; weak-order ratios {r1:.2}/{r2:.2} ∈ [1.6,2.4]: {weak_ok}; thread-count determinism: {det_ok}"
        ),
    );
}

#[test]
fn criterion_10_functional_inequalities() {
    // empirical Poincaré ratio of the conditional-drift law at T on
    // quadratic-action convex runs, from both a point start (c₀ = 0) and a
    // Gaussian start (c₀ = variance)
    let mut all_ok = true;
    let mut detail = String::new();
    for (name, m0, c0) in [
        ("dirac", InitialLaw::dirac(vec![vec![0.0]; 2]).unwrap(), 0.0),
        (
            "gaussian",
            InitialLaw::shared(MarginalSpec::gaussian(vec![0.0], 0.09), 2).unwrap(),
            0.09,
        ),
    ] {
        let problem = benchmark_n2();
        let spec = GridSpec::for_problem(&problem, &m0, 121, 200);
        let v = solve_full_hjb(&problem, &spec, &SchemeConfig::default()).unwrap();
        let hat = simulate_hat_x(&v, &m0, 20_000, 55).unwrap();
        let last = hat.ensemble.time_nodes() - 1;
        let samples: Vec<Vec<f64>> = (0..hat.ensemble.n_particles)
            .map(|p| {
                vec![hat.ensemble.coord(p, last, 0, 0), hat.ensemble.coord(p, last, 1, 0)]
            })
            .collect();
        let report = empirical_poincare(&samples, &default_battery(2)).unwrap();
        let rel_ci = (report.ci.1 - report.ci.0) / (2.0 * report.worst_ratio.max(1e-12));
        let threshold = (1.0 + c0) * (1.0 + 3.0 * rel_ci);
        let ok = report.worst_ratio <= threshold;
        all_ok &= ok;
        detail.push_str(&format!(
            "{name}: ratio {:.3} ≤ (T + c₀)(1 + 3·ci) = {threshold:.3}; ",
            report.worst_ratio
        ));
    }
    verdict_line("10 (functional inequalities)", all_ok, &detail);
}
