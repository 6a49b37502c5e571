use super::*;
use crate::oracles::{meanfield_lq, MeanVarPoly};

fn cfg_small() -> SequenceConfig {
    let mut cfg = SequenceConfig::default();
    cfg.dist.bins_per_axis = 257;
    cfg.dist.time_steps = 100;
    cfg
}

#[test]
fn representative_solver_matches_lq_oracle() {
    // 𝒢(m) = Var(m)/2 = ⟨m⊗m, (x-y)²/4⟩ from δ₀ at T = 1: U = ½ ln 2
    let family = MeanFieldFamily::terminal_only(
        ScalarAtom::Zero,
        ScalarAtom::Quadratic { coeff: 0.5 },
        1.0,
    );
    let m0 = MarginalSpec::dirac(vec![0.0]);
    let mfc = solve_mfc_representative(&family, &m0, &cfg_small().dist).unwrap();
    let exact = 0.5 * 2.0f64.ln();
    assert!(
        (mfc.value - exact).abs() < 3e-3,
        "representative U = {} vs exact {exact}",
        mfc.value
    );
    // and against the mean/variance reduction oracle
    let g = MeanVarPoly { var_lin: 0.5, ..Default::default() };
    let f = MeanVarPoly::default();
    let oracle = meanfield_lq(&g, &f, &m0, 1.0, 0.0).unwrap();
    assert!((mfc.value - oracle).abs() < 3e-3);
}

#[test]
fn representative_solver_gaussian_start() {
    let family = MeanFieldFamily::terminal_only(
        ScalarAtom::Zero,
        ScalarAtom::Quadratic { coeff: 0.5 },
        1.0,
    );
    let m0 = MarginalSpec::gaussian(vec![0.0], 0.25);
    let mfc = solve_mfc_representative(&family, &m0, &cfg_small().dist).unwrap();
    let g = MeanVarPoly { var_lin: 0.5, ..Default::default() };
    let oracle = meanfield_lq(&g, &MeanVarPoly::default(), &m0, 1.0, 0.0).unwrap();
    assert!((mfc.value - oracle).abs() < 4e-3, "{} vs {}", mfc.value, oracle);
}

#[test]
fn value_sequence_zero_costs() {
    let family =
        MeanFieldFamily::terminal_only(ScalarAtom::Zero, ScalarAtom::Zero, 1.0);
    let m0 = MarginalSpec::dirac(vec![0.0]);
    let rows = value_sequence(&family, &m0, &[2, 3], &cfg_small()).unwrap();
    for row in rows {
        assert!(row.v_full.abs() < 1e-10, "{row:?}");
        assert!(row.v_dist.abs() < 1e-6, "{row:?}");
        assert!(row.u.unwrap().abs() < 1e-6);
    }
}

#[test]
fn value_sequence_separable_functional_decouples() {
    // 𝒢(m) = ⟨m, g⟩: no interaction, 𝒱ⁿ = 𝒱_distⁿ for every n
    let family = MeanFieldFamily::terminal_only(
        ScalarAtom::Quadratic { coeff: 1.0 },
        ScalarAtom::Zero,
        1.0,
    );
    let m0 = MarginalSpec::dirac(vec![0.0]);
    let rows = value_sequence(&family, &m0, &[2, 4], &cfg_small()).unwrap();
    for row in &rows {
        assert!(
            (row.v_full - row.v_dist).abs() < 4e-3,
            "n={}: full {} vs dist {}",
            row.n,
            row.v_full,
            row.v_dist
        );
        // and the limit value agrees too (no n-dependence at all)
        assert!((row.v_dist - row.u.unwrap()).abs() < 4e-3);
    }
}

#[test]
fn lq_ladder_sandwich() {
    // Var/2 terminal: full value ≤ distributed value per n, and the
    // distributed-to-limit gap stays O(1/n) against the exact limit value
    let family = MeanFieldFamily::terminal_only(
        ScalarAtom::Zero,
        ScalarAtom::Quadratic { coeff: 0.5 },
        1.0,
    );
    let m0 = MarginalSpec::dirac(vec![0.0]);
    let rows = value_sequence(&family, &m0, &[2, 4], &cfg_small()).unwrap();
    let exact_u = 0.5 * 2.0f64.ln();
    for row in &rows {
        assert!(row.v_full <= row.v_dist + 2e-3, "n={}: sandwich", row.n);
        let scaled = row.n as f64 * (row.v_dist - exact_u).abs();
        assert!(scaled < 1.0, "n={}: n·|V_dist - U| = {scaled}", row.n);
    }
}

#[test]
fn fit_rate_exact_power_laws() {
    let ns = [2usize, 4, 8, 16];
    let gaps: Vec<f64> = ns.iter().map(|n| 0.7 / *n as f64).collect();
    let errs = vec![1e-9; 4];
    let fit = fit_rate(&ns, &gaps, &errs).unwrap();
    assert!((fit.exponent + 1.0).abs() < 1e-6, "exponent {}", fit.exponent);
    assert!((fit.constant - 0.7).abs() < 1e-6);
    assert!(fit.residual < 1e-9);

    let gaps2: Vec<f64> = ns.iter().map(|n| 3.0 / (*n as f64 * *n as f64)).collect();
    let fit2 = fit_rate(&ns, &gaps2, &errs).unwrap();
    assert!((fit2.exponent + 2.0).abs() < 1e-6);
}

#[test]
fn fit_rate_rejects_noise() {
    let ns = [2usize, 4, 8];
    let gaps = [1e-6, 5e-7, 2.5e-7];
    let errs = [1e-6, 1e-6, 1e-6];
    assert!(matches!(
        fit_rate(&ns, &gaps, &errs),
        Err(MeanfieldError::GapsBelowNoise(_))
    ));
}

#[test]
fn chaos_self_test_against_meanfield_copies() {
    // build the n-agent "optimal" ensemble from independent mean-field
    // copies; the chaos metric must sit at the matching noise floor
    let family = MeanFieldFamily::terminal_only(
        ScalarAtom::Zero,
        ScalarAtom::Quadratic { coeff: 0.5 },
        1.0,
    );
    let m0 = MarginalSpec::dirac(vec![0.0]);
    let mfc = solve_mfc_representative(&family, &m0, &cfg_small().dist).unwrap();
    let n = 4;
    let problem = family.problem(n).unwrap();
    let as_n_agent = simulate_meanfield_copies(&mfc, &m0, n, 1500, 21).unwrap();
    let k = 1;
    let mf_k = simulate_meanfield_copies(&mfc, &m0, k, 1500, 99).unwrap();
    let gap = chaos_vs_meanfield(&problem, &as_n_agent, &mf_k, k, 16).unwrap();
    // noise floor: two more independent 1-copy runs
    let a = simulate_meanfield_copies(&mfc, &m0, k, 1500, 55).unwrap();
    let floor = chaos_vs_meanfield(&problem, &a, &mf_k, k, 16).unwrap();
    assert!(gap <= 1.3 * floor + 0.02, "gap {gap} vs floor {floor}");
}

#[test]
fn chaos_rejects_asymmetric_costs() {
    use crate::model::InteractionMatrix;
    // non-doubly-stochastic pairwise graph
    let j = InteractionMatrix::new(2, vec![0.0, 0.3, 0.3, 0.0]).unwrap();
    let problem = Arc::new(
        ControlProblem::new(
            2,
            1,
            1.0,
            LagrangianSet::Shared(LagrangianSpec::quadratic()),
            CostSpec::zero(2, 1),
            CostSpec::pairwise(ScalarAtom::Zero, ScalarAtom::SqrtOnePlusSq { scale: 1.0 }, j, 1),
        )
        .unwrap(),
    );
    let family = MeanFieldFamily::terminal_only(
        ScalarAtom::Zero,
        ScalarAtom::Quadratic { coeff: 0.5 },
        1.0,
    );
    let m0 = MarginalSpec::dirac(vec![0.0]);
    let mut cfg = cfg_small();
    cfg.dist.time_steps = 50;
    let mfc = solve_mfc_representative(&family, &m0, &cfg.dist).unwrap();
    let ens = simulate_meanfield_copies(&mfc, &m0, 2, 100, 1).unwrap();
    let mf = simulate_meanfield_copies(&mfc, &m0, 1, 100, 2).unwrap();
    assert!(matches!(
        chaos_vs_meanfield(&problem, &ens, &mf, 1, 8),
        Err(MeanfieldError::AsymmetricProblem)
    ));
}
