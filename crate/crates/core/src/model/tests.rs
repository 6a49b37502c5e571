use super::*;
use crate::sde::rng::CounterRng;

#[test]
fn quadratic_hamiltonian_closed_form() {
    let l = LagrangianSpec::quadratic();
    // value 2, minimizer -2 at p = 2
    let h = hamiltonian_eval(&l, &[0.0], &[2.0]).unwrap();
    assert_eq!(h.value, 2.0);
    assert_eq!(h.minimizer, vec![-2.0]);
    // zero costate
    let h0 = hamiltonian_eval(&l, &[3.7], &[0.0]).unwrap();
    assert_eq!(h0.value, 0.0);
    assert_eq!(h0.minimizer, vec![0.0]);
}

#[test]
fn quadratic_hamiltonian_machine_precision_random() {
    let l = LagrangianSpec::quadratic();
    let rng = CounterRng::new(1);
    for s in 0..1000u64 {
        let x = [rng.normal(s, 0, 0, 0), rng.normal(s, 0, 1, 0)];
        let p = [rng.normal(s, 1, 0, 0), rng.normal(s, 1, 1, 0)];
        let h = hamiltonian_eval(&l, &x, &p).unwrap();
        let expect = 0.5 * (p[0] * p[0] + p[1] * p[1]);
        assert!((h.value - expect).abs() <= f64::EPSILON * expect.abs().max(1.0));
        assert_eq!(h.minimizer, vec![-p[0], -p[1]]);
    }
}

#[test]
fn weighted_quadratic_hamiltonian() {
    // R = [[2, 0], [0, 0.5]]: H = p1²/4 + p2², a* = (-p1/2, -2 p2)
    let l = LagrangianSpec::quadratic_weighted(vec![2.0, 0.0, 0.0, 0.5], 2).unwrap();
    let h = hamiltonian_eval(&l, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
    assert!((h.value - 1.25).abs() < 1e-12);
    assert!((h.minimizer[0] + 0.5).abs() < 1e-12);
    assert!((h.minimizer[1] + 2.0).abs() < 1e-12);
    assert!((l.convexity_modulus - 0.5).abs() < 1e-12);
    assert!((l.bounds.d_pp_h - 2.0).abs() < 1e-12);
}

fn quartic_lagrangian() -> LagrangianSpec {
    // L(x,a) = a⁴/4 + a²/2 in d = 1
    let c = CustomLagrangian {
        value: Arc::new(|_x, a| 0.25 * a[0].powi(4) + 0.5 * a[0] * a[0]),
        grad_a: Arc::new(|_x, a, out| out[0] = a[0].powi(3) + a[0]),
        grad_x: Arc::new(|_x, _a, out| out.fill(0.0)),
    };
    LagrangianSpec::custom(
        c,
        1.0,
        SecondDerivativeBounds { d_xx_l: 0.0, d_xp_h: 0.0, d_pp_h: 1.0 },
    )
    .unwrap()
}

#[test]
fn custom_hamiltonian_matches_grid_search() {
    let l = quartic_lagrangian();
    let h = hamiltonian_eval(&l, &[0.0], &[1.0]).unwrap();

    // dense grid oracle over a ∈ [-10, 10], step 1e-4
    let mut best_val = f64::NEG_INFINITY;
    let mut best_a = 0.0;
    let mut a = -10.0;
    while a <= 10.0 {
        let v = -(a * 1.0 + 0.25 * a * a * a * a + 0.5 * a * a);
        if v > best_val {
            best_val = v;
            best_a = a;
        }
        a += 1e-4;
    }
    assert!((h.value - best_val).abs() < 1e-7, "{} vs grid {}", h.value, best_val);
    assert!((h.minimizer[0] - best_a).abs() < 1e-3);
    // stationarity at the reported minimizer: 1 + a³ + a = 0
    let g = 1.0 + h.minimizer[0].powi(3) + h.minimizer[0];
    assert!(g.abs() < 1e-9);
}

#[test]
fn hamiltonian_convex_in_costate() {
    let rng = CounterRng::new(9);
    let quad = LagrangianSpec::quadratic();
    let quartic = quartic_lagrangian();
    for (which, l) in [&quad, &quartic].iter().enumerate() {
        for s in 0..200u64 {
            let p = [rng.normal(s, which as u64, 0, 0)];
            let q = [rng.normal(s, which as u64, 1, 0)];
            let lam = rng.uniform(s, which as u64, 2, 0);
            let mix = [lam * p[0] + (1.0 - lam) * q[0]];
            let hm = hamiltonian_eval(l, &[0.0], &mix).unwrap().value;
            let hp = hamiltonian_eval(l, &[0.0], &p).unwrap().value;
            let hq = hamiltonian_eval(l, &[0.0], &q).unwrap().value;
            assert!(hm <= lam * hp + (1.0 - lam) * hq + 1e-9);
        }
    }
}

#[test]
fn separable_cross_table_is_zero() {
    let cost = CostSpec::separable_shared(ScalarAtom::Quadratic { coeff: 1.0 }, 4, 1);
    let table = cross_derivative_table(&cost, 4).unwrap();
    assert!(table.is_zero());
    assert!(table.certified);
}

#[test]
fn ring_cross_table_matches_trace_scaling() {
    // J = A/m for an m-regular graph: Σ_{i<j} (2 J_ij ‖D²G₂‖ / n)² scales like
    // Tr(J²)/n² up to the constant 4‖D²G₂‖²: Tr(J²) = n/m.
    let n = 8;
    for m in [2usize, 4] {
        let j = InteractionMatrix::regular_circulant(n, m).unwrap();
        assert!((j.trace_squared() - n as f64 / m as f64).abs() < 1e-12);
        let cost =
            CostSpec::pairwise(ScalarAtom::Zero, ScalarAtom::SqrtOnePlusSq { scale: 1.0 }, j, 1);
        let table = cross_derivative_table(&cost, n).unwrap();
        let lhs = (n as f64) * table.sum_squares();
        let rhs = 4.0 / n as f64 * (n as f64 / m as f64); // (4/n)‖D²G₂‖² Tr(J²)
        assert!((lhs - rhs / 2.0).abs() < 1e-12, "m={m}: {lhs} vs {}", rhs / 2.0);
        // Σ_{i<j} counts each unordered pair once; the (4/n)Tr(J²) form counts
        // ordered pairs, hence the factor 2.
    }
}

#[test]
fn mean_field_cross_entries_are_order_n_squared() {
    for n in [4usize, 8, 16] {
        let cost =
            CostSpec::mean_field(ScalarAtom::Zero, ScalarAtom::SqrtOnePlusSq { scale: 1.0 }, n, 1);
        let table = cross_derivative_table(&cost, n).unwrap();
        let expect = 2.0 / (n as f64 * n as f64);
        assert!((table.get(0, 1) - expect).abs() < 1e-15);
    }
}

#[test]
fn hetero_builder_complete_graph_entries() {
    // G₂ = √(1+u²), complete n=3 with J = A/2: entries (2/3)·(1/2)·1
    let j = InteractionMatrix::complete(3).unwrap();
    let problem = build_hetero_problem(
        ScalarAtom::Zero,
        ScalarAtom::SqrtOnePlusSq { scale: 1.0 },
        ScalarAtom::Zero,
        ScalarAtom::Zero,
        j,
        LagrangianSpec::quadratic(),
        1.0,
        1,
    )
    .unwrap();
    let table = cross_derivative_table(&problem.terminal_cost, 3).unwrap();
    let expect = 2.0 / 3.0 * 0.5;
    for (i, jdx) in [(0usize, 1usize), (0, 2), (1, 2)] {
        assert!((table.get(i, jdx) - expect).abs() < 1e-15);
    }
    assert!(problem.running_cost.is_zero());
}

#[test]
fn hetero_builder_zero_pair_is_separable_in_effect() {
    let j = InteractionMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let problem = build_hetero_problem(
        ScalarAtom::Quadratic { coeff: 1.0 },
        ScalarAtom::Zero,
        ScalarAtom::Zero,
        ScalarAtom::Zero,
        j,
        LagrangianSpec::quadratic(),
        1.0,
        1,
    )
    .unwrap();
    let table = cross_derivative_table(&problem.terminal_cost, 2).unwrap();
    assert!(table.is_zero());
    assert!(problem.terminal_cost.is_decoupled());
}

#[test]
fn ring_is_doubly_stochastic() {
    let j = InteractionMatrix::regular_circulant(4, 2).unwrap();
    assert!(j.doubly_stochastic);
    let j7 = InteractionMatrix::complete(8).unwrap();
    assert!(j7.doubly_stochastic);
}

#[test]
fn interaction_matrix_rejections() {
    assert!(matches!(
        InteractionMatrix::new(2, vec![0.0, 1.0, 0.5, 0.0]),
        Err(ModelError::AsymmetricMatrix { .. })
    ));
    assert!(matches!(
        InteractionMatrix::new(2, vec![0.0, -1.0, -1.0, 0.0]),
        Err(ModelError::NegativeEntry { .. })
    ));
    assert!(matches!(
        InteractionMatrix::new(2, vec![0.5, 1.0, 1.0, 0.0]),
        Err(ModelError::NonzeroDiagonal { .. })
    ));
}

#[test]
fn hetero_evaluators_invariant_under_graph_automorphism() {
    // ring on 4 vertices: rotation i ↦ i+1 is a graph automorphism
    let j = InteractionMatrix::regular_circulant(4, 2).unwrap();
    let problem = build_hetero_problem(
        ScalarAtom::LogCosh { scale: 0.7 },
        ScalarAtom::SqrtOnePlusSq { scale: 0.4 },
        ScalarAtom::Zero,
        ScalarAtom::Zero,
        j,
        LagrangianSpec::quadratic(),
        1.0,
        1,
    )
    .unwrap();
    let rng = CounterRng::new(33);
    for s in 0..50u64 {
        let x: Vec<f64> = (0..4).map(|k| rng.normal(s, k, 0, 0)).collect();
        let rotated: Vec<f64> = (0..4).map(|i| x[(i + 3) % 4]).collect();
        let a = problem.terminal_cost.value(&x);
        let b = problem.terminal_cost.value(&rotated);
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cost_derivatives_match_finite_differences() {
    let j = InteractionMatrix::complete(3).unwrap();
    let costs = [
        CostSpec::separable_shared(ScalarAtom::LogCosh { scale: 0.9 }, 3, 1),
        CostSpec::pairwise(
            ScalarAtom::Linear { coeffs: vec![0.3] },
            ScalarAtom::SqrtOnePlusSq { scale: 0.8 },
            j,
            1,
        ),
        CostSpec::mean_field(ScalarAtom::Quadratic { coeff: 0.5 }, ScalarAtom::LogCosh { scale: 0.6 }, 3, 1),
    ];
    let rng = CounterRng::new(4);
    let h = 1e-5;
    for cost in &costs {
        for s in 0..20u64 {
            let x: Vec<f64> = (0..3).map(|k| 1.5 * rng.normal(s, k, 0, 0)).collect();
            for i in 0..3 {
                let mut g = [0.0];
                cost.grad_block(i, &x, &mut g);
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (cost.value(&xp) - cost.value(&xm)) / (2.0 * h);
                assert!((g[0] - fd).abs() < 1e-7, "grad i={i}");
                for jdx in 0..3 {
                    let mut hb = [0.0];
                    cost.hess_block(i, jdx, &x, &mut hb);
                    let mut gp = [0.0];
                    let mut gm = [0.0];
                    let mut xq = x.clone();
                    xq[jdx] += h;
                    cost.grad_block(i, &xq, &mut gp);
                    xq[jdx] -= 2.0 * h;
                    cost.grad_block(i, &xq, &mut gm);
                    let fd2 = (gp[0] - gm[0]) / (2.0 * h);
                    assert!((hb[0] - fd2).abs() < 1e-6, "hess ({i},{jdx})");
                }
            }
        }
    }
}

#[test]
fn custom_cost_missing_bound_and_sampled_table() {
    let quadratic_like = CustomCost {
        value: Arc::new(|x: &[f64]| 0.5 * (x[0] - x[1]).powi(2)),
        grad_block: Arc::new(|i, x, out| {
            let s = if i == 0 { 1.0 } else { -1.0 };
            out[0] = s * (x[0] - x[1]);
        }),
        hess_block: Arc::new(|i, j, _x, out| out[0] = if i == j { 1.0 } else { -1.0 }),
        declared_spectral_bound: None,
    };
    let cost = CostSpec::custom(quadratic_like, 2, 1);
    assert!(matches!(cost.spectral_bound(), Err(ModelError::MissingBound)));
    let table = cross_derivative_table(&cost, 2).unwrap();
    assert!(!table.certified);
    assert!((table.get(0, 1) - 1.0).abs() < 1e-12);
}

#[test]
fn unbounded_custom_hessian_flagged() {
    let cubic = CustomCost {
        value: Arc::new(|x: &[f64]| (x[0] * x[1]).powi(2)),
        grad_block: Arc::new(|_i, _x, out| out.fill(0.0)),
        hess_block: Arc::new(|i, j, x, out| {
            out[0] = if i != j { 4.0 * x[0] * x[1] } else { 2.0 * x[1 - i].powi(2) };
        }),
        declared_spectral_bound: Some(1.0),
    };
    let cost = CostSpec::custom(cubic, 2, 1);
    assert!(matches!(cross_derivative_table(&cost, 2), Err(ModelError::UnboundedHessian(_))));
}

#[test]
fn spectral_bound_formulas() {
    // separable: max of atom sups
    let sep = CostSpec::separable(
        vec![ScalarAtom::Quadratic { coeff: 0.3 }, ScalarAtom::Quadratic { coeff: 0.9 }],
        1,
    );
    assert_eq!(sep.spectral_bound().unwrap(), 0.9);
    // pairwise with unit row sums: ‖G₁''‖ + 4‖G₂''‖
    let j = InteractionMatrix::complete(4).unwrap();
    let pw = CostSpec::pairwise(
        ScalarAtom::Quadratic { coeff: 0.5 },
        ScalarAtom::SqrtOnePlusSq { scale: 0.25 },
        j,
        1,
    );
    assert!((pw.spectral_bound().unwrap() - (0.5 + 1.0)).abs() < 1e-12);
}

#[test]
fn problem_validation() {
    let bad = ControlProblem::new(
        0,
        1,
        1.0,
        LagrangianSet::Shared(LagrangianSpec::quadratic()),
        CostSpec::zero(0, 1),
        CostSpec::zero(0, 1),
    );
    assert!(bad.is_err());

    let ok = ControlProblem::new(
        2,
        1,
        1.0,
        LagrangianSet::Shared(LagrangianSpec::quadratic()),
        CostSpec::zero(2, 1),
        CostSpec::pairwise(
            ScalarAtom::Linear { coeffs: vec![0.2] },
            ScalarAtom::SqrtOnePlusSq { scale: 0.5 },
            InteractionMatrix::complete(2).unwrap(),
            1,
        ),
    )
    .unwrap();
    assert!(ok.convex_flag);
}

#[test]
fn problem_json_roundtrip() {
    let problem = ControlProblem::new(
        2,
        1,
        1.0,
        LagrangianSet::Shared(LagrangianSpec::quadratic()),
        CostSpec::zero(2, 1),
        CostSpec::pairwise(
            ScalarAtom::Linear { coeffs: vec![0.2] },
            ScalarAtom::SqrtOnePlusSq { scale: 0.5 },
            InteractionMatrix::complete(2).unwrap(),
            1,
        ),
    )
    .unwrap();
    let json = serde_json::to_string(&problem).unwrap();
    let back: ControlProblem = serde_json::from_str(&json).unwrap();
    assert_eq!(back.n, 2);
    let rng = CounterRng::new(5);
    for s in 0..10u64 {
        let x = [rng.normal(s, 0, 0, 0), rng.normal(s, 1, 0, 0)];
        assert!((back.terminal_cost.value(&x) - problem.terminal_cost.value(&x)).abs() < 1e-15);
    }
}

#[test]
fn gaussian_tail_mass() {
    let m = MarginalSpec::gaussian(vec![0.0], 1.0);
    // 6 sigma box: tail far below 1e-6
    assert!(m.tail_mass_outside(&[-6.0], &[6.0]) < 1e-6);
    assert!(m.tail_mass_outside(&[-0.5], &[0.5]) > 0.3);
    let d = MarginalSpec::dirac(vec![0.0]);
    assert_eq!(d.tail_mass_outside(&[-1.0], &[1.0]), 0.0);
    assert_eq!(d.tail_mass_outside(&[1.0], &[2.0]), 1.0);
}

#[test]
fn law_constants() {
    let law = InitialLaw::shared(MarginalSpec::gaussian(vec![0.0], 0.25), 3).unwrap();
    assert_eq!(law.poincare_constant(), Some(0.25));
    assert_eq!(law.t2_constant(), Some(0.5));
    let dir = InitialLaw::dirac(vec![vec![0.0], vec![1.0]]).unwrap();
    assert_eq!(dir.poincare_constant(), Some(0.0));
}
