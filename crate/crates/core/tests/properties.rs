//! Randomized invariants over the model and metric primitives.

use distctl_core::bounds::constants_ledger;
use distctl_core::metrics::wasserstein::{wasserstein2, GroundMetric};
use distctl_core::model::{
    cross_derivative_table, hamiltonian_eval, ControlProblem, CostSpec, InitialLaw,
    LagrangianSet, LagrangianSpec, ScalarAtom,
};
use proptest::prelude::*;

fn small_reals() -> impl Strategy<Value = f64> {
    (-50.0f64..50.0).prop_map(|v| (v * 100.0).round() / 100.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn quadratic_hamiltonian_identity(
        p in prop::collection::vec(small_reals(), 1..4),
        x in prop::collection::vec(small_reals(), 1..4),
    ) {
        let d = p.len().min(x.len());
        let l = LagrangianSpec::quadratic();
        let h = hamiltonian_eval(&l, &x[..d], &p[..d]).unwrap();
        let expect: f64 = 0.5 * p[..d].iter().map(|v| v * v).sum::<f64>();
        prop_assert!((h.value - expect).abs() <= f64::EPSILON * expect.max(1.0));
        for k in 0..d {
            prop_assert_eq!(h.minimizer[k], -p[k]);
        }
    }

    #[test]
    fn atoms_are_convex_along_segments(
        which in 0usize..4,
        scale in 0.01f64..3.0,
        a in prop::collection::vec(-5.0f64..5.0, 2),
        b in prop::collection::vec(-5.0f64..5.0, 2),
        lambda in 0.0f64..1.0,
    ) {
        let atom = match which {
            0 => ScalarAtom::Quadratic { coeff: scale },
            1 => ScalarAtom::SqrtOnePlusSq { scale },
            2 => ScalarAtom::LogCosh { scale },
            _ => ScalarAtom::Linear { coeffs: vec![scale, -scale] },
        };
        let mix: Vec<f64> =
            a.iter().zip(&b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
        let lhs = atom.value(&mix);
        let rhs = lambda * atom.value(&a) + (1.0 - lambda) * atom.value(&b);
        prop_assert!(lhs <= rhs + 1e-9);
    }

    #[test]
    fn separable_costs_never_couple(
        coeffs in prop::collection::vec(0.0f64..3.0, 2..5),
    ) {
        let n = coeffs.len();
        let atoms: Vec<ScalarAtom> =
            coeffs.iter().map(|c| ScalarAtom::Quadratic { coeff: *c }).collect();
        let cost = CostSpec::separable(atoms, 1);
        let table = cross_derivative_table(&cost, n).unwrap();
        prop_assert!(table.is_zero());
        prop_assert!(table.certified);
    }

    #[test]
    fn ledger_identity_holds_exactly(
        c_f in 0.0f64..4.0,
        c_g in 0.0f64..4.0,
        horizon in 0.1f64..3.0,
    ) {
        let n = 2;
        let problem = ControlProblem::new(
            n,
            1,
            horizon,
            LagrangianSet::Shared(LagrangianSpec::quadratic()),
            CostSpec::separable_shared(ScalarAtom::Quadratic { coeff: c_f }, n, 1),
            CostSpec::separable_shared(ScalarAtom::Quadratic { coeff: c_g }, n, 1),
        )
        .unwrap();
        let m0 = InitialLaw::dirac(vec![vec![0.0]; n]).unwrap();
        let ledger = constants_ledger(&problem, &m0).unwrap();
        prop_assert_eq!(ledger.c_s, ledger.c_g + horizon * (ledger.d_xx_l + ledger.c_f));
        prop_assert!(ledger.c_p >= horizon - 1e-12);
    }

    #[test]
    fn wasserstein_metric_axioms(
        a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 4),
        b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 4),
        c in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 4),
    ) {
        let dab = wasserstein2(&a, &b, GroundMetric::Euclidean).unwrap();
        let dba = wasserstein2(&b, &a, GroundMetric::Euclidean).unwrap();
        let dbc = wasserstein2(&b, &c, GroundMetric::Euclidean).unwrap();
        let dac = wasserstein2(&a, &c, GroundMetric::Euclidean).unwrap();
        prop_assert!((dab - dba).abs() < 1e-12);
        prop_assert!(dac <= dab + dbc + 1e-9);
        prop_assert!(dab >= 0.0);
        let daa = wasserstein2(&a, &a, GroundMetric::Euclidean).unwrap();
        prop_assert!(daa.abs() < 1e-12);
    }
}
