use bsde_core::condexp::{fit_condexp, tree_condexp, Conditioner, RegressionBasis, StateMatrix};
use bsde_core::diagnostics::{conditional_variation, Process};
use bsde_core::problem_model::builtin_problem;
use bsde_core::stochastic_basis::TreeModel;
use proptest::prelude::*;

fn states_and_targets(rows: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-3.0f64..3.0, rows),
        prop::collection::vec(-5.0f64..5.0, rows),
        prop::collection::vec(-5.0f64..5.0, rows),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn regression_is_a_linear_projection(
        (x, a, b) in states_and_targets(40),
        ca in -2.0f64..2.0,
        cb in -2.0f64..2.0,
    ) {
        let states = StateMatrix::from_column(x).unwrap();
        let basis = RegressionBasis::polynomial(2, 0.0);
        let fa = fit_condexp(&states, &a, 1, &basis).unwrap().fitted;
        let fb = fit_condexp(&states, &b, 1, &basis).unwrap().fitted;
        let mix: Vec<f64> = a.iter().zip(&b).map(|(u, v)| ca * u + cb * v).collect();
        let fm = fit_condexp(&states, &mix, 1, &basis).unwrap().fitted;
        for i in 0..40 {
            prop_assert!((fm[i] - (ca * fa[i] + cb * fb[i])).abs() < 1e-8);
        }
        let again = fit_condexp(&states, &fa, 1, &basis).unwrap().fitted;
        for i in 0..40 {
            prop_assert!((again[i] - fa[i]).abs() < 1e-8);
        }
        let second = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>();
        prop_assert!(second(&fa) <= second(&a) * (1.0 + 1e-10) + 1e-10);
    }

    #[test]
    fn tree_expectations_satisfy_the_tower_property(
        values in prop::collection::vec(-10.0f64..10.0, 64),
        coarse in 0usize..=6,
        gap in 0usize..=6,
    ) {
        let tree = TreeModel::new(6, 1.0).unwrap();
        let fine = (coarse + gap).min(6);
        let direct = tree_condexp(&tree, coarse, &values, 1).unwrap();
        let inner = tree_condexp(&tree, fine, &values, 1).unwrap();
        let lifted: Vec<f64> = (0..64).map(|leaf| inner[leaf % tree.nodes_at(fine)]).collect();
        let outer = tree_condexp(&tree, coarse, &lifted, 1).unwrap();
        for (x, y) in direct.iter().zip(&outer) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_variation_grows_under_refinement(
        table in prop::collection::vec(-3.0f64..3.0, 127),
        stride in 2usize..=3,
    ) {
        // an adapted process on the depth-6 tree: X_k depends on the first k signs
        let depth = 6;
        let tree = TreeModel::new(depth, 1.0).unwrap();
        let ens = tree.ensemble();
        let problem = builtin_problem("P1").unwrap();
        let cond = Conditioner::new(&problem, &ens, &RegressionBasis::indicator()).unwrap();
        let pc = ens.paths();
        let mut values = vec![0.0; pc * (depth + 1)];
        for p in 0..pc {
            for k in 0..=depth {
                let node = p % (1 << k);
                values[p * (depth + 1) + k] = table[(1 << k) - 1 + node];
            }
        }
        let x = Process::new(&values, pc, depth, 1).unwrap();
        let coarse: Vec<usize> = (0..depth).step_by(stride * 2).chain([depth]).collect();
        let fine: Vec<usize> = (0..depth).step_by(stride).chain([depth]).collect();
        let cv_coarse = conditional_variation(x, &cond, &coarse).unwrap().value;
        let cv_fine = conditional_variation(x, &cond, &fine).unwrap().value;
        prop_assert!(cv_coarse <= cv_fine + 1e-12, "{} > {}", cv_coarse, cv_fine);
    }
}
