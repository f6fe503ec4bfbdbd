use latent_kl::envs::wrap_angle;
use latent_kl::hmmctl::{latent_cost, QuadraticCost};
use latent_kl::klcore::{average_cost_of_policy, solve_power_iteration, KlProblem, Transition};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Ergodic chain: a ring with self loops plus the drawn extra weights.
fn chain(n: usize, extra: &[f64]) -> Transition {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| extra[i * n + j]).collect();
            row[i] += 0.5;
            row[(i + 1) % n] += 0.5;
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect()
        })
        .collect();
    Transition::from_rows(&rows)
}

fn problem() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (2usize..8).prop_flat_map(|n| {
        (Just(n), prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], n * n), prop::collection::vec(0.0f64..3.0, n))
    })
}

proptest! {
    #[test]
    fn optimal_law_is_stochastic_and_within_the_passive_support((n, extra, q) in problem()) {
        let p = chain(n, &extra);
        let prob = KlProblem::new(p.clone(), q, 1.0).unwrap();
        let sol = solve_power_iteration(&prob, 1e-12, 1_000_000).unwrap();
        prop_assert!(sol.optimal_control.check_stochastic(1e-12).is_ok());
        for i in 0..n {
            for j in 0..n {
                if p.get(i, j) == 0.0 {
                    prop_assert_eq!(sol.optimal_control.get(i, j), 0.0);
                }
            }
        }
        let c = average_cost_of_policy(&prob, &sol.optimal_control).unwrap();
        prop_assert!((c - sol.average_cost).abs() <= 1e-9);
        prop_assert!(c <= average_cost_of_policy(&prob, &p).unwrap() + 1e-12);
    }

    #[test]
    fn constant_cost_shift_moves_only_the_average((n, extra, q) in problem(), shift in 0.0f64..2.0) {
        let p = chain(n, &extra);
        let a = solve_power_iteration(&KlProblem::new(p.clone(), q.clone(), 1.0).unwrap(), 1e-12, 1_000_000).unwrap();
        let shifted: Vec<f64> = q.iter().map(|v| v + shift).collect();
        let b = solve_power_iteration(&KlProblem::new(p, shifted, 1.0).unwrap(), 1e-12, 1_000_000).unwrap();
        prop_assert!((b.average_cost - a.average_cost - shift).abs() <= 1e-9);
        for (x, y) in a.desirability.iter().zip(&b.desirability) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn latent_cost_is_nonnegative_and_tends_to_the_point_cost(
        t in prop::collection::vec(-2.0f64..2.0, 2),
        m in prop::collection::vec(-2.0f64..2.0, 2),
        w in 0.2f64..5.0,
        alpha in 0.0f64..3.0,
    ) {
        let cost = QuadraticCost::new(DVector::from_vec(t), DMatrix::identity(2, 2) * w, alpha).unwrap();
        let mean = DVector::from_vec(m);
        let wide = latent_cost(&cost, &mean, &DMatrix::identity(2, 2)).unwrap();
        prop_assert!(wide >= 0.0);
        let point = latent_cost(&cost, &mean, &(DMatrix::identity(2, 2) * 1e-10)).unwrap();
        prop_assert!((point - cost.evaluate(&mean)).abs() <= 1e-6 * (1.0 + cost.evaluate(&mean)));
    }

    #[test]
    fn wrapped_angles_are_in_range_and_periodic(a in -50.0f64..50.0, k in -5i32..5) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        let shifted = wrap_angle(a + 2.0 * std::f64::consts::PI * k as f64);
        let d = (w - shifted).abs();
        prop_assert!(d <= 1e-9 || (d - 2.0 * std::f64::consts::PI).abs() <= 1e-9);
    }
}
