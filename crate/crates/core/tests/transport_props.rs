mod common;

use proptest::prelude::*;
use sdr_core::transport::{
    gw_cost, gw_grad_t, prototype_targets, srbsfgw_solve, BregmanGenerator, CgOptions, Coupling, PrototypeForm,
    SupervisedLoss,
};
use sdr_core::Matrix;

fn naive_gw(p: &Matrix, q: &Matrix, t: &Matrix) -> (f64, Matrix) {
    let (n, m) = t.shape();
    let mut cost = 0.0;
    let mut grad = Matrix::zeros(n, m);
    for i in 0..n {
        for k in 0..n {
            for j in 0..m {
                for l in 0..m {
                    let d = (p[(i, k)] - q[(j, l)]).powi(2);
                    cost += d * t[(i, j)] * t[(k, l)];
                    // d/dT_ij picks up both the (i,j) and (k,l) slots.
                    grad[(i, j)] += d * t[(k, l)];
                    grad[(k, l)] += d * t[(i, j)];
                }
            }
        }
    }
    (cost, grad)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn factorized_gw_matches_quadruple_loop(seed in any::<u64>(), n in 2usize..9, m in 2usize..7) {
        let mut rng = common::rng(seed);
        let p = common::similarity(&mut rng, n);
        let q = common::similarity(&mut rng, m);
        let t = common::coupling(&mut rng, n, m);
        let (cost, grad) = naive_gw(&p, &q, t.plan());
        prop_assert!((gw_cost(&p, &q, &t).unwrap() - cost).abs() <= 1e-10);
        prop_assert!((gw_grad_t(&p, &q, &t).unwrap() - grad).amax() <= 1e-10);
    }

    #[test]
    fn primal_prototypes_stay_in_target_hull(seed in any::<u64>(), n in 2usize..15, m in 1usize..6, c in 1usize..4) {
        let mut rng = common::rng(seed);
        let y = common::gaussian(&mut rng, n, c);
        let t = common::coupling(&mut rng, n, m);
        let g = prototype_targets(&t, &y, BregmanGenerator::L2, PrototypeForm::Primal).unwrap().targets;
        for k in 0..c {
            let col = y.column(k);
            let (lo, hi) = (col.min(), col.max());
            prop_assert!(g.column(k).iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    #[test]
    fn solver_is_feasible_and_monotone(seed in any::<u64>(), n in 3usize..14, m in 2usize..6, alpha in 0.0f64..=1.0) {
        let mut rng = common::rng(seed);
        let p = common::similarity(&mut rng, n);
        let q = common::similarity(&mut rng, m);
        let y = common::gaussian(&mut rng, n, 2);
        let init = common::coupling(&mut rng, n, m);
        let r = srbsfgw_solve(&p, &q, &y, alpha, SupervisedLoss::Squared, &init, &CgOptions::default()).unwrap();
        for w in r.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10, "{} -> {}", w[0], w[1]);
        }
        prop_assert!(r.coupling.row_violation() <= 1e-10);
        prop_assert!(r.coupling.plan().iter().all(|&v| v >= -1e-14));
    }

    #[test]
    fn solver_is_permutation_equivariant(seed in any::<u64>(), n in 3usize..12, m in 2usize..5) {
        let mut rng = common::rng(seed);
        let p = common::similarity(&mut rng, n);
        let q = common::similarity(&mut rng, m);
        let y = common::gaussian(&mut rng, n, 1);
        let init = common::coupling(&mut rng, n, m);
        let perm = common::permutation(&mut rng, n);
        let opts = CgOptions::default();
        let a = srbsfgw_solve(&p, &q, &y, 0.5, SupervisedLoss::Squared, &init, &opts).unwrap();
        let init_p = Coupling::new(common::permute_rows(init.plan(), &perm), Coupling::uniform_source(n)).unwrap();
        let b = srbsfgw_solve(
            &common::permute_sym(&p, &perm),
            &q,
            &common::permute_rows(&y, &perm),
            0.5,
            SupervisedLoss::Squared,
            &init_p,
            &opts,
        )
        .unwrap();
        let expect = common::permute_rows(a.coupling.plan(), &perm);
        prop_assert!((b.coupling.plan() - &expect).amax() <= 1e-9, "diff {} iters {} {} traces {:?} {:?}", (b.coupling.plan() - &expect).amax(), a.iterations, b.iterations, a.trace, b.trace);
    }
}
