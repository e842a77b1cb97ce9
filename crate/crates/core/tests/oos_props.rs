mod common;

use proptest::prelude::*;
use sdr_core::kernels::{eval_kernel, KernelSpec};
use sdr_core::oos::{l_step_residual, soft_update, solve_l, solve_l_ridge, solve_l_with, CouplingScaling, OosMap};
use sdr_core::transport::Coupling;
use sdr_core::Matrix;

fn gram(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> (Matrix, Matrix) {
    let x = common::gaussian(rng, n, 3);
    let k = eval_kernel(&KernelSpec::rbf_median(&x), &x, &x).unwrap();
    (x, k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn l_step_is_stationary(seed in any::<u64>(), n in 2usize..25, m in 1usize..8, lambda in 1e-3f64..10.0) {
        let mut rng = common::rng(seed);
        let (_, k) = gram(&mut rng, n);
        let t = common::coupling(&mut rng, n, m).row_normalized();
        let z = common::gaussian(&mut rng, m, 2);
        let l = solve_l_with(&k, &t, &z, lambda, 1.0).unwrap();
        let r = l_step_residual(&k, &t, &z, &l, lambda, 1.0);
        let scale = (&k * &t * &z).norm().max(1.0);
        prop_assert!(r.norm() <= 1e-8 * scale * n as f64, "{}", r.norm());
    }

    #[test]
    fn ridge_form_matches_permutation_coupling(seed in any::<u64>(), n in 2usize..20, lambda in 1e-2f64..5.0) {
        let mut rng = common::rng(seed);
        let (_, k) = gram(&mut rng, n);
        let perm = common::permutation(&mut rng, n);
        let plan = Matrix::from_fn(n, n, |i, j| if perm[i] == j { 1.0 / n as f64 } else { 0.0 });
        let c = Coupling::new(plan, Coupling::uniform_source(n)).unwrap();
        let z = common::gaussian(&mut rng, n, 2);
        let full = solve_l(&k, &c, &z, lambda, 1.0, CouplingScaling::RowNormalized).unwrap();
        // The row-normalized plan is the permutation matrix itself.
        let ridge = solve_l_ridge(&k, &(c.row_normalized() * &z), lambda).unwrap();
        prop_assert!((&full - &ridge).amax() <= 1e-9 * (1.0 + ridge.amax()));
        let pz = Matrix::from_fn(n, 2, |i, j| z[(perm[i], j)]);
        let direct = (&k + Matrix::identity(n, n) * lambda).lu().solve(&pz).unwrap();
        prop_assert!((&ridge - &direct).amax() <= 1e-8 * (1.0 + direct.amax()));
    }

    #[test]
    fn soft_update_contracts_toward_kl(seed in any::<u64>(), n in 2usize..20, beta in 0.0f64..=1.0) {
        let mut rng = common::rng(seed);
        let (_, k) = gram(&mut rng, n);
        let z = common::gaussian(&mut rng, n, 2);
        let l = common::gaussian(&mut rng, n, 2);
        let kl = &k * &l;
        let z2 = soft_update(&z, &k, &l, beta, None).unwrap();
        let lhs = (&z2 - &kl).norm();
        let rhs = (1.0 - beta) * (&z - &kl).norm();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs));
    }

    #[test]
    fn projection_is_linear_in_l(seed in any::<u64>(), n in 2usize..15, s in 1usize..6, a in -3.0f64..3.0) {
        let mut rng = common::rng(seed);
        let (x, _) = gram(&mut rng, n);
        let xs = common::gaussian(&mut rng, s, 3);
        let (l1, l2) = (common::gaussian(&mut rng, n, 2), common::gaussian(&mut rng, n, 2));
        let map = |l: Matrix| OosMap {
            l,
            x_train: x.clone(),
            kernel: KernelSpec::rbf_median(&x),
            lambda: 1e-2,
            beta: 0.5,
            mu: 1.0,
        };
        let combo = map(&l1 * a + &l2).project(&xs).unwrap();
        let parts = map(l1).project(&xs).unwrap() * a + map(l2).project(&xs).unwrap();
        prop_assert!((combo - parts).amax() <= 1e-10 * (1.0 + a.abs()));
    }
}
