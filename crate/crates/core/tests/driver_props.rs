mod common;

use proptest::prelude::*;
use sdr_core::datasets;
use sdr_core::driver::{fit, OosConfig, PrototypeCount, SdrConfig, Task};
use sdr_core::io;
use sdr_core::Matrix;

fn classes(n: usize, seed: u64) -> (Matrix, Matrix) {
    let d = datasets::gen_hidden_classes(n, 3, 4, 4.0, 1.0, seed).unwrap();
    let y = Matrix::from_column_slice(n, 1, d.y.as_slice());
    (d.x, y)
}

fn small(seed: u64, eta: f64) -> SdrConfig {
    SdrConfig {
        m: PrototypeCount::Fixed(6),
        eta,
        task: Task::Classification,
        lr: 0.05,
        outer_max: 6,
        inner_max: 80,
        perplexity: 5.0,
        seed,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fit_is_bit_reproducible(seed in 0u64..1000) {
        let (x, y) = classes(30, seed);
        let cfg = small(seed, 100.0);
        let a = io::encode_model(&fit(&x, &y, &cfg).unwrap()).unwrap();
        let b = io::encode_model(&fit(&x, &y, &cfg).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn final_state_is_feasible(seed in 0u64..1000, oos in any::<bool>()) {
        let (x, y) = classes(30, seed);
        let mut cfg = small(seed, 100.0);
        if oos {
            cfg.task = Task::Regression;
            cfg.oos = Some(OosConfig::default());
        }
        let model = fit(&x, &y, &cfg).unwrap();
        prop_assert!(model.coupling.row_violation() <= 1e-10);
        prop_assert!(model.coupling.plan().iter().all(|&v| v >= -1e-14));
        prop_assert!((model.h_z.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        prop_assert!(model.h_z.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn guarded_objective_never_rises(seed in 0u64..1000) {
        let (x, y) = classes(30, seed);
        let mut cfg = small(seed, 100.0);
        cfg.t_step_guard = true;
        cfg.outer_tol = 1e-12;
        let model = fit(&x, &y, &cfg).unwrap();
        for w in model.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-8 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn dependence_term_raises_cka(seed in 0u64..1000) {
        let d = datasets::gen_hidden_classes(60, 4, 6, 3.0, 4.0, seed).unwrap();
        let y = Matrix::from_column_slice(60, 1, d.y.as_slice());
        let run = |eta| {
            let cfg = SdrConfig { m: PrototypeCount::Fixed(10), outer_max: 10, ..small(seed, eta) };
            fit(&d.x, &y, &cfg).unwrap().final_cka()
        };
        let (with, without) = (run(1000.0), run(0.0));
        prop_assert!(with >= without, "{with} < {without}");
    }
}
