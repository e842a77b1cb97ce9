mod common;

use proptest::prelude::*;
use sdr_core::datasets::{self, GENERATORS};
use sdr_core::driver::{fit, OosConfig, PrototypeCount, SdrConfig, SdrModel};
use sdr_core::io;
use sdr_core::Matrix;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generators_are_pure(seed in any::<u64>(), n in 2usize..80, which in 0usize..GENERATORS.len()) {
        let name = GENERATORS[which];
        let a = datasets::generate(name, n, None, seed).unwrap();
        let b = datasets::generate(name, n, None, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let c = datasets::generate(name, n, None, seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(a.x, c.x);
    }

    #[test]
    fn split_partitions_rows(seed in any::<u64>(), n in 2usize..200, f in 0.01f64..0.99) {
        let (tr, te) = datasets::train_test_split(n, f, seed).unwrap();
        let mut all = [tr.clone(), te.clone()].concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!tr.is_empty() && !te.is_empty());
    }

    #[test]
    fn csv_round_trip_is_bit_exact(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..6) {
        let mut rng = common::rng(seed);
        let m = common::gaussian(&mut rng, rows, cols) * 1e3f64.powi((seed % 7) as i32 - 3);
        let headers: Vec<String> = (0..cols).map(|j| format!("c{j}")).collect();
        let back = io::parse_csv(&io::format_csv(&headers, &m).unwrap()).unwrap();
        prop_assert_eq!(back.data, m);
    }
}

#[test]
fn model_round_trip_is_bit_exact() {
    let d = datasets::generate("scurve", 40, None, 3).unwrap();
    let y = Matrix::from_column_slice(40, 1, d.y.as_slice());
    let cfg = SdrConfig {
        m: PrototypeCount::EqualsN,
        lr: 0.01,
        outer_max: 4,
        inner_max: 50,
        perplexity: 8.0,
        oos: Some(OosConfig::default()),
        seed: 3,
        ..Default::default()
    };
    let model = fit(&d.x, &y, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sdr");
    io::save_model(&path, &model).unwrap();
    let back: SdrModel = io::load_model(&path).unwrap();
    assert_eq!(io::encode_model(&back).unwrap(), io::encode_model(&model).unwrap());
    assert_eq!(back.z, model.z);
    assert_eq!(back.coupling, model.coupling);
    assert_eq!(back.config, model.config);
    let xs = d.x.rows(0, 5).into_owned();
    assert_eq!(back.project(&xs).unwrap(), model.project(&xs).unwrap());
}
