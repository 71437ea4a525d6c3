use aggdiff::autodiff::Matrix;
use aggdiff::data::{self, AggregateSeries, SyntheticKind, SyntheticSpec};
use aggdiff::rng::Rng;
use aggdiff::sde;
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = SyntheticKind> {
    prop_oneof![Just(SyntheticKind::Syn1), Just(SyntheticKind::Syn2), Just(SyntheticKind::Syn3)]
}

fn small_spec(kind: SyntheticKind, dim: usize) -> SyntheticSpec {
    let mut spec = SyntheticSpec::new(kind, dim);
    spec.generated = 30;
    spec.observed = 20;
    spec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generation_is_deterministic(kind in kind(), dim in 1usize..4, seed in any::<u64>()) {
        let spec = small_spec(kind, dim);
        let a = data::gen_synthetic(&spec, seed).unwrap();
        let b = data::gen_synthetic(&spec, seed).unwrap();
        prop_assert_eq!(a.observed.batches(), b.observed.batches());
        prop_assert_eq!(a.hidden.batches(), b.hidden.batches());
        prop_assert!(a.observed.batches().iter().all(|m| m.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn observed_and_held_out_partition_the_generated(kind in kind(), seed in any::<u64>()) {
        let spec = small_spec(kind, 2);
        let d = data::gen_synthetic(&spec, seed).unwrap();
        let held = d.held_out.unwrap();
        for (o, h) in d.observed.batches().iter().zip(held.batches()) {
            prop_assert_eq!(o.nrows() + h.nrows(), spec.generated);
        }
    }

    #[test]
    fn subsample_draws_distinct_rows(seed in any::<u64>(), count in 1usize..20) {
        let spec = small_spec(SyntheticKind::Syn1, 2);
        let series = data::gen_synthetic(&spec, 1).unwrap().observed;
        let sub = data::subsample(&series, count, seed).unwrap();
        prop_assert_eq!(sub.counts(), vec![count; series.len()]);
        for (s, full) in sub.batches().iter().zip(series.batches()) {
            let mut rows: Vec<Vec<u64>> = s.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
            for r in &rows {
                prop_assert!(full.rows().into_iter().any(|f| f.iter().map(|v| v.to_bits()).eq(r.iter().copied())));
            }
            rows.sort();
            rows.dedup();
            prop_assert_eq!(rows.len(), count);
        }
    }

    #[test]
    fn csv_round_trip_is_exact(values in prop::collection::vec(-1e6..1e6f64, 12)) {
        let batches = vec![
            Matrix::from_shape_vec((3, 2), values[..6].to_vec()).unwrap(),
            Matrix::from_shape_vec((3, 2), values[6..].to_vec()).unwrap(),
        ];
        let series = AggregateSeries::new(vec![0, 3], batches, "mem").unwrap();
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        let back = AggregateSeries::read_csv(buf.as_slice(), "mem").unwrap();
        prop_assert_eq!(back.times(), series.times());
        prop_assert_eq!(back.batches(), series.batches());
    }

    #[test]
    fn simulation_is_deterministic_and_starts_at_x0(seed in any::<u64>(), theta in 0.1..3.0f64) {
        let drift = sde::ou_drift(theta, &[0.5, -0.5]).unwrap();
        let root = Matrix::eye(2) * 0.3;
        let x0 = Rng::new(seed).child(0).normal_matrix(16, 2);
        let a = sde::simulate_drift(&drift, &root, 0.1, 5, &x0, 3, &Rng::new(seed)).unwrap();
        let b = sde::simulate_drift(&drift, &root, 0.1, 5, &x0, 3, &Rng::new(seed)).unwrap();
        prop_assert_eq!(a.len(), 4);
        prop_assert_eq!(&a[0], &x0);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn psd_sqrt_squares_back(entries in prop::collection::vec(-1.0..1.0f64, 9)) {
        let m = Matrix::from_shape_vec((3, 3), entries).unwrap();
        let cov = m.dot(&m.t());
        let root = sde::psd_sqrt(&cov).unwrap();
        let back = root.dot(&root);
        for (x, y) in back.iter().zip(cov.iter()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}
