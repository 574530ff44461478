use proptest::prelude::*;
use reserve_lab::triangle::{load_triangle, CellIndexSets, Triangle, TriangleKind};

fn incremental(int_valued: bool) -> impl Strategy<Value = Triangle> {
    (1usize..9).prop_flat_map(move |size| {
        let rows: Vec<_> = (0..size)
            .map(|i| {
                prop::collection::vec(0.0f64..1e7, size - i).prop_map(move |r| {
                    if int_valued {
                        r.into_iter().map(f64::floor).collect()
                    } else {
                        r
                    }
                })
            })
            .collect();
        rows.prop_map(|rows| Triangle::new(TriangleKind::Incremental, rows).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cumulative_round_trip_is_exact_on_integers(t in incremental(true)) {
        let back = t.to_cumulative().unwrap().to_incremental().unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn cumulative_round_trip_on_reals(t in incremental(false)) {
        let back = t.to_cumulative().unwrap().to_incremental().unwrap();
        for ((_, a), (_, b)) in back.observed().zip(t.observed()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()) * t.size() as f64);
        }
    }

    #[test]
    fn observed_sum_equals_latest_cumulative_diagonal(t in incremental(true)) {
        let total: f64 = t.observed().map(|(_, v)| v).sum();
        let diagonal: f64 = t.to_cumulative().unwrap().latest_diagonal().iter().sum();
        prop_assert_eq!(total, diagonal);
    }

    #[test]
    fn csv_round_trip(t in incremental(true)) {
        let text = t.to_csv_string();
        let back = load_triangle(text.as_bytes(), 1.0).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn index_set_sizes(size in 1usize..40) {
        let sets = CellIndexSets::new(size);
        prop_assert_eq!(sets.observed.len(), size * (size + 1) / 2);
        prop_assert_eq!(sets.unobserved.len(), size * (size - 1) / 2);
        prop_assert!(sets.observed.is_disjoint(&sets.unobserved));
    }
}
