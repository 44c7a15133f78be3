use bsc_core::model::{ParamLayout, Params};
use bsc_core::scm::simplex_project;
use proptest::prelude::*;

proptest! {
    #[test]
    fn simplex_projection_is_feasible(y in prop::collection::vec(-10.0f64..10.0, 1..12)) {
        let x = simplex_project(&y);
        prop_assert_eq!(x.len(), y.len());
        for &v in &x {
            prop_assert!(v >= 0.0);
        }
        let total: f64 = x.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn simplex_projection_beats_random_feasible_points(
        y in prop::collection::vec(-5.0f64..5.0, 2..8),
        raw in prop::collection::vec(0.001f64..1.0, 8),
    ) {
        let x = simplex_project(&y);
        let dist = |p: &[f64]| -> f64 {
            p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        // any normalized positive vector is feasible; none may do better
        let total: f64 = raw[..y.len()].iter().sum();
        let other: Vec<f64> = raw[..y.len()].iter().map(|v| v / total).collect();
        prop_assert!(dist(&x) <= dist(&other) + 1e-9);
    }

    #[test]
    fn param_pack_unpack_round_trips(
        t in 2usize..6,
        j in 2usize..5,
        l in 0usize..3,
        seed in 0u64..1000,
    ) {
        let t0 = t - 1;
        let layout = ParamLayout::new(t, j, l, t0);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let params = Params::unpack(&layout, &v).unwrap();
        let packed = params.pack(&layout);
        prop_assert_eq!(packed, v);
    }
}
