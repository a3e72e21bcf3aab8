mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn zscore_is_idempotent(seed in any::<u64>(), sessions in 1usize..4, per in 2usize..8, dim in 1usize..20) {
        let records = common::random_records(seed, sessions, per, dim);
        prop_assert!(common::zscore_drift(&records) <= 1e-6);
    }

    #[test]
    fn averaging_commutes_with_masking(seed in any::<u64>(), len in 1usize..64, repeats in 1usize..4, stimuli in 1usize..5) {
        prop_assert!(common::average_mask_gap(seed, len, repeats, stimuli) <= 1e-12);
    }

    #[test]
    fn manifest_round_trip(seed in any::<u64>(), n_train in 1usize..5, n_test in 0usize..3, repeats in 1usize..3) {
        prop_assert!(common::manifest_round_trips(seed, n_train, n_test, repeats));
    }
}
