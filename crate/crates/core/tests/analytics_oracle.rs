//! The indexed analyses agree with brute-force recomputation from raw records.

use mvp_core::analytics::synth::SynthSpec;
use mvp_core::conformance::check_analytics;
use proptest::prelude::*;

#[test]
fn default_spec_agrees() {
    check_analytics(1, &SynthSpec::default()).unwrap();
}

#[test]
fn empty_store_agrees() {
    assert_eq!(check_analytics(2, &SynthSpec { domains: 0, ..SynthSpec::default() }), Ok(0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_stores_agree(seed in any::<u64>(), domains in 1u32..5, reps in 1u32..3, visits in 0u32..6) {
        let spec = SynthSpec { domains, reps, max_visits: visits, ..SynthSpec::default() };
        prop_assert!(check_analytics(seed, &spec).is_ok());
    }
}
