//! Registrable-domain lookup against the public suffix conformance vectors.

use mvp_core::conformance::check_psl_vectors;
use mvp_core::suffix::SuffixTable;

#[test]
fn conformance_vectors_pass() {
    let text =
        std::fs::read_to_string(format!("{}/../../fixtures/psl/test_psl.txt", env!("CARGO_MANIFEST_DIR"))).unwrap();
    let (a, skipped) = check_psl_vectors(&SuffixTable::bundled(), &text);
    assert_eq!(skipped, 1, "only the null-input vector is skipped");
    assert!(a.total > 40, "{}", a.total);
    assert!(a.passed(), "{:#?}", a.mismatches);
}
