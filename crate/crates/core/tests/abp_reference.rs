//! Filter matching against the frozen reference fixture and the naive scan.

use mvp_core::conformance::{abp_differential, check_abp_cases, load_abp_cases};

fn fixture() -> String {
    format!("{}/../../fixtures/abp/reference_cases.json", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn reference_cases_all_agree() {
    let cases = load_abp_cases(fixture()).unwrap();
    assert_eq!(cases.len(), 30);
    let a = check_abp_cases(&cases);
    assert!(a.passed(), "{:#?}", a.mismatches);
}

#[test]
fn fixture_covers_every_verdict() {
    let cases = load_abp_cases(fixture()).unwrap();
    for v in ["matched", "excepted", "none"] {
        assert!(cases.iter().any(|c| c.expected == v), "{v}");
    }
}

#[test]
fn indexed_matcher_equals_scan_on_random_trials() {
    let a = abp_differential(10_000, 7);
    assert_eq!(a.total, 10_000);
    assert!(a.passed(), "{:#?}", a.mismatches);
}
