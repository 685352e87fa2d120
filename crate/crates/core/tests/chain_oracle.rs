mod common;

use common::checks::chain_oracle;

#[test]
fn compose_chain_matches_reference_interpreter() {
    let rep = chain_oracle(1000, 2024);
    assert_eq!(rep.mismatched, 0, "executed experts differ");
    assert!(rep.worst <= 1e-9, "max abs difference {:e}", rep.worst);
    assert!(
        rep.halts > 0 && rep.grew > 0 && rep.shrank > 0,
        "control paths not exercised: {} {} {}",
        rep.halts,
        rep.grew,
        rep.shrank
    );
}
