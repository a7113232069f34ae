use std::collections::BTreeSet;

use gate_core::federation::{issue_assertion, CircleOfTrust, SpVerifier, VerifyError, KEY_LEN};
use gate_core::model::AuthMethod;
use proptest::prelude::*;

const KEY: [u8; KEY_LEN] = [7; KEY_LEN];
const NOW: i64 = 1_000_000;

fn issued() -> gate_core::federation::Assertion {
    let mut cot = CircleOfTrust::new("idp");
    cot.add_sp("gate", KEY, "http://gate/__gate/sso/return")
        .unwrap();
    issue_assertion(
        &cot,
        "alice",
        "gate",
        &BTreeSet::from([AuthMethod::Password]),
        NOW,
        300,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn changed_fields_without_the_key_are_rejected(
        field in 0usize..7,
        text in "[a-z]{1,8}",
        delta in 1i64..10_000,
        other_key in proptest::array::uniform32(any::<u8>()),
        resign in any::<bool>(),
    ) {
        prop_assume!(other_key != KEY);
        let mut a = issued();
        match field {
            0 => a.issuer = format!("{}{text}", a.issuer),
            1 => a.subject = format!("{}{text}", a.subject),
            2 => a.audience = format!("{}{text}", a.audience),
            3 => a.methods = BTreeSet::from([AuthMethod::Password, AuthMethod::Token]),
            4 => a.issued_at -= delta,
            5 => a.expires_at += delta,
            _ => a.nonce[0] ^= 1,
        }
        if resign {
            a.sign(&other_key);
        }
        let v = SpVerifier::new("gate", "idp", KEY);
        prop_assert_eq!(v.verify(&a.to_wire(), NOW), Err(VerifyError::BadSignature));
    }
}
