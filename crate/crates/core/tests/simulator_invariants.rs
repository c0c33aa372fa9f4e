//! Conversation state machine under a random policy.

mod common;

use common::{random_policy_invariants, small_dataset};

#[test]
fn ten_thousand_random_episodes_keep_invariants() {
    let ds = small_dataset(6);
    let run = random_policy_invariants(&ds, 10_000, 10, 6);
    assert_eq!(run.episodes, 10_000);
    assert!(run.states > 10_000);
    assert!(run.violations.is_empty(), "{:?}", &run.violations[..run.violations.len().min(5)]);
}
