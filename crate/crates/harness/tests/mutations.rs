mod common;

use mrshare_harness::mutations::Mutation;
use mrshare_harness::runner::run;
use mrshare_verify::{ordering_violations, verify_no_leak};

use common::fixture;

#[test]
fn every_mutation_is_caught_on_full_session() {
    let s = fixture("full_session");
    let out = run(&s, 11).unwrap();
    let clean = out.artifacts();
    assert!(verify_no_leak(&clean, &out.scenario).passed());
    assert!(ordering_violations(&clean).is_empty());
    for m in Mutation::ALL {
        let bad = m
            .apply(&clean, &s)
            .unwrap_or_else(|| panic!("{} found no spot", m.name()));
        let report = verify_no_leak(&bad.artifacts, &out.scenario);
        let hit = report
            .violations
            .iter()
            .find(|v| v.recipient == bad.recipient && v.timestamp == bad.timestamp);
        let hit =
            hit.unwrap_or_else(|| panic!("{} not flagged: {:?}", m.name(), report.violations));
        if let Some(cell) = bad.cell {
            assert!(
                report.violations.iter().any(|v| v.cell == Some(cell)),
                "{} flagged without cell {cell:?}",
                m.name()
            );
        }
        // Caught on content or ordering, not on a broken archive.
        assert!(
            !hit.reason.contains("archive"),
            "{}: {}",
            m.name(),
            hit.reason
        );
    }
}

#[test]
fn mutations_are_deterministic() {
    let s = fixture("full_session");
    let clean = run(&s, 3).unwrap().artifacts();
    for m in Mutation::ALL {
        let (a, b) = (m.apply(&clean, &s).unwrap(), m.apply(&clean, &s).unwrap());
        assert_eq!(a.artifacts, b.artifacts, "{}", m.name());
    }
}
