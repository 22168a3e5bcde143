use std::collections::BTreeMap;

use proptest::prelude::*;

use mrshare_core::audit::{
    parse_ndjson, AuditKind, AuditLog, AuditRecord, JurisdictionPolicy, Retention, MS_PER_DAY,
};

const TAGS: [&str; 4] = ["EU", "US", "CH", "XX"];

fn policies() -> BTreeMap<String, JurisdictionPolicy> {
    [
        ("EU", Retention::Days(7)),
        ("US", Retention::Days(30)),
        ("CH", Retention::NoArchive),
    ]
    .into_iter()
    .map(|(tag, retention)| {
        (
            tag.to_string(),
            JurisdictionPolicy {
                tag: tag.to_string(),
                retention,
            },
        )
    })
    .collect()
}

fn kind() -> impl Strategy<Value = AuditKind> {
    prop_oneof![
        Just(AuditKind::SessionAuth),
        Just(AuditKind::PermissionEvent),
        Just(AuditKind::PolicyDecision),
        Just(AuditKind::FrameDisposition),
        Just(AuditKind::Override),
        Just(AuditKind::Revoke),
    ]
}

fn entries() -> impl Strategy<Value = Vec<(u64, AuditKind, usize)>> {
    prop::collection::vec((0..40 * MS_PER_DAY, kind(), 0..TAGS.len()), 0..40)
}

fn build(entries: &[(u64, AuditKind, usize)]) -> (AuditLog, Vec<AuditRecord>) {
    let p = policies();
    let unknown = JurisdictionPolicy {
        tag: "XX".into(),
        retention: Retention::Days(0),
    };
    let mut log = AuditLog::new();
    let mut sent = Vec::new();
    for (i, &(t, kind, tag)) in entries.iter().enumerate() {
        let rec = AuditRecord {
            seq: i as u64 + 1,
            timestamp: t,
            session_id: Some("s".into()),
            kind,
            subject: vec![format!("obj:{i}")],
            decision: Some("allow".into()),
            policy_digest: None,
            jurisdiction: TAGS[tag].into(),
            content: Some(serde_json::json!({ "i": i })),
        };
        log.record(rec.clone(), p.get(TAGS[tag]).unwrap_or(&unknown))
            .unwrap();
        sent.push(rec);
    }
    (log, sent)
}

proptest! {
    #[test]
    fn purge_removes_exactly_the_expired(entries in entries(), now in 0..80 * MS_PER_DAY) {
        let p = policies();
        let (mut log, _) = build(&entries);
        let before = log.records().to_vec();
        let expired = |r: &AuditRecord| match p.get(&r.jurisdiction).map(|j| j.retention) {
            Some(Retention::Days(d)) => now.saturating_sub(r.timestamp) > d as u64 * MS_PER_DAY,
            _ => false,
        };
        let expect: Vec<AuditRecord> = before.iter().filter(|r| !expired(r)).cloned().collect();
        let removed = log.purge_expired(now, &p);
        prop_assert_eq!(removed, before.len() - expect.len());
        let (last, kept) = log.records().split_last().unwrap();
        prop_assert_eq!(kept, &expect[..]);
        prop_assert_eq!(last.kind, AuditKind::Purge);
        prop_assert_eq!(last.seq, before.len() as u64 + 1);
        let purged = format!("purged {removed}");
        prop_assert_eq!(last.decision.as_deref(), Some(purged.as_str()));
        // A second purge at the same instant finds nothing more.
        prop_assert_eq!(log.purge_expired(now, &p), 0);
        let seqs: Vec<u64> = log.records().iter().map(|r| r.seq).collect();
        prop_assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn no_archive_drops_only_frame_content(entries in entries()) {
        let (log, sent) = build(&entries);
        for (got, sent) in log.records().iter().zip(&sent) {
            if got.jurisdiction == "CH" && got.kind == AuditKind::FrameDisposition {
                prop_assert_eq!(&got.content, &None);
                let mut skeleton = sent.clone();
                skeleton.content = None;
                prop_assert_eq!(got, &skeleton);
            } else {
                prop_assert_eq!(got, sent);
            }
        }
    }

    #[test]
    fn ndjson_round_trips(entries in entries(), now in 0..80 * MS_PER_DAY) {
        let (mut log, _) = build(&entries);
        log.purge_expired(now, &policies());
        prop_assert_eq!(parse_ndjson(&log.to_ndjson()).unwrap(), log.records().to_vec());
    }

    #[test]
    fn out_of_sequence_appends_are_refused(entries in entries(), skip in 2u64..10) {
        let (mut log, _) = build(&entries);
        let before = log.records().to_vec();
        let rec = AuditRecord {
            seq: log.last_seq() + skip,
            timestamp: 0,
            session_id: None,
            kind: AuditKind::Revoke,
            subject: Vec::new(),
            decision: None,
            policy_digest: None,
            jurisdiction: "EU".into(),
            content: None,
        };
        prop_assert!(log.record(rec, &policies()["EU"]).is_err());
        prop_assert_eq!(log.records(), &before[..]);
    }
}
