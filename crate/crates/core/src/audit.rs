//! Append-only audit log with per-jurisdiction retention.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Millis;

pub const MS_PER_DAY: Millis = 86_400_000;

/// Jurisdiction tag stamped on purge records, which belong to no session.
pub const PURGE_JURISDICTION: &str = "*";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuditError {
    #[error("sequence gap: expected {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("malformed log line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    SessionAuth,
    SessionControl,
    PermissionEvent,
    PolicyDecision,
    FrameDisposition,
    Override,
    Revoke,
    Purge,
}

impl AuditKind {
    /// Kinds whose records may carry captured frame content.
    pub fn carries_frame_content(self) -> bool {
        matches!(self, AuditKind::FrameDisposition)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp: Millis,
    pub session_id: Option<String>,
    pub kind: AuditKind,
    pub subject: Vec<String>,
    pub decision: Option<String>,
    pub policy_digest: Option<String>,
    pub jurisdiction: String,
    pub content: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    Days(u32),
    NoArchive,
}

impl From<mrshare_schema::RetentionDoc> for Retention {
    fn from(d: mrshare_schema::RetentionDoc) -> Self {
        match d {
            mrshare_schema::RetentionDoc::Days(n) => Retention::Days(n),
            mrshare_schema::RetentionDoc::NoArchive => Retention::NoArchive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JurisdictionPolicy {
    pub tag: String,
    pub retention: Retention,
}

impl From<&mrshare_schema::JurisdictionDoc> for JurisdictionPolicy {
    fn from(d: &mrshare_schema::JurisdictionDoc) -> Self {
        Self {
            tag: d.tag.clone(),
            retention: d.retention.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
    last_seq: u64,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn next_seq(&self) -> u64 {
        self.last_seq + 1
    }

    /// Appends `rec`, which must carry the next sequence number. Under
    /// NoArchive the content of frame-bearing records is dropped and only
    /// the decision skeleton is kept.
    pub fn record(
        &mut self,
        mut rec: AuditRecord,
        jp: &JurisdictionPolicy,
    ) -> Result<(), AuditError> {
        if rec.seq != self.next_seq() {
            return Err(AuditError::SequenceGap {
                expected: self.next_seq(),
                got: rec.seq,
            });
        }
        if jp.retention == Retention::NoArchive && rec.kind.carries_frame_content() {
            rec.content = None;
        }
        self.last_seq = rec.seq;
        self.records.push(rec);
        Ok(())
    }

    /// Removes records strictly older than their jurisdiction's retention
    /// and appends a purge record. Purge records and records of unknown or
    /// NoArchive jurisdictions are kept. Returns the number removed.
    pub fn purge_expired(
        &mut self,
        now: Millis,
        policies: &BTreeMap<String, JurisdictionPolicy>,
    ) -> usize {
        let before = self.records.len();
        self.records.retain(|r| {
            if r.kind == AuditKind::Purge {
                return true;
            }
            match policies.get(&r.jurisdiction).map(|p| p.retention) {
                Some(Retention::Days(d)) => {
                    now.saturating_sub(r.timestamp) <= d as Millis * MS_PER_DAY
                }
                _ => true,
            }
        });
        let purged = before - self.records.len();
        let seq = self.next_seq();
        self.last_seq = seq;
        self.records.push(AuditRecord {
            seq,
            timestamp: now,
            session_id: None,
            kind: AuditKind::Purge,
            subject: Vec::new(),
            decision: Some(format!("purged {purged}")),
            policy_digest: None,
            jurisdiction: PURGE_JURISDICTION.to_string(),
            content: None,
        });
        purged
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, &serde_json::to_value(r)?)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Records of one jurisdiction, as NDJSON.
    pub fn export(&self, tag: &str) -> String {
        let subset = AuditLog {
            records: self
                .records
                .iter()
                .filter(|r| r.jurisdiction == tag)
                .cloned()
                .collect(),
            last_seq: self.last_seq,
        };
        subset.to_ndjson()
    }
}

pub fn parse_ndjson(text: &str) -> Result<Vec<AuditRecord>, AuditError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AuditError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
