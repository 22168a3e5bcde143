//! Deliberate corruptions of a correct run's artifacts. Each one models a
//! distinct way a broken pipeline could over-share; the leak verifier must
//! flag every one of them.

use std::collections::BTreeSet;

use mrshare_core::geom::Point3;
use mrshare_core::policy::{effective_policy, Decision};
use mrshare_core::scene::{capture_frame, tile_cells, DevicePose, ObjectArea, ShareFrame, MASKED};
use mrshare_core::twin::ZoneClass;
use mrshare_schema::Sample;
use mrshare_verify::{ArchivedFrame, Artifacts, TraceMessage, TraceRecord};
use serde_json::json;

use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mutation {
    /// A frame delivered after the REVOKE that should have ended delivery.
    LateFrame,
    /// One masked cell restored to the id of a denied object.
    UnmaskedCell,
    /// A frame tailored for one recipient delivered to another.
    WrongRecipient,
    /// A frame delivered after the headset was taken off.
    PostDoffFrame,
    /// An object the ceiling forbids painted into a delivered frame.
    CeilingViolation,
    /// A frame delivered while the device stood in a buffer zone.
    BufferZoneFrame,
}

impl Mutation {
    pub const ALL: [Mutation; 6] = [
        Mutation::LateFrame,
        Mutation::UnmaskedCell,
        Mutation::WrongRecipient,
        Mutation::PostDoffFrame,
        Mutation::CeilingViolation,
        Mutation::BufferZoneFrame,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::LateFrame => "late_frame",
            Mutation::UnmaskedCell => "unmasked_cell",
            Mutation::WrongRecipient => "wrong_recipient",
            Mutation::PostDoffFrame => "post_doff_frame",
            Mutation::CeilingViolation => "ceiling_violation",
            Mutation::BufferZoneFrame => "buffer_zone_frame",
        }
    }

    /// Corrupts `artifacts`, or returns `None` when the run offers no spot
    /// where this corruption applies.
    pub fn apply(self, artifacts: &Artifacts, s: &Scenario) -> Option<Mutated> {
        match self {
            Mutation::LateFrame => late_frame(artifacts),
            Mutation::UnmaskedCell => unmasked_cell(artifacts, s),
            Mutation::WrongRecipient => wrong_recipient(artifacts, s),
            Mutation::PostDoffFrame => post_doff_frame(artifacts),
            Mutation::CeilingViolation => ceiling_violation(artifacts, s),
            Mutation::BufferZoneFrame => buffer_zone_frame(artifacts, s),
        }
    }
}

/// A corrupted artifact set and where the corruption sits.
#[derive(Debug, Clone)]
pub struct Mutated {
    pub artifacts: Artifacts,
    pub recipient: String,
    /// Capture time of the corrupted or injected frame.
    pub timestamp: u64,
    pub cell: Option<(u16, u16)>,
}

fn frame_of(rec: &TraceRecord) -> Option<ShareFrame> {
    if rec.message.kind != "VIEW_FRAME" {
        return None;
    }
    serde_json::from_value(rec.message.payload.get("frame")?.clone()).ok()
}

fn view_record(recipient: &str, frame: &ShareFrame, phase: &str) -> TraceRecord {
    TraceRecord {
        seq: 0,
        direction: "server_to_recipient".into(),
        peer: Some(recipient.into()),
        phase: phase.into(),
        message: TraceMessage {
            kind: "VIEW_FRAME".into(),
            payload: json!({"recipient": recipient, "frame": frame}),
        },
    }
}

/// Renumbers the trace and rebuilds every archive from its VIEW_FRAMEs, so
/// archive and trace stay consistent with each other.
fn reseal(mut a: Artifacts) -> Artifacts {
    for (i, rec) in a.trace.iter_mut().enumerate() {
        rec.seq = i as u64 + 1;
    }
    for (name, frames) in a.archives.iter_mut() {
        *frames = a
            .trace
            .iter()
            .filter(|r| r.message.kind == "VIEW_FRAME" && r.peer.as_deref() == Some(name.as_str()))
            .map(|r| ArchivedFrame {
                seq: r.seq,
                frame: r.message.payload["frame"].clone(),
            })
            .collect();
    }
    a
}

fn insert(a: &Artifacts, at: usize, rec: TraceRecord) -> Artifacts {
    let mut a = a.clone();
    a.trace.insert(at, rec);
    reseal(a)
}

fn replace_frame(a: &Artifacts, at: usize, frame: &ShareFrame, recipient: &str) -> Artifacts {
    let mut a = a.clone();
    let rec = &mut a.trace[at];
    rec.peer = Some(recipient.into());
    rec.message.payload = json!({"recipient": recipient, "frame": frame});
    reseal(a)
}

/// Rebuilds the object map from the raster.
fn retile(frame: &mut ShareFrame, s: &Scenario) {
    let ids: BTreeSet<u8> = frame
        .cells
        .iter()
        .copied()
        .filter(|&c| c != 0 && c != MASKED)
        .collect();
    frame.object_map = ids
        .into_iter()
        .map(|id| ObjectArea {
            id,
            label: s.registry.label(id).unwrap_or("unknown").to_string(),
            rects: tile_cells(&frame.cells, frame.width, frame.height, id),
        })
        .collect();
}

fn sample_at(s: &Scenario, t: u64) -> Option<&Sample> {
    s.samples.iter().find(|x| x.t == t)
}

fn true_frame(s: &Scenario, sample: &Sample) -> ShareFrame {
    let pose = DevicePose {
        position: Point3::from_array(sample.position),
        yaw: sample.yaw,
    };
    capture_frame(&s.objects, &pose, &s.camera, sample.t)
}

fn role<'s>(s: &'s Scenario, recipient: &str) -> Option<&'s mrshare_core::policy::RecipientRole> {
    s.recipients.iter().find(|r| r.recipient_id == recipient)
}

/// Whether `id` is denied to `recipient` by the declared policies alone,
/// before any override.
fn statically_denied(s: &Scenario, id: u8, recipient: &str) -> bool {
    let (Some(label), Some(class)) = (s.registry.label(id), s.registry.classification(id)) else {
        return true;
    };
    let policy = effective_policy(&s.local, &s.ceiling, ZoneClass::Permitted, &BTreeSet::new());
    let role_ok = role(s, recipient).is_some_and(|r| r.decide(label, class) == Decision::Allow);
    policy.evaluate(id, Some(label), Some(class)) == Decision::Deny || !role_ok
}

fn overridden(a: &Artifacts) -> BTreeSet<u8> {
    a.trace
        .iter()
        .filter(|r| {
            r.message.kind == "OVERRIDE_RESULT" && r.message.payload["status"] == "approved"
        })
        .filter_map(|r| r.message.payload["object_id"].as_u64())
        .map(|id| id as u8)
        .collect()
}

fn late_frame(a: &Artifacts) -> Option<Mutated> {
    for (i, rec) in a.trace.iter().enumerate() {
        if rec.message.kind != "REVOKE" {
            continue;
        }
        let recipient = rec.peer.clone()?;
        let revoked_at = rec.message.payload["timestamp"].as_u64()?;
        let Some(mut frame) = a.trace[..i]
            .iter()
            .rev()
            .filter(|r| r.peer.as_deref() == Some(recipient.as_str()))
            .find_map(frame_of)
        else {
            continue;
        };
        frame.timestamp = revoked_at;
        return Some(Mutated {
            artifacts: insert(a, i + 1, view_record(&recipient, &frame, &rec.phase)),
            recipient,
            timestamp: revoked_at,
            cell: None,
        });
    }
    None
}

fn unmasked_cell(a: &Artifacts, s: &Scenario) -> Option<Mutated> {
    let granted = overridden(a);
    for (i, rec) in a.trace.iter().enumerate() {
        let Some(mut frame) = frame_of(rec) else {
            continue;
        };
        let recipient = rec.peer.clone()?;
        let truth = true_frame(s, sample_at(s, frame.timestamp)?);
        let hit = (0..frame.cells.len()).find(|&k| {
            let id = truth.cells[k];
            frame.cells[k] == MASKED
                && id != 0
                && !granted.contains(&id)
                && statically_denied(s, id, &recipient)
        });
        let Some(k) = hit else { continue };
        frame.cells[k] = truth.cells[k];
        retile(&mut frame, s);
        let w = frame.width as usize;
        return Some(Mutated {
            artifacts: replace_frame(a, i, &frame, &recipient),
            recipient,
            timestamp: frame.timestamp,
            cell: Some(((k % w) as u16, (k / w) as u16)),
        });
    }
    None
}

fn wrong_recipient(a: &Artifacts, s: &Scenario) -> Option<Mutated> {
    for (i, rec) in a.trace.iter().enumerate() {
        let Some(frame) = frame_of(rec) else { continue };
        let from = rec.peer.clone()?;
        for r in &s.recipients {
            if r.recipient_id == from {
                continue;
            }
            let leaks = frame.object_map.iter().any(|e| {
                let class = s.registry.classification(e.id);
                class.is_none_or(|c| r.decide(&e.label, c) == Decision::Deny)
            });
            if leaks {
                return Some(Mutated {
                    artifacts: replace_frame(a, i, &frame, &r.recipient_id),
                    recipient: r.recipient_id.clone(),
                    timestamp: frame.timestamp,
                    cell: None,
                });
            }
        }
    }
    None
}

fn post_doff_frame(a: &Artifacts) -> Option<Mutated> {
    let doff = a.trace.iter().position(|r| r.message.kind == "DOFF")?;
    let at = a.trace[doff].message.payload["timestamp"].as_u64()?;
    let (recipient, mut frame) = a.trace[..doff]
        .iter()
        .rev()
        .find_map(|r| Some((r.peer.clone()?, frame_of(r)?)))?;
    frame.timestamp = at;
    // After the DOFF and the REVOKEs it triggered.
    let mut pos = doff + 1;
    while a.trace.get(pos).is_some_and(|r| r.message.kind == "REVOKE") {
        pos += 1;
    }
    Some(Mutated {
        artifacts: insert(a, pos, view_record(&recipient, &frame, "locked")),
        recipient,
        timestamp: at,
        cell: None,
    })
}

fn ceiling_violation(a: &Artifacts, s: &Scenario) -> Option<Mutated> {
    let above = |id: u8| {
        s.registry
            .label(id)
            .zip(s.registry.classification(id))
            .is_some_and(|(label, class)| {
                !s.ceiling.max_allowed_labels.contains(label)
                    || class > s.ceiling.max_classification
            })
    };
    for (i, rec) in a.trace.iter().enumerate() {
        let Some(mut frame) = frame_of(rec) else {
            continue;
        };
        let recipient = rec.peer.clone()?;
        let truth = true_frame(s, sample_at(s, frame.timestamp)?);
        let Some(id) = truth.object_map.iter().map(|e| e.id).find(|&id| above(id)) else {
            continue;
        };
        let mut first = None;
        for k in 0..frame.cells.len() {
            if truth.cells[k] == id {
                frame.cells[k] = id;
                first.get_or_insert(k);
            }
        }
        retile(&mut frame, s);
        let w = frame.width as usize;
        return Some(Mutated {
            artifacts: replace_frame(a, i, &frame, &recipient),
            recipient,
            timestamp: frame.timestamp,
            cell: first.map(|k| ((k % w) as u16, (k / w) as u16)),
        });
    }
    None
}

fn buffer_zone_frame(a: &Artifacts, s: &Scenario) -> Option<Mutated> {
    for sample in &s.samples {
        let verdict = s.twin.classify_point(Point3::from_array(sample.position));
        if verdict.class != ZoneClass::Buffer {
            continue;
        }
        let Some(fix_at) = a.trace.iter().position(|r| {
            r.message.kind == "LOC_FIX" && r.message.payload["timestamp"].as_u64() == Some(sample.t)
        }) else {
            continue;
        };
        let truth = true_frame(s, sample);
        for r in &s.recipients {
            // Only objects this recipient could see from permitted space, so
            // the zone is the only thing wrong with the frame.
            let mut frame = truth.clone();
            frame.mask_where(|e| statically_denied(s, e.id, &r.recipient_id));
            if frame.object_map.is_empty() {
                continue;
            }
            let mut pos = fix_at + 1;
            while a
                .trace
                .get(pos)
                .is_some_and(|x| x.message.kind == "PERMISSION_EVT" || x.message.kind == "REVOKE")
            {
                pos += 1;
            }
            return Some(Mutated {
                artifacts: insert(a, pos, view_record(&r.recipient_id, &frame, "sharing")),
                recipient: r.recipient_id.clone(),
                timestamp: sample.t,
                cell: None,
            });
        }
    }
    None
}
