//! Brute-force leak oracle.
//!
//! Given a scenario and the artifacts a run produced, re-derives from ground
//! truth (true poses, declared classifications and policies, the control
//! timeline) what each recipient could at most have been shown at each
//! capture time, and flags every delivered cell outside that set. It reads
//! the artifact files as plain JSON and shares no evaluation code with the
//! pipeline that produced them.

mod geometry;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use mrshare_schema::{
    in_any_window, processing_index, ClassificationDoc, ControlAction, DecisionDoc, ObjectDoc,
    RecipientDoc, Sample, ScenarioDoc, ZoneClassDoc,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use geometry::Geometry;

const BACKGROUND: u8 = 0;
const MASKED: u8 = 255;
const ANGLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}:{line}: {reason}")]
    Malformed {
        file: String,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub timestamp: u64,
    pub recipient: String,
    pub object_id: Option<u8>,
    pub cell: Option<(u16, u16)>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakReport {
    pub violations: Vec<Violation>,
    pub frames_checked: u64,
    pub cells_checked: u64,
}

impl LeakReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMessage {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub direction: String,
    pub peer: Option<String>,
    pub phase: String,
    pub message: TraceMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchivedFrame {
    pub seq: u64,
    pub frame: Value,
}

/// Everything the oracle reads from a run directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Artifacts {
    pub trace: Vec<TraceRecord>,
    pub archives: BTreeMap<String, Vec<ArchivedFrame>>,
}

fn read(path: &Path) -> Result<String, VerifyError> {
    fs::read_to_string(path).map_err(|source| VerifyError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_lines<T: for<'de> Deserialize<'de>>(
    text: &str,
    file: &str,
) -> Result<Vec<T>, VerifyError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| VerifyError::Malformed {
                file: file.to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

impl Artifacts {
    /// Reads `trace.ndjson` and every `frames/<recipient>.ndjson`.
    pub fn load(dir: &Path) -> Result<Self, VerifyError> {
        let trace = parse_lines(&read(&dir.join("trace.ndjson"))?, "trace.ndjson")?;
        let mut archives = BTreeMap::new();
        let frames = dir.join("frames");
        if frames.is_dir() {
            let entries = fs::read_dir(&frames).map_err(|source| VerifyError::Io {
                path: frames.clone(),
                source,
            })?;
            for entry in entries {
                let path = entry
                    .map_err(|source| VerifyError::Io {
                        path: frames.clone(),
                        source,
                    })?
                    .path();
                let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                    continue;
                };
                let Some(recipient) = name.strip_suffix(".ndjson") else {
                    continue;
                };
                archives.insert(recipient.to_string(), parse_lines(&read(&path)?, name)?);
            }
        }
        Ok(Self { trace, archives })
    }
}

/// A frame as the oracle understands it.
#[derive(Debug, Clone)]
struct Raster {
    timestamp: u64,
    width: u16,
    height: u16,
    cells: Vec<u8>,
    map: Vec<(u8, String)>,
}

fn parse_raster(v: &Value) -> Result<Raster, String> {
    let num = |k: &str| {
        v.get(k)
            .and_then(Value::as_u64)
            .ok_or(format!("frame field `{k}` missing"))
    };
    let timestamp = num("timestamp")?;
    let width = u16::try_from(num("width")?).map_err(|_| "width out of range")?;
    let height = u16::try_from(num("height")?).map_err(|_| "height out of range")?;
    let rows = v
        .get("rows")
        .and_then(Value::as_array)
        .ok_or("frame rows missing")?;
    if rows.len() != height as usize {
        return Err(format!("{} rows for height {height}", rows.len()));
    }
    let mut cells = Vec::with_capacity(width as usize * height as usize);
    for row in rows {
        let bytes =
            hex::decode(row.as_str().ok_or("row is not a string")?).map_err(|e| e.to_string())?;
        if bytes.len() != width as usize {
            return Err(format!("row of {} cells for width {width}", bytes.len()));
        }
        cells.extend(bytes);
    }
    let mut map = Vec::new();
    for e in v
        .get("object_map")
        .and_then(Value::as_array)
        .ok_or("object map missing")?
    {
        let id = e
            .get("id")
            .and_then(Value::as_u64)
            .ok_or("map entry without id")?;
        let label = e
            .get("label")
            .and_then(Value::as_str)
            .ok_or("map entry without label")?;
        map.push((
            u8::try_from(id).map_err(|_| "map id out of range")?,
            label.to_string(),
        ));
    }
    Ok(Raster {
        timestamp,
        width,
        height,
        cells,
        map,
    })
}

fn class_rank(c: ClassificationDoc) -> u8 {
    match c {
        ClassificationDoc::Public => 0,
        ClassificationDoc::Internal => 1,
        ClassificationDoc::Confidential => 2,
        ClassificationDoc::Restricted => 3,
    }
}

fn digest(credential: &str) -> String {
    hex::encode(Sha256::digest(credential.as_bytes()))
}

/// Session facts at one sample, after that sample's control events.
#[derive(Debug, Clone, Default)]
struct Facts {
    authenticated: bool,
    locked: bool,
    sharing_requested: bool,
    muted: bool,
    grants: BTreeSet<u8>,
    /// Why nothing may be shown at this sample, if so.
    blocked: Option<&'static str>,
}

struct Truth<'a> {
    scenario: &'a ScenarioDoc,
    samples: Vec<Sample>,
    facts: Vec<Facts>,
    objects: BTreeMap<u8, &'a ObjectDoc>,
    recipients: BTreeMap<&'a str, &'a RecipientDoc>,
}

fn credentials_valid(s: &ScenarioDoc, device: &str, user: &str, credential: &str) -> bool {
    let presented = digest(credential);
    s.all_enrollments()
        .iter()
        .any(|e| e.device_id == device && e.user_id == user && digest(&e.credential) == presented)
}

fn visible(o: &ObjectDoc, sample: &Sample, s: &ScenarioDoc) -> bool {
    let dx = o.location[0] - sample.position[0];
    let dy = o.location[1] - sample.position[1];
    let dist = (dx * dx + dy * dy).sqrt();
    if dist > s.camera.range_max {
        return false;
    }
    if dist == 0.0 {
        return true;
    }
    let tau = 2.0 * std::f64::consts::PI;
    let mut bearing = (dy.atan2(dx) - sample.yaw) % tau;
    if bearing > std::f64::consts::PI {
        bearing -= tau;
    } else if bearing < -std::f64::consts::PI {
        bearing += tau;
    }
    bearing.abs() <= s.camera.fov_half_angle + ANGLE_TOLERANCE
}

impl<'a> Truth<'a> {
    fn new(s: &'a ScenarioDoc) -> Self {
        let geometry = Geometry::new(&s.twin);
        let samples = s.trajectory.samples();
        let objects: BTreeMap<u8, &ObjectDoc> = s.objects.iter().map(|o| (o.id, o)).collect();
        let mut by_index: BTreeMap<usize, Vec<&ControlAction>> = BTreeMap::new();
        for c in &s.control {
            if let Some(i) = processing_index(&samples, c.t) {
                by_index.entry(i).or_default().push(&c.action);
            }
        }
        let mut f = Facts::default();
        let mut facts = Vec::with_capacity(samples.len());
        for (i, sample) in samples.iter().enumerate() {
            let unreliable = in_any_window(&s.dropout_windows, sample.t)
                || in_any_window(&s.spoof_windows, sample.t);
            let permitted_here = geometry.permitted(sample.position);
            if i == 0 {
                f.authenticated = credentials_valid(
                    s,
                    &s.device.device_id,
                    &s.device.user_id,
                    &s.device.credential,
                );
            }
            for action in by_index.get(&i).into_iter().flatten() {
                match action {
                    ControlAction::StartShare => {
                        if f.authenticated && !f.locked {
                            f.sharing_requested = true;
                        }
                    }
                    ControlAction::StopShare => f.sharing_requested = false,
                    ControlAction::Mute => f.muted = true,
                    ControlAction::Unmute => f.muted = false,
                    ControlAction::Doff => {
                        f.locked = true;
                        f.authenticated = false;
                    }
                    ControlAction::Auth {
                        user_id,
                        credential,
                    } => {
                        if credentials_valid(s, &s.device.device_id, user_id, credential) {
                            f = Facts {
                                authenticated: true,
                                ..Facts::default()
                            };
                        } else {
                            f.authenticated = false;
                        }
                    }
                    ControlAction::Override { object_id } => {
                        let eligible = objects
                            .get(object_id)
                            .is_some_and(|o| class_rank(o.classification) <= 1);
                        if f.authenticated && !f.locked && eligible && permitted_here && !unreliable
                        {
                            f.grants.insert(*object_id);
                        }
                    }
                }
            }
            f.blocked = if !f.authenticated {
                Some("not authenticated")
            } else if f.locked {
                Some("locked")
            } else if !f.sharing_requested {
                Some("sharing not started")
            } else if f.muted {
                Some("muted")
            } else if in_any_window(&s.dropout_windows, sample.t) {
                Some("localization dropout")
            } else if in_any_window(&s.spoof_windows, sample.t) {
                Some("ranging spoofed")
            } else if !permitted_here {
                Some("device outside permitted space")
            } else {
                None
            };
            facts.push(f.clone());
        }
        Self {
            scenario: s,
            samples,
            facts,
            objects,
            recipients: s.recipients.iter().map(|r| (r.id.as_str(), r)).collect(),
        }
    }

    /// Why `id` may not be shown to `recipient` at sample `i`, if so.
    fn object_denial(&self, id: u8, recipient: &RecipientDoc, i: usize) -> Option<String> {
        let s = self.scenario;
        let Some(o) = self.objects.get(&id) else {
            return Some("unknown object id".into());
        };
        if !visible(o, &self.samples[i], s) {
            return Some("object not in view".into());
        }
        let facts = &self.facts[i];
        let local = s.local_policy.allowed_labels.contains(&o.label)
            || s.local_policy.allowed_object_ids.contains(&id)
            || facts.grants.contains(&id);
        if !local {
            return Some("not allowed by local policy".into());
        }
        if !s.ceiling.max_allowed_labels.contains(&o.label) {
            return Some("label above ceiling".into());
        }
        if class_rank(o.classification) > class_rank(s.ceiling.max_classification) {
            return Some("classification above ceiling".into());
        }
        if s.ceiling.zone_overrides.get(&ZoneClassDoc::Permitted) == Some(&DecisionDoc::Deny) {
            return Some("ceiling denies sharing in permitted zones".into());
        }
        if !recipient.label_grants.contains(&o.label) {
            return Some(format!("label `{}` not granted to recipient", o.label));
        }
        if class_rank(o.classification) > class_rank(recipient.clearance) {
            return Some("classification above recipient clearance".into());
        }
        None
    }

    fn footprint_contains(&self, id: u8, x: u16, y: u16) -> bool {
        self.objects.get(&id).is_some_and(|o| {
            let r = o.rect;
            x >= r.x
                && y >= r.y
                && (x as u32) < r.x as u32 + r.w as u32
                && (y as u32) < r.y as u32 + r.h as u32
        })
    }
}

fn violation(t: u64, recipient: &str, reason: impl Into<String>) -> Violation {
    Violation {
        timestamp: t,
        recipient: recipient.to_string(),
        object_id: None,
        cell: None,
        reason: reason.into(),
    }
}

/// A frame whose content was never persisted. Only the delivery itself can
/// be judged: the recipient must exist and the sample must allow sharing.
fn check_redacted(truth: &Truth, recipient: &str, frame_value: &Value, report: &mut LeakReport) {
    let Some(t) = frame_value.get("timestamp").and_then(Value::as_u64) else {
        report
            .violations
            .push(violation(0, recipient, "redacted frame without timestamp"));
        return;
    };
    if !truth.recipients.contains_key(recipient) {
        report.violations.push(violation(
            t,
            recipient,
            "frame delivered to unknown recipient",
        ));
        return;
    }
    let Ok(i) = truth.samples.binary_search_by_key(&t, |s| s.t) else {
        report.violations.push(violation(
            t,
            recipient,
            "capture time is not a simulated tick",
        ));
        return;
    };
    if let Some(why) = truth.facts[i].blocked {
        report.violations.push(violation(
            t,
            recipient,
            format!("frame delivered while {why}"),
        ));
    }
}

/// Checks one delivered frame's content against the permissible set.
fn check_frame(truth: &Truth, recipient: &str, frame_value: &Value, report: &mut LeakReport) {
    report.frames_checked += 1;
    if frame_value.get("redacted") == Some(&Value::Bool(true)) {
        check_redacted(truth, recipient, frame_value, report);
        return;
    }
    let raster = match parse_raster(frame_value) {
        Ok(r) => r,
        Err(e) => {
            let t = frame_value
                .get("timestamp")
                .and_then(Value::as_u64)
                .unwrap_or(0);
            report
                .violations
                .push(violation(t, recipient, format!("unreadable frame: {e}")));
            return;
        }
    };
    let t = raster.timestamp;
    let Some(role) = truth.recipients.get(recipient) else {
        report.violations.push(violation(
            t,
            recipient,
            "frame delivered to unknown recipient",
        ));
        return;
    };
    let cam = &truth.scenario.camera;
    if raster.width != cam.width || raster.height != cam.height {
        report.violations.push(violation(
            t,
            recipient,
            "frame dimensions differ from the camera",
        ));
        return;
    }
    let Ok(i) = truth.samples.binary_search_by_key(&t, |s| s.t) else {
        report.violations.push(violation(
            t,
            recipient,
            "capture time is not a simulated tick",
        ));
        return;
    };
    report.cells_checked += raster.cells.len() as u64;
    if let Some(why) = truth.facts[i].blocked {
        report.violations.push(violation(
            t,
            recipient,
            format!("frame delivered while {why}"),
        ));
    }
    let blocked = truth.facts[i].blocked.is_some();
    // First offending cell and count, per object.
    let mut bad: BTreeMap<u8, ((u16, u16), usize, String)> = BTreeMap::new();
    for (k, &c) in raster.cells.iter().enumerate() {
        if c == BACKGROUND || c == MASKED {
            continue;
        }
        let (x, y) = (
            (k % raster.width as usize) as u16,
            (k / raster.width as usize) as u16,
        );
        let reason = if blocked {
            Some("object shown while sharing not permissible".to_string())
        } else if !truth.footprint_contains(c, x, y) {
            Some("cell outside the object's footprint".to_string())
        } else {
            truth.object_denial(c, role, i)
        };
        if let Some(reason) = reason {
            bad.entry(c).or_insert(((x, y), 0, reason)).1 += 1;
        }
    }
    for (id, (cell, count, reason)) in bad {
        report.violations.push(Violation {
            timestamp: t,
            recipient: recipient.to_string(),
            object_id: Some(id),
            cell: Some(cell),
            reason: format!("{reason} ({count} cells)"),
        });
    }
    for (id, label) in &raster.map {
        let denial = if blocked {
            Some("object shown while sharing not permissible".to_string())
        } else {
            truth.object_denial(*id, role, i)
        };
        let mislabeled = truth.objects.get(id).is_some_and(|o| &o.label != label);
        if let Some(reason) =
            denial.or(mislabeled.then(|| "object map label differs from ground truth".into()))
        {
            report.violations.push(Violation {
                timestamp: t,
                recipient: recipient.to_string(),
                object_id: Some(*id),
                cell: None,
                reason: format!("object map entry: {reason}"),
            });
        }
    }
}

fn payload_u64(m: &TraceMessage, key: &str) -> Option<u64> {
    m.payload.get(key).and_then(Value::as_u64)
}

/// Trace-order checks that need no ground truth: nothing reaches a
/// recipient while the trace itself shows sharing disabled, and nothing
/// captured at or before a REVOKE arrives after it.
pub fn ordering_violations(artifacts: &Artifacts) -> Vec<Violation> {
    let mut out = Vec::new();
    let (mut muted, mut locked, mut permit_ok, mut closed) = (false, false, false, false);
    let mut last_capture: BTreeMap<String, u64> = BTreeMap::new();
    let mut last_revoke: BTreeMap<String, u64> = BTreeMap::new();
    for rec in &artifacts.trace {
        let m = &rec.message;
        match m.kind.as_str() {
            "MUTE" => muted = true,
            "UNMUTE" => muted = false,
            "DOFF" => locked = true,
            "AUTH_OK" => {
                locked = false;
                muted = false;
            }
            "BYE" => closed = true,
            "PERMISSION_EVT" => match m.payload.get("kind").and_then(Value::as_str) {
                Some("suspended") => permit_ok = false,
                Some("granted" | "resumed") => permit_ok = true,
                _ => {}
            },
            "REVOKE" => {
                if let (Some(r), Some(t)) = (rec.peer.clone(), payload_u64(m, "timestamp")) {
                    last_revoke.insert(r, t);
                }
            }
            "VIEW_FRAME" => {
                let recipient = m
                    .payload
                    .get("recipient")
                    .and_then(Value::as_str)
                    .unwrap_or("")
                    .to_string();
                let t = m
                    .payload
                    .get("frame")
                    .and_then(|f| f.get("timestamp"))
                    .and_then(Value::as_u64)
                    .unwrap_or(0);
                if rec.peer.as_deref() != Some(recipient.as_str()) {
                    out.push(violation(
                        t,
                        &recipient,
                        "frame routed to a different peer than addressed",
                    ));
                }
                let why = if closed {
                    Some("session closed")
                } else if locked {
                    Some("session locked")
                } else if muted {
                    Some("session muted")
                } else if !permit_ok {
                    Some("permission suspended")
                } else {
                    None
                };
                if let Some(why) = why {
                    out.push(violation(
                        t,
                        &recipient,
                        format!("frame delivered after disable: {why}"),
                    ));
                }
                if let Some(&rt) = last_revoke.get(&recipient) {
                    if t <= rt {
                        out.push(violation(
                            t,
                            &recipient,
                            format!("late frame: captured at {t}, revoked at {rt}"),
                        ));
                    }
                }
                if let Some(&prev) = last_capture.get(&recipient) {
                    if t <= prev {
                        out.push(violation(
                            t,
                            &recipient,
                            "capture times not strictly increasing",
                        ));
                    }
                }
                last_capture.insert(recipient, t);
            }
            _ => {}
        }
    }
    out
}

/// Full oracle: trace ordering, per-cell content of every delivered and
/// archived frame, and archive/trace agreement.
pub fn verify_no_leak(artifacts: &Artifacts, scenario: &ScenarioDoc) -> LeakReport {
    let truth = Truth::new(scenario);
    let mut report = LeakReport {
        violations: ordering_violations(artifacts),
        ..LeakReport::default()
    };
    let mut delivered: BTreeMap<String, Vec<ArchivedFrame>> = BTreeMap::new();
    for rec in &artifacts.trace {
        if rec.message.kind != "VIEW_FRAME" {
            continue;
        }
        let recipient = rec
            .message
            .payload
            .get("recipient")
            .and_then(Value::as_str)
            .unwrap_or("");
        let frame = rec
            .message
            .payload
            .get("frame")
            .cloned()
            .unwrap_or(Value::Null);
        check_frame(&truth, recipient, &frame, &mut report);
        delivered
            .entry(recipient.to_string())
            .or_default()
            .push(ArchivedFrame {
                seq: rec.seq,
                frame,
            });
    }
    let names: BTreeSet<&String> = delivered.keys().chain(artifacts.archives.keys()).collect();
    for name in names {
        let sent = delivered.get(name).map(Vec::as_slice).unwrap_or_default();
        let kept = artifacts
            .archives
            .get(name)
            .map(Vec::as_slice)
            .unwrap_or_default();
        for a in kept {
            if !sent.contains(a) {
                check_frame(&truth, name, &a.frame, &mut report);
            }
        }
        if sent != kept {
            let t = kept
                .iter()
                .chain(sent)
                .filter_map(|a| a.frame.get("timestamp").and_then(Value::as_u64))
                .next()
                .unwrap_or(0);
            report.violations.push(violation(
                t,
                name,
                "frame archive differs from the delivered frames",
            ));
        }
    }
    report.violations.sort();
    report.violations.dedup();
    report
}

/// Loads `dir` and runs [`verify_no_leak`].
pub fn verify_dir(dir: &Path, scenario: &ScenarioDoc) -> Result<LeakReport, VerifyError> {
    Ok(verify_no_leak(&Artifacts::load(dir)?, scenario))
}
