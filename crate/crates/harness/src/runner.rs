//! Deterministic end-to-end session runner.
//!
//! Each simulated tick runs, in order: localization and the permission
//! update, the control events due at that tick, then (only while the
//! session is Sharing) capture, local filtering, the server ceiling check
//! and per-recipient delivery. The whole run is a function of the scenario
//! and the seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use mrshare_core::audit::{AuditKind, AuditLog, AuditRecord, Retention};
use mrshare_core::geom::Point3;
use mrshare_core::locate::{locate_once, FixQuality, PositionFix};
use mrshare_core::permit::{on_clock, update_permission, PermissionEvent, PermissionState};
use mrshare_core::policy::{
    effective_policy, global_check_and_tailor, submit_override, CachedLocalFilter, FilterStats,
    OverrideBook, OverrideRequest, OverrideStatus,
};
use mrshare_core::scene::{capture_frame, DevicePose, ShareFrame};
use mrshare_core::twin::{ZoneClass, ZoneVerdict};
use mrshare_core::wire::{
    credential_digest, session_step, Authenticator, ControlStamp, Emission, Hello, LocalControl,
    Message, Peer, Phase, SessionInput, SessionState, ViewFrame, WireError,
};
use mrshare_core::Millis;
use mrshare_schema::{processing_index, ControlAction, ScenarioDoc};
use mrshare_verify::{ArchivedFrame, Artifacts, TraceRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::scenario::{Scenario, ValidationError};

pub const TRACE_FILE: &str = "trace.ndjson";
pub const AUDIT_FILE: &str = "audit.ndjson";
pub const FIXES_FILE: &str = "fixes.ndjson";
pub const FRAMES_DIR: &str = "frames";
pub const SCENARIO_FILE: &str = "scenario.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("writing artifacts: {0}")]
    Io(#[from] io::Error),
}

fn pipeline(e: impl std::fmt::Display) -> RunError {
    RunError::Pipeline(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    DeviceToServer,
    ServerToDevice,
    ServerToRecipient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub seq: u64,
    pub direction: Direction,
    pub peer: Option<String>,
    /// Session phase after this message was processed.
    pub phase: Phase,
    pub message: Message,
}

fn redacted_payload(msg: &Message) -> Option<Value> {
    match msg {
        Message::ShareOffer(offer) => Some(json!({
            "redacted": true,
            "timestamp": offer.frame.timestamp,
            "policy_digest": offer.metadata.policy_digest,
            "masked_ids": offer.metadata.masked_ids,
        })),
        Message::ViewFrame(v) => Some(json!({
            "recipient": v.recipient,
            "frame": redacted_frame(&v.frame),
        })),
        _ => None,
    }
}

fn redacted_frame(f: &ShareFrame) -> Value {
    json!({"timestamp": f.timestamp, "redacted": true})
}

impl TraceEntry {
    /// The persisted record. With `redact`, frame content is replaced by
    /// its capture timestamp.
    pub fn to_value(&self, redact: bool) -> Value {
        let mut message = self.message.to_trace_value();
        if redact {
            if let Some(p) = redacted_payload(&self.message) {
                message["payload"] = p;
            }
        }
        json!({
            "seq": self.seq,
            "direction": self.direction,
            "peer": self.peer,
            "phase": self.phase,
            "message": message,
        })
    }
}

/// Everything a run produces, before it is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceEntry>,
    pub audit: AuditLog,
    pub fixes: Vec<PositionFix>,
    /// Per recipient, (trace seq, frame) for every delivered VIEW_FRAME.
    pub frames: BTreeMap<String, Vec<(u64, ShareFrame)>>,
    pub filter_stats: FilterStats,
    pub purged: usize,
    pub rejected_offers: usize,
    /// Set under NoArchive retention: persisted artifacts carry no frame content.
    pub redact_frames: bool,
    pub scenario: ScenarioDoc,
}

fn line(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string(&serde_json::to_value(v).expect("artifacts serialize"))
        .expect("json serializes");
    s.push('\n');
    s
}

impl RunOutput {
    pub fn trace_ndjson(&self) -> String {
        self.trace
            .iter()
            .map(|e| line(&e.to_value(self.redact_frames)))
            .collect()
    }

    pub fn fixes_ndjson(&self) -> String {
        self.fixes.iter().map(line).collect()
    }

    pub fn archive_ndjson(&self, recipient: &str) -> String {
        self.frames
            .get(recipient)
            .into_iter()
            .flatten()
            .map(|(seq, f)| {
                let frame = if self.redact_frames {
                    redacted_frame(f)
                } else {
                    serde_json::to_value(f).expect("frames serialize")
                };
                line(&json!({"seq": seq, "frame": frame}))
            })
            .collect()
    }

    fn build_artifacts(&self, redact: bool) -> Artifacts {
        let trace = self
            .trace
            .iter()
            .map(|e| {
                serde_json::from_value::<TraceRecord>(e.to_value(redact))
                    .expect("trace records round-trip")
            })
            .collect();
        let archives = self
            .scenario
            .recipients
            .iter()
            .map(|r| {
                let frames = self
                    .frames
                    .get(&r.id)
                    .into_iter()
                    .flatten()
                    .map(|(seq, f)| ArchivedFrame {
                        seq: *seq,
                        frame: if redact {
                            redacted_frame(f)
                        } else {
                            serde_json::to_value(f).expect("frames serialize")
                        },
                    })
                    .collect();
                (r.id.clone(), frames)
            })
            .collect();
        Artifacts { trace, archives }
    }

    /// Artifacts exactly as [`RunOutput::write`] persists them.
    pub fn artifacts(&self) -> Artifacts {
        self.build_artifacts(self.redact_frames)
    }

    /// Artifacts with full frame content, whatever the retention rule.
    pub fn unredacted_artifacts(&self) -> Artifacts {
        self.build_artifacts(false)
    }

    /// Writes every artifact into `dir`, replacing earlier ones.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TRACE_FILE), self.trace_ndjson())?;
        let mut audit = Vec::new();
        self.audit.write_ndjson(&mut audit)?;
        fs::write(dir.join(AUDIT_FILE), audit)?;
        fs::write(dir.join(FIXES_FILE), self.fixes_ndjson())?;
        fs::write(dir.join(SCENARIO_FILE), self.scenario.to_canonical_json())?;
        let frames = dir.join(FRAMES_DIR);
        if frames.exists() {
            fs::remove_dir_all(&frames)?;
        }
        fs::create_dir(&frames)?;
        for r in &self.scenario.recipients {
            let mut f = fs::File::create(frames.join(format!("{}.ndjson", r.id)))?;
            f.write_all(self.archive_ndjson(&r.id).as_bytes())?;
        }
        Ok(())
    }
}

struct Run<'a> {
    s: &'a Scenario,
    seed: u64,
    auth: Authenticator,
    session: SessionState,
    permit: PermissionState,
    book: OverrideBook,
    filter: CachedLocalFilter,
    out: RunOutput,
    sessions_opened: u64,
    overrides: u64,
    user: Option<String>,
    last_fix: Option<PositionFix>,
    last_verdict: Option<ZoneVerdict>,
}

fn name_of<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

impl<'a> Run<'a> {
    fn new(s: &'a Scenario, seed: u64) -> Self {
        let mut auth = Authenticator::new();
        for e in s.doc.all_enrollments() {
            auth.enroll(&e.device_id, &e.user_id, &credential_digest(&e.credential));
        }
        let start = s.samples.first().map(|x| x.t).unwrap_or(0);
        Self {
            s,
            seed,
            auth,
            session: SessionState::new(s.recipients.iter().map(|r| r.recipient_id.clone())),
            permit: PermissionState::initial(start),
            book: OverrideBook::default(),
            filter: CachedLocalFilter::new(),
            out: RunOutput {
                trace: Vec::new(),
                audit: AuditLog::new(),
                fixes: Vec::new(),
                frames: s
                    .recipients
                    .iter()
                    .map(|r| (r.recipient_id.clone(), Vec::new()))
                    .collect(),
                filter_stats: FilterStats::default(),
                purged: 0,
                rejected_offers: 0,
                redact_frames: s.jurisdiction.retention == Retention::NoArchive,
                scenario: s.doc.clone(),
            },
            sessions_opened: 0,
            overrides: 0,
            user: None,
            last_fix: None,
            last_verdict: None,
        }
    }

    fn audit(
        &mut self,
        t: Millis,
        kind: AuditKind,
        subject: Vec<String>,
        decision: impl Into<String>,
        digest: Option<String>,
        content: Option<Value>,
    ) {
        let rec = AuditRecord {
            seq: self.out.audit.next_seq(),
            timestamp: t,
            session_id: self.session.session_id.clone(),
            kind,
            subject,
            decision: Some(decision.into()),
            policy_digest: digest,
            jurisdiction: self.s.jurisdiction.tag.clone(),
            content,
        };
        self.out
            .audit
            .record(rec, &self.s.jurisdiction)
            .expect("sequence numbers come from the log itself");
    }

    fn push(&mut self, direction: Direction, peer: Option<String>, message: Message) -> u64 {
        let seq = self.out.trace.len() as u64 + 1;
        self.out.trace.push(TraceEntry {
            seq,
            direction,
            peer,
            phase: self.session.phase,
            message,
        });
        seq
    }

    fn route(&mut self, emissions: Vec<Emission>, t: Millis) {
        for e in emissions {
            match e.to {
                Peer::Recipient(r) => {
                    let seq = self.push(
                        Direction::ServerToRecipient,
                        Some(r.clone()),
                        e.message.clone(),
                    );
                    match e.message {
                        Message::ViewFrame(v) => {
                            let content = serde_json::to_value(&v.frame.object_map)
                                .expect("object maps serialize");
                            self.audit(
                                t,
                                AuditKind::FrameDisposition,
                                vec![format!("recipient:{r}")],
                                "delivered",
                                None,
                                Some(content),
                            );
                            self.out.frames.entry(r).or_default().push((seq, v.frame));
                        }
                        Message::Revoke(rv) => {
                            self.audit(
                                t,
                                AuditKind::Revoke,
                                vec![format!("recipient:{r}")],
                                rv.reason,
                                None,
                                None,
                            );
                        }
                        _ => {}
                    }
                }
                Peer::Device => {
                    self.push(Direction::ServerToDevice, None, e.message);
                }
                Peer::Server => {
                    self.push(Direction::DeviceToServer, None, e.message);
                }
            }
        }
    }

    /// Feeds one protocol message through the session machine and records
    /// it. Returns false when the machine refuses it in the current phase.
    fn send(&mut self, direction: Direction, msg: Message, t: Millis) -> Result<bool, RunError> {
        match session_step(&self.session, &SessionInput::Message(msg.clone()), t) {
            Ok((next, emissions)) => {
                self.session = next;
                self.push(direction, None, msg);
                self.route(emissions, t);
                Ok(true)
            }
            Err(WireError::IllegalTransition { .. }) => Ok(false),
            Err(e) => Err(pipeline(e)),
        }
    }

    fn control(&mut self, c: LocalControl, t: Millis) -> Result<bool, RunError> {
        match session_step(&self.session, &SessionInput::Control(c), t) {
            Ok((next, emissions)) => {
                self.session = next;
                self.route(emissions, t);
                Ok(true)
            }
            Err(WireError::IllegalTransition { .. }) => Ok(false),
            Err(e) => Err(pipeline(e)),
        }
    }

    fn hello(&mut self, user_id: &str, credential: &str, t: Millis) -> Result<(), RunError> {
        self.sessions_opened += 1;
        let device_id = self.s.doc.device.device_id.clone();
        let hello = Hello {
            device_id: device_id.clone(),
            user_id: user_id.to_string(),
            credential_digest: credential_digest(credential),
            session_id: format!("{:016x}-{:04}", self.seed, self.sessions_opened),
        };
        let previous = self.session.session_id.clone();
        if !self.send(Direction::DeviceToServer, Message::Hello(hello.clone()), t)? {
            self.audit(
                t,
                AuditKind::SessionAuth,
                vec![format!("user:{user_id}")],
                "rejected",
                None,
                None,
            );
            return Ok(());
        }
        let decision = self.auth.authenticate(&hello).map_err(pipeline)?;
        let ok = decision.is_ok();
        let reason = match &decision.reply {
            Message::AuthFail(f) => format!("fail: {}", f.reason),
            _ => "ok".to_string(),
        };
        self.send(Direction::ServerToDevice, decision.reply, t)?;
        if ok {
            self.book.clear();
            self.filter.reset();
            self.user = Some(user_id.to_string());
            if let Some(old) = decision.superseded {
                self.audit(
                    t,
                    AuditKind::SessionAuth,
                    vec![format!("session:{old}")],
                    "superseded",
                    None,
                    None,
                );
            }
        } else {
            if let Some(old) = previous {
                self.auth.end(&device_id, &old);
            }
            self.user = None;
        }
        self.audit(
            t,
            AuditKind::SessionAuth,
            vec![format!("device:{device_id}"), format!("user:{user_id}")],
            reason,
            None,
            None,
        );
        Ok(())
    }

    fn localize(
        &mut self,
        t: Millis,
        position: Point3,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), RunError> {
        let fix = locate_once(&self.s.twin, t, position, &self.s.loop_config, rng);
        let verdict = match fix.position {
            Some(p) => self
                .s
                .twin
                .classify_with_margin(p, self.s.doc.guard_distance()),
            None => ZoneVerdict {
                class: ZoneClass::Restricted,
                nearest_restricted_distance: 0.0,
                zone_id: None,
            },
        };
        self.send(Direction::ServerToDevice, Message::LocFix(fix.clone()), t)?;
        let (state, mut events) = on_clock(&self.permit, t, &self.s.transition);
        let (state, more) =
            update_permission(&state, &fix, &verdict, &self.s.transition).map_err(pipeline)?;
        events.extend(more);
        self.permit = state;
        for ev in events {
            self.permission_event(ev, t)?;
        }
        self.out.fixes.push(fix.clone());
        self.last_fix = Some(fix);
        self.last_verdict = Some(verdict);
        Ok(())
    }

    fn permission_event(&mut self, ev: PermissionEvent, t: Millis) -> Result<(), RunError> {
        self.send(Direction::DeviceToServer, Message::PermissionEvt(ev), t)?;
        self.audit(
            t,
            AuditKind::PermissionEvent,
            vec![name_of(&ev.kind)],
            name_of(&ev.reason),
            None,
            None,
        );
        Ok(())
    }

    /// Zone class an override request is judged under: the latest fix's
    /// verdict, or Restricted when that fix is not trustworthy.
    fn override_zone(&self) -> ZoneClass {
        match (&self.last_fix, &self.last_verdict) {
            (Some(f), Some(v)) if f.quality == FixQuality::Good => v.class,
            _ => ZoneClass::Restricted,
        }
    }

    fn apply_control(&mut self, action: &ControlAction, t: Millis) -> Result<(), RunError> {
        let stamp = ControlStamp { timestamp: t };
        let (label, accepted) = match action {
            ControlAction::StartShare => {
                ("start_share", self.control(LocalControl::StartShare, t)?)
            }
            ControlAction::StopShare => ("stop_share", self.control(LocalControl::StopShare, t)?),
            ControlAction::Mute => (
                "mute",
                self.send(Direction::DeviceToServer, Message::Mute(stamp), t)?,
            ),
            ControlAction::Unmute => (
                "unmute",
                self.send(Direction::DeviceToServer, Message::Unmute(stamp), t)?,
            ),
            ControlAction::Doff => {
                let ok = self.send(Direction::DeviceToServer, Message::Doff(stamp), t)?;
                self.auth.lock(&self.s.doc.device.device_id);
                ("doff", ok)
            }
            ControlAction::Auth {
                user_id,
                credential,
            } => return self.hello(user_id, credential, t),
            ControlAction::Override { object_id } => return self.request_override(*object_id, t),
        };
        self.audit(
            t,
            AuditKind::SessionControl,
            vec![label.to_string()],
            if accepted { "applied" } else { "rejected" },
            None,
            None,
        );
        Ok(())
    }

    fn request_override(&mut self, object_id: u8, t: Millis) -> Result<(), RunError> {
        self.overrides += 1;
        let req = OverrideRequest {
            request_id: format!("ovr-{:04}", self.overrides),
            object_id,
            requested_by: self.user.clone().unwrap_or_else(|| "-".into()),
            zone_class: self.override_zone(),
            status: OverrideStatus::Pending,
            decided_at: None,
        };
        let subject = vec![format!("object:{object_id}")];
        if !self.send(
            Direction::DeviceToServer,
            Message::OverrideReq(req.clone()),
            t,
        )? {
            self.audit(
                t,
                AuditKind::SessionControl,
                subject,
                "override rejected outside a session",
                None,
                None,
            );
            return Ok(());
        }
        self.audit(
            t,
            AuditKind::Override,
            subject.clone(),
            "requested",
            None,
            None,
        );
        let result = submit_override(&mut self.book, req, &self.s.registry, t).map_err(pipeline)?;
        let status = name_of(&result.status);
        self.send(
            Direction::ServerToDevice,
            Message::OverrideResult(result),
            t,
        )?;
        self.audit(t, AuditKind::Override, subject, status, None, None);
        Ok(())
    }

    fn share(&mut self, t: Millis, pose: DevicePose) -> Result<(), RunError> {
        let s = self.s;
        let zone = self
            .last_verdict
            .as_ref()
            .map(|v| v.class)
            .unwrap_or(ZoneClass::Restricted);
        let frame = capture_frame(&s.objects, &pose, &s.camera, t);
        let policy = effective_policy(&s.local, &s.ceiling, zone, self.book.grants());
        let offer = self.filter.filter(&frame, &policy, &s.registry);
        if !self.send(
            Direction::DeviceToServer,
            Message::ShareOffer(offer.clone()),
            t,
        )? {
            return Err(pipeline("share offer refused while sharing"));
        }
        let mut subject: Vec<String> = offer
            .frame
            .object_map
            .iter()
            .map(|e| format!("object:{}", e.id))
            .collect();
        subject.extend(
            offer
                .metadata
                .masked_ids
                .iter()
                .map(|id| format!("masked:{id}")),
        );
        self.audit(
            t,
            AuditKind::PolicyDecision,
            subject,
            "local_filter",
            Some(policy.digest().to_string()),
            None,
        );
        match global_check_and_tailor(&offer, &s.ceiling, &s.recipients, zone, &s.registry) {
            Ok(mut views) => {
                for r in &s.recipients {
                    let frame = views
                        .remove(&r.recipient_id)
                        .expect("one view per recipient");
                    let msg = Message::ViewFrame(ViewFrame {
                        recipient: r.recipient_id.clone(),
                        frame,
                    });
                    let (next, emissions) =
                        session_step(&self.session, &SessionInput::Message(msg), t)
                            .map_err(pipeline)?;
                    self.session = next;
                    self.route(emissions, t);
                }
            }
            Err(e) => {
                self.out.rejected_offers += 1;
                self.audit(
                    t,
                    AuditKind::FrameDisposition,
                    vec!["offer".into()],
                    format!("rejected: {e}"),
                    Some(policy.digest().to_string()),
                    None,
                );
            }
        }
        Ok(())
    }

    fn run(mut self) -> Result<RunOutput, RunError> {
        let s = self.s;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut due: BTreeMap<usize, Vec<&ControlAction>> = BTreeMap::new();
        for c in &s.doc.control {
            if let Some(i) = processing_index(&s.samples, c.t) {
                due.entry(i).or_default().push(&c.action);
            }
        }
        for (i, sample) in s.samples.iter().enumerate() {
            let t = sample.t;
            let position = Point3::from_array(sample.position);
            if i == 0 {
                let dev = &s.doc.device;
                self.hello(&dev.user_id.clone(), &dev.credential.clone(), t)?;
            }
            self.localize(t, position, &mut rng)?;
            for action in due.remove(&i).unwrap_or_default() {
                self.apply_control(action, t)?;
            }
            if self.session.phase == Phase::Sharing {
                self.share(
                    t,
                    DevicePose {
                        position,
                        yaw: sample.yaw,
                    },
                )?;
            }
        }
        let end = s.samples.last().map(|x| x.t).unwrap_or(0);
        self.send(Direction::DeviceToServer, Message::Bye, end)?;
        self.audit(
            end,
            AuditKind::SessionControl,
            vec!["bye".into()],
            "applied",
            None,
            None,
        );
        if let Some(sid) = self.session.session_id.clone() {
            self.auth.end(&s.doc.device.device_id, &sid);
        }
        let policies = BTreeMap::from([(s.jurisdiction.tag.clone(), s.jurisdiction.clone())]);
        self.out.purged = self
            .out
            .audit
            .purge_expired(s.doc.purge_at.unwrap_or(end), &policies);
        self.out.filter_stats = self.filter.stats;
        Ok(self.out)
    }
}

/// Runs a validated scenario in memory.
pub fn run(scenario: &Scenario, seed: u64) -> Result<RunOutput, RunError> {
    Run::new(scenario, seed).run()
}

/// Validates, runs and writes artifacts to `out`. Nothing is written if
/// validation fails.
pub fn run_scenario(doc: ScenarioDoc, seed: u64, out: &Path) -> Result<RunOutput, RunError> {
    let scenario = Scenario::from_doc(doc)?;
    let output = run(&scenario, seed)?;
    output.write(out)?;
    Ok(output)
}
