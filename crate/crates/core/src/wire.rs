//! Framed session protocol.
//!
//! A frame is a 4-byte little-endian payload length, a 1-byte type tag and
//! the payload: canonical JSON (sorted keys, no whitespace), or nothing for
//! BYE. Decoding accepts exactly the byte strings [`encode`] can produce.

use std::collections::{BTreeMap, BTreeSet};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::locate::{FixQuality, PositionFix};
use crate::permit::{EventKind, PermissionEvent};
use crate::policy::{FilteredFrame, OverrideRequest};
use crate::scene::ShareFrame;
use crate::Millis;

pub const HEADER_LEN: usize = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("unknown message tag {0:#04x}")]
    UnknownTag(u8),
    #[error("payload violates its schema: {0}")]
    SchemaViolation(String),
    #[error("{input} is not allowed in phase {phase:?}")]
    IllegalTransition { phase: Phase, input: &'static str },
    #[error("session id `{0}` was already used")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageTag {
    Hello = 1,
    AuthOk = 2,
    AuthFail = 3,
    LocFix = 4,
    PermissionEvt = 5,
    ShareOffer = 6,
    ViewFrame = 7,
    Mute = 8,
    Unmute = 9,
    OverrideReq = 10,
    OverrideResult = 11,
    Doff = 12,
    Revoke = 13,
    Bye = 14,
}

impl MessageTag {
    pub const ALL: [MessageTag; 14] = [
        MessageTag::Hello,
        MessageTag::AuthOk,
        MessageTag::AuthFail,
        MessageTag::LocFix,
        MessageTag::PermissionEvt,
        MessageTag::ShareOffer,
        MessageTag::ViewFrame,
        MessageTag::Mute,
        MessageTag::Unmute,
        MessageTag::OverrideReq,
        MessageTag::OverrideResult,
        MessageTag::Doff,
        MessageTag::Revoke,
        MessageTag::Bye,
    ];

    pub fn from_byte(b: u8) -> Option<MessageTag> {
        Self::ALL.get((b as usize).wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageTag::Hello => "HELLO",
            MessageTag::AuthOk => "AUTH_OK",
            MessageTag::AuthFail => "AUTH_FAIL",
            MessageTag::LocFix => "LOC_FIX",
            MessageTag::PermissionEvt => "PERMISSION_EVT",
            MessageTag::ShareOffer => "SHARE_OFFER",
            MessageTag::ViewFrame => "VIEW_FRAME",
            MessageTag::Mute => "MUTE",
            MessageTag::Unmute => "UNMUTE",
            MessageTag::OverrideReq => "OVERRIDE_REQ",
            MessageTag::OverrideResult => "OVERRIDE_RESULT",
            MessageTag::Doff => "DOFF",
            MessageTag::Revoke => "REVOKE",
            MessageTag::Bye => "BYE",
        }
    }

    pub fn from_name(name: &str) -> Option<MessageTag> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub device_id: String,
    pub user_id: String,
    pub credential_digest: String,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthOk {
    pub device_id: String,
    pub user_id: String,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthFail {
    pub device_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewFrame {
    pub recipient: String,
    pub frame: ShareFrame,
}

/// Payload of MUTE, UNMUTE and DOFF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlStamp {
    pub timestamp: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Revoke {
    pub timestamp: Millis,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    AuthOk(AuthOk),
    AuthFail(AuthFail),
    LocFix(PositionFix),
    PermissionEvt(PermissionEvent),
    ShareOffer(FilteredFrame),
    ViewFrame(ViewFrame),
    Mute(ControlStamp),
    Unmute(ControlStamp),
    OverrideReq(OverrideRequest),
    OverrideResult(OverrideRequest),
    Doff(ControlStamp),
    Revoke(Revoke),
    Bye,
}

fn violation(msg: impl Into<String>) -> WireError {
    WireError::SchemaViolation(msg.into())
}

fn require(ok: bool, msg: &str) -> Result<(), WireError> {
    if ok {
        Ok(())
    } else {
        Err(violation(msg))
    }
}

fn is_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Hex SHA-256 of a credential secret; the only form credentials travel in.
pub fn credential_digest(credential: &str) -> String {
    hex::encode(Sha256::digest(credential.as_bytes()))
}

impl Message {
    pub fn tag(&self) -> MessageTag {
        match self {
            Message::Hello(_) => MessageTag::Hello,
            Message::AuthOk(_) => MessageTag::AuthOk,
            Message::AuthFail(_) => MessageTag::AuthFail,
            Message::LocFix(_) => MessageTag::LocFix,
            Message::PermissionEvt(_) => MessageTag::PermissionEvt,
            Message::ShareOffer(_) => MessageTag::ShareOffer,
            Message::ViewFrame(_) => MessageTag::ViewFrame,
            Message::Mute(_) => MessageTag::Mute,
            Message::Unmute(_) => MessageTag::Unmute,
            Message::OverrideReq(_) => MessageTag::OverrideReq,
            Message::OverrideResult(_) => MessageTag::OverrideResult,
            Message::Doff(_) => MessageTag::Doff,
            Message::Revoke(_) => MessageTag::Revoke,
            Message::Bye => MessageTag::Bye,
        }
    }

    pub fn name(&self) -> &'static str {
        self.tag().name()
    }

    /// Checks the payload against its type schema.
    pub fn validate(&self) -> Result<(), WireError> {
        match self {
            Message::Hello(h) => {
                require(
                    !h.device_id.is_empty() && !h.user_id.is_empty(),
                    "empty device or user id",
                )?;
                require(!h.session_id.is_empty(), "empty session id")?;
                require(
                    is_digest(&h.credential_digest),
                    "credential digest is not lowercase sha-256 hex",
                )
            }
            Message::AuthOk(a) => require(
                !a.device_id.is_empty() && !a.user_id.is_empty() && !a.session_id.is_empty(),
                "empty id in AUTH_OK",
            ),
            Message::AuthFail(a) => require(!a.reason.is_empty(), "AUTH_FAIL without reason"),
            Message::LocFix(f) => {
                match (f.quality, f.position) {
                    (FixQuality::None, None) => {}
                    (FixQuality::None, Some(_)) => {
                        return Err(violation("fix without quality has a position"))
                    }
                    (_, None) => return Err(violation("fix quality without position")),
                    (_, Some(p)) => require(p.is_finite(), "non-finite position")?,
                }
                match f.rms_residual {
                    Some(r) => require(r.is_finite() && r >= 0.0, "bad residual"),
                    None => Ok(()),
                }
            }
            Message::PermissionEvt(_) => Ok(()),
            Message::ShareOffer(offer) => {
                validate_frame(&offer.frame)?;
                let md = &offer.metadata;
                require(
                    is_digest(&md.policy_digest),
                    "policy digest is not sha-256 hex",
                )?;
                let ids: Vec<_> = offer.frame.object_map.iter().map(|e| e.id).collect();
                require(
                    md.labels.keys().copied().eq(ids.iter().copied())
                        && md.pixel_areas.keys().copied().eq(ids.iter().copied()),
                    "metadata ids differ from the object map",
                )?;
                require(
                    offer
                        .frame
                        .object_map
                        .iter()
                        .all(|e| md.labels[&e.id] == e.label && md.pixel_areas[&e.id] == e.rects),
                    "metadata disagrees with the object map",
                )?;
                require(
                    md.masked_ids.windows(2).all(|w| w[0] < w[1]),
                    "masked ids not sorted",
                )
            }
            Message::ViewFrame(v) => {
                require(!v.recipient.is_empty(), "empty recipient")?;
                validate_frame(&v.frame)
            }
            Message::Mute(_) | Message::Unmute(_) | Message::Doff(_) => Ok(()),
            Message::OverrideReq(r) | Message::OverrideResult(r) => require(
                !r.request_id.is_empty() && !r.requested_by.is_empty(),
                "empty id in override",
            ),
            Message::Revoke(r) => require(!r.reason.is_empty(), "REVOKE without reason"),
            Message::Bye => Ok(()),
        }
    }

    /// Canonical JSON payload; BYE has none.
    pub fn payload_value(&self) -> Option<serde_json::Value> {
        fn v<T: Serialize>(t: &T) -> Option<serde_json::Value> {
            Some(serde_json::to_value(t).expect("message payloads serialize"))
        }
        match self {
            Message::Hello(p) => v(p),
            Message::AuthOk(p) => v(p),
            Message::AuthFail(p) => v(p),
            Message::LocFix(p) => v(p),
            Message::PermissionEvt(p) => v(p),
            Message::ShareOffer(p) => v(p),
            Message::ViewFrame(p) => v(p),
            Message::Mute(p) | Message::Unmute(p) | Message::Doff(p) => v(p),
            Message::OverrideReq(p) | Message::OverrideResult(p) => v(p),
            Message::Revoke(p) => v(p),
            Message::Bye => None,
        }
    }

    pub fn payload_bytes(&self) -> Vec<u8> {
        self.payload_value()
            .map(|v| serde_json::to_vec(&v).expect("json values serialize"))
            .unwrap_or_default()
    }

    /// Inverse of [`Message::payload_bytes`]; rejects anything that does not
    /// re-encode to the same bytes.
    pub fn from_payload(tag: MessageTag, payload: &[u8]) -> Result<Message, WireError> {
        fn p<T: DeserializeOwned>(payload: &[u8]) -> Result<T, WireError> {
            serde_json::from_slice(payload).map_err(|e| violation(e.to_string()))
        }
        let msg = match tag {
            MessageTag::Hello => Message::Hello(p(payload)?),
            MessageTag::AuthOk => Message::AuthOk(p(payload)?),
            MessageTag::AuthFail => Message::AuthFail(p(payload)?),
            MessageTag::LocFix => Message::LocFix(p(payload)?),
            MessageTag::PermissionEvt => Message::PermissionEvt(p(payload)?),
            MessageTag::ShareOffer => Message::ShareOffer(p(payload)?),
            MessageTag::ViewFrame => Message::ViewFrame(p(payload)?),
            MessageTag::Mute => Message::Mute(p(payload)?),
            MessageTag::Unmute => Message::Unmute(p(payload)?),
            MessageTag::OverrideReq => Message::OverrideReq(p(payload)?),
            MessageTag::OverrideResult => Message::OverrideResult(p(payload)?),
            MessageTag::Doff => Message::Doff(p(payload)?),
            MessageTag::Revoke => Message::Revoke(p(payload)?),
            MessageTag::Bye => {
                require(payload.is_empty(), "BYE carries no payload")?;
                Message::Bye
            }
        };
        msg.validate()?;
        if msg.payload_bytes() != payload {
            return Err(violation("payload is not in canonical form"));
        }
        Ok(msg)
    }

    /// `{"type": NAME, "payload": ...}` as used in session traces.
    pub fn to_trace_value(&self) -> serde_json::Value {
        serde_json::json!({
            "type": self.name(),
            "payload": self.payload_value().unwrap_or(serde_json::Value::Null),
        })
    }

    pub fn from_trace_value(v: &serde_json::Value) -> Result<Message, WireError> {
        let name = v
            .get("type")
            .and_then(|t| t.as_str())
            .ok_or_else(|| violation("trace message without type"))?;
        let tag = MessageTag::from_name(name)
            .ok_or_else(|| violation(format!("unknown message type {name}")))?;
        let payload = match v.get("payload") {
            None | Some(serde_json::Value::Null) => Vec::new(),
            Some(p) => serde_json::to_vec(p).expect("json values serialize"),
        };
        Message::from_payload(tag, &payload)
    }
}

fn validate_frame(frame: &ShareFrame) -> Result<(), WireError> {
    require(
        frame.width > 0 && frame.height > 0,
        "empty frame dimensions",
    )?;
    frame
        .check_coherence()
        .map_err(|e| violation(e.to_string()))?;
    require(
        frame.object_map.windows(2).all(|w| w[0].id < w[1].id),
        "object map not sorted by id",
    )
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    msg.validate()?;
    let payload = msg.payload_bytes();
    let len = u32::try_from(payload.len()).map_err(|_| violation("payload exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&len.to_le_bytes());
    out.push(msg.tag() as u8);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes one frame from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize), WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("four bytes")) as usize;
    let tag = MessageTag::from_byte(bytes[4]).ok_or(WireError::UnknownTag(bytes[4]))?;
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    Ok((
        Message::from_payload(tag, &bytes[HEADER_LEN..total])?,
        total,
    ))
}

/// Decodes exactly one frame.
pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(WireError::TrailingBytes(bytes.len() - used));
    }
    Ok(msg)
}

/// Decodes a concatenation of frames.
pub fn decode_stream(mut bytes: &[u8]) -> Result<Vec<Message>, WireError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (msg, used) = decode_prefix(bytes)?;
        out.push(msg);
        bytes = &bytes[used..];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceBinding {
    pub device_id: String,
    pub user_id: String,
    pub credential_digest: String,
    pub session_id: Option<String>,
    pub locked: bool,
}

/// Outcome of one HELLO.
#[derive(Debug, Clone, PartialEq)]
pub struct AuthDecision {
    /// AUTH_OK or AUTH_FAIL.
    pub reply: Message,
    /// Live session on the same device that this HELLO closed.
    pub superseded: Option<String>,
}

impl AuthDecision {
    pub fn is_ok(&self) -> bool {
        matches!(self.reply, Message::AuthOk(_))
    }
}

/// Server-side device/user enrollment and the session-id replay ledger.
#[derive(Debug, Clone, Default)]
pub struct Authenticator {
    bindings: BTreeMap<String, DeviceBinding>,
    used_session_ids: BTreeSet<String>,
}

impl Authenticator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds `device_id` to `user_id`; the device only ever accepts that
    /// user's credential.
    pub fn enroll(&mut self, device_id: &str, user_id: &str, credential_digest: &str) {
        self.bindings.insert(
            device_id.to_string(),
            DeviceBinding {
                device_id: device_id.to_string(),
                user_id: user_id.to_string(),
                credential_digest: credential_digest.to_string(),
                session_id: None,
                locked: false,
            },
        );
    }

    pub fn binding(&self, device_id: &str) -> Option<&DeviceBinding> {
        self.bindings.get(device_id)
    }

    /// AUTH_OK iff the device is enrolled, the user is the one bound to it
    /// and the digest matches. A successful HELLO must carry a session id
    /// never seen before; it closes any live session on the device.
    pub fn authenticate(&mut self, hello: &Hello) -> Result<AuthDecision, WireError> {
        let fail = |reason: &str| AuthDecision {
            reply: Message::AuthFail(AuthFail {
                device_id: hello.device_id.clone(),
                reason: reason.to_string(),
            }),
            superseded: None,
        };
        let Some(binding) = self.bindings.get(&hello.device_id) else {
            return Ok(fail("device not enrolled"));
        };
        if binding.user_id != hello.user_id {
            return Ok(fail("user not bound to device"));
        }
        if binding.credential_digest != hello.credential_digest {
            return Ok(fail("credential mismatch"));
        }
        if self.used_session_ids.contains(&hello.session_id) {
            return Err(WireError::Replay(hello.session_id.clone()));
        }
        self.used_session_ids.insert(hello.session_id.clone());
        let binding = self
            .bindings
            .get_mut(&hello.device_id)
            .expect("checked above");
        let superseded = binding.session_id.replace(hello.session_id.clone());
        binding.locked = false;
        Ok(AuthDecision {
            reply: Message::AuthOk(AuthOk {
                device_id: hello.device_id.clone(),
                user_id: hello.user_id.clone(),
                session_id: hello.session_id.clone(),
            }),
            superseded,
        })
    }

    pub fn lock(&mut self, device_id: &str) {
        if let Some(b) = self.bindings.get_mut(device_id) {
            b.locked = true;
        }
    }

    /// Ends the live session on a device, if it is `session_id`.
    pub fn end(&mut self, device_id: &str, session_id: &str) {
        if let Some(b) = self.bindings.get_mut(device_id) {
            if b.session_id.as_deref() == Some(session_id) {
                b.session_id = None;
            }
        }
    }

    pub fn live_sessions(&self) -> impl Iterator<Item = (&str, &str)> {
        self.bindings
            .values()
            .filter_map(|b| b.session_id.as_deref().map(|s| (b.device_id.as_str(), s)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Authenticating,
    Ready,
    Sharing,
    Muted,
    Suspended,
    Locked,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Peer {
    Device,
    Server,
    Recipient(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub to: Peer,
    pub message: Message,
}

/// Local user actions that never travel as protocol messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalControl {
    StartShare,
    StopShare,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionInput {
    Message(Message),
    Permission(PermissionEvent),
    Control(LocalControl),
}

/// Server view of one session. The phase is a function of the flags, so
/// the flags are the single source of truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub phase: Phase,
    pub participants: BTreeSet<String>,
    pub session_id: Option<String>,
    pub authenticating: bool,
    pub authenticated: bool,
    pub locked: bool,
    pub muted: bool,
    pub share_requested: bool,
    pub permit_allowed: bool,
    pub closed: bool,
}

impl SessionState {
    pub fn new(participants: impl IntoIterator<Item = String>) -> Self {
        Self {
            phase: Phase::Idle,
            participants: participants.into_iter().collect(),
            session_id: None,
            authenticating: false,
            authenticated: false,
            locked: false,
            muted: false,
            share_requested: false,
            permit_allowed: false,
            closed: false,
        }
    }

    fn derive_phase(&self) -> Phase {
        if self.closed {
            Phase::Closed
        } else if self.locked && !self.authenticating {
            Phase::Locked
        } else if self.authenticating {
            Phase::Authenticating
        } else if !self.authenticated {
            Phase::Idle
        } else if !self.share_requested {
            Phase::Ready
        } else if self.muted {
            Phase::Muted
        } else if !self.permit_allowed {
            Phase::Suspended
        } else {
            Phase::Sharing
        }
    }

    pub fn is_sharing(&self) -> bool {
        self.phase == Phase::Sharing
    }
}

fn input_name(input: &SessionInput) -> &'static str {
    match input {
        SessionInput::Message(m) => m.name(),
        SessionInput::Permission(_) => "permission event",
        SessionInput::Control(LocalControl::StartShare) => "start_share",
        SessionInput::Control(LocalControl::StopShare) => "stop_share",
    }
}

/// Advances the session by one input. Leaving Sharing for any reason
/// broadcasts REVOKE to every participant before anything else happens.
/// VIEW_FRAMEs are forwarded only while Sharing and silently dropped
/// otherwise; a SHARE_OFFER outside Sharing is an error.
pub fn session_step(
    state: &SessionState,
    input: &SessionInput,
    now: Millis,
) -> Result<(SessionState, Vec<Emission>), WireError> {
    let illegal = || WireError::IllegalTransition {
        phase: state.phase,
        input: input_name(input),
    };
    if state.closed {
        return Err(illegal());
    }
    let mut next = state.clone();
    let mut out = Vec::new();
    let mut revoke_reason = "suspended";
    match input {
        SessionInput::Message(msg) => match msg {
            Message::Hello(h) => {
                if !matches!(state.phase, Phase::Idle | Phase::Locked) && !state.authenticated {
                    return Err(illegal());
                }
                next.authenticating = true;
                next.session_id = Some(h.session_id.clone());
                revoke_reason = "reauthenticating";
            }
            Message::AuthOk(ok) => {
                if !state.authenticating {
                    return Err(illegal());
                }
                next.authenticating = false;
                next.authenticated = true;
                next.locked = false;
                next.muted = false;
                next.share_requested = false;
                next.session_id = Some(ok.session_id.clone());
            }
            Message::AuthFail(_) => {
                if !state.authenticating {
                    return Err(illegal());
                }
                next.authenticating = false;
                next.authenticated = false;
            }
            Message::LocFix(_) | Message::PermissionEvt(_) => {
                if let Message::PermissionEvt(ev) = msg {
                    apply_permission(&mut next, ev);
                }
            }
            Message::ShareOffer(_) => {
                if state.phase != Phase::Sharing {
                    return Err(illegal());
                }
            }
            Message::ViewFrame(v) => {
                if state.phase == Phase::Sharing && state.participants.contains(&v.recipient) {
                    out.push(Emission {
                        to: Peer::Recipient(v.recipient.clone()),
                        message: msg.clone(),
                    });
                }
            }
            Message::Mute(_) => {
                next.muted = true;
                revoke_reason = "muted";
            }
            Message::Unmute(_) => next.muted = false,
            Message::Doff(_) => {
                next.locked = true;
                next.authenticated = false;
                next.authenticating = false;
                revoke_reason = "locked";
            }
            Message::OverrideReq(_) | Message::OverrideResult(_) => {
                if !state.authenticated || state.locked {
                    return Err(illegal());
                }
            }
            Message::Revoke(_) => return Err(illegal()),
            Message::Bye => {
                next.closed = true;
                revoke_reason = "closed";
            }
        },
        SessionInput::Permission(ev) => apply_permission(&mut next, ev),
        SessionInput::Control(LocalControl::StartShare) => {
            if !state.authenticated || state.locked {
                return Err(illegal());
            }
            next.share_requested = true;
        }
        SessionInput::Control(LocalControl::StopShare) => {
            next.share_requested = false;
            revoke_reason = "stopped";
        }
    }
    next.phase = next.derive_phase();
    if state.phase == Phase::Sharing && next.phase != Phase::Sharing {
        let revoke = Message::Revoke(Revoke {
            timestamp: now,
            reason: revoke_reason.to_string(),
        });
        let mut revokes: Vec<Emission> = state
            .participants
            .iter()
            .map(|r| Emission {
                to: Peer::Recipient(r.clone()),
                message: revoke.clone(),
            })
            .collect();
        revokes.append(&mut out);
        out = revokes;
    }
    Ok((next, out))
}

fn apply_permission(state: &mut SessionState, ev: &PermissionEvent) {
    match ev.kind {
        EventKind::Granted | EventKind::Resumed => state.permit_allowed = true,
        EventKind::Suspended => state.permit_allowed = false,
        EventKind::ApproachWarning => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::permit::EventReason;
    use crate::policy::FrameMetadata;
    use crate::scene::{ObjectArea, Rect};

    fn digest() -> String {
        credential_digest("secret-u1")
    }

    fn hello(device: &str, user: &str, cred: &str, session: &str) -> Hello {
        Hello {
            device_id: device.into(),
            user_id: user.into(),
            credential_digest: credential_digest(cred),
            session_id: session.into(),
        }
    }

    fn small_frame() -> ShareFrame {
        let mut f = ShareFrame::blank(7, 4, 3);
        f.cells[1] = 3;
        f.cells[5] = 3;
        f.object_map.push(ObjectArea {
            id: 3,
            label: "plant".into(),
            rects: vec![Rect::new(1, 0, 1, 2)],
        });
        f
    }

    #[test]
    fn bye_is_five_bytes() {
        assert_eq!(encode(&Message::Bye).unwrap(), vec![0, 0, 0, 0, 0x0e]);
        assert_eq!(decode(&[0, 0, 0, 0, 0x0e]).unwrap(), Message::Bye);
    }

    #[test]
    fn tags_match_names() {
        for (i, t) in MessageTag::ALL.iter().enumerate() {
            assert_eq!(*t as u8 as usize, i + 1);
            assert_eq!(MessageTag::from_byte(*t as u8), Some(*t));
            assert_eq!(MessageTag::from_name(t.name()), Some(*t));
        }
        assert_eq!(MessageTag::from_byte(0), None);
        assert_eq!(MessageTag::from_byte(15), None);
    }

    #[test]
    fn framing_layout() {
        let m = Message::Mute(ControlStamp { timestamp: 42 });
        let bytes = encode(&m).unwrap();
        let payload = br#"{"timestamp":42}"#;
        assert_eq!(&bytes[..4], &(payload.len() as u32).to_le_bytes());
        assert_eq!(bytes[4], 8);
        assert_eq!(&bytes[5..], payload);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn share_offer_round_trip() {
        let frame = small_frame();
        let md = FrameMetadata::describe(&frame, &digest(), vec![1]);
        let m = Message::ShareOffer(FilteredFrame {
            frame,
            metadata: md,
        });
        let bytes = encode(&m).unwrap();
        assert_eq!(decode(&bytes).unwrap(), m);
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_trailing() {
        let bytes = encode(&Message::Unmute(ControlStamp { timestamp: 1 })).unwrap();
        for cut in 0..bytes.len() {
            assert!(
                matches!(decode(&bytes[..cut]), Err(WireError::Truncated { .. })),
                "cut {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode(&extra), Err(WireError::TrailingBytes(1)));
        let mut two = bytes.clone();
        two.extend(encode(&Message::Bye).unwrap());
        assert_eq!(decode_stream(&two).unwrap().len(), 2);
    }

    #[test]
    fn unknown_tag() {
        assert_eq!(
            decode(&[0, 0, 0, 0, 0x0f]),
            Err(WireError::UnknownTag(0x0f))
        );
        assert_eq!(decode(&[0, 0, 0, 0, 0x00]), Err(WireError::UnknownTag(0)));
    }

    fn frame_with(tag: u8, payload: &[u8]) -> Vec<u8> {
        let mut v = (payload.len() as u32).to_le_bytes().to_vec();
        v.push(tag);
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn non_canonical_payloads_rejected() {
        for payload in [
            &br#"{ "timestamp":42}"#[..],
            br#"{"timestamp":42,"x":1}"#,
            br#"{"timestamp":-1}"#,
            br#"{}"#,
            b"not json",
        ] {
            assert!(
                matches!(
                    decode(&frame_with(8, payload)),
                    Err(WireError::SchemaViolation(_))
                ),
                "{}",
                String::from_utf8_lossy(payload)
            );
        }
        assert!(matches!(
            decode(&frame_with(14, b"{}")),
            Err(WireError::SchemaViolation(_))
        ));
    }

    #[test]
    fn encode_rejects_invalid_payloads() {
        let mut h = hello("d1", "u1", "x", "s1");
        h.credential_digest = "nope".into();
        assert!(encode(&Message::Hello(h)).is_err());
        let mut f = small_frame();
        f.cells[0] = 9;
        let m = Message::ViewFrame(ViewFrame {
            recipient: "r".into(),
            frame: f,
        });
        assert!(encode(&m).is_err());
    }

    #[test]
    fn impersonation_matrix() {
        let mut auth = Authenticator::new();
        auth.enroll("D1", "U1", &credential_digest("c1"));
        auth.enroll("D2", "U2", &credential_digest("c2"));
        let cases = [
            ("D1", "U1", "c1", true),
            ("D1", "U2", "c2", false),
            ("D1", "U1", "c2", false),
            ("D2", "U1", "c1", false),
            ("D2", "U2", "c2", true),
            ("D3", "U1", "c1", false),
        ];
        for (i, (d, u, c, ok)) in cases.into_iter().enumerate() {
            let out = auth
                .authenticate(&hello(d, u, c, &format!("s{i}")))
                .unwrap();
            assert_eq!(out.is_ok(), ok, "{d} {u} {c}");
        }
    }

    #[test]
    fn replay_and_single_binding() {
        let mut auth = Authenticator::new();
        auth.enroll("D1", "U1", &credential_digest("c1"));
        let first = auth.authenticate(&hello("D1", "U1", "c1", "s1")).unwrap();
        assert!(first.is_ok());
        assert_eq!(first.superseded, None);
        assert_eq!(
            auth.authenticate(&hello("D1", "U1", "c1", "s1")),
            Err(WireError::Replay("s1".into()))
        );
        let second = auth.authenticate(&hello("D1", "U1", "c1", "s2")).unwrap();
        assert_eq!(second.superseded.as_deref(), Some("s1"));
        assert_eq!(auth.live_sessions().collect::<Vec<_>>(), vec![("D1", "s2")]);
    }

    fn step(s: &SessionState, input: SessionInput) -> (SessionState, Vec<Emission>) {
        session_step(s, &input, 0).unwrap()
    }

    fn sharing_state() -> SessionState {
        let s = SessionState::new(["r1".to_string(), "r2".to_string()]);
        let (s, _) = step(
            &s,
            SessionInput::Message(Message::Hello(hello("D1", "U1", "c1", "s1"))),
        );
        assert_eq!(s.phase, Phase::Authenticating);
        let ok = AuthOk {
            device_id: "D1".into(),
            user_id: "U1".into(),
            session_id: "s1".into(),
        };
        let (s, _) = step(&s, SessionInput::Message(Message::AuthOk(ok)));
        assert_eq!(s.phase, Phase::Ready);
        let (s, _) = step(&s, SessionInput::Control(LocalControl::StartShare));
        assert_eq!(s.phase, Phase::Suspended);
        let granted = PermissionEvent {
            kind: EventKind::Granted,
            reason: EventReason::CleanFixes,
            timestamp: 0,
        };
        let (s, _) = step(&s, SessionInput::Permission(granted));
        assert_eq!(s.phase, Phase::Sharing);
        s
    }

    fn view(recipient: &str) -> SessionInput {
        SessionInput::Message(Message::ViewFrame(ViewFrame {
            recipient: recipient.into(),
            frame: small_frame(),
        }))
    }

    #[test]
    fn mute_drops_frames() {
        let s = sharing_state();
        let (s, out) = session_step(
            &s,
            &SessionInput::Message(Message::Mute(ControlStamp { timestamp: 5 })),
            5,
        )
        .unwrap();
        assert_eq!(s.phase, Phase::Muted);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|e| matches!(e.message, Message::Revoke(_))));
        for _ in 0..10 {
            let (_, out) = step(&s, view("r1"));
            assert!(out.is_empty());
        }
    }

    #[test]
    fn suspension_revokes_before_anything_else() {
        let s = sharing_state();
        let (_, out) = step(&s, view("r1"));
        assert_eq!(out.len(), 1);
        let ev = PermissionEvent {
            kind: EventKind::Suspended,
            reason: EventReason::ZoneRestricted,
            timestamp: 9,
        };
        let (s, out) = session_step(&s, &SessionInput::Permission(ev), 9).unwrap();
        assert_eq!(s.phase, Phase::Suspended);
        let to: Vec<_> = out.iter().map(|e| e.to.clone()).collect();
        assert_eq!(
            to,
            vec![Peer::Recipient("r1".into()), Peer::Recipient("r2".into())]
        );
        assert!(step(&s, view("r1")).1.is_empty());
    }

    #[test]
    fn locked_rejects_offers_until_reauth() {
        let s = sharing_state();
        let (s, out) = step(
            &s,
            SessionInput::Message(Message::Doff(ControlStamp { timestamp: 0 })),
        );
        assert_eq!(s.phase, Phase::Locked);
        assert_eq!(out.len(), 2);
        let frame = small_frame();
        let md = FrameMetadata::describe(&frame, &digest(), vec![]);
        let offer = SessionInput::Message(Message::ShareOffer(FilteredFrame {
            frame,
            metadata: md,
        }));
        assert!(matches!(
            session_step(&s, &offer, 0),
            Err(WireError::IllegalTransition {
                phase: Phase::Locked,
                ..
            })
        ));
        for input in [
            SessionInput::Message(Message::Unmute(ControlStamp { timestamp: 0 })),
            SessionInput::Permission(PermissionEvent {
                kind: EventKind::Resumed,
                reason: EventReason::CleanFixes,
                timestamp: 0,
            }),
        ] {
            assert_eq!(step(&s, input).0.phase, Phase::Locked);
        }
        assert!(session_step(&s, &SessionInput::Control(LocalControl::StartShare), 0).is_err());
        let (s, _) = step(
            &s,
            SessionInput::Message(Message::Hello(hello("D1", "U1", "c1", "s2"))),
        );
        let fail = AuthFail {
            device_id: "D1".into(),
            reason: "credential mismatch".into(),
        };
        let (s, _) = step(&s, SessionInput::Message(Message::AuthFail(fail)));
        assert_eq!(s.phase, Phase::Locked);
    }

    #[test]
    fn closed_is_absorbing() {
        let s = sharing_state();
        let (s, out) = step(&s, SessionInput::Message(Message::Bye));
        assert_eq!(s.phase, Phase::Closed);
        assert_eq!(out.len(), 2);
        assert!(session_step(&s, &SessionInput::Message(Message::Bye), 0).is_err());
        assert!(session_step(&s, &view("r1"), 0).is_err());
    }

    #[test]
    fn unknown_recipient_gets_nothing() {
        let s = sharing_state();
        assert!(step(&s, view("mallory")).1.is_empty());
    }
}
