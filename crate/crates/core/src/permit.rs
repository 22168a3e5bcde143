//! Permission state machine that gates spatial sharing on zone verdicts.
//!
//! Downgrades take effect on the first offending fix. Upgrades back to
//! [`PermissionMode::SharingAllowed`] need `upgrade_k` consecutive fixes that
//! are both Good and Permitted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::locate::{FixQuality, PositionFix};
use crate::twin::{ZoneClass, ZoneVerdict};
use crate::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermissionMode {
    SharingAllowed,
    SuspendedBuffer,
    SuspendedRestricted,
    SuspendedNoFix,
}

impl PermissionMode {
    /// Severity of a suspension cause: Restricted > Buffer > NoFix.
    fn severity(self) -> u8 {
        match self {
            PermissionMode::SharingAllowed => 0,
            PermissionMode::SuspendedNoFix => 1,
            PermissionMode::SuspendedBuffer => 2,
            PermissionMode::SuspendedRestricted => 3,
        }
    }

    pub fn is_suspended(self) -> bool {
        self != PermissionMode::SharingAllowed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Granted,
    Suspended,
    Resumed,
    ApproachWarning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventReason {
    ZoneRestricted,
    ZoneBuffer,
    LowQuality,
    NoFix,
    Timeout,
    CleanFixes,
    NearRestricted,
}

impl EventReason {
    /// Mode a Suspended event with this reason puts the machine in.
    pub fn suspended_mode(self) -> Option<PermissionMode> {
        match self {
            EventReason::ZoneRestricted => Some(PermissionMode::SuspendedRestricted),
            EventReason::ZoneBuffer => Some(PermissionMode::SuspendedBuffer),
            EventReason::LowQuality | EventReason::NoFix | EventReason::Timeout => {
                Some(PermissionMode::SuspendedNoFix)
            }
            EventReason::CleanFixes | EventReason::NearRestricted => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionEvent {
    pub kind: EventKind,
    pub reason: EventReason,
    pub timestamp: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionConfig {
    pub upgrade_k: u32,
    pub dropout_timeout: Millis,
    pub warn_distance: f64,
}

impl TransitionConfig {
    pub fn for_buffer(buffer_distance: f64) -> Self {
        Self {
            upgrade_k: 5,
            dropout_timeout: 2000,
            warn_distance: 2.0 * buffer_distance,
        }
    }

    pub fn validate(&self) -> Result<(), PermitError> {
        if self.upgrade_k == 0 {
            return Err(PermitError::Config("upgrade_k must be >= 1"));
        }
        if self.dropout_timeout == 0 {
            return Err(PermitError::Config("dropout_timeout must be > 0"));
        }
        if !(self.warn_distance.is_finite() && self.warn_distance >= 0.0) {
            return Err(PermitError::Config("warn_distance must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PermitError {
    #[error("fix at {got} ms arrived after one at {last} ms")]
    OutOfOrder { last: Millis, got: Millis },
    #[error("invalid transition config: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermissionState {
    pub mode: PermissionMode,
    pub consecutive_permitted: u32,
    /// Time of the last mode change.
    pub since: Millis,
    pub last_fix_at: Option<Millis>,
    granted_once: bool,
    warned: bool,
}

impl PermissionState {
    /// Fail-closed start: nothing is shared until clean fixes arrive.
    pub fn initial(now: Millis) -> Self {
        Self {
            mode: PermissionMode::SuspendedNoFix,
            consecutive_permitted: 0,
            since: now,
            last_fix_at: None,
            granted_once: false,
            warned: false,
        }
    }

    fn set_mode(
        &mut self,
        mode: PermissionMode,
        reason: EventReason,
        now: Millis,
        out: &mut Vec<PermissionEvent>,
    ) {
        if self.mode == mode {
            return;
        }
        let kind = if mode == PermissionMode::SharingAllowed {
            if self.granted_once {
                EventKind::Resumed
            } else {
                EventKind::Granted
            }
        } else {
            EventKind::Suspended
        };
        if mode == PermissionMode::SharingAllowed {
            self.granted_once = true;
        }
        self.mode = mode;
        self.since = now;
        out.push(PermissionEvent {
            kind,
            reason,
            timestamp: now,
        });
    }
}

/// The suspension this observation calls for, if any.
fn observed_cause(
    fix: &PositionFix,
    verdict: &ZoneVerdict,
) -> Option<(PermissionMode, EventReason)> {
    let zone = match (fix.position.is_some(), verdict.class) {
        (false, _) => None,
        (true, ZoneClass::Restricted) => Some((
            PermissionMode::SuspendedRestricted,
            EventReason::ZoneRestricted,
        )),
        (true, ZoneClass::Buffer) => {
            Some((PermissionMode::SuspendedBuffer, EventReason::ZoneBuffer))
        }
        (true, ZoneClass::Permitted) => None,
    };
    let quality = match fix.quality {
        FixQuality::Good => None,
        FixQuality::Low => Some((PermissionMode::SuspendedNoFix, EventReason::LowQuality)),
        FixQuality::None => Some((PermissionMode::SuspendedNoFix, EventReason::NoFix)),
    };
    match (zone, quality) {
        (Some(z), Some(q)) => Some(if z.0.severity() >= q.0.severity() {
            z
        } else {
            q
        }),
        (z, q) => z.or(q),
    }
}

/// Applies one fix and its zone verdict.
pub fn update_permission(
    state: &PermissionState,
    fix: &PositionFix,
    verdict: &ZoneVerdict,
    cfg: &TransitionConfig,
) -> Result<(PermissionState, Vec<PermissionEvent>), PermitError> {
    if let Some(last) = state.last_fix_at {
        if fix.timestamp < last {
            return Err(PermitError::OutOfOrder {
                last,
                got: fix.timestamp,
            });
        }
    }
    let now = fix.timestamp;
    let mut next = state.clone();
    next.last_fix_at = Some(now);
    let mut events = Vec::new();

    match observed_cause(fix, verdict) {
        Some((mode, reason)) => {
            next.consecutive_permitted = 0;
            next.set_mode(mode, reason, now, &mut events);
        }
        None if next.mode == PermissionMode::SharingAllowed => {
            next.consecutive_permitted = 0;
        }
        None => {
            next.consecutive_permitted += 1;
            if next.consecutive_permitted >= cfg.upgrade_k {
                next.consecutive_permitted = 0;
                next.set_mode(
                    PermissionMode::SharingAllowed,
                    EventReason::CleanFixes,
                    now,
                    &mut events,
                );
            }
        }
    }

    let in_band =
        fix.position.is_some() && verdict.nearest_restricted_distance <= cfg.warn_distance;
    if !in_band {
        next.warned = false;
    } else if next.mode == PermissionMode::SharingAllowed && !next.warned {
        next.warned = true;
        events.push(PermissionEvent {
            kind: EventKind::ApproachWarning,
            reason: EventReason::NearRestricted,
            timestamp: now,
        });
    }
    Ok((next, events))
}

/// Advances the clock without a fix. Silence longer than
/// `dropout_timeout` suspends sharing; a zone suspension keeps its label.
pub fn on_clock(
    state: &PermissionState,
    now: Millis,
    cfg: &TransitionConfig,
) -> (PermissionState, Vec<PermissionEvent>) {
    let mut next = state.clone();
    let mut events = Vec::new();
    let reference = state.last_fix_at.unwrap_or(state.since);
    if now.saturating_sub(reference) > cfg.dropout_timeout {
        next.consecutive_permitted = 0;
        if next.mode == PermissionMode::SharingAllowed {
            next.set_mode(
                PermissionMode::SuspendedNoFix,
                EventReason::Timeout,
                now,
                &mut events,
            );
        }
    }
    (next, events)
}

/// Rebuilds the mode timeline from an event list. Warnings carry no mode.
pub fn replay_modes(
    initial: PermissionMode,
    events: &[PermissionEvent],
) -> Vec<(Millis, PermissionMode)> {
    let mut out = Vec::new();
    let mut mode = initial;
    for e in events {
        let next = match e.kind {
            EventKind::Granted | EventKind::Resumed => PermissionMode::SharingAllowed,
            EventKind::Suspended => e.reason.suspended_mode().unwrap_or(mode),
            EventKind::ApproachWarning => continue,
        };
        mode = next;
        out.push((e.timestamp, mode));
    }
    out
}
