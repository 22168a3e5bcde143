//! Scenario document format.
//!
//! A scenario is a single JSON document describing one experiment: the floor
//! map, the device and its credentials, the scene inventory, the trajectory,
//! the declared policies, the recipients and a timed control script.
//!
//! These types carry data only. Both the pipeline and the leak verifier read
//! them, so nothing here evaluates zones or policies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag every scenario document must carry in its `schema` field.
pub const SCENARIO_SCHEMA: &str = "mrshare.scenario/1";

/// Default cadence of the simulated clock.
pub const DEFAULT_STEP_MS: u64 = 100;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("malformed scenario document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported scenario schema `{0}` (expected `{SCENARIO_SCHEMA}`)")]
    Version(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareClassDoc {
    Permitted,
    Restricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneClassDoc {
    Permitted,
    Buffer,
    Restricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationDoc {
    Public,
    Internal,
    Confidential,
    Restricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionDoc {
    Deny,
    Allow,
}

fn default_buffer() -> f64 {
    1.0
}

fn default_floor() -> String {
    "F1".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinDoc {
    #[serde(default = "default_buffer")]
    pub buffer_distance: f64,
    pub zones: Vec<ZoneDoc>,
    pub anchors: Vec<AnchorDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneDoc {
    pub id: String,
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub share_class: ShareClassDoc,
    #[serde(default = "default_floor")]
    pub floor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorDoc {
    pub id: String,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceDoc {
    pub device_id: String,
    pub user_id: String,
    /// Secret the wearer presents at authentication; only its digest goes on the wire.
    pub credential: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectDoc {
    pub x: u16,
    pub y: u16,
    pub w: u16,
    pub h: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectDoc {
    pub id: u8,
    pub label: String,
    pub location: [f64; 3],
    pub classification: ClassificationDoc,
    pub rect: RectDoc,
}

fn default_grid() -> u16 {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDoc {
    pub fov_half_angle: f64,
    pub range_max: f64,
    #[serde(default = "default_grid")]
    pub width: u16,
    #[serde(default = "default_grid")]
    pub height: u16,
}

impl Default for CameraDoc {
    fn default() -> Self {
        Self {
            fov_half_angle: std::f64::consts::FRAC_PI_3,
            range_max: 8.0,
            width: 64,
            height: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointDoc {
    pub t: u64,
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

fn default_step() -> u64 {
    DEFAULT_STEP_MS
}

/// Waypoints are expanded into samples every `step_ms` by linear
/// interpolation. `step_ms = 0` uses the waypoints verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryDoc {
    #[serde(default = "default_step")]
    pub step_ms: u64,
    pub waypoints: Vec<WaypointDoc>,
}

/// One simulated clock tick: the true device pose at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: u64,
    pub position: [f64; 3],
    pub yaw: f64,
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w -= 2.0 * PI;
    }
    w
}

impl TrajectoryDoc {
    /// Expands the waypoints into clock samples. Waypoint timestamps are
    /// assumed strictly increasing; the harness validates that beforehand.
    pub fn samples(&self) -> Vec<Sample> {
        let wps = &self.waypoints;
        if wps.is_empty() {
            return Vec::new();
        }
        let pose = |w: &WaypointDoc| Sample {
            t: w.t,
            position: w.position,
            yaw: wrap_angle(w.yaw),
        };
        if self.step_ms == 0 || wps.len() == 1 {
            return wps.iter().map(pose).collect();
        }
        let first = wps[0].t;
        let last = wps[wps.len() - 1].t;
        let mut out = Vec::new();
        let mut seg = 0;
        let mut t = first;
        loop {
            while seg + 1 < wps.len() - 1 && wps[seg + 1].t <= t {
                seg += 1;
            }
            let (a, b) = (&wps[seg], &wps[seg + 1]);
            let span = (b.t - a.t) as f64;
            let f = ((t - a.t) as f64 / span).clamp(0.0, 1.0);
            let mut position = [0.0; 3];
            for (k, p) in position.iter_mut().enumerate() {
                *p = a.position[k] + (b.position[k] - a.position[k]) * f;
            }
            let dyaw = wrap_angle(b.yaw - a.yaw);
            out.push(Sample {
                t,
                position,
                yaw: wrap_angle(a.yaw + dyaw * f),
            });
            if t == last {
                break;
            }
            t = (t + self.step_ms).min(last);
        }
        out
    }
}

/// Inclusive interval of simulated milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowDoc {
    pub start: u64,
    pub end: u64,
}

impl WindowDoc {
    pub fn contains(&self, t: u64) -> bool {
        self.start <= t && t <= self.end
    }
}

pub fn in_any_window(windows: &[WindowDoc], t: u64) -> bool {
    windows.iter().any(|w| w.contains(t))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalPolicyDoc {
    #[serde(default)]
    pub allowed_labels: Vec<String>,
    #[serde(default)]
    pub allowed_object_ids: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeilingDoc {
    pub max_allowed_labels: Vec<String>,
    pub max_classification: ClassificationDoc,
    #[serde(default)]
    pub zone_overrides: BTreeMap<ZoneClassDoc, DecisionDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipientDoc {
    pub id: String,
    pub role: String,
    pub clearance: ClassificationDoc,
    #[serde(default)]
    pub label_grants: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionDoc {
    Days(u32),
    NoArchive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JurisdictionDoc {
    pub tag: String,
    pub retention: RetentionDoc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlAction {
    StartShare,
    StopShare,
    Mute,
    Unmute,
    /// Headset removed; the session locks until a successful `auth`.
    Doff,
    Auth {
        user_id: String,
        credential: String,
    },
    Override {
        object_id: u8,
    },
}

/// A timed control event. It is processed at the first clock sample whose
/// time is at or after `t`, after that sample's fix and before its capture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlDoc {
    pub t: u64,
    #[serde(flatten)]
    pub action: ControlAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionDoc {
    pub upgrade_k: Option<u32>,
    pub dropout_timeout: Option<u64>,
    pub warn_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub schema: String,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub twin: TwinDoc,
    pub device: DeviceDoc,
    /// Further (device, user) pairs known to the server besides `device`.
    #[serde(default)]
    pub enrollments: Vec<DeviceDoc>,
    #[serde(default)]
    pub camera: CameraDoc,
    #[serde(default)]
    pub objects: Vec<ObjectDoc>,
    pub trajectory: TrajectoryDoc,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Extra clearance the pipeline adds to the buffer to absorb
    /// localization error. Defaults to `max(1 mm, 10 * noise_sigma)`.
    #[serde(default)]
    pub localization_guard: Option<f64>,
    #[serde(default)]
    pub dropout_windows: Vec<WindowDoc>,
    /// Intervals during which one anchor range is forged (+5 m).
    #[serde(default)]
    pub spoof_windows: Vec<WindowDoc>,
    #[serde(default)]
    pub local_policy: LocalPolicyDoc,
    pub ceiling: CeilingDoc,
    #[serde(default)]
    pub recipients: Vec<RecipientDoc>,
    pub jurisdiction: JurisdictionDoc,
    #[serde(default)]
    pub control: Vec<ControlDoc>,
    #[serde(default)]
    pub transition: Option<TransitionDoc>,
    /// Simulated time at which the retention purge runs after the session.
    #[serde(default)]
    pub purge_at: Option<u64>,
}

impl ScenarioDoc {
    pub fn parse(bytes: &[u8]) -> Result<Self, SchemaError> {
        let doc: ScenarioDoc = serde_json::from_slice(bytes)?;
        if doc.schema != SCENARIO_SCHEMA {
            return Err(SchemaError::Version(doc.schema));
        }
        Ok(doc)
    }

    /// Canonical serialization: sorted keys, indented, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("scenario documents always serialize");
        let mut s = serde_json::to_string_pretty(&value).expect("json values always serialize");
        s.push('\n');
        s
    }

    /// The scenario device plus any extra enrollments.
    pub fn all_enrollments(&self) -> Vec<&DeviceDoc> {
        std::iter::once(&self.device)
            .chain(&self.enrollments)
            .collect()
    }

    pub fn guard_distance(&self) -> f64 {
        self.localization_guard
            .unwrap_or_else(|| (10.0 * self.noise_sigma).max(1e-3))
    }
}

/// Index of the first sample at or after `t`, i.e. the tick at which an
/// event stamped `t` takes effect. `None` if `t` is past the last sample.
pub fn processing_index(samples: &[Sample], t: u64) -> Option<usize> {
    let i = samples.partition_point(|s| s.t < t);
    (i < samples.len()).then_some(i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(step: u64, wps: &[(u64, [f64; 3], f64)]) -> TrajectoryDoc {
        TrajectoryDoc {
            step_ms: step,
            waypoints: wps
                .iter()
                .map(|&(t, position, yaw)| WaypointDoc { t, position, yaw })
                .collect(),
        }
    }

    #[test]
    fn expands_waypoints_at_step() {
        let tr = traj(
            100,
            &[(0, [0.0, 0.0, 1.5], 0.0), (1000, [10.0, 0.0, 1.5], 0.0)],
        );
        let s = tr.samples();
        assert_eq!(s.len(), 11);
        assert_eq!(s[5].t, 500);
        assert!((s[5].position[0] - 5.0).abs() < 1e-12);
        assert_eq!(s[10].position, [10.0, 0.0, 1.5]);
    }

    #[test]
    fn last_waypoint_off_grid_is_kept() {
        let tr = traj(100, &[(0, [0.0; 3], 0.0), (250, [1.0, 0.0, 0.0], 0.0)]);
        let ts: Vec<u64> = tr.samples().iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![0, 100, 200, 250]);
    }

    #[test]
    fn yaw_interpolates_the_short_way() {
        let tr = traj(50, &[(0, [0.0; 3], 3.0), (100, [0.0; 3], -3.0)]);
        let mid = tr.samples()[1].yaw;
        assert!(mid.abs() > 3.0, "went through zero instead of pi: {mid}");
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn processing_index_picks_next_tick() {
        let tr = traj(100, &[(0, [0.0; 3], 0.0), (300, [0.0; 3], 0.0)]);
        let s = tr.samples();
        assert_eq!(processing_index(&s, 0), Some(0));
        assert_eq!(processing_index(&s, 150), Some(2));
        assert_eq!(processing_index(&s, 301), None);
    }

    #[test]
    fn rejects_wrong_version() {
        let doc = br#"{"schema":"other/2"}"#;
        assert!(ScenarioDoc::parse(doc).is_err());
    }

    #[test]
    fn control_actions_are_flat() {
        let c: ControlDoc =
            serde_json::from_str(r#"{"t": 5, "action": "override", "object_id": 3}"#).unwrap();
        assert_eq!(c.action, ControlAction::Override { object_id: 3 });
        let r: RetentionDoc = serde_json::from_str(r#""no_archive""#).unwrap();
        assert_eq!(r, RetentionDoc::NoArchive);
        let r: RetentionDoc = serde_json::from_str(r#"{"days": 7}"#).unwrap();
        assert_eq!(r, RetentionDoc::Days(7));
    }
}
