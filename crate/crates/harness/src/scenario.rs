//! Scenario validation and conversion into pipeline types.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use mrshare_core::audit::JurisdictionPolicy;
use mrshare_core::geom::Point3;
use mrshare_core::locate::LoopConfig;
use mrshare_core::permit::TransitionConfig;
use mrshare_core::policy::{CeilingPolicy, LocalPolicy, ObjectRegistry, RecipientRole};
use mrshare_core::scene::{Camera, Rect, SceneObject, MASKED};
use mrshare_core::twin::DigitalTwin;
use mrshare_schema::{ControlAction, Sample, ScenarioDoc};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Schema(#[from] mrshare_schema::SchemaError),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ValidationError {
    ValidationError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// A validated scenario with every pipeline input prepared.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub doc: ScenarioDoc,
    pub twin: DigitalTwin,
    pub samples: Vec<Sample>,
    pub objects: Vec<SceneObject>,
    pub registry: ObjectRegistry,
    pub camera: Camera,
    pub local: LocalPolicy,
    pub ceiling: CeilingPolicy,
    pub recipients: Vec<RecipientRole>,
    pub jurisdiction: JurisdictionPolicy,
    pub transition: TransitionConfig,
    pub loop_config: LoopConfig,
}

/// Recipient ids double as archive file names.
fn safe_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ValidationError> {
        let bytes = std::fs::read(path)?;
        Self::from_doc(ScenarioDoc::parse(&bytes)?)
    }

    pub fn from_doc(doc: ScenarioDoc) -> Result<Self, ValidationError> {
        let twin = DigitalTwin::from_doc(&doc.twin).map_err(|e| invalid("twin", e.to_string()))?;

        let wps = &doc.trajectory.waypoints;
        if wps.is_empty() {
            return Err(invalid(
                "trajectory.waypoints",
                "at least one waypoint required",
            ));
        }
        for (i, w) in wps.iter().enumerate() {
            if !w.position.iter().all(|v| v.is_finite()) || !w.yaw.is_finite() {
                return Err(invalid(
                    format!("trajectory.waypoints[{i}]"),
                    "non-finite pose",
                ));
            }
            if i > 0 && w.t <= wps[i - 1].t {
                return Err(invalid(
                    format!("trajectory.waypoints[{i}].t"),
                    "timestamps must be strictly increasing",
                ));
            }
        }
        let samples = doc.trajectory.samples();

        let cam = &doc.camera;
        if !(cam.fov_half_angle.is_finite()
            && cam.fov_half_angle > 0.0
            && cam.fov_half_angle <= std::f64::consts::PI)
        {
            return Err(invalid("camera.fov_half_angle", "must be in (0, pi]"));
        }
        if !(cam.range_max.is_finite() && cam.range_max > 0.0) {
            return Err(invalid("camera.range_max", "must be positive"));
        }
        if cam.width == 0 || cam.height == 0 {
            return Err(invalid("camera", "grid must be at least 1x1"));
        }
        let camera = Camera {
            fov_half_angle: cam.fov_half_angle,
            range_max: cam.range_max,
            width: cam.width,
            height: cam.height,
        };

        let mut ids = BTreeSet::new();
        let mut objects = Vec::with_capacity(doc.objects.len());
        for (i, o) in doc.objects.iter().enumerate() {
            let field = format!("objects[{i}]");
            if o.id == 0 || o.id == MASKED {
                return Err(invalid(field, format!("object id {} is reserved", o.id)));
            }
            if !ids.insert(o.id) {
                return Err(invalid(field, format!("duplicate object id {}", o.id)));
            }
            if o.label.is_empty() {
                return Err(invalid(field, "empty label"));
            }
            if !o.location.iter().all(|v| v.is_finite()) {
                return Err(invalid(field, "non-finite location"));
            }
            let rect = Rect::new(o.rect.x, o.rect.y, o.rect.w, o.rect.h);
            if !rect.fits(camera.width, camera.height) {
                return Err(invalid(
                    field,
                    "raster rect must be non-empty and inside the camera grid",
                ));
            }
            objects.push(SceneObject {
                id: o.id,
                label: o.label.clone(),
                location: Point3::from_array(o.location),
                true_classification: o.classification.into(),
                raster_rect: rect,
            });
        }
        for (i, id) in doc.local_policy.allowed_object_ids.iter().enumerate() {
            if !ids.contains(id) {
                return Err(invalid(
                    format!("local_policy.allowed_object_ids[{i}]"),
                    format!("unknown object {id}"),
                ));
            }
        }

        let mut recipient_ids = BTreeSet::new();
        for (i, r) in doc.recipients.iter().enumerate() {
            if !safe_name(&r.id) {
                return Err(invalid(
                    format!("recipients[{i}].id"),
                    "use 1-64 chars of [A-Za-z0-9_-]",
                ));
            }
            if !recipient_ids.insert(r.id.as_str()) {
                return Err(invalid(
                    format!("recipients[{i}].id"),
                    format!("duplicate recipient `{}`", r.id),
                ));
            }
        }

        let mut devices = BTreeSet::new();
        for (i, e) in doc.all_enrollments().into_iter().enumerate() {
            if e.device_id.is_empty() || e.user_id.is_empty() {
                return Err(invalid(
                    format!("enrollments[{i}]"),
                    "empty device or user id",
                ));
            }
            if !devices.insert(e.device_id.as_str()) {
                return Err(invalid(
                    format!("enrollments[{i}]"),
                    format!("device `{}` enrolled twice", e.device_id),
                ));
            }
        }

        for (i, c) in doc.control.iter().enumerate() {
            let field = format!("control[{i}]");
            if i > 0 && c.t < doc.control[i - 1].t {
                return Err(invalid(field, "control events must be in time order"));
            }
            match &c.action {
                ControlAction::Override { object_id } if !ids.contains(object_id) => {
                    return Err(invalid(
                        field,
                        format!("override references unknown object {object_id}"),
                    ));
                }
                ControlAction::Auth { user_id, .. } if user_id.is_empty() => {
                    return Err(invalid(field, "empty user id"));
                }
                _ => {}
            }
        }
        for (name, windows) in [
            ("dropout_windows", &doc.dropout_windows),
            ("spoof_windows", &doc.spoof_windows),
        ] {
            for (i, w) in windows.iter().enumerate() {
                if w.start > w.end {
                    return Err(invalid(format!("{name}[{i}]"), "start after end"));
                }
            }
        }
        if !(doc.noise_sigma.is_finite() && doc.noise_sigma >= 0.0) {
            return Err(invalid("noise_sigma", "must be finite and >= 0"));
        }
        if let Some(g) = doc.localization_guard {
            if !(g.is_finite() && g >= 0.0) {
                return Err(invalid("localization_guard", "must be finite and >= 0"));
            }
        }
        if doc.jurisdiction.tag.is_empty()
            || doc.jurisdiction.tag == mrshare_core::audit::PURGE_JURISDICTION
        {
            return Err(invalid("jurisdiction.tag", "empty or reserved tag"));
        }

        let mut transition = TransitionConfig::for_buffer(twin.buffer_distance());
        if let Some(t) = &doc.transition {
            transition.upgrade_k = t.upgrade_k.unwrap_or(transition.upgrade_k);
            transition.dropout_timeout = t.dropout_timeout.unwrap_or(transition.dropout_timeout);
            transition.warn_distance = t.warn_distance.unwrap_or(transition.warn_distance);
        }
        transition
            .validate()
            .map_err(|e| invalid("transition", e.to_string()))?;

        let mut loop_config = LoopConfig::new(doc.noise_sigma);
        loop_config.dropout_windows = doc.dropout_windows.clone();
        loop_config.spoof_windows = doc.spoof_windows.clone();

        let registry = ObjectRegistry::from_objects(&objects);
        let local = LocalPolicy {
            allowed_labels: doc.local_policy.allowed_labels.iter().cloned().collect(),
            allowed_object_ids: doc
                .local_policy
                .allowed_object_ids
                .iter()
                .copied()
                .collect(),
        };
        let ceiling = CeilingPolicy {
            max_allowed_labels: doc.ceiling.max_allowed_labels.iter().cloned().collect(),
            max_classification: doc.ceiling.max_classification.into(),
            zone_overrides: doc
                .ceiling
                .zone_overrides
                .iter()
                .map(|(z, d)| {
                    let zone = match z {
                        mrshare_schema::ZoneClassDoc::Permitted => {
                            mrshare_core::twin::ZoneClass::Permitted
                        }
                        mrshare_schema::ZoneClassDoc::Buffer => {
                            mrshare_core::twin::ZoneClass::Buffer
                        }
                        mrshare_schema::ZoneClassDoc::Restricted => {
                            mrshare_core::twin::ZoneClass::Restricted
                        }
                    };
                    (zone, (*d).into())
                })
                .collect::<BTreeMap<_, _>>(),
        };
        let recipients = doc
            .recipients
            .iter()
            .map(|r| RecipientRole {
                recipient_id: r.id.clone(),
                role: r.role.clone(),
                clearance: r.clearance.into(),
                label_grants: r.label_grants.iter().cloned().collect(),
            })
            .collect();
        let jurisdiction = JurisdictionPolicy::from(&doc.jurisdiction);

        Ok(Self {
            twin,
            samples,
            objects,
            registry,
            camera,
            local,
            ceiling,
            recipients,
            jurisdiction,
            transition,
            loop_config,
            doc,
        })
    }
}
