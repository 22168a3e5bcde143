//! Two-layer content policy.
//!
//! The device applies the user's allowlist ([`apply_local_filter`]); the
//! server re-checks the enterprise ceiling and tailors one view per
//! recipient ([`global_check_and_tailor`]). Decisions compose by lattice
//! meet, so no layer can widen what another layer denied.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scene::{frame_delta, Classification, ObjectId, Rect, SceneObject, ShareFrame};
use crate::twin::ZoneClass;
use crate::Millis;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("cached output was produced under policy {cached}, current policy is {current}")]
    StalePolicy { cached: String, current: String },
    #[error("frame metadata does not match its raster: {0}")]
    MetadataMismatch(String),
    #[error("override references unknown object {0}")]
    UnknownObject(ObjectId),
}

/// Two-point lattice, `Deny < Allow`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Deny,
    Allow,
}

impl Decision {
    pub fn meet(self, other: Decision) -> Decision {
        self.min(other)
    }

    pub fn join(self, other: Decision) -> Decision {
        self.max(other)
    }

    pub fn from_bool(allow: bool) -> Decision {
        if allow {
            Decision::Allow
        } else {
            Decision::Deny
        }
    }

    pub fn is_allow(self) -> bool {
        self == Decision::Allow
    }
}

impl From<mrshare_schema::DecisionDoc> for Decision {
    fn from(d: mrshare_schema::DecisionDoc) -> Self {
        match d {
            mrshare_schema::DecisionDoc::Deny => Decision::Deny,
            mrshare_schema::DecisionDoc::Allow => Decision::Allow,
        }
    }
}

/// User allowlist. Anything not listed is denied; there is no knob for that.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LocalPolicy {
    pub allowed_labels: BTreeSet<String>,
    pub allowed_object_ids: BTreeSet<ObjectId>,
}

impl LocalPolicy {
    pub const fn default_decision(&self) -> Decision {
        Decision::Deny
    }
}

/// Organizational upper bound on what may ever be shared.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CeilingPolicy {
    pub max_allowed_labels: BTreeSet<String>,
    pub max_classification: Classification,
    pub zone_overrides: BTreeMap<ZoneClass, Decision>,
}

impl CeilingPolicy {
    pub fn zone_decision(&self, zone: ZoneClass) -> Decision {
        self.zone_overrides
            .get(&zone)
            .copied()
            .unwrap_or(Decision::Allow)
    }

    /// Decision of the ceiling alone.
    pub fn decide(&self, label: &str, class: Classification, zone: ZoneClass) -> Decision {
        Decision::from_bool(self.max_allowed_labels.contains(label))
            .meet(Decision::from_bool(class <= self.max_classification))
            .meet(self.zone_decision(zone))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipientRole {
    pub recipient_id: String,
    pub role: String,
    pub clearance: Classification,
    pub label_grants: BTreeSet<String>,
}

impl RecipientRole {
    pub fn decide(&self, label: &str, class: Classification) -> Decision {
        Decision::from_bool(self.label_grants.contains(label) && class <= self.clearance)
    }
}

/// Authoritative label and classification for every known object.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObjectRegistry {
    entries: BTreeMap<ObjectId, (String, Classification)>,
}

impl ObjectRegistry {
    pub fn from_objects(objects: &[SceneObject]) -> Self {
        Self {
            entries: objects
                .iter()
                .map(|o| (o.id, (o.label.clone(), o.true_classification)))
                .collect(),
        }
    }

    pub fn label(&self, id: ObjectId) -> Option<&str> {
        self.entries.get(&id).map(|(l, _)| l.as_str())
    }

    pub fn classification(&self, id: ObjectId) -> Option<Classification> {
        self.entries.get(&id).map(|(_, c)| *c)
    }

    pub fn contains(&self, id: ObjectId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.entries.keys().copied()
    }
}

/// The local allowlist (plus session override grants) met with the
/// ceiling for one zone class, ready to evaluate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledPolicy {
    allowed_labels: BTreeSet<String>,
    allowed_ids: BTreeSet<ObjectId>,
    granted_ids: BTreeSet<ObjectId>,
    ceiling: CeilingPolicy,
    zone: ZoneClass,
    digest: String,
}

#[derive(Serialize)]
struct RuleSet<'a> {
    allowed_labels: &'a BTreeSet<String>,
    allowed_ids: &'a BTreeSet<ObjectId>,
    granted_ids: &'a BTreeSet<ObjectId>,
    ceiling_labels: &'a BTreeSet<String>,
    ceiling_max_classification: Classification,
    zone: ZoneClass,
    zone_decision: Decision,
}

/// Compiles the effective predicate for the current zone class.
pub fn effective_policy(
    local: &LocalPolicy,
    ceiling: &CeilingPolicy,
    zone: ZoneClass,
    granted_ids: &BTreeSet<ObjectId>,
) -> CompiledPolicy {
    let rules = RuleSet {
        allowed_labels: &local.allowed_labels,
        allowed_ids: &local.allowed_object_ids,
        granted_ids,
        ceiling_labels: &ceiling.max_allowed_labels,
        ceiling_max_classification: ceiling.max_classification,
        zone,
        zone_decision: ceiling.zone_decision(zone),
    };
    let canonical = serde_json::to_vec(&serde_json::to_value(&rules).expect("rule sets serialize"))
        .expect("json values serialize");
    let digest = hex::encode(Sha256::digest(&canonical));
    CompiledPolicy {
        allowed_labels: local.allowed_labels.clone(),
        allowed_ids: local.allowed_object_ids.clone(),
        granted_ids: granted_ids.clone(),
        ceiling: ceiling.clone(),
        zone,
        digest,
    }
}

impl CompiledPolicy {
    /// Stable hash of the rule set.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn zone(&self) -> ZoneClass {
        self.zone
    }

    /// Unknown or unlabeled objects are always denied.
    pub fn evaluate(
        &self,
        id: ObjectId,
        label: Option<&str>,
        class: Option<Classification>,
    ) -> Decision {
        let (Some(label), Some(class)) = (label, class) else {
            return Decision::Deny;
        };
        let local = self.allowed_labels.contains(label)
            || self.allowed_ids.contains(&id)
            || self.granted_ids.contains(&id);
        Decision::from_bool(local).meet(self.ceiling.decide(label, class, self.zone))
    }
}

/// What the device sends alongside a filtered frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMetadata {
    pub policy_digest: String,
    pub labels: BTreeMap<ObjectId, String>,
    pub pixel_areas: BTreeMap<ObjectId, Vec<Rect>>,
    pub masked_ids: Vec<ObjectId>,
}

impl FrameMetadata {
    /// Metadata describing `frame` as it stands.
    pub fn describe(frame: &ShareFrame, policy_digest: &str, masked_ids: Vec<ObjectId>) -> Self {
        Self {
            policy_digest: policy_digest.to_string(),
            labels: frame
                .object_map
                .iter()
                .map(|e| (e.id, e.label.clone()))
                .collect(),
            pixel_areas: frame
                .object_map
                .iter()
                .map(|e| (e.id, e.rects.clone()))
                .collect(),
            masked_ids,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredFrame {
    pub frame: ShareFrame,
    pub metadata: FrameMetadata,
}

impl FilteredFrame {
    pub fn same_content(&self, other: &FilteredFrame) -> bool {
        self.frame.same_content(&other.frame) && self.metadata == other.metadata
    }
}

/// Masks every object the compiled policy denies.
pub fn apply_local_filter(
    frame: &ShareFrame,
    policy: &CompiledPolicy,
    registry: &ObjectRegistry,
) -> FilteredFrame {
    let mut out = frame.clone();
    let masked = out.mask_where(|e| {
        !policy
            .evaluate(e.id, Some(&e.label), registry.classification(e.id))
            .is_allow()
    });
    let metadata = FrameMetadata::describe(&out, policy.digest(), masked);
    FilteredFrame {
        frame: out,
        metadata,
    }
}

/// Counts how often the full per-object filter actually ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub full_evaluations: u64,
    pub reused: u64,
}

/// Filters `frame`, reusing `prev_output` when the frame content has not
/// changed since `prev_frame`. The result always equals what
/// [`apply_local_filter`] would return.
pub fn apply_local_filter_cached(
    frame: &ShareFrame,
    prev_frame: &ShareFrame,
    prev_output: &FilteredFrame,
    policy: &CompiledPolicy,
    registry: &ObjectRegistry,
    stats: &mut FilterStats,
) -> Result<FilteredFrame, PolicyError> {
    if prev_output.metadata.policy_digest != policy.digest() {
        return Err(PolicyError::StalePolicy {
            cached: prev_output.metadata.policy_digest.clone(),
            current: policy.digest().to_string(),
        });
    }
    if frame_delta(prev_frame, frame).unwrap_or(false) {
        stats.reused += 1;
        let mut out = prev_output.clone();
        out.frame.timestamp = frame.timestamp;
        return Ok(out);
    }
    stats.full_evaluations += 1;
    Ok(apply_local_filter(frame, policy, registry))
}

/// Stateful wrapper holding the previous (input, output) pair.
#[derive(Debug, Default)]
pub struct CachedLocalFilter {
    last: Option<(ShareFrame, FilteredFrame)>,
    pub stats: FilterStats,
}

impl CachedLocalFilter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn filter(
        &mut self,
        frame: &ShareFrame,
        policy: &CompiledPolicy,
        registry: &ObjectRegistry,
    ) -> FilteredFrame {
        let out = match &self.last {
            Some((prev, prev_out)) if prev_out.metadata.policy_digest == policy.digest() => {
                apply_local_filter_cached(frame, prev, prev_out, policy, registry, &mut self.stats)
                    .expect("digest checked above")
            }
            _ => {
                self.stats.full_evaluations += 1;
                apply_local_filter(frame, policy, registry)
            }
        };
        self.last = Some((frame.clone(), out.clone()));
        out
    }

    pub fn reset(&mut self) {
        self.last = None;
    }
}

fn mismatch(msg: impl Into<String>) -> PolicyError {
    PolicyError::MetadataMismatch(msg.into())
}

/// Cross-validates raster, object map and metadata, and checks the labels
/// against the registry. Any disagreement is treated as tampering.
pub fn validate_offer(offer: &FilteredFrame, registry: &ObjectRegistry) -> Result<(), PolicyError> {
    let frame = &offer.frame;
    frame
        .check_coherence()
        .map_err(|e| mismatch(e.to_string()))?;
    let md = &offer.metadata;
    let ids: BTreeSet<ObjectId> = frame.object_map.iter().map(|e| e.id).collect();
    if md.labels.keys().copied().collect::<BTreeSet<_>>() != ids
        || md.pixel_areas.keys().copied().collect::<BTreeSet<_>>() != ids
    {
        return Err(mismatch("metadata ids differ from the object map"));
    }
    for e in &frame.object_map {
        if md.pixel_areas[&e.id] != e.rects {
            return Err(mismatch(format!("pixel areas of object {} differ", e.id)));
        }
        if md.labels[&e.id] != e.label {
            return Err(mismatch(format!("label of object {} differs", e.id)));
        }
        match registry.label(e.id) {
            Some(l) if l == e.label => {}
            Some(l) => {
                return Err(mismatch(format!(
                    "object {} labeled `{}`, registry says `{l}`",
                    e.id, e.label
                )))
            }
            None => return Err(mismatch(format!("object {} is not registered", e.id))),
        }
    }
    if let Some(id) = md.masked_ids.iter().find(|id| ids.contains(id)) {
        return Err(mismatch(format!("object {id} is both masked and present")));
    }
    Ok(())
}

/// Server-side pass: re-checks the ceiling on everything the device let
/// through, then masks per recipient by label grants and clearance.
pub fn global_check_and_tailor(
    offer: &FilteredFrame,
    ceiling: &CeilingPolicy,
    recipients: &[RecipientRole],
    zone: ZoneClass,
    registry: &ObjectRegistry,
) -> Result<BTreeMap<String, ShareFrame>, PolicyError> {
    validate_offer(offer, registry)?;
    let mut base = offer.frame.clone();
    base.mask_where(|e| match registry.classification(e.id) {
        Some(class) => !ceiling.decide(&e.label, class, zone).is_allow(),
        None => true,
    });
    Ok(recipients
        .iter()
        .map(|r| {
            let mut view = base.clone();
            view.mask_where(|e| match registry.classification(e.id) {
                Some(class) => !r.decide(&e.label, class).is_allow(),
                None => true,
            });
            (r.recipient_id.clone(), view)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideStatus {
    Pending,
    Approved,
    Denied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverrideRequest {
    pub request_id: String,
    pub object_id: ObjectId,
    pub requested_by: String,
    pub zone_class: ZoneClass,
    pub status: OverrideStatus,
    pub decided_at: Option<Millis>,
}

/// Session-scoped override grants and their history.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OverrideBook {
    grants: BTreeSet<ObjectId>,
    history: Vec<OverrideRequest>,
}

impl OverrideBook {
    pub fn grants(&self) -> &BTreeSet<ObjectId> {
        &self.grants
    }

    pub fn history(&self) -> &[OverrideRequest] {
        &self.history
    }

    /// Drops all grants; called when a session ends.
    pub fn clear(&mut self) {
        self.grants.clear();
        self.history.clear();
    }
}

/// Auto-approval rule: only in Permitted space, only for objects
/// classified Internal or lower. Approvals grant that single object id.
pub fn submit_override(
    book: &mut OverrideBook,
    mut req: OverrideRequest,
    registry: &ObjectRegistry,
    now: Millis,
) -> Result<OverrideRequest, PolicyError> {
    let class = registry
        .classification(req.object_id)
        .ok_or(PolicyError::UnknownObject(req.object_id))?;
    let approve = req.zone_class == ZoneClass::Permitted && class <= Classification::Internal;
    req.status = if approve {
        OverrideStatus::Approved
    } else {
        OverrideStatus::Denied
    };
    req.decided_at = Some(now);
    if approve {
        book.grants.insert(req.object_id);
    }
    book.history.push(req.clone());
    Ok(req)
}
