//! Static checks on a scenario's declared policies.
//!
//! Composition by meet already clips anything above the ceiling, so these
//! findings never change what is shared. They point at rules whose author
//! probably expected them to do something.

use std::collections::BTreeSet;
use std::fmt;

use mrshare_core::policy::Decision;
use mrshare_core::scene::Classification;
use mrshare_core::twin::ZoneClass;
use serde::Serialize;

use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    /// A rule grants more than the ceiling allows.
    CeilingMonotonicity,
    /// A rule can never match anything.
    UnreachableRule,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    /// Where the rule lives, e.g. `local_policy.allowed_labels[monitor]`.
    pub rule: String,
    pub detail: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            FindingKind::CeilingMonotonicity => "ceiling-monotonicity",
            FindingKind::UnreachableRule => "unreachable-rule",
        };
        write!(f, "{kind}: {}: {}", self.rule, self.detail)
    }
}

fn finding(kind: FindingKind, rule: String, detail: impl Into<String>) -> Finding {
    Finding {
        kind,
        rule,
        detail: detail.into(),
    }
}

pub fn policy_lint(s: &Scenario) -> Vec<Finding> {
    use FindingKind::*;
    let mut out = Vec::new();
    let ceiling = &s.ceiling;
    let labels: BTreeSet<&str> = s.objects.iter().map(|o| o.label.as_str()).collect();
    let label_classes = |label: &str| -> Vec<Classification> {
        s.objects
            .iter()
            .filter(|o| o.label == label)
            .map(|o| o.true_classification)
            .collect()
    };

    for label in &s.local.allowed_labels {
        let rule = format!("local_policy.allowed_labels[{label}]");
        if !ceiling.max_allowed_labels.contains(label) {
            out.push(finding(
                CeilingMonotonicity,
                rule.clone(),
                "label is not in the ceiling's allowed labels",
            ));
        }
        if !labels.contains(label.as_str()) {
            out.push(finding(
                UnreachableRule,
                rule,
                "no object carries this label",
            ));
        } else if label_classes(label)
            .iter()
            .all(|c| *c > ceiling.max_classification)
        {
            out.push(finding(
                UnreachableRule,
                rule,
                "every object with this label is classified above the ceiling",
            ));
        }
    }
    for id in &s.local.allowed_object_ids {
        let rule = format!("local_policy.allowed_object_ids[{id}]");
        match (s.registry.label(*id), s.registry.classification(*id)) {
            (Some(label), Some(class)) => {
                if !ceiling.max_allowed_labels.contains(label) {
                    out.push(finding(
                        CeilingMonotonicity,
                        rule.clone(),
                        format!("object label `{label}` is not in the ceiling's allowed labels"),
                    ));
                }
                if class > ceiling.max_classification {
                    out.push(finding(
                        CeilingMonotonicity,
                        rule,
                        format!(
                            "object is {class:?}, above the ceiling's {:?}",
                            ceiling.max_classification
                        ),
                    ));
                }
            }
            _ => out.push(finding(UnreachableRule, rule, "unknown object id")),
        }
    }
    for label in &ceiling.max_allowed_labels {
        if !labels.contains(label.as_str()) {
            out.push(finding(
                UnreachableRule,
                format!("ceiling.max_allowed_labels[{label}]"),
                "no object carries this label",
            ));
        }
    }
    for (zone, decision) in &ceiling.zone_overrides {
        if *decision == Decision::Allow && *zone != ZoneClass::Permitted {
            out.push(finding(
                UnreachableRule,
                format!("ceiling.zone_overrides[{zone:?}]"),
                "sharing is always suspended in this zone class; an allow here never applies",
            ));
        }
    }
    for r in &s.recipients {
        for label in &r.label_grants {
            let rule = format!("recipients[{}].label_grants[{label}]", r.recipient_id);
            if !ceiling.max_allowed_labels.contains(label) {
                out.push(finding(
                    CeilingMonotonicity,
                    rule.clone(),
                    "label is not in the ceiling's allowed labels",
                ));
            }
            if !labels.contains(label.as_str()) {
                out.push(finding(
                    UnreachableRule,
                    rule,
                    "no object carries this label",
                ));
            } else if label_classes(label).iter().all(|c| *c > r.clearance) {
                out.push(finding(
                    UnreachableRule,
                    rule,
                    "every object with this label is above the recipient's clearance",
                ));
            }
        }
    }
    for c in &s.doc.control {
        if let mrshare_schema::ControlAction::Override { object_id } = c.action {
            if s.registry
                .classification(object_id)
                .is_some_and(|cl| cl > Classification::Internal)
            {
                out.push(finding(
                    UnreachableRule,
                    format!("control[t={}].override[{object_id}]", c.t),
                    "overrides are only approved for objects classified internal or lower",
                ));
            }
        }
    }
    out.sort();
    out.dedup();
    out
}
