//! Digital twin of the floor: zones with share classes, anchor placements,
//! and point classification against them.
//!
//! Space not covered by any zone is treated exactly like a Restricted zone.
//! A point is only ever Permitted when it sits inside a Permitted zone and
//! is more than `buffer_distance` away from all Restricted or unmapped space.

use std::collections::BTreeSet;

use mrshare_schema::{ShareClassDoc, TwinDoc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{spans_volume, Aabb, Point3};
use crate::locate::Anchor;

pub const DEFAULT_BUFFER_DISTANCE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("malformed twin document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid twin field `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> TwinError {
    TwinError::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Share permission a zone declares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareClass {
    Permitted,
    Restricted,
}

impl From<ShareClassDoc> for ShareClass {
    fn from(d: ShareClassDoc) -> Self {
        match d {
            ShareClassDoc::Permitted => ShareClass::Permitted,
            ShareClassDoc::Restricted => ShareClass::Restricted,
        }
    }
}

/// Classification of a point. Ordered by restrictiveness:
/// `Permitted < Buffer < Restricted`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneClass {
    Permitted,
    Buffer,
    Restricted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub bounds: Aabb,
    pub share_class: ShareClass,
    pub floor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneVerdict {
    pub class: ZoneClass,
    /// Distance to the union of Restricted zones and unmapped space.
    pub nearest_restricted_distance: f64,
    pub zone_id: Option<String>,
}

/// Immutable floor map. Construct through [`load_twin`] or
/// [`DigitalTwin::from_doc`], which enforce every invariant.
#[derive(Debug, Clone)]
pub struct DigitalTwin {
    zones: Vec<Zone>,
    anchors: Vec<Anchor>,
    buffer_distance: f64,
    /// Unmapped space, as disjoint boxes (some unbounded).
    uncovered: Vec<Aabb>,
}

/// Parses and validates a twin document.
pub fn load_twin(document: &[u8]) -> Result<DigitalTwin, TwinError> {
    let doc: TwinDoc = serde_json::from_slice(document)?;
    DigitalTwin::from_doc(&doc)
}

impl DigitalTwin {
    pub fn from_doc(doc: &TwinDoc) -> Result<Self, TwinError> {
        if !(doc.buffer_distance.is_finite() && doc.buffer_distance >= 0.0) {
            return Err(invalid("buffer_distance", "must be finite and >= 0"));
        }
        let mut ids = BTreeSet::new();
        let mut zones = Vec::with_capacity(doc.zones.len());
        for (i, z) in doc.zones.iter().enumerate() {
            let field = format!("zones[{i}]");
            if !ids.insert(z.id.as_str()) {
                return Err(invalid(
                    format!("{field}.id"),
                    format!("duplicate zone id `{}`", z.id),
                ));
            }
            let (min, max) = (Point3::from_array(z.min), Point3::from_array(z.max));
            if !min.is_finite() || !max.is_finite() {
                return Err(invalid(&field, "non-finite corner"));
            }
            if !(min.x < max.x && min.y < max.y && min.z < max.z) {
                return Err(invalid(
                    &field,
                    "min corner must be strictly below max corner",
                ));
            }
            zones.push(Zone {
                id: z.id.clone(),
                bounds: Aabb::new(min, max),
                share_class: z.share_class.into(),
                floor: z.floor.clone(),
            });
        }
        zones.sort_by(|a, b| a.id.cmp(&b.id));

        if doc.anchors.len() < 4 {
            return Err(invalid(
                "anchors",
                format!(
                    "insufficient anchors: need at least 4, got {}",
                    doc.anchors.len()
                ),
            ));
        }
        let mut anchor_ids = BTreeSet::new();
        let mut anchors = Vec::with_capacity(doc.anchors.len());
        for (i, a) in doc.anchors.iter().enumerate() {
            if !anchor_ids.insert(a.id.as_str()) {
                return Err(invalid(
                    format!("anchors[{i}].id"),
                    format!("duplicate anchor id `{}`", a.id),
                ));
            }
            let position = Point3::from_array(a.position);
            if !position.is_finite() {
                return Err(invalid(
                    format!("anchors[{i}].position"),
                    "non-finite position",
                ));
            }
            anchors.push(Anchor {
                id: a.id.clone(),
                position,
            });
        }
        anchors.sort_by(|a, b| a.id.cmp(&b.id));
        let positions: Vec<Point3> = anchors.iter().map(|a| a.position).collect();
        if !spans_volume(&positions) {
            return Err(invalid(
                "anchors",
                "coplanar anchors: placement must span a volume",
            ));
        }

        let uncovered = uncovered_cells(&zones);
        Ok(Self {
            zones,
            anchors,
            buffer_distance: doc.buffer_distance,
            uncovered,
        })
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn buffer_distance(&self) -> f64 {
        self.buffer_distance
    }

    /// Class of space outside every zone. Fixed: unmapped space never shares.
    pub fn default_class(&self) -> ShareClass {
        ShareClass::Restricted
    }

    /// Bounding box of all zones and anchors.
    pub fn bounds(&self) -> Aabb {
        let first = self.anchors[0].position;
        let mut b = Aabb::new(first, first);
        for a in &self.anchors {
            b.expand(a.position);
        }
        for z in &self.zones {
            b.expand(z.bounds.min);
            b.expand(z.bounds.max);
        }
        b
    }

    pub fn classify_point(&self, p: Point3) -> ZoneVerdict {
        self.classify_with_buffer(p, self.buffer_distance)
    }

    /// Classification with the buffer widened by `extra` meters. The runner
    /// uses this to keep a fix's uncertainty inside the buffer band.
    pub fn classify_with_margin(&self, p: Point3, extra: f64) -> ZoneVerdict {
        self.classify_with_buffer(p, self.buffer_distance + extra.max(0.0))
    }

    fn classify_with_buffer(&self, p: Point3, buffer: f64) -> ZoneVerdict {
        let d = self.distance_to_hazard(p);
        let class = if d <= 0.0 {
            ZoneClass::Restricted
        } else if d <= buffer {
            ZoneClass::Buffer
        } else {
            ZoneClass::Permitted
        };
        let wanted = match class {
            ZoneClass::Restricted => ShareClass::Restricted,
            _ => ShareClass::Permitted,
        };
        let zone_id = self
            .zones
            .iter()
            .find(|z| z.share_class == wanted && z.bounds.contains(p))
            .map(|z| z.id.clone());
        ZoneVerdict {
            class,
            nearest_restricted_distance: d,
            zone_id,
        }
    }

    /// Distance to the nearest zone of `class`; 0 inside one, infinity if
    /// the twin has no such zone.
    pub fn distance_to_class(&self, p: Point3, class: ShareClass) -> f64 {
        self.zones
            .iter()
            .filter(|z| z.share_class == class)
            .map(|z| z.bounds.distance_to(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance to space covered by no zone; 0 when `p` is unmapped.
    pub fn distance_to_uncovered(&self, p: Point3) -> f64 {
        self.uncovered
            .iter()
            .map(|b| b.distance_to(p))
            .fold(f64::INFINITY, f64::min)
    }

    fn distance_to_hazard(&self, p: Point3) -> f64 {
        self.distance_to_class(p, ShareClass::Restricted)
            .min(self.distance_to_uncovered(p))
    }
}

/// Cells of the grid induced by all zone coordinates. Each cell is either
/// wholly inside some zone or wholly outside all of them.
fn axis_cells(coords: &mut Vec<f64>) -> Vec<(f64, f64, f64)> {
    coords.sort_by(f64::total_cmp);
    coords.dedup();
    if coords.is_empty() {
        return vec![(f64::NEG_INFINITY, f64::INFINITY, 0.0)];
    }
    let mut cells = Vec::with_capacity(coords.len() + 1);
    cells.push((f64::NEG_INFINITY, coords[0], coords[0] - 1.0));
    for w in coords.windows(2) {
        cells.push((w[0], w[1], 0.5 * (w[0] + w[1])));
    }
    let last = coords[coords.len() - 1];
    cells.push((last, f64::INFINITY, last + 1.0));
    cells
}

fn uncovered_cells(zones: &[Zone]) -> Vec<Aabb> {
    let mut xs: Vec<f64> = zones
        .iter()
        .flat_map(|z| [z.bounds.min.x, z.bounds.max.x])
        .collect();
    let mut ys: Vec<f64> = zones
        .iter()
        .flat_map(|z| [z.bounds.min.y, z.bounds.max.y])
        .collect();
    let mut zs: Vec<f64> = zones
        .iter()
        .flat_map(|z| [z.bounds.min.z, z.bounds.max.z])
        .collect();
    let (cx, cy, cz) = (
        axis_cells(&mut xs),
        axis_cells(&mut ys),
        axis_cells(&mut zs),
    );

    let mut out = Vec::new();
    for &(z0, z1, zp) in &cz {
        for &(y0, y1, yp) in &cy {
            // Merge runs of uncovered cells along x.
            let mut run: Option<(f64, f64)> = None;
            for &(x0, x1, xp) in &cx {
                let probe = Point3::new(xp, yp, zp);
                let covered = zones.iter().any(|z| z.bounds.contains(probe));
                match (&mut run, covered) {
                    (Some((_, end)), false) => *end = x1,
                    (None, false) => run = Some((x0, x1)),
                    (Some(_), true) => {
                        let (a, b) = run.take().unwrap();
                        out.push(Aabb::new(Point3::new(a, y0, z0), Point3::new(b, y1, z1)));
                    }
                    (None, true) => {}
                }
            }
            if let Some((a, b)) = run {
                out.push(Aabb::new(Point3::new(a, y0, z0), Point3::new(b, y1, z1)));
            }
        }
    }
    out
}
