//! Labeled scene frames.
//!
//! A frame is a label raster: every cell holds 0 (background), an object id,
//! or [`MASKED`]. The object map lists, for each object present, the
//! rectangles that exactly tile its cells. Filters only ever act on this
//! representation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point3;
use crate::Millis;

pub type ObjectId = u8;

pub const BACKGROUND: u8 = 0;
pub const MASKED: u8 = 255;
pub const DEFAULT_GRID: u16 = 64;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("frame dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u16, u16, u16, u16),
    #[error("frame has {got} cells, expected {expected}")]
    CellCount { expected: usize, got: usize },
    #[error("cell value {id} at ({x},{y}) has no object map entry")]
    UnmappedCell { id: u8, x: u16, y: u16 },
    #[error("object map entry {id} does not tile its cells: {detail}")]
    BadTiling { id: u8, detail: String },
    #[error("object map lists id {0} more than once")]
    DuplicateEntry(u8),
    #[error("object map entry uses reserved id {0}")]
    ReservedId(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[u16; 4]", into = "[u16; 4]")]
pub struct Rect {
    pub x: u16,
    pub y: u16,
    pub w: u16,
    pub h: u16,
}

impl From<[u16; 4]> for Rect {
    fn from(a: [u16; 4]) -> Self {
        Rect::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Rect> for [u16; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl Rect {
    pub const fn new(x: u16, y: u16, w: u16, h: u16) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w as usize * self.h as usize
    }

    pub fn fits(&self, width: u16, height: u16) -> bool {
        self.w > 0
            && self.h > 0
            && self.x as u32 + self.w as u32 <= width as u32
            && self.y as u32 + self.h as u32 <= height as u32
    }

    pub fn cells(&self) -> impl Iterator<Item = (u16, u16)> + '_ {
        (self.y..self.y + self.h).flat_map(move |y| (self.x..self.x + self.w).map(move |x| (x, y)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Public,
    Internal,
    Confidential,
    Restricted,
}

impl From<mrshare_schema::ClassificationDoc> for Classification {
    fn from(d: mrshare_schema::ClassificationDoc) -> Self {
        use mrshare_schema::ClassificationDoc as C;
        match d {
            C::Public => Classification::Public,
            C::Internal => Classification::Internal,
            C::Confidential => Classification::Confidential,
            C::Restricted => Classification::Restricted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: ObjectId,
    pub label: String,
    pub location: Point3,
    pub true_classification: Classification,
    pub raster_rect: Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevicePose {
    pub position: Point3,
    /// Heading in the floor plane, radians in `[-pi, pi)`.
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fov_half_angle: f64,
    pub range_max: f64,
    pub width: u16,
    pub height: u16,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            fov_half_angle: std::f64::consts::FRAC_PI_3,
            range_max: 8.0,
            width: DEFAULT_GRID,
            height: DEFAULT_GRID,
        }
    }
}

/// Pixel-area mapping for one object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectArea {
    pub id: ObjectId,
    pub label: String,
    pub rects: Vec<Rect>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FrameRepr", into = "FrameRepr")]
pub struct ShareFrame {
    pub timestamp: Millis,
    pub width: u16,
    pub height: u16,
    /// Row-major, `width * height` cells.
    pub cells: Vec<u8>,
    /// Sorted by object id.
    pub object_map: Vec<ObjectArea>,
}

/// Serialized form: one lowercase hex string per raster row.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRepr {
    timestamp: Millis,
    width: u16,
    height: u16,
    rows: Vec<String>,
    object_map: Vec<ObjectArea>,
}

impl From<ShareFrame> for FrameRepr {
    fn from(f: ShareFrame) -> Self {
        let w = f.width.max(1) as usize;
        Self {
            timestamp: f.timestamp,
            width: f.width,
            height: f.height,
            rows: f.cells.chunks(w).map(hex::encode).collect(),
            object_map: f.object_map,
        }
    }
}

impl TryFrom<FrameRepr> for ShareFrame {
    type Error = String;

    fn try_from(r: FrameRepr) -> Result<Self, String> {
        if r.rows.len() != r.height as usize {
            return Err(format!("expected {} rows, got {}", r.height, r.rows.len()));
        }
        let mut cells = Vec::with_capacity(r.width as usize * r.height as usize);
        for (i, row) in r.rows.iter().enumerate() {
            if row.bytes().any(|b| b.is_ascii_uppercase()) {
                return Err(format!("row {i} is not lowercase hex"));
            }
            let bytes = hex::decode(row).map_err(|e| format!("row {i}: {e}"))?;
            if bytes.len() != r.width as usize {
                return Err(format!(
                    "row {i} has {} cells, expected {}",
                    bytes.len(),
                    r.width
                ));
            }
            cells.extend(bytes);
        }
        Ok(ShareFrame {
            timestamp: r.timestamp,
            width: r.width,
            height: r.height,
            cells,
            object_map: r.object_map,
        })
    }
}

impl ShareFrame {
    pub fn blank(timestamp: Millis, width: u16, height: u16) -> Self {
        Self {
            timestamp,
            width,
            height,
            cells: vec![BACKGROUND; width as usize * height as usize],
            object_map: Vec::new(),
        }
    }

    #[inline]
    pub fn cell(&self, x: u16, y: u16) -> u8 {
        self.cells[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    fn set(&mut self, x: u16, y: u16, v: u8) {
        let w = self.width as usize;
        self.cells[y as usize * w + x as usize] = v;
    }

    pub fn entry(&self, id: ObjectId) -> Option<&ObjectArea> {
        self.object_map
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.object_map[i])
    }

    /// Ids present in the raster (excluding background and masked cells).
    pub fn raster_ids(&self) -> Vec<ObjectId> {
        let mut seen = [false; 256];
        for &c in &self.cells {
            seen[c as usize] = true;
        }
        (1..MASKED).filter(|&i| seen[i as usize]).collect()
    }

    /// Checks the raster against the object map: every object cell is
    /// mapped and every map entry tiles exactly its own cells.
    pub fn check_coherence(&self) -> Result<(), FrameError> {
        let expected = self.width as usize * self.height as usize;
        if self.cells.len() != expected {
            return Err(FrameError::CellCount {
                expected,
                got: self.cells.len(),
            });
        }
        let mut counts = [0usize; 256];
        for &c in &self.cells {
            counts[c as usize] += 1;
        }
        let mut listed = [false; 256];
        for e in &self.object_map {
            if e.id == BACKGROUND || e.id == MASKED {
                return Err(FrameError::ReservedId(e.id));
            }
            if std::mem::replace(&mut listed[e.id as usize], true) {
                return Err(FrameError::DuplicateEntry(e.id));
            }
            let mut area = 0;
            for r in &e.rects {
                if !r.fits(self.width, self.height) {
                    return Err(FrameError::BadTiling {
                        id: e.id,
                        detail: format!("rect {r:?} outside the grid"),
                    });
                }
                if let Some((x, y)) = r.cells().find(|&(x, y)| self.cell(x, y) != e.id) {
                    return Err(FrameError::BadTiling {
                        id: e.id,
                        detail: format!("cell ({x},{y}) holds {}", self.cell(x, y)),
                    });
                }
                area += r.area();
            }
            if area != counts[e.id as usize] || area == 0 {
                return Err(FrameError::BadTiling {
                    id: e.id,
                    detail: format!(
                        "rects cover {area} cells, raster has {}",
                        counts[e.id as usize]
                    ),
                });
            }
        }
        for (i, &c) in self.cells.iter().enumerate() {
            if c != BACKGROUND && c != MASKED && !listed[c as usize] {
                let w = self.width as usize;
                return Err(FrameError::UnmappedCell {
                    id: c,
                    x: (i % w) as u16,
                    y: (i / w) as u16,
                });
            }
        }
        Ok(())
    }

    /// Replaces every cell of a dropped object with [`MASKED`] and removes
    /// its map entry. Returns the ids that were masked.
    pub fn mask_where(&mut self, mut drop: impl FnMut(&ObjectArea) -> bool) -> Vec<ObjectId> {
        let mut masked = Vec::new();
        let mut kept = Vec::with_capacity(self.object_map.len());
        for e in std::mem::take(&mut self.object_map) {
            if drop(&e) {
                masked.push(e.id);
                for r in &e.rects {
                    for (x, y) in r.cells() {
                        self.set(x, y, MASKED);
                    }
                }
            } else {
                kept.push(e);
            }
        }
        self.object_map = kept;
        masked
    }

    /// Content equality, ignoring the timestamp.
    pub fn same_content(&self, other: &ShareFrame) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.cells == other.cells
            && self.object_map == other.object_map
    }
}

/// Decomposes the cells holding `id` into rectangles: horizontal runs,
/// merged downward while consecutive rows repeat the same run.
pub fn tile_cells(cells: &[u8], width: u16, height: u16, id: u8) -> Vec<Rect> {
    let w = width as usize;
    let mut open: Vec<Rect> = Vec::new();
    let mut done = Vec::new();
    for y in 0..height {
        let row = &cells[y as usize * w..(y as usize + 1) * w];
        let mut runs = Vec::new();
        let mut x = 0;
        while x < w {
            if row[x] == id {
                let start = x;
                while x < w && row[x] == id {
                    x += 1;
                }
                runs.push((start as u16, (x - start) as u16));
            } else {
                x += 1;
            }
        }
        let mut next_open = Vec::with_capacity(runs.len());
        for (rx, rw) in runs {
            if let Some(pos) = open
                .iter()
                .position(|r| r.x == rx && r.w == rw && r.y + r.h == y)
            {
                let mut r = open.swap_remove(pos);
                r.h += 1;
                next_open.push(r);
            } else {
                next_open.push(Rect::new(rx, y, rw, 1));
            }
        }
        done.append(&mut open);
        open = next_open;
    }
    done.append(&mut open);
    done.sort();
    done
}

/// True when the object lies inside the camera's horizontal view cone.
pub fn is_visible(object: &SceneObject, pose: &DevicePose, camera: &Camera) -> bool {
    let dx = object.location.x - pose.position.x;
    let dy = object.location.y - pose.position.y;
    let dist = dx.hypot(dy);
    if dist > camera.range_max {
        return false;
    }
    if dist == 0.0 {
        return true;
    }
    let bearing = mrshare_schema::wrap_angle(dy.atan2(dx) - pose.yaw);
    bearing.abs() <= camera.fov_half_angle
}

/// Renders the visible objects into a label raster. Objects are stamped in
/// ascending id order, so the higher id wins where rectangles overlap.
pub fn capture_frame(
    objects: &[SceneObject],
    pose: &DevicePose,
    camera: &Camera,
    timestamp: Millis,
) -> ShareFrame {
    let mut frame = ShareFrame::blank(timestamp, camera.width, camera.height);
    let mut visible: Vec<&SceneObject> = objects
        .iter()
        .filter(|o| is_visible(o, pose, camera))
        .collect();
    visible.sort_by_key(|o| o.id);
    for o in &visible {
        for (x, y) in o.raster_rect.cells() {
            if x < frame.width && y < frame.height {
                frame.set(x, y, o.id);
            }
        }
    }
    for o in visible {
        let rects = tile_cells(&frame.cells, frame.width, frame.height, o.id);
        if !rects.is_empty() {
            frame.object_map.push(ObjectArea {
                id: o.id,
                label: o.label.clone(),
                rects,
            });
        }
    }
    frame
}

/// Whether two frames carry identical content (timestamps aside).
pub fn frame_delta(prev: &ShareFrame, next: &ShareFrame) -> Result<bool, FrameError> {
    if prev.width != next.width || prev.height != next.height {
        return Err(FrameError::DimensionMismatch(
            prev.width,
            prev.height,
            next.width,
            next.height,
        ));
    }
    Ok(prev.same_content(next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn obj(id: u8, label: &str, at: (f64, f64), rect: Rect) -> SceneObject {
        SceneObject {
            id,
            label: label.into(),
            location: Point3::new(at.0, at.1, 1.0),
            true_classification: Classification::Internal,
            raster_rect: rect,
        }
    }

    fn origin_pose() -> DevicePose {
        DevicePose {
            position: Point3::new(0.0, 0.0, 1.5),
            yaw: 0.0,
        }
    }

    #[test]
    fn no_objects_blank_frame() {
        let f = capture_frame(&[], &origin_pose(), &Camera::default(), 5);
        assert!(f.cells.iter().all(|&c| c == 0));
        assert!(f.object_map.is_empty());
        assert_eq!(f.cells.len(), 64 * 64);
    }

    #[test]
    fn object_ahead_is_stamped() {
        let cam = Camera::default();
        let rect = Rect::new(10, 20, 8, 4);
        // Straight ahead at half range: bearing 0, distance 4.
        let f = capture_frame(
            &[obj(3, "whiteboard", (4.0, 0.0), rect)],
            &origin_pose(),
            &cam,
            0,
        );
        assert_eq!(f.object_map.len(), 1);
        assert_eq!(f.object_map[0].rects, vec![rect]);
        for y in 0..64 {
            for x in 0..64 {
                let inside = (10..18).contains(&x) && (20..24).contains(&y);
                assert_eq!(f.cell(x, y), if inside { 3 } else { 0 });
            }
        }
        f.check_coherence().unwrap();
    }

    #[test]
    fn object_behind_is_absent() {
        let cam = Camera {
            fov_half_angle: FRAC_PI_4,
            ..Camera::default()
        };
        let f = capture_frame(
            &[obj(3, "monitor", (-2.0, 0.0), Rect::new(0, 0, 4, 4))],
            &origin_pose(),
            &cam,
            0,
        );
        assert!(f.object_map.is_empty());
        assert!(f.cells.iter().all(|&c| c == 0));
    }

    #[test]
    fn cone_edges() {
        let cam = Camera {
            fov_half_angle: FRAC_PI_4,
            range_max: 5.0,
            ..Camera::default()
        };
        let pose = DevicePose {
            position: Point3::new(0.0, 0.0, 1.5),
            yaw: PI / 2.0,
        };
        // Facing +y: (0, 3) is dead ahead, (3, 0) is 90 degrees off.
        assert!(is_visible(
            &obj(1, "a", (0.0, 3.0), Rect::new(0, 0, 1, 1)),
            &pose,
            &cam
        ));
        assert!(!is_visible(
            &obj(1, "a", (3.0, 0.0), Rect::new(0, 0, 1, 1)),
            &pose,
            &cam
        ));
        assert!(!is_visible(
            &obj(1, "a", (0.0, 5.5), Rect::new(0, 0, 1, 1)),
            &pose,
            &cam
        ));
    }

    #[test]
    fn higher_id_wins_overlap() {
        let objects = [
            obj(2, "desk", (3.0, 0.0), Rect::new(0, 0, 10, 10)),
            obj(7, "monitor", (3.0, 0.1), Rect::new(5, 5, 10, 10)),
        ];
        let f = capture_frame(&objects, &origin_pose(), &Camera::default(), 0);
        assert_eq!(f.cell(6, 6), 7);
        assert_eq!(f.cell(4, 4), 2);
        f.check_coherence().unwrap();
        let area2: usize = f.entry(2).unwrap().rects.iter().map(Rect::area).sum();
        assert_eq!(area2, 100 - 25);
    }

    #[test]
    fn fully_occluded_object_is_not_listed() {
        let objects = [
            obj(2, "note", (3.0, 0.0), Rect::new(5, 5, 2, 2)),
            obj(9, "desk", (3.0, 0.1), Rect::new(0, 0, 20, 20)),
        ];
        let f = capture_frame(&objects, &origin_pose(), &Camera::default(), 0);
        assert!(f.entry(2).is_none());
        assert_eq!(f.raster_ids(), vec![9]);
        f.check_coherence().unwrap();
    }

    #[test]
    fn delta_cases() {
        let cam = Camera::default();
        let a = capture_frame(
            &[obj(1, "x", (2.0, 0.0), Rect::new(1, 1, 3, 3))],
            &origin_pose(),
            &cam,
            0,
        );
        let mut b = a.clone();
        b.timestamp = 100;
        assert_eq!(frame_delta(&a, &b), Ok(true));
        let mut c = a.clone();
        c.cells[0] = 1;
        assert_eq!(frame_delta(&a, &c), Ok(false));
        let shifted = capture_frame(
            &[obj(1, "x", (2.0, 0.0), Rect::new(2, 1, 3, 3))],
            &origin_pose(),
            &cam,
            0,
        );
        assert_eq!(frame_delta(&a, &shifted), Ok(false));
        let small = ShareFrame::blank(0, 32, 32);
        assert!(frame_delta(&a, &small).is_err());
    }

    #[test]
    fn coherence_detects_tampering() {
        let cam = Camera::default();
        let mut f = capture_frame(
            &[obj(1, "x", (2.0, 0.0), Rect::new(1, 1, 3, 3))],
            &origin_pose(),
            &cam,
            0,
        );
        f.cells[63] = 4;
        assert!(matches!(
            f.check_coherence(),
            Err(FrameError::UnmappedCell { id: 4, .. })
        ));
        let mut g = capture_frame(
            &[obj(1, "x", (2.0, 0.0), Rect::new(1, 1, 3, 3))],
            &origin_pose(),
            &cam,
            0,
        );
        g.object_map[0].rects[0].w = 2;
        assert!(matches!(
            g.check_coherence(),
            Err(FrameError::BadTiling { .. })
        ));
    }

    #[test]
    fn mask_where_masks_cells() {
        let objects = [
            obj(1, "whiteboard", (3.0, 0.0), Rect::new(0, 0, 4, 4)),
            obj(2, "monitor", (3.0, 0.2), Rect::new(10, 10, 4, 4)),
        ];
        let mut f = capture_frame(&objects, &origin_pose(), &Camera::default(), 0);
        let masked = f.mask_where(|e| e.id == 2);
        assert_eq!(masked, vec![2]);
        assert_eq!(f.cell(11, 11), MASKED);
        assert_eq!(f.cell(1, 1), 1);
        f.check_coherence().unwrap();
    }
}
