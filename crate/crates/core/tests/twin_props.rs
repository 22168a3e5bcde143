use mrshare_core::geom::Point3;
use mrshare_core::twin::{DigitalTwin, ShareClass, ZoneClass};
use mrshare_schema::{AnchorDoc, ShareClassDoc, TwinDoc, ZoneDoc};
use proptest::prelude::*;

const EXTENT: i32 = 6;

/// Zones with integer corners inside `[0, 6]^3`.
fn twin_doc() -> impl Strategy<Value = TwinDoc> {
    let zone = (
        0..EXTENT,
        0..EXTENT,
        0..EXTENT,
        1..4i32,
        1..4i32,
        1..4i32,
        prop::bool::weighted(0.3),
    );
    (prop::collection::vec(zone, 1..6), 0.0..1.5f64).prop_map(|(zones, buffer)| TwinDoc {
        buffer_distance: buffer,
        zones: zones
            .into_iter()
            .enumerate()
            .map(|(i, (x, y, z, w, h, d, restricted))| ZoneDoc {
                id: format!("z{i}"),
                min: [x as f64, y as f64, z as f64],
                max: [
                    (x + w).min(EXTENT) as f64,
                    (y + h).min(EXTENT) as f64,
                    (z + d).min(EXTENT) as f64,
                ],
                share_class: if restricted {
                    ShareClassDoc::Restricted
                } else {
                    ShareClassDoc::Permitted
                },
                floor: "F1".into(),
            })
            .collect(),
        anchors: cube_anchors(EXTENT as f64),
    })
}

fn cube_anchors(side: f64) -> Vec<AnchorDoc> {
    (0..8)
        .map(|i| AnchorDoc {
            id: format!("a{i}"),
            position: [
                if i & 1 == 0 { 0.0 } else { side },
                if i & 2 == 0 { 0.0 } else { side },
                if i & 4 == 0 { 0.0 } else { side },
            ],
        })
        .collect()
}

fn point() -> impl Strategy<Value = Point3> {
    (0.0..6.0f64, 0.0..6.0f64, 0.0..6.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn box_distance(p: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> f64 {
    (0..3)
        .map(|k| (lo[k] - p[k]).max(0.0).max(p[k] - hi[k]))
        .map(|d| d * d)
        .sum::<f64>()
        .sqrt()
}

/// Hazard distance by brute force over unit voxels. With integer zone
/// corners every voxel is either fully inside a zone or fully outside all
/// of them, so sampling each voxel center classifies it exactly. A one-voxel
/// shell around the map stands in for the unbounded outside.
fn voxel_hazard_distance(doc: &TwinDoc, p: Point3) -> f64 {
    let p = p.to_array();
    let mut best = f64::INFINITY;
    for x in -1..=EXTENT {
        for y in -1..=EXTENT {
            for z in -1..=EXTENT {
                let c = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let inside =
                    |zone: &ZoneDoc| (0..3).all(|k| zone.min[k] <= c[k] && c[k] <= zone.max[k]);
                let covered = doc.zones.iter().any(inside);
                let restricted = doc
                    .zones
                    .iter()
                    .any(|zd| zd.share_class == ShareClassDoc::Restricted && inside(zd));
                if !covered || restricted {
                    let lo = [x as f64, y as f64, z as f64];
                    let hi = [lo[0] + 1.0, lo[1] + 1.0, lo[2] + 1.0];
                    best = best.min(box_distance(p, lo, hi));
                }
            }
        }
    }
    best
}

fn rank(c: ZoneClass) -> u8 {
    match c {
        ZoneClass::Permitted => 0,
        ZoneClass::Buffer => 1,
        ZoneClass::Restricted => 2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn hazard_distance_matches_voxel_oracle(doc in twin_doc(), pts in prop::collection::vec(point(), 8)) {
        let twin = DigitalTwin::from_doc(&doc).unwrap();
        for p in pts {
            let v = twin.classify_point(p);
            let oracle = voxel_hazard_distance(&doc, p);
            prop_assert!((v.nearest_restricted_distance - oracle).abs() < 1e-9,
                "{p:?}: twin {} voxel {oracle}", v.nearest_restricted_distance);
            let merged = twin
                .distance_to_class(p, ShareClass::Restricted)
                .min(twin.distance_to_uncovered(p));
            prop_assert!((v.nearest_restricted_distance - merged).abs() < 1e-9);
        }
    }

    #[test]
    fn permitted_only_deep_inside_permitted_zones(doc in twin_doc(), pts in prop::collection::vec(point(), 16)) {
        let twin = DigitalTwin::from_doc(&doc).unwrap();
        for p in pts {
            let v = twin.classify_point(p);
            if v.class == ZoneClass::Permitted {
                let id = v.zone_id.as_deref().expect("permitted verdict names its zone");
                let zone = twin.zones().iter().find(|z| z.id == id).unwrap();
                prop_assert_eq!(zone.share_class, ShareClass::Permitted);
                prop_assert!(zone.bounds.contains(p));
                prop_assert!(v.nearest_restricted_distance >= twin.buffer_distance());
                prop_assert!(voxel_hazard_distance(&doc, p) >= twin.buffer_distance());
            }
        }
    }

    #[test]
    fn enlarging_restricted_never_relaxes(doc in twin_doc(), pts in prop::collection::vec(point(), 12), grow in 0.0..1.5f64, which in any::<prop::sample::Index>()) {
        let twin = DigitalTwin::from_doc(&doc).unwrap();
        let mut bigger = doc.clone();
        let restricted: Vec<usize> = bigger
            .zones
            .iter()
            .enumerate()
            .filter(|(_, z)| z.share_class == ShareClassDoc::Restricted)
            .map(|(i, _)| i)
            .collect();
        if restricted.is_empty() {
            bigger.zones.push(ZoneDoc {
                id: "extra".into(),
                min: [2.0, 2.0, 2.0],
                max: [3.0, 3.0, 3.0],
                share_class: ShareClassDoc::Restricted,
                floor: "F1".into(),
            });
        } else {
            let z = &mut bigger.zones[restricted[which.index(restricted.len())]];
            for k in 0..3 {
                z.min[k] -= grow;
                z.max[k] += grow;
            }
        }
        let grown = DigitalTwin::from_doc(&bigger).unwrap();
        let mut wider = doc.clone();
        wider.buffer_distance += grow;
        let widened = DigitalTwin::from_doc(&wider).unwrap();
        for p in pts {
            let before = rank(twin.classify_point(p).class);
            prop_assert!(rank(grown.classify_point(p).class) >= before);
            prop_assert!(rank(widened.classify_point(p).class) >= before);
        }
    }

    #[test]
    fn classification_is_total(doc in twin_doc(), x in -1e6..1e6f64, y in -1e6..1e6f64, z in -1e6..1e6f64) {
        let twin = DigitalTwin::from_doc(&doc).unwrap();
        let v = twin.classify_point(Point3::new(x, y, z));
        prop_assert!(v.nearest_restricted_distance >= 0.0);
    }
}

#[test]
fn far_outside_is_restricted() {
    let doc = TwinDoc {
        buffer_distance: 0.5,
        zones: vec![ZoneDoc {
            id: "room".into(),
            min: [0.0; 3],
            max: [6.0; 3],
            share_class: ShareClassDoc::Permitted,
            floor: "F1".into(),
        }],
        anchors: cube_anchors(6.0),
    };
    let twin = DigitalTwin::from_doc(&doc).unwrap();
    assert_eq!(
        twin.classify_point(Point3::new(100.0, 3.0, 3.0)).class,
        ZoneClass::Restricted
    );
    assert_eq!(
        twin.classify_point(Point3::new(0.2, 3.0, 3.0)).class,
        ZoneClass::Buffer
    );
    assert_eq!(
        twin.classify_point(Point3::new(3.0, 3.0, 3.0)).class,
        ZoneClass::Permitted
    );
}
