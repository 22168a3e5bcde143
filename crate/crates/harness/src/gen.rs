//! Seeded random generators for scenarios, protocol messages and policy
//! triples. Every generated scenario passes validation.

use std::collections::BTreeMap;

use mrshare_core::geom::Point3;
use mrshare_core::locate::{FixQuality, PositionFix};
use mrshare_core::permit::{EventKind, EventReason, PermissionEvent};
use mrshare_core::policy::{
    CeilingPolicy, Decision, FilteredFrame, FrameMetadata, LocalPolicy, OverrideRequest,
    OverrideStatus, RecipientRole,
};
use mrshare_core::scene::{
    capture_frame, Camera, Classification, DevicePose, Rect, SceneObject, ShareFrame,
};
use mrshare_core::twin::ZoneClass;
use mrshare_core::wire::{AuthFail, AuthOk, ControlStamp, Hello, Message, Revoke, ViewFrame};
use mrshare_schema::{
    AnchorDoc, CameraDoc, CeilingDoc, ClassificationDoc, ControlAction, ControlDoc, DecisionDoc,
    DeviceDoc, JurisdictionDoc, LocalPolicyDoc, ObjectDoc, RecipientDoc, RectDoc, RetentionDoc,
    ScenarioDoc, ShareClassDoc, TrajectoryDoc, TransitionDoc, TwinDoc, WaypointDoc, WindowDoc,
    ZoneClassDoc, ZoneDoc, SCENARIO_SCHEMA,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LABELS: [&str; 8] = [
    "whiteboard",
    "monitor",
    "poster",
    "badge",
    "prototype",
    "document",
    "screen",
    "notebook",
];

const ROLES: [&str; 4] = ["manager", "engineer", "guest", "auditor"];

const CLASSES: [ClassificationDoc; 4] = [
    ClassificationDoc::Public,
    ClassificationDoc::Internal,
    ClassificationDoc::Confidential,
    ClassificationDoc::Restricted,
];

const CLASSIFICATIONS: [Classification; 4] = [
    Classification::Public,
    Classification::Internal,
    Classification::Confidential,
    Classification::Restricted,
];

const DEVICE_HEIGHT: f64 = 1.5;
const CEILING_HEIGHT: f64 = 3.0;

fn subset<R: Rng + ?Sized>(rng: &mut R, items: &[&str], p: f64) -> Vec<String> {
    items
        .iter()
        .filter(|_| rng.random_bool(p))
        .map(|s| s.to_string())
        .collect()
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// A random but valid scenario. The same seed always yields the same document.
pub fn random_scenario(seed: u64) -> ScenarioDoc {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let rng = &mut rng;
    let w = round3(rng.random_range(8.0..14.0));
    let h = round3(rng.random_range(8.0..14.0));
    let nx = rng.random_range(2..=3);
    let ny = 2;

    // Rooms on a grid. The start room is always permitted and mapped.
    let start_room = (rng.random_range(0..nx), rng.random_range(0..ny));
    let uncovered = if rng.random_bool(0.2) {
        Some((rng.random_range(0..nx), rng.random_range(0..ny))).filter(|r| *r != start_room)
    } else {
        None
    };
    let mut zones = Vec::new();
    let mut permitted_rooms = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            if Some((i, j)) == uncovered {
                continue;
            }
            let restricted = (i, j) != start_room && rng.random_bool(0.3);
            let min = [
                round3(w * i as f64 / nx as f64),
                round3(h * j as f64 / ny as f64),
                0.0,
            ];
            let max = [
                round3(w * (i + 1) as f64 / nx as f64),
                round3(h * (j + 1) as f64 / ny as f64),
                CEILING_HEIGHT,
            ];
            if !restricted {
                permitted_rooms.push((min, max));
            }
            zones.push(ZoneDoc {
                id: format!("room-{i}-{j}"),
                min,
                max,
                share_class: if restricted {
                    ShareClassDoc::Restricted
                } else {
                    ShareClassDoc::Permitted
                },
                floor: "f1".into(),
            });
        }
    }
    let corners = [
        [0.0, 0.0, 0.0],
        [w, 0.0, 0.0],
        [0.0, h, 0.0],
        [w, h, 0.0],
        [0.0, 0.0, CEILING_HEIGHT],
        [w, 0.0, CEILING_HEIGHT],
        [0.0, h, CEILING_HEIGHT],
        [w, h, CEILING_HEIGHT],
    ];
    let anchors = corners
        .iter()
        .enumerate()
        .map(|(i, c)| AnchorDoc {
            id: format!("a{i}"),
            position: [
                round3(c[0] + rng.random_range(-0.3..0.3)),
                round3(c[1] + rng.random_range(-0.3..0.3)),
                round3(c[2] + rng.random_range(-0.2..0.2)),
            ],
        })
        .collect();
    let twin = TwinDoc {
        buffer_distance: round3(rng.random_range(0.2..0.6)),
        zones,
        anchors,
    };

    let n_objects = rng.random_range(3..=8);
    let objects: Vec<ObjectDoc> = (1..=n_objects)
        .map(|id| {
            let rw = rng.random_range(4..=20u16);
            let rh = rng.random_range(4..=20u16);
            ObjectDoc {
                id,
                label: LABELS.choose(rng).expect("labels").to_string(),
                location: [
                    round3(rng.random_range(0.0..w)),
                    round3(rng.random_range(0.0..h)),
                    round3(rng.random_range(0.5..2.0)),
                ],
                classification: *CLASSES.choose(rng).expect("classes"),
                rect: RectDoc {
                    x: rng.random_range(0..=64 - rw),
                    y: rng.random_range(0..=64 - rh),
                    w: rw,
                    h: rh,
                },
            }
        })
        .collect();

    let n_samples: u64 = rng.random_range(60..=100);
    let end = (n_samples - 1) * 100;
    let n_way = rng.random_range(3..=5usize);
    let mut times: Vec<u64> = (0..n_way - 2)
        .map(|_| rng.random_range(1..(end / 100)) * 100)
        .collect();
    times.push(0);
    times.push(end);
    times.sort_unstable();
    times.dedup();
    let (smin, smax) = (permitted_rooms[0].0, permitted_rooms[0].1);
    let waypoints: Vec<WaypointDoc> = times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let (x, y) = if k == 0 {
                (
                    rng.random_range(smin[0] + 0.2..smax[0] - 0.2),
                    rng.random_range(smin[1] + 0.2..smax[1] - 0.2),
                )
            } else {
                (
                    rng.random_range(0.2..w - 0.2),
                    rng.random_range(0.2..h - 0.2),
                )
            };
            WaypointDoc {
                t,
                position: [round3(x), round3(y), DEVICE_HEIGHT],
                yaw: round3(rng.random_range(-3.1..3.1)),
            }
        })
        .collect();

    let window = |rng: &mut ChaCha8Rng| {
        let start = rng.random_range(0..end / 100) * 100;
        WindowDoc {
            start,
            end: (start + rng.random_range(1..=8) * 100).min(end),
        }
    };
    let dropout_windows = if rng.random_bool(0.5) {
        vec![window(rng)]
    } else {
        Vec::new()
    };
    let spoof_windows = if rng.random_bool(0.4) {
        vec![window(rng)]
    } else {
        Vec::new()
    };

    let ids: Vec<u8> = (1..=n_objects).collect();
    let local_policy = LocalPolicyDoc {
        allowed_labels: subset(rng, &LABELS, 0.5),
        allowed_object_ids: ids
            .iter()
            .copied()
            .filter(|_| rng.random_bool(0.15))
            .collect(),
    };
    let mut zone_overrides = BTreeMap::new();
    if rng.random_bool(0.1) {
        zone_overrides.insert(ZoneClassDoc::Permitted, DecisionDoc::Deny);
    }
    if rng.random_bool(0.2) {
        zone_overrides.insert(ZoneClassDoc::Buffer, DecisionDoc::Allow);
    }
    let ceiling = CeilingDoc {
        max_allowed_labels: subset(rng, &LABELS, 0.7),
        max_classification: *CLASSES.choose(rng).expect("classes"),
        zone_overrides,
    };
    let recipients = (1..=rng.random_range(1..=3))
        .map(|i| RecipientDoc {
            id: format!("r{i}"),
            role: ROLES.choose(rng).expect("roles").to_string(),
            clearance: *CLASSES.choose(rng).expect("classes"),
            label_grants: subset(rng, &LABELS, 0.6),
        })
        .collect();
    let jurisdiction = match rng.random_range(0..3) {
        0 => JurisdictionDoc {
            tag: "EU".into(),
            retention: RetentionDoc::Days(7),
        },
        1 => JurisdictionDoc {
            tag: "US".into(),
            retention: RetentionDoc::Days(30),
        },
        _ => JurisdictionDoc {
            tag: "CH".into(),
            retention: RetentionDoc::NoArchive,
        },
    };

    let device = DeviceDoc {
        device_id: "hmd-01".into(),
        user_id: "alice".into(),
        credential: format!("pin-{}", rng.random_range(1000..9999)),
    };
    let enrollments = vec![DeviceDoc {
        device_id: "hmd-02".into(),
        user_id: "bob".into(),
        credential: "bob-pin".into(),
    }];
    let mut control = Vec::new();
    if rng.random_bool(0.9) {
        control.push(ControlDoc {
            t: 0,
            action: ControlAction::StartShare,
        });
    }
    let at = |rng: &mut ChaCha8Rng| rng.random_range(1..=end / 100) * 100;
    for _ in 0..rng.random_range(0..=6) {
        let t = at(rng);
        let action = match rng.random_range(0..8) {
            0 => ControlAction::Mute,
            1 => ControlAction::Unmute,
            2 => ControlAction::Doff,
            3 => ControlAction::Auth {
                user_id: device.user_id.clone(),
                credential: if rng.random_bool(0.8) {
                    device.credential.clone()
                } else {
                    "wrong".into()
                },
            },
            4 => ControlAction::Override {
                object_id: *ids.choose(rng).expect("objects"),
            },
            5 => ControlAction::StopShare,
            _ => ControlAction::StartShare,
        };
        control.push(ControlDoc { t, action });
    }
    control.sort_by_key(|c| c.t);

    ScenarioDoc {
        schema: SCENARIO_SCHEMA.into(),
        name: format!("random-{seed}"),
        seed,
        twin,
        device,
        enrollments,
        camera: CameraDoc::default(),
        objects,
        trajectory: TrajectoryDoc {
            step_ms: 100,
            waypoints,
        },
        noise_sigma: round3(rng.random_range(0.0..0.05)),
        localization_guard: None,
        dropout_windows,
        spoof_windows,
        local_policy,
        ceiling,
        recipients,
        jurisdiction,
        control,
        transition: Some(TransitionDoc {
            upgrade_k: Some(rng.random_range(1..=5)),
            dropout_timeout: None,
            warn_distance: None,
        }),
        purge_at: None,
    }
}

fn ident<R: Rng + ?Sized>(rng: &mut R) -> String {
    const CHARS: &[char] = &[
        'a', 'b', 'z', 'A', 'Q', '0', '7', '_', '-', ' ', 'é', '"', '\\', '✓',
    ];
    let n = rng.random_range(1..=12);
    (0..n).map(|_| *CHARS.choose(rng).expect("chars")).collect()
}

fn digest<R: Rng + ?Sized>(rng: &mut R) -> String {
    (0..32)
        .map(|_| format!("{:02x}", rng.random::<u8>()))
        .collect()
}

fn finite<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    match rng.random_range(0..5) {
        0 => 0.0,
        1 => -0.0,
        2 => f64::MAX,
        3 => 1e-300,
        _ => rng.random_range(-1e6..1e6),
    }
}

/// A random frame over a small random scene.
pub fn random_frame<R: Rng + ?Sized>(rng: &mut R) -> ShareFrame {
    let width = rng.random_range(1..=64);
    let height = rng.random_range(1..=64);
    let objects: Vec<SceneObject> = (1..=rng.random_range(0..6u8))
        .map(|id| SceneObject {
            id,
            label: LABELS.choose(rng).expect("labels").to_string(),
            location: Point3::new(3.0, 0.0, 1.0),
            true_classification: *CLASSIFICATIONS.choose(rng).expect("classes"),
            raster_rect: Rect::new(
                rng.random_range(0..60),
                rng.random_range(0..60),
                rng.random_range(1..12),
                rng.random_range(1..12),
            ),
        })
        .collect();
    let camera = Camera {
        width,
        height,
        ..Camera::default()
    };
    let pose = DevicePose {
        position: Point3::default(),
        yaw: 0.0,
    };
    capture_frame(&objects, &pose, &camera, rng.random())
}

fn request<R: Rng + ?Sized>(rng: &mut R) -> OverrideRequest {
    OverrideRequest {
        request_id: ident(rng),
        object_id: rng.random(),
        requested_by: ident(rng),
        zone_class: *[
            ZoneClass::Permitted,
            ZoneClass::Buffer,
            ZoneClass::Restricted,
        ]
        .choose(rng)
        .expect("zones"),
        status: *[
            OverrideStatus::Pending,
            OverrideStatus::Approved,
            OverrideStatus::Denied,
        ]
        .choose(rng)
        .expect("statuses"),
        decided_at: rng.random_bool(0.5).then(|| rng.random()),
    }
}

/// A random message that passes `Message::validate`.
pub fn random_message<R: Rng + ?Sized>(rng: &mut R) -> Message {
    let stamp = ControlStamp {
        timestamp: rng.random(),
    };
    match rng.random_range(0..14) {
        0 => Message::Hello(Hello {
            device_id: ident(rng),
            user_id: ident(rng),
            credential_digest: digest(rng),
            session_id: ident(rng),
        }),
        1 => Message::AuthOk(AuthOk {
            device_id: ident(rng),
            user_id: ident(rng),
            session_id: ident(rng),
        }),
        2 => Message::AuthFail(AuthFail {
            device_id: ident(rng),
            reason: ident(rng),
        }),
        3 => {
            let t = rng.random();
            Message::LocFix(match rng.random_range(0..3) {
                0 => PositionFix::none(t),
                q => PositionFix {
                    timestamp: t,
                    position: Some(Point3::new(finite(rng), finite(rng), finite(rng))),
                    rms_residual: Some(rng.random_range(0.0..10.0)),
                    quality: if q == 1 {
                        FixQuality::Good
                    } else {
                        FixQuality::Low
                    },
                },
            })
        }
        4 => Message::PermissionEvt(PermissionEvent {
            kind: *[
                EventKind::Granted,
                EventKind::Suspended,
                EventKind::Resumed,
                EventKind::ApproachWarning,
            ]
            .choose(rng)
            .expect("kinds"),
            reason: *[
                EventReason::ZoneRestricted,
                EventReason::ZoneBuffer,
                EventReason::LowQuality,
                EventReason::NoFix,
                EventReason::Timeout,
                EventReason::CleanFixes,
                EventReason::NearRestricted,
            ]
            .choose(rng)
            .expect("reasons"),
            timestamp: rng.random(),
        }),
        5 => {
            let frame = random_frame(rng);
            let mut masked: Vec<u8> = (6..=255u8).filter(|_| rng.random_bool(0.01)).collect();
            masked.sort_unstable();
            let metadata = FrameMetadata::describe(&frame, &digest(rng), masked);
            Message::ShareOffer(FilteredFrame { frame, metadata })
        }
        6 => Message::ViewFrame(ViewFrame {
            recipient: ident(rng),
            frame: random_frame(rng),
        }),
        7 => Message::Mute(stamp),
        8 => Message::Unmute(stamp),
        9 => Message::OverrideReq(request(rng)),
        10 => Message::OverrideResult(request(rng)),
        11 => Message::Doff(stamp),
        12 => Message::Revoke(Revoke {
            timestamp: rng.random(),
            reason: ident(rng),
        }),
        _ => Message::Bye,
    }
}

/// A (local, ceiling, role) triple over [`LABELS`] and object ids 1..=8.
pub fn random_policy_triple<R: Rng + ?Sized>(
    rng: &mut R,
) -> (LocalPolicy, CeilingPolicy, RecipientRole) {
    let local = LocalPolicy {
        allowed_labels: subset(rng, &LABELS, 0.5).into_iter().collect(),
        allowed_object_ids: (1..=8u8).filter(|_| rng.random_bool(0.2)).collect(),
    };
    let mut zone_overrides = BTreeMap::new();
    for z in [
        ZoneClass::Permitted,
        ZoneClass::Buffer,
        ZoneClass::Restricted,
    ] {
        if rng.random_bool(0.15) {
            zone_overrides.insert(z, Decision::from_bool(rng.random_bool(0.5)));
        }
    }
    let ceiling = CeilingPolicy {
        max_allowed_labels: subset(rng, &LABELS, 0.6).into_iter().collect(),
        max_classification: *CLASSIFICATIONS.choose(rng).expect("classes"),
        zone_overrides,
    };
    let role = RecipientRole {
        recipient_id: "r1".into(),
        role: ROLES.choose(rng).expect("roles").to_string(),
        clearance: *CLASSIFICATIONS.choose(rng).expect("classes"),
        label_grants: subset(rng, &LABELS, 0.6).into_iter().collect(),
    };
    (local, ceiling, role)
}

/// Objects 1..=8 with random labels and classifications, all in view.
pub fn random_inventory<R: Rng + ?Sized>(rng: &mut R) -> Vec<SceneObject> {
    let mut cells: Vec<(u16, u16)> = (0..4)
        .flat_map(|i| (0..2).map(move |j| (i * 16, j * 32)))
        .collect();
    cells.shuffle(rng);
    (1..=8u8)
        .zip(cells)
        .map(|(id, (x, y))| SceneObject {
            id,
            label: LABELS.choose(rng).expect("labels").to_string(),
            location: Point3::new(2.0, 0.0, 1.5),
            true_classification: *CLASSIFICATIONS.choose(rng).expect("classes"),
            raster_rect: Rect::new(x, y, 12, 20),
        })
        .collect()
}
