use std::collections::BTreeMap;
use std::fs;

use mrshare_schema::ScenarioDoc;
use mrshare_verify::{
    verify_dir, verify_no_leak, ArchivedFrame, Artifacts, TraceMessage, TraceRecord,
};
use serde_json::{json, Value};

const SCENARIO: &str = r#"{
  "schema": "mrshare.scenario/1",
  "name": "oracle",
  "twin": {
    "buffer_distance": 0.5,
    "zones": [{"id": "room", "min": [0, 0, 0], "max": [10, 10, 3], "share_class": "permitted"}],
    "anchors": [
      {"id": "a0", "position": [0, 0, 0]}, {"id": "a1", "position": [10, 0, 0]},
      {"id": "a2", "position": [0, 10, 0]}, {"id": "a3", "position": [10, 10, 0]},
      {"id": "a4", "position": [0, 0, 3]}, {"id": "a5", "position": [10, 0, 3]},
      {"id": "a6", "position": [0, 10, 3]}, {"id": "a7", "position": [10, 10, 3]}
    ]
  },
  "device": {"device_id": "hmd", "user_id": "alice", "credential": "pin"},
  "camera": {"fov_half_angle": 1.0, "range_max": 8.0, "width": 8, "height": 8},
  "objects": [
    {"id": 1, "label": "whiteboard", "location": [3, 5, 1.5], "classification": "public", "rect": {"x": 0, "y": 0, "w": 2, "h": 2}},
    {"id": 2, "label": "monitor", "location": [3, 5.2, 1.5], "classification": "confidential", "rect": {"x": 4, "y": 4, "w": 2, "h": 2}}
  ],
  "trajectory": {"step_ms": 100, "waypoints": [{"t": 0, "position": [1, 5, 1.5]}, {"t": 1000, "position": [1, 5, 1.5]}]},
  "local_policy": {"allowed_labels": ["whiteboard"]},
  "ceiling": {"max_allowed_labels": ["whiteboard", "monitor"], "max_classification": "confidential"},
  "recipients": [{"id": "r1", "role": "peer", "clearance": "confidential", "label_grants": ["whiteboard", "monitor"]}],
  "jurisdiction": {"tag": "EU", "retention": {"days": 7}},
  "control": [{"t": 0, "action": "start_share"}, {"t": 500, "action": "mute"}, {"t": 700, "action": "unmute"}]
}"#;

fn scenario() -> ScenarioDoc {
    ScenarioDoc::parse(SCENARIO.as_bytes()).unwrap()
}

/// 8x8 frame with the given cells set.
fn frame(t: u64, cells: &[(u16, u16, u8)]) -> Value {
    let mut grid = [[0u8; 8]; 8];
    for &(x, y, id) in cells {
        grid[y as usize][x as usize] = id;
    }
    let rows: Vec<String> = grid.iter().map(hex::encode).collect();
    let mut ids: Vec<u8> = cells.iter().map(|c| c.2).filter(|&id| id != 255).collect();
    ids.sort_unstable();
    ids.dedup();
    let labels = BTreeMap::from([(1u8, "whiteboard"), (2, "monitor")]);
    let map: Vec<Value> = ids
        .iter()
        .map(|id| json!({"id": id, "label": labels[id], "rects": []}))
        .collect();
    json!({"timestamp": t, "width": 8, "height": 8, "rows": rows, "object_map": map})
}

fn rec(kind: &str, peer: Option<&str>, payload: Value) -> TraceRecord {
    TraceRecord {
        seq: 0,
        direction: if peer.is_some() {
            "server_to_recipient"
        } else {
            "device_to_server"
        }
        .into(),
        peer: peer.map(String::from),
        phase: "sharing".into(),
        message: TraceMessage {
            kind: kind.into(),
            payload,
        },
    }
}

fn granted() -> TraceRecord {
    rec(
        "PERMISSION_EVT",
        None,
        json!({"kind": "granted", "reason": "clean_fixes", "timestamp": 0}),
    )
}

fn view(f: Value) -> TraceRecord {
    rec(
        "VIEW_FRAME",
        Some("r1"),
        json!({"recipient": "r1", "frame": f}),
    )
}

/// Numbers the trace and archives every VIEW_FRAME under its recipient.
fn artifacts(mut trace: Vec<TraceRecord>) -> Artifacts {
    let mut archives: BTreeMap<String, Vec<ArchivedFrame>> =
        BTreeMap::from([("r1".to_string(), vec![])]);
    for (i, r) in trace.iter_mut().enumerate() {
        r.seq = i as u64 + 1;
        if r.message.kind == "VIEW_FRAME" {
            archives
                .entry(r.peer.clone().unwrap())
                .or_default()
                .push(ArchivedFrame {
                    seq: r.seq,
                    frame: r.message.payload["frame"].clone(),
                });
        }
    }
    Artifacts { trace, archives }
}

#[test]
fn allowed_content_passes() {
    let a = artifacts(vec![
        granted(),
        view(frame(100, &[(0, 0, 1), (1, 1, 1), (4, 4, 255)])),
    ]);
    let report = verify_no_leak(&a, &scenario());
    assert!(report.passed(), "{:?}", report.violations);
    assert_eq!(report.frames_checked, 1);
    assert_eq!(report.cells_checked, 64);
}

#[test]
fn denied_cell_is_reported_with_coordinates() {
    let a = artifacts(vec![granted(), view(frame(100, &[(0, 0, 1), (5, 4, 2)]))]);
    let report = verify_no_leak(&a, &scenario());
    let v = report
        .violations
        .iter()
        .find(|v| v.cell.is_some())
        .expect("cell violation");
    assert_eq!(
        (v.timestamp, v.object_id, v.cell),
        (100, Some(2), Some((5, 4)))
    );
    assert!(v.reason.contains("local policy"), "{}", v.reason);
}

#[test]
fn cell_outside_footprint_is_reported() {
    let a = artifacts(vec![granted(), view(frame(100, &[(7, 7, 1)]))]);
    let report = verify_no_leak(&a, &scenario());
    assert!(report
        .violations
        .iter()
        .any(|v| v.cell == Some((7, 7)) && v.reason.contains("footprint")));
}

#[test]
fn frame_while_muted_fails() {
    let a = artifacts(vec![granted(), view(frame(600, &[(0, 0, 1)]))]);
    let report = verify_no_leak(&a, &scenario());
    assert!(report
        .violations
        .iter()
        .any(|v| v.timestamp == 600 && v.reason.contains("muted")));
}

#[test]
fn redacted_frames_get_frame_level_checks() {
    let redacted = |t: u64| json!({"timestamp": t, "redacted": true});
    let ok = artifacts(vec![granted(), view(redacted(100))]);
    let report = verify_no_leak(&ok, &scenario());
    assert!(report.passed(), "{:?}", report.violations);
    assert_eq!(report.cells_checked, 0);
    let muted = artifacts(vec![granted(), view(redacted(600))]);
    assert!(!verify_no_leak(&muted, &scenario()).passed());
    let off_tick = artifacts(vec![granted(), view(redacted(150))]);
    assert!(!verify_no_leak(&off_tick, &scenario()).passed());
}

#[test]
fn frame_after_revoke_is_late() {
    let a = artifacts(vec![
        granted(),
        view(frame(100, &[(0, 0, 1)])),
        rec(
            "REVOKE",
            Some("r1"),
            json!({"timestamp": 200, "reason": "stopped"}),
        ),
        view(frame(200, &[(0, 0, 1)])),
    ]);
    let report = verify_no_leak(&a, &scenario());
    assert!(report
        .violations
        .iter()
        .any(|v| v.timestamp == 200 && v.reason.contains("late frame")));
}

#[test]
fn frames_before_permission_are_flagged() {
    let a = artifacts(vec![view(frame(100, &[(0, 0, 1)]))]);
    let report = verify_no_leak(&a, &scenario());
    assert!(report
        .violations
        .iter()
        .any(|v| v.reason.contains("permission suspended")));
}

#[test]
fn archive_must_match_the_trace() {
    let mut a = artifacts(vec![granted(), view(frame(100, &[(0, 0, 1)]))]);
    a.archives.get_mut("r1").unwrap().push(ArchivedFrame {
        seq: 99,
        frame: frame(300, &[(4, 4, 2)]),
    });
    let report = verify_no_leak(&a, &scenario());
    assert!(report
        .violations
        .iter()
        .any(|v| v.reason.contains("archive differs")));
    assert!(report
        .violations
        .iter()
        .any(|v| v.timestamp == 300 && v.object_id == Some(2)));
}

#[test]
fn loads_artifacts_from_a_directory() {
    let a = artifacts(vec![granted(), view(frame(100, &[(0, 0, 1)]))]);
    let dir = tempfile::tempdir().unwrap();
    let line = |v: Value| format!("{v}\n");
    let trace: String = a
        .trace
        .iter()
        .map(|r| line(serde_json::to_value(r).unwrap()))
        .collect();
    fs::write(dir.path().join("trace.ndjson"), trace).unwrap();
    fs::create_dir(dir.path().join("frames")).unwrap();
    let archive: String = a.archives["r1"]
        .iter()
        .map(|f| line(serde_json::to_value(f).unwrap()))
        .collect();
    fs::write(dir.path().join("frames/r1.ndjson"), archive).unwrap();
    let report = verify_dir(dir.path(), &scenario()).unwrap();
    assert!(report.passed(), "{:?}", report.violations);
    fs::write(dir.path().join("trace.ndjson"), "{not json\n").unwrap();
    assert!(verify_dir(dir.path(), &scenario()).is_err());
}
