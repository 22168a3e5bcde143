mod common;

use std::fs;

use mrshare_harness::plot::{emit_trace_plot, render_csv, render_svg, PlotData, PlotFormat};
use mrshare_harness::runner::run_scenario;
use mrshare_schema::WaypointDoc;

use common::fixture_doc;

fn polyline_points(svg: &str, class: &str) -> Vec<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.contains(&format!("<polyline class=\"{class}\"")))
        .map(|l| {
            let start = l.find("points=\"").unwrap() + 8;
            let end = start + l[start..].find('"').unwrap();
            l[start..end]
                .split(' ')
                .map(|p| {
                    let (x, y) = p.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect()
        })
        .collect()
}

#[test]
fn straight_line_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let mut doc = fixture_doc("office_whiteboard");
    doc.trajectory.waypoints = vec![
        WaypointDoc {
            t: 0,
            position: [1.0, 2.0, 1.5],
            yaw: 0.0,
        },
        WaypointDoc {
            t: 3000,
            position: [5.0, 6.0, 1.5],
            yaw: 0.0,
        },
    ];
    let out = run_scenario(doc, 1, tmp.path()).unwrap();
    let svg = fs::read_to_string(emit_trace_plot(tmp.path(), PlotFormat::Svg).unwrap()).unwrap();
    let lines = polyline_points(&svg, "trajectory");
    assert_eq!(lines.len(), 1);
    let pts = &lines[0];
    let distinct: std::collections::BTreeSet<String> =
        pts.iter().map(|p| format!("{p:?}")).collect();
    assert_eq!(distinct.len(), pts.len(), "one vertex per sample");
    assert_ne!(pts.first(), pts.last());
    // Every vertex lies on the segment between the endpoints.
    let (a, b) = (pts[0], pts[pts.len() - 1]);
    for p in pts {
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        assert!(cross.abs() < 1.0, "{p:?} off the line");
    }
    let csv = fs::read_to_string(emit_trace_plot(tmp.path(), PlotFormat::Csv).unwrap()).unwrap();
    assert_eq!(csv.lines().count(), out.fixes.len() + 1);
    assert_eq!(csv.lines().next(), Some("t,x,y,z,quality,rms,mode"));
}

#[test]
fn restricted_entry_is_highlighted() {
    let tmp = tempfile::tempdir().unwrap();
    run_scenario(fixture_doc("corridor_walk"), 1, tmp.path()).unwrap();
    let data = PlotData::load(tmp.path()).unwrap();
    let segments = data.suspension_segments();
    // The lab starts at x = 8; some suspended stretch must reach into it.
    assert!(segments.iter().any(|s| s.iter().any(|&(x, _)| x > 8.0)));
    let svg = render_svg(&data);
    assert_eq!(polyline_points(&svg, "suspension").len(), segments.len());
    assert!(svg.contains("class=\"zone restricted\""));
    let csv = render_csv(&data);
    assert!(csv.contains("suspended_restricted") && csv.contains("suspended_no_fix"));
}

#[test]
fn empty_trace_gives_an_empty_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let svg = fs::read_to_string(emit_trace_plot(tmp.path(), PlotFormat::Svg).unwrap()).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(!svg.contains("<polyline") && !svg.contains("<circle"));
    let csv = fs::read_to_string(emit_trace_plot(tmp.path(), PlotFormat::Csv).unwrap()).unwrap();
    assert_eq!(csv, "t,x,y,z,quality,rms,mode\n");
}

#[test]
fn unknown_format_is_an_error() {
    assert!("png".parse::<PlotFormat>().is_err());
    assert_eq!("svg".parse::<PlotFormat>().unwrap(), PlotFormat::Svg);
}

#[test]
fn malformed_trace_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("fixes.ndjson"), "{\"nope\":1}\n").unwrap();
    assert!(PlotData::load(tmp.path()).is_err());
}
