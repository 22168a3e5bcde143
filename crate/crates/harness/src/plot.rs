//! Top-down trace plots: zones, the true trajectory, the fix stream and the
//! stretches of the path where sharing was suspended.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mrshare_core::locate::{FixQuality, PositionFix};
use mrshare_core::permit::{replay_modes, PermissionEvent, PermissionMode, PermissionState};
use mrshare_core::Millis;
use mrshare_schema::{ScenarioDoc, ShareClassDoc};
use serde_json::Value;
use thiserror::Error;

use crate::runner::{FIXES_FILE, SCENARIO_FILE, TRACE_FILE};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("unknown plot format `{0}` (expected svg or csv)")]
    UnknownFormat(String),
    #[error("{file}:{line}: {reason}")]
    Malformed {
        file: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotFormat {
    Svg,
    Csv,
}

impl FromStr for PlotFormat {
    type Err = PlotError;

    fn from_str(s: &str) -> Result<Self, PlotError> {
        match s {
            "svg" => Ok(PlotFormat::Svg),
            "csv" => Ok(PlotFormat::Csv),
            other => Err(PlotError::UnknownFormat(other.to_string())),
        }
    }
}

impl PlotFormat {
    pub fn extension(self) -> &'static str {
        match self {
            PlotFormat::Svg => "svg",
            PlotFormat::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoneRect {
    pub id: String,
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub restricted: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotData {
    pub zones: Vec<ZoneRect>,
    pub buffer_distance: f64,
    /// True path as (t, x, y).
    pub trajectory: Vec<(Millis, f64, f64)>,
    pub fixes: Vec<PositionFix>,
    /// Mode changes replayed from the permission events in the trace.
    pub modes: Vec<(Millis, PermissionMode)>,
    pub initial_mode: Option<PermissionMode>,
}

fn read_optional(path: &Path) -> io::Result<String> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(String::new()),
        Err(e) => Err(e),
    }
}

fn malformed(file: &str, line: usize, reason: impl ToString) -> PlotError {
    PlotError::Malformed {
        file: file.to_string(),
        line,
        reason: reason.to_string(),
    }
}

fn ndjson_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

impl PlotData {
    /// Reads a run directory. Missing files count as empty.
    pub fn load(dir: &Path) -> Result<Self, PlotError> {
        let mut data = PlotData::default();
        let scenario = read_optional(&dir.join(SCENARIO_FILE))?;
        if !scenario.trim().is_empty() {
            let doc = ScenarioDoc::parse(scenario.as_bytes())
                .map_err(|e| malformed(SCENARIO_FILE, 1, e))?;
            data.buffer_distance = doc.twin.buffer_distance;
            data.zones = doc
                .twin
                .zones
                .iter()
                .map(|z| ZoneRect {
                    id: z.id.clone(),
                    min: [z.min[0], z.min[1]],
                    max: [z.max[0], z.max[1]],
                    restricted: z.share_class == ShareClassDoc::Restricted,
                })
                .collect();
            data.trajectory = doc
                .trajectory
                .samples()
                .iter()
                .map(|s| (s.t, s.position[0], s.position[1]))
                .collect();
            data.initial_mode = data
                .trajectory
                .first()
                .map(|&(t, _, _)| PermissionState::initial(t).mode);
        }
        for (n, l) in ndjson_lines(&read_optional(&dir.join(FIXES_FILE))?) {
            data.fixes
                .push(serde_json::from_str(l).map_err(|e| malformed(FIXES_FILE, n, e))?);
        }
        let mut events = Vec::new();
        for (n, l) in ndjson_lines(&read_optional(&dir.join(TRACE_FILE))?) {
            let v: Value = serde_json::from_str(l).map_err(|e| malformed(TRACE_FILE, n, e))?;
            if v["message"]["type"] == "PERMISSION_EVT" {
                let ev: PermissionEvent = serde_json::from_value(v["message"]["payload"].clone())
                    .map_err(|e| malformed(TRACE_FILE, n, e))?;
                events.push(ev);
            }
        }
        if data.initial_mode.is_none() {
            data.initial_mode = data
                .fixes
                .first()
                .map(|f| PermissionState::initial(f.timestamp).mode);
        }
        if let Some(initial) = data.initial_mode {
            data.modes = replay_modes(initial, &events);
        }
        Ok(data)
    }

    /// Permission mode in force at `t`.
    pub fn mode_at(&self, t: Millis) -> Option<PermissionMode> {
        let i = self.modes.partition_point(|&(at, _)| at <= t);
        if i == 0 {
            self.initial_mode
        } else {
            Some(self.modes[i - 1].1)
        }
    }

    /// Maximal runs of the true path during which sharing was suspended.
    pub fn suspension_segments(&self) -> Vec<Vec<(f64, f64)>> {
        let mut out = Vec::new();
        let mut current: Vec<(f64, f64)> = Vec::new();
        for &(t, x, y) in &self.trajectory {
            if self.mode_at(t).is_some_and(|m| m.is_suspended()) {
                current.push((x, y));
            } else if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
        out
    }
}

fn mode_name(m: Option<PermissionMode>) -> &'static str {
    match m {
        Some(PermissionMode::SharingAllowed) => "sharing_allowed",
        Some(PermissionMode::SuspendedBuffer) => "suspended_buffer",
        Some(PermissionMode::SuspendedRestricted) => "suspended_restricted",
        Some(PermissionMode::SuspendedNoFix) => "suspended_no_fix",
        None => "",
    }
}

fn quality_name(q: FixQuality) -> &'static str {
    match q {
        FixQuality::Good => "good",
        FixQuality::Low => "low",
        FixQuality::None => "none",
    }
}

/// One row per fix: `t,x,y,z,quality,rms,mode`. Coordinates and residual
/// are empty for fixes without a position.
pub fn render_csv(data: &PlotData) -> String {
    let mut s = String::from("t,x,y,z,quality,rms,mode\n");
    for f in &data.fixes {
        let (x, y, z) = match f.position {
            Some(p) => (p.x.to_string(), p.y.to_string(), p.z.to_string()),
            None => Default::default(),
        };
        let rms = f.rms_residual.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{x},{y},{z},{},{rms},{}",
            f.timestamp,
            quality_name(f.quality),
            mode_name(data.mode_at(f.timestamp))
        );
    }
    s
}

const SCALE: f64 = 40.0;
const MARGIN: f64 = 20.0;

struct View {
    min_x: f64,
    max_y: f64,
}

impl View {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        (
            MARGIN + (x - self.min_x) * SCALE,
            MARGIN + (self.max_y - y) * SCALE,
        )
    }
}

fn points_attr(view: &View, pts: impl Iterator<Item = (f64, f64)>) -> String {
    pts.map(|(x, y)| {
        let (a, b) = view.px(x, y);
        format!("{a:.2},{b:.2}")
    })
    .collect::<Vec<_>>()
    .join(" ")
}

/// Static SVG. Element classes: `zone permitted|restricted`, `buffer`,
/// `trajectory`, `fix good|low`, `suspension`.
pub fn render_svg(data: &PlotData) -> String {
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for z in &data.zones {
        xs.extend([z.min[0], z.max[0]]);
        ys.extend([z.min[1], z.max[1]]);
    }
    for &(_, x, y) in &data.trajectory {
        xs.push(x);
        ys.push(y);
    }
    for p in data.fixes.iter().filter_map(|f| f.position) {
        xs.push(p.x);
        ys.push(p.y);
    }
    let fold = |v: &[f64], init: f64, f: fn(f64, f64) -> f64| v.iter().copied().fold(init, f);
    let (min_x, max_x) = if xs.is_empty() {
        (0.0, 0.0)
    } else {
        (
            fold(&xs, f64::INFINITY, f64::min),
            fold(&xs, f64::NEG_INFINITY, f64::max),
        )
    };
    let (min_y, max_y) = if ys.is_empty() {
        (0.0, 0.0)
    } else {
        (
            fold(&ys, f64::INFINITY, f64::min),
            fold(&ys, f64::NEG_INFINITY, f64::max),
        )
    };
    let view = View { min_x, max_y };
    let width = 2.0 * MARGIN + (max_x - min_x) * SCALE;
    let height = 2.0 * MARGIN + (max_y - min_y) * SCALE;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.2} {height:.2}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect class="background" x="0" y="0" width="{width:.2}" height="{height:.2}" fill="white"/>"#
    );
    for z in &data.zones {
        let (x0, y0) = view.px(z.min[0], z.max[1]);
        let (w, h) = ((z.max[0] - z.min[0]) * SCALE, (z.max[1] - z.min[1]) * SCALE);
        let (class, fill) = if z.restricted {
            ("restricted", "#f4b6b6")
        } else {
            ("permitted", "#c8ecc8")
        };
        let _ = writeln!(
            s,
            r##"<rect class="zone {class}" data-zone="{}" x="{x0:.2}" y="{y0:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}" stroke="#555" stroke-width="1"/>"##,
            z.id
        );
        if z.restricted && data.buffer_distance > 0.0 {
            let b = data.buffer_distance;
            let (bx, by) = view.px(z.min[0] - b, z.max[1] + b);
            let _ = writeln!(
                s,
                r##"<rect class="buffer" x="{bx:.2}" y="{by:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#e08a00" stroke-dasharray="4 3"/>"##,
                w + 2.0 * b * SCALE,
                h + 2.0 * b * SCALE
            );
        }
    }
    if !data.trajectory.is_empty() {
        let _ = writeln!(
            s,
            r##"<polyline class="trajectory" points="{}" fill="none" stroke="#1f4e9c" stroke-width="2"/>"##,
            points_attr(&view, data.trajectory.iter().map(|&(_, x, y)| (x, y)))
        );
    }
    for seg in data.suspension_segments() {
        let _ = writeln!(
            s,
            r##"<polyline class="suspension" points="{}" fill="none" stroke="#d62728" stroke-width="5" stroke-opacity="0.6"/>"##,
            points_attr(&view, seg.into_iter())
        );
    }
    for f in &data.fixes {
        if let Some(p) = f.position {
            let (cx, cy) = view.px(p.x, p.y);
            let (class, fill) = match f.quality {
                FixQuality::Good => ("good", "#2ca02c"),
                _ => ("low", "#ff7f0e"),
            };
            let _ = writeln!(
                s,
                r#"<circle class="fix {class}" data-t="{}" cx="{cx:.2}" cy="{cy:.2}" r="2" fill="{fill}"/>"#,
                f.timestamp
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Renders the plot of the run in `dir` and writes it next to the trace as
/// `plot.svg` or `plot.csv`.
pub fn emit_trace_plot(dir: &Path, format: PlotFormat) -> Result<PathBuf, PlotError> {
    let data = PlotData::load(dir)?;
    let body = match format {
        PlotFormat::Svg => render_svg(&data),
        PlotFormat::Csv => render_csv(&data),
    };
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("plot.{}", format.extension()));
    fs::write(&path, body)?;
    Ok(path)
}
