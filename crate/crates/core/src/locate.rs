//! UWB ranging simulation and least-squares position solving.
//!
//! The solver serves both the server-side localization role and the local
//! fallback on the device; it is a pure function of anchors and ranges.

use std::collections::BTreeMap;

use mrshare_schema::WindowDoc;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{spans_volume, Point3};
use crate::twin::DigitalTwin;
use crate::Millis;

/// Smallest range a simulated measurement can report.
pub const MIN_RANGE: f64 = 1e-9;
/// Forged range offset applied during spoof windows.
pub const SPOOF_OFFSET: f64 = 5.0;

const MAX_ITERATIONS: usize = 50;
const STEP_TOLERANCE: f64 = 1e-9;
const INITIAL_DAMPING: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub id: String,
    pub position: Point3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeSet {
    pub timestamp: Millis,
    pub ranges: BTreeMap<String, f64>,
    pub dropout: bool,
}

impl RangeSet {
    pub fn dropout(timestamp: Millis) -> Self {
        Self {
            timestamp,
            ranges: BTreeMap::new(),
            dropout: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixQuality {
    Good,
    Low,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionFix {
    pub timestamp: Millis,
    pub position: Option<Point3>,
    pub rms_residual: Option<f64>,
    pub quality: FixQuality,
}

impl PositionFix {
    pub fn none(timestamp: Millis) -> Self {
        Self {
            timestamp,
            position: None,
            rms_residual: None,
            quality: FixQuality::None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LocateError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("range set at {0} ms is a dropout")]
    Dropout(Millis),
}

/// Simulates one ranging round: true distance to each anchor plus
/// zero-mean Gaussian noise, clamped to stay positive.
pub fn simulate_ranges<R: Rng + ?Sized>(
    twin: &DigitalTwin,
    true_position: Point3,
    noise_sigma: f64,
    timestamp: Millis,
    rng: &mut R,
) -> RangeSet {
    let ranges = twin
        .anchors()
        .iter()
        .map(|a| {
            let exact = a.position.distance(true_position);
            let noise = if noise_sigma > 0.0 {
                Normal::new(0.0, noise_sigma)
                    .expect("sigma is finite and positive")
                    .sample(rng)
            } else {
                0.0
            };
            (a.id.clone(), (exact + noise).max(MIN_RANGE))
        })
        .collect();
    RangeSet {
        timestamp,
        ranges,
        dropout: false,
    }
}

/// Default quality gate: strict when ranging is clean, 3 sigma otherwise.
pub fn default_residual_threshold(noise_sigma: f64) -> f64 {
    if noise_sigma > 0.0 {
        3.0 * noise_sigma
    } else {
        0.05
    }
}

/// Result of a solve plus the objective after every accepted step.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub fix: PositionFix,
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

pub fn solve_position(
    anchors: &[Anchor],
    ranges: &RangeSet,
    residual_threshold: f64,
) -> Result<PositionFix, LocateError> {
    solve_position_traced(anchors, ranges, residual_threshold).map(|r| r.fix)
}

fn objective(p: Point3, pairs: &[(Point3, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(a, r)| {
            let e = p.distance(a) - r;
            e * e
        })
        .sum()
}

/// Linearized start: subtracting the first range equation from the others
/// leaves a linear system in the position, solved in the least-squares sense.
fn linear_initial_guess(pairs: &[(Point3, f64)]) -> Option<Point3> {
    let (a0, r0) = pairs[0];
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for &(a, r) in &pairs[1..] {
        let row = (a - a0).to_vector() * 2.0;
        let rhs = a.dot(a) - a0.dot(a0) - r * r + r0 * r0;
        ata += row * row.transpose();
        atb += row * rhs;
    }
    let x = ata.cholesky()?.solve(&atb);
    Some(Point3::from_vector(&x))
}

/// Same as [`solve_position`], also reporting the objective trace.
pub fn solve_position_traced(
    anchors: &[Anchor],
    ranges: &RangeSet,
    residual_threshold: f64,
) -> Result<SolveReport, LocateError> {
    if ranges.dropout {
        return Err(LocateError::Dropout(ranges.timestamp));
    }
    let pairs: Vec<(Point3, f64)> = anchors
        .iter()
        .filter_map(|a| ranges.ranges.get(&a.id).map(|&r| (a.position, r)))
        .filter(|(_, r)| r.is_finite())
        .collect();
    if pairs.len() < 4 {
        return Err(LocateError::DegenerateGeometry(format!(
            "need at least 4 ranged anchors, got {}",
            pairs.len()
        )));
    }
    let positions: Vec<Point3> = pairs.iter().map(|(a, _)| *a).collect();
    if !spans_volume(&positions) {
        return Err(LocateError::DegenerateGeometry(
            "ranged anchors are coplanar".into(),
        ));
    }
    let mut p = linear_initial_guess(&pairs)
        .ok_or_else(|| LocateError::DegenerateGeometry("singular linear system".into()))?;

    let mut f = objective(p, &pairs);
    let mut history = vec![f];
    let mut lambda = INITIAL_DAMPING;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for &(a, r) in &pairs {
            let diff = p - a;
            let dist = diff.norm();
            if dist == 0.0 {
                continue;
            }
            let row = diff.to_vector() / dist;
            jtj += row * row.transpose();
            jtr += row * (dist - r);
        }
        let damped = jtj + Matrix3::identity() * lambda;
        let Some(step) = damped.cholesky().map(|c| c.solve(&-jtr)) else {
            lambda *= 10.0;
            continue;
        };
        let candidate = p + Point3::from_vector(&step);
        let f_new = objective(candidate, &pairs);
        let step_len = step.norm();
        if f_new <= f {
            p = candidate;
            f = f_new;
            history.push(f);
            lambda /= 10.0;
        } else {
            lambda *= 10.0;
        }
        if step_len < STEP_TOLERANCE {
            break;
        }
    }

    let rms = (f / pairs.len() as f64).sqrt();
    let quality = if rms <= residual_threshold {
        FixQuality::Good
    } else {
        FixQuality::Low
    };
    Ok(SolveReport {
        fix: PositionFix {
            timestamp: ranges.timestamp,
            position: Some(p),
            rms_residual: Some(rms),
            quality,
        },
        objective_history: history,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub noise_sigma: f64,
    pub dropout_windows: Vec<WindowDoc>,
    /// Windows in which the first anchor's range is forged by [`SPOOF_OFFSET`].
    pub spoof_windows: Vec<WindowDoc>,
    pub residual_threshold: f64,
}

impl LoopConfig {
    pub fn new(noise_sigma: f64) -> Self {
        Self {
            noise_sigma,
            dropout_windows: Vec::new(),
            spoof_windows: Vec::new(),
            residual_threshold: default_residual_threshold(noise_sigma),
        }
    }
}

/// One ranging round and solve for a single clock tick.
pub fn locate_once<R: Rng + ?Sized>(
    twin: &DigitalTwin,
    t: Millis,
    true_position: Point3,
    cfg: &LoopConfig,
    rng: &mut R,
) -> PositionFix {
    if cfg.dropout_windows.iter().any(|w| w.contains(t)) {
        return PositionFix::none(t);
    }
    let mut ranges = simulate_ranges(twin, true_position, cfg.noise_sigma, t, rng);
    if cfg.spoof_windows.iter().any(|w| w.contains(t)) {
        if let Some(r) = ranges.ranges.values_mut().next() {
            *r += SPOOF_OFFSET;
        }
    }
    // A twin always carries a valid anchor set, but stay fail-closed anyway.
    solve_position(twin.anchors(), &ranges, cfg.residual_threshold)
        .unwrap_or_else(|_| PositionFix::none(t))
}

/// Produces one fix per trajectory sample, in order. Timestamps must be
/// strictly increasing.
pub fn localization_loop<R: Rng + ?Sized>(
    twin: &DigitalTwin,
    trajectory: &[(Millis, Point3)],
    cfg: &LoopConfig,
    rng: &mut R,
) -> Vec<PositionFix> {
    debug_assert!(trajectory.windows(2).all(|w| w[0].0 < w[1].0));
    trajectory
        .iter()
        .map(|&(t, p)| locate_once(twin, t, p, cfg, rng))
        .collect()
}
