//! Zone geometry, reimplemented from the raw twin document.
//!
//! Hazard space is every Restricted zone plus everything no zone covers.
//! Distance to the uncovered part is measured to the exposed pieces of zone
//! faces: the parts of each face with no zone directly behind them.

use mrshare_schema::{ShareClassDoc, TwinDoc};

#[derive(Debug, Clone, Copy)]
struct Box3 {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Box3 {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| self.lo[k] <= p[k] && p[k] <= self.hi[k])
    }

    fn distance(&self, p: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for ((&v, &lo), &hi) in p.iter().zip(&self.lo).zip(&self.hi) {
            let d = if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0.0
            };
            s += d * d;
        }
        s.sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct Geometry {
    zones: Vec<(Box3, bool)>,
    exposed: Vec<Box3>,
    buffer: f64,
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

impl Geometry {
    pub fn new(doc: &TwinDoc) -> Self {
        let zones: Vec<(Box3, bool)> = doc
            .zones
            .iter()
            .map(|z| {
                (
                    Box3 {
                        lo: z.min,
                        hi: z.max,
                    },
                    z.share_class == ShareClassDoc::Restricted,
                )
            })
            .collect();
        let mut exposed = Vec::new();
        for (z, _) in &zones {
            for a in 0..3 {
                let (b, c) = ((a + 1) % 3, (a + 2) % 3);
                let cuts = |axis: usize| {
                    let mut v = vec![z.lo[axis], z.hi[axis]];
                    for (w, _) in &zones {
                        for x in [w.lo[axis], w.hi[axis]] {
                            if z.lo[axis] < x && x < z.hi[axis] {
                                v.push(x);
                            }
                        }
                    }
                    sorted_unique(v)
                };
                let (bs, cs) = (cuts(b), cuts(c));
                for (plane, outward_positive) in [(z.lo[a], false), (z.hi[a], true)] {
                    for bw in bs.windows(2) {
                        for cw in cs.windows(2) {
                            let bm = 0.5 * (bw[0] + bw[1]);
                            let cm = 0.5 * (cw[0] + cw[1]);
                            let behind = zones.iter().any(|(w, _)| {
                                let across = if outward_positive {
                                    w.lo[a] <= plane && plane < w.hi[a]
                                } else {
                                    w.lo[a] < plane && plane <= w.hi[a]
                                };
                                across
                                    && w.lo[b] <= bm
                                    && bm <= w.hi[b]
                                    && w.lo[c] <= cm
                                    && cm <= w.hi[c]
                            });
                            if !behind {
                                let mut lo = [0.0; 3];
                                let mut hi = [0.0; 3];
                                lo[a] = plane;
                                hi[a] = plane;
                                lo[b] = bw[0];
                                hi[b] = bw[1];
                                lo[c] = cw[0];
                                hi[c] = cw[1];
                                exposed.push(Box3 { lo, hi });
                            }
                        }
                    }
                }
            }
        }
        Self {
            zones,
            exposed,
            buffer: doc.buffer_distance,
        }
    }

    /// Distance from `p` to Restricted-or-unmapped space.
    pub fn hazard_distance(&self, p: [f64; 3]) -> f64 {
        if !self.zones.iter().any(|(z, _)| z.contains(p)) {
            return 0.0;
        }
        let restricted = self
            .zones
            .iter()
            .filter(|(_, r)| *r)
            .map(|(z, _)| z.distance(p))
            .fold(f64::INFINITY, f64::min);
        let unmapped = self
            .exposed
            .iter()
            .map(|f| f.distance(p))
            .fold(f64::INFINITY, f64::min);
        restricted.min(unmapped)
    }

    /// Shareable only when strictly farther than the buffer from hazard.
    pub fn permitted(&self, p: [f64; 3]) -> bool {
        self.hazard_distance(p) > self.buffer
    }
}
