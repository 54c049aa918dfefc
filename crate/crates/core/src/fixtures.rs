//! Synthetic orientation demonstration sets shaped after planar handwriting
//! strokes (L, N, W) lifted into the tangent space at the goal.
//!
//! A shape is a polyline of tangent waypoints with strictly decreasing norm.
//! Between waypoints the direction is slerped and the norm interpolated
//! linearly, so distance to the goal decreases monotonically along the
//! curve. Samples follow `r(t) = r₀ e^{−λt}` and the frame is
//! `R = R_g Exp(−ξ)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Demonstration, DemonstrationSet, Sample, ValidationConfig};
use crate::so3::{exp_map, Rotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    L,
    N,
    W,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::L, Shape::N, Shape::W];

    /// Tangent waypoints (rad), excluding the goal at the origin.
    ///
    /// Each entry is `(norm, azimuth°, elevation°)`. Turns are kept below
    /// roughly one radian per e-fold of distance so that a mixture of
    /// symmetric gains can represent the flow.
    pub fn waypoints(self) -> Vec<Vector3<f64>> {
        let spec: &[(f64, f64, f64)] = match self {
            Shape::L => &[(1.30, 100.0, 12.0), (0.60, 140.0, 8.0), (0.25, 165.0, 4.0)],
            Shape::N => &[(1.30, 200.0, 15.0), (0.65, 160.0, 10.0), (0.30, 190.0, 5.0)],
            Shape::W => &[
                (1.30, 120.0, 30.0),
                (0.85, 138.0, 40.0),
                (0.50, 120.0, 30.0),
                (0.28, 138.0, 40.0),
                (0.14, 125.0, 35.0),
            ],
        };
        spec.iter()
            .map(|&(r, az, el)| {
                let (az, el) = (az.to_radians(), el.to_radians());
                Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * r
            })
            .collect()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Shape::L => "L",
            Shape::N => "N",
            Shape::W => "W",
        };
        f.write_str(s)
    }
}

impl FromStr for Shape {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "L" => Ok(Shape::L),
            "N" => Ok(Shape::N),
            "W" => Ok(Shape::W),
            other => Err(format!("unknown shape {other:?}; expected L, N or W")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub demos: usize,
    pub dt: f64,
    pub duration: f64,
    /// Exponential decay rate of the distance to goal (1/s).
    pub decay: f64,
    /// Waypoint jitter as a fraction of the waypoint norm.
    pub jitter: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            demos: 5,
            dt: 0.02,
            duration: 8.0,
            decay: 0.8,
            jitter: 0.08,
        }
    }
}

/// Tangent curve through `waypoints` and the origin, indexed by norm.
struct TangentCurve {
    points: Vec<Vector3<f64>>,
}

impl TangentCurve {
    fn new(points: Vec<Vector3<f64>>) -> Self {
        debug_assert!(points.windows(2).all(|w| w[0].norm() > w[1].norm()));
        Self { points }
    }

    fn start_norm(&self) -> f64 {
        self.points[0].norm()
    }

    /// Point of the curve with norm `r` (clamped to the curve's range).
    fn at_norm(&self, r: f64) -> Vector3<f64> {
        let r = r.clamp(0.0, self.start_norm());
        for w in self.points.windows(2) {
            let (r0, r1) = (w[0].norm(), w[1].norm());
            if r <= r0 && r >= r1 {
                let s = (r0 - r) / (r0 - r1);
                return slerp_dir(&w[0].normalize(), &w[1].normalize(), s) * r;
            }
        }
        let last = self.points.last().expect("non-empty");
        last.normalize() * r
    }
}

fn slerp_dir(a: &Vector3<f64>, b: &Vector3<f64>, s: f64) -> Vector3<f64> {
    let cos = a.dot(b).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if omega < 1e-9 {
        return a.lerp(b, s).normalize();
    }
    let sin = omega.sin();
    a * (((1.0 - s) * omega).sin() / sin) + b * ((s * omega).sin() / sin)
}

fn jittered(base: &[Vector3<f64>], jitter: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    loop {
        let pts: Vec<Vector3<f64>> = base
            .iter()
            .map(|p| {
                let n = p.norm() * jitter;
                p + Vector3::new(rng.random_range(-n..n), rng.random_range(-n..n), rng.random_range(-n..n))
            })
            .collect();
        if pts.windows(2).all(|w| w[0].norm() > w[1].norm()) {
            return pts;
        }
    }
}

/// Demonstrations of `shape` approaching `goal`; deterministic given `seed`.
pub fn demonstration_set(shape: Shape, seed: u64, goal: Rotation, cfg: &FixtureConfig) -> DemonstrationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (shape as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let steps = (cfg.duration / cfg.dt).round() as usize;
    let demos = (0..cfg.demos)
        .map(|_| {
            let curve = TangentCurve::new(jittered(&shape.waypoints(), cfg.jitter, &mut rng));
            let r0 = curve.start_norm();
            let samples = (0..=steps)
                .map(|k| {
                    let t = k as f64 * cfg.dt;
                    let xi = curve.at_norm(r0 * (-cfg.decay * t).exp());
                    Sample {
                        t,
                        rotation: &goal * &exp_map(&(-xi)),
                        omega: None,
                    }
                })
                .collect();
            Demonstration::new(samples).expect("fixture timestamps increase")
        })
        .collect();
    DemonstrationSet::new(demos, Some(goal), &ValidationConfig::default()).expect("fixture satisfies invariants")
}

/// The default fixture for a shape: goal at identity, default sampling.
pub fn default_set(shape: Shape) -> DemonstrationSet {
    demonstration_set(shape, 7, Rotation::identity(), &FixtureConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::distance;

    #[test]
    fn waypoint_norms_strictly_decrease() {
        for shape in Shape::ALL {
            let w = shape.waypoints();
            assert!(w.windows(2).all(|p| p[0].norm() > p[1].norm()), "{shape}");
            assert!(w[0].norm() < 1.4);
            for p in w.windows(2) {
                let turn = p[0].normalize().dot(&p[1].normalize()).acos();
                assert!(turn / (p[0].norm() / p[1].norm()).ln() < 1.1, "{shape}");
            }
        }
    }

    #[test]
    fn curve_is_indexed_by_norm() {
        let c = TangentCurve::new(Shape::W.waypoints());
        for k in 0..=100 {
            let r = c.start_norm() * k as f64 / 100.0;
            assert!((c.at_norm(r).norm() - r).abs() < 1e-12);
        }
        assert!((c.at_norm(c.start_norm()) - Shape::W.waypoints()[0]).norm() < 1e-12);
    }

    #[test]
    fn sets_are_valid_and_deterministic() {
        for shape in Shape::ALL {
            let a = default_set(shape);
            let b = default_set(shape);
            assert_eq!(a.len(), 5);
            for (da, db) in a.demos().iter().zip(b.demos()) {
                assert_eq!(da.samples().len(), db.samples().len());
                assert_eq!(da.first().rotation, db.first().rotation);
                let d: Vec<f64> = da.samples().iter().map(|s| distance(&s.rotation, a.goal())).collect();
                assert!(d.windows(2).all(|w| w[1] <= w[0] + 1e-12));
                assert!(*d.last().unwrap() < 0.01);
            }
        }
    }

    #[test]
    fn shape_names_round_trip() {
        for shape in Shape::ALL {
            assert_eq!(shape.to_string().parse::<Shape>().unwrap(), shape);
        }
        assert!("Q".parse::<Shape>().is_err());
    }
}
