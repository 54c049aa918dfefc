//! Demonstration ingestion, validation, and distance resampling.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3::{self, exp_map, karcher_mean, log_rel, slerp, AngularVelocity, Rotation, So3Error};

/// Exact-hit tolerance when a grid distance coincides with a sample.
const HIT_TOL: f64 = 1e-12;
const BISECTION_ITERS: usize = 60;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("demo {demo}, sample {sample}: {reason}")]
    InvariantViolation {
        demo: usize,
        sample: usize,
        reason: String,
    },
    #[error("demo {demo}: distance to goal increases at sample {sample} ({from} -> {to} rad)")]
    NonMonotoneDistance {
        demo: usize,
        sample: usize,
        from: f64,
        to: f64,
    },
    #[error("demo {demo}: no bracketing samples for distance {distance}")]
    BracketNotFound { demo: usize, distance: f64 },
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    So3(#[from] So3Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationConfig {
    /// Maximum geodesic distance between a demo's last frame and the goal.
    pub goal_tolerance: f64,
    /// Allowed increase of distance-to-goal between consecutive samples.
    pub monotone_slack: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            goal_tolerance: 0.05,
            monotone_slack: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub rotation: Rotation,
    pub omega: Option<AngularVelocity>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    samples: Vec<Sample>,
}

impl Demonstration {
    /// Checks sample count and timestamp ordering.
    pub fn new(samples: Vec<Sample>) -> Result<Self, DatasetError> {
        Self::validated(0, samples)
    }

    fn validated(demo: usize, samples: Vec<Sample>) -> Result<Self, DatasetError> {
        if samples.len() < 2 {
            return Err(DatasetError::InvariantViolation {
                demo,
                sample: samples.len(),
                reason: "a demonstration needs at least 2 samples".into(),
            });
        }
        for (k, s) in samples.iter().enumerate() {
            if !s.t.is_finite() || s.omega.is_some_and(|w| w.iter().any(|x| !x.is_finite())) {
                return Err(DatasetError::InvariantViolation {
                    demo,
                    sample: k,
                    reason: "non-finite value".into(),
                });
            }
            if k > 0 && s.t <= samples[k - 1].t {
                return Err(DatasetError::InvariantViolation {
                    demo,
                    sample: k,
                    reason: "timestamps must be strictly increasing".into(),
                });
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn first(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample {
        &self.samples[self.samples.len() - 1]
    }

    pub fn has_velocities(&self) -> bool {
        self.samples.iter().all(|s| s.omega.is_some())
    }

    /// Body-frame finite differences `Log(R_kᵀ R_{k+1}) / Δt`; the last sample
    /// repeats the previous value.
    pub fn with_estimated_velocities(&self) -> Result<Self, So3Error> {
        let n = self.samples.len();
        let mut samples = self.samples.clone();
        for k in 0..n - 1 {
            let a = &self.samples[k];
            let b = &self.samples[k + 1];
            samples[k].omega = Some(log_rel(&a.rotation, &b.rotation)? / (b.t - a.t));
        }
        samples[n - 1].omega = samples[n - 2].omega;
        Ok(Self { samples })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationSet {
    demos: Vec<Demonstration>,
    goal: Rotation,
}

impl DemonstrationSet {
    /// Validates goal proximity and distance monotonicity. When `goal` is
    /// `None` the Karcher mean of the final frames is used.
    pub fn new(
        demos: Vec<Demonstration>,
        goal: Option<Rotation>,
        cfg: &ValidationConfig,
    ) -> Result<Self, DatasetError> {
        if demos.is_empty() {
            return Err(DatasetError::Domain("a demonstration set needs at least one demo".into()));
        }
        let goal = match goal {
            Some(g) => g,
            None => {
                let finals: Vec<Rotation> = demos.iter().map(|d| d.last().rotation).collect();
                karcher_mean(&finals)?
            }
        };
        for (n, demo) in demos.iter().enumerate() {
            check_distances(n, demo, &goal, cfg.monotone_slack)?;
            let end = so3::distance(&demo.last().rotation, &goal);
            if end > cfg.goal_tolerance {
                return Err(DatasetError::InvariantViolation {
                    demo: n,
                    sample: demo.samples.len() - 1,
                    reason: format!(
                        "final frame is {end:.4} rad from the goal (tolerance {})",
                        cfg.goal_tolerance
                    ),
                });
            }
        }
        Ok(Self { demos, goal })
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn goal(&self) -> &Rotation {
        &self.goal
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    /// Fills missing angular velocities by finite differences.
    pub fn with_velocities(&self) -> Result<Self, So3Error> {
        let demos = self
            .demos
            .iter()
            .map(|d| {
                if d.has_velocities() {
                    Ok(d.clone())
                } else {
                    d.with_estimated_velocities()
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { demos, goal: self.goal })
    }

    /// Rotation whose goal-frame tangent vector is the mean of the demos'
    /// initial tangent vectors.
    pub fn mean_start(&self) -> Result<Rotation, So3Error> {
        let mut acc = so3::TangentVector::zeros();
        for d in &self.demos {
            acc += log_rel(&d.first().rotation, &self.goal)?;
        }
        acc /= self.demos.len() as f64;
        // log_rel(R, g) = m  <=>  R = g · Exp(-m)
        Ok(&self.goal * &exp_map(&(-acc)))
    }

    pub fn from_json_str(text: &str, cfg: &ValidationConfig) -> Result<Self, DatasetError> {
        let file: DemoFile = serde_json::from_str(text).map_err(|e| DatasetError::Parse(e.to_string()))?;
        file.into_set(cfg)
    }

    pub fn to_file(&self, include_goal: bool) -> DemoFile {
        DemoFile {
            goal: include_goal.then(|| self.goal.to_quaternion_wxyz()),
            demos: self
                .demos
                .iter()
                .map(|d| DemoRecord {
                    t: d.samples.iter().map(|s| s.t).collect(),
                    q: d.samples.iter().map(|s| s.rotation.to_quaternion_wxyz()).collect(),
                    omega: d
                        .has_velocities()
                        .then(|| d.samples.iter().map(|s| s.omega.unwrap().into()).collect()),
                })
                .collect(),
        }
    }
}

fn check_distances(demo: usize, d: &Demonstration, goal: &Rotation, slack: f64) -> Result<(), DatasetError> {
    let mut prev = f64::INFINITY;
    for (k, s) in d.samples.iter().enumerate() {
        let dist = so3::distance(&s.rotation, goal);
        if dist >= std::f64::consts::PI - so3::ANTIPODAL_MARGIN {
            return Err(DatasetError::InvariantViolation {
                demo,
                sample: k,
                reason: format!("frame is {dist} rad from the goal, too close to π"),
            });
        }
        if dist > prev + slack {
            return Err(DatasetError::NonMonotoneDistance {
                demo,
                sample: k,
                from: prev,
                to: dist,
            });
        }
        prev = dist;
    }
    Ok(())
}

/// Reads a demonstration file.
pub fn load(path: &Path, format: DatasetFormat, cfg: &ValidationConfig) -> Result<DemonstrationSet, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        DatasetFormat::Json => DemonstrationSet::from_json_str(&text, cfg),
    }
}

/// On-disk demonstration document. Quaternions are `(w, x, y, z)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<[f64; 4]>,
    pub demos: Vec<DemoRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoRecord {
    pub t: Vec<f64>,
    pub q: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<Vec<[f64; 3]>>,
}

impl DemoFile {
    pub fn into_set(self, cfg: &ValidationConfig) -> Result<DemonstrationSet, DatasetError> {
        let goal = self.goal.map(Rotation::from_quaternion_wxyz).transpose()?;
        let mut demos = Vec::with_capacity(self.demos.len());
        for (n, rec) in self.demos.into_iter().enumerate() {
            if rec.q.len() != rec.t.len() {
                return Err(DatasetError::Parse(format!(
                    "demo {n}: {} timestamps but {} quaternions",
                    rec.t.len(),
                    rec.q.len()
                )));
            }
            if let Some(w) = &rec.omega {
                if w.len() != rec.t.len() {
                    return Err(DatasetError::Parse(format!(
                        "demo {n}: {} timestamps but {} angular velocities",
                        rec.t.len(),
                        w.len()
                    )));
                }
            }
            let mut samples = Vec::with_capacity(rec.t.len());
            for (k, (&t, q)) in rec.t.iter().zip(&rec.q).enumerate() {
                let rotation = Rotation::from_quaternion_wxyz(*q).map_err(|e| DatasetError::InvariantViolation {
                    demo: n,
                    sample: k,
                    reason: e.to_string(),
                })?;
                let omega = rec.omega.as_ref().map(|w| AngularVelocity::from(w[k]));
                samples.push(Sample { t, rotation, omega });
            }
            demos.push(Demonstration::validated(n, samples)?);
        }
        DemonstrationSet::new(demos, goal, cfg)
    }
}

/// Demonstrations resampled on a uniform distance-to-goal grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampledSet {
    grid: Vec<f64>,
    /// `frames[i][n]`: demo `n` at distance `grid[i]`.
    frames: Vec<Vec<Rotation>>,
    goal: Rotation,
}

impl ResampledSet {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn frames(&self) -> &[Vec<Rotation>] {
        &self.frames
    }

    pub fn goal(&self) -> &Rotation {
        &self.goal
    }

    /// Largest grid distance (`D_min`).
    pub fn max_distance(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn demo_count(&self) -> usize {
        self.frames[0].len()
    }

    /// Reinterprets each column as a demonstration ordered from far to near.
    pub fn to_demonstration_set(&self) -> Result<DemonstrationSet, DatasetError> {
        let m = self.grid.len();
        let demos = (0..self.demo_count())
            .map(|n| {
                let samples = (0..m)
                    .map(|k| Sample {
                        t: k as f64,
                        rotation: self.frames[m - 1 - k][n],
                        omega: None,
                    })
                    .collect();
                Demonstration::new(samples)
            })
            .collect::<Result<Vec<_>, _>>()?;
        DemonstrationSet::new(demos, Some(self.goal), &ValidationConfig::default())
    }
}

/// Resamples every demo at distances `D_min · i / M`, `i = 0..=M`, where
/// `D_min` is the smallest initial distance to the goal. Each demo is
/// extended by the geodesic from its last frame to the goal so the grid's
/// zero row always has a bracket.
pub fn resample_by_distance(set: &DemonstrationSet, m: usize) -> Result<ResampledSet, DatasetError> {
    if m < 2 {
        return Err(DatasetError::Domain(format!("resampling needs M >= 2, got {m}")));
    }
    let goal = *set.goal();
    let slack = ValidationConfig::default().monotone_slack;
    let d_min = set
        .demos()
        .iter()
        .map(|d| so3::distance(&d.first().rotation, &goal))
        .fold(f64::INFINITY, f64::min);
    let grid: Vec<f64> = (0..=m).map(|i| d_min / m as f64 * i as f64).collect();

    let mut frames = vec![Vec::with_capacity(set.len()); m + 1];
    for (n, demo) in set.demos().iter().enumerate() {
        check_distances(n, demo, &goal, slack)?;
        let mut path: Vec<Rotation> = demo.samples().iter().map(|s| s.rotation).collect();
        path.push(goal);
        let dist: Vec<f64> = path.iter().map(|r| so3::distance(r, &goal)).collect();
        for (i, &target) in grid.iter().enumerate() {
            frames[i].push(locate(n, &path, &dist, &goal, target)?);
        }
    }
    Ok(ResampledSet { grid, frames, goal })
}

fn locate(demo: usize, path: &[Rotation], dist: &[f64], goal: &Rotation, target: f64) -> Result<Rotation, DatasetError> {
    if dist[0] + HIT_TOL < target {
        return Err(DatasetError::BracketNotFound { demo, distance: target });
    }
    // first sample at or below the target; its predecessor is above it
    let k1 = dist
        .iter()
        .position(|&d| d <= target + HIT_TOL)
        .ok_or(DatasetError::BracketNotFound { demo, distance: target })?;
    if (dist[k1] - target).abs() <= HIT_TOL || k1 == 0 {
        return Ok(path[k1]);
    }
    let (a, b) = (&path[k1 - 1], &path[k1]);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut best = *b;
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        let r = slerp(a, b, mid)?;
        let g = so3::distance(&r, goal) - target;
        best = r;
        if g.abs() <= HIT_TOL {
            break;
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}
