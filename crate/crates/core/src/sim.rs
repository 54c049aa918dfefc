//! Reference/executor rollout with perturbation injection and the safety
//! filter in the loop.

use std::io::Write;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cones::{constraint_values_with, TimeVaryingCones};
use crate::ds::RotationDs;
use crate::filter::{filter_step, FilterConfig};
use crate::so3::{angle_between, distance, exp_map, AngularVelocity, Rotation, So3Error};

/// Goal distance below which a rollout counts as converged (rad).
pub const CONVERGENCE_TOL: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: {0}")]
    Domain(String),
    #[error(transparent)]
    So3(#[from] So3Error),
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Rise / hold / fall pulse, each phase lasting `duration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationProfile {
    pub onset: f64,
    pub duration: f64,
    pub amplitude: [f64; 3],
}

impl Default for PerturbationProfile {
    fn default() -> Self {
        Self {
            onset: 1.5,
            duration: 0.5,
            amplitude: [0.0, 2.0, 0.0],
        }
    }
}

impl PerturbationProfile {
    pub fn none() -> Self {
        Self {
            amplitude: [0.0; 3],
            ..Self::default()
        }
    }
}

/// Quintic smoothstep `6x⁵ − 15x⁴ + 10x³` on `[0, 1]`, clamped outside.
pub fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

/// Perturbation angular velocity at time `t`.
pub fn smooth_step(t: f64, profile: &PerturbationProfile) -> AngularVelocity {
    let x = (t - profile.onset) / profile.duration;
    let s = if x <= 0.0 || x >= 3.0 {
        0.0
    } else if x < 1.0 {
        smoothstep(x)
    } else if x <= 2.0 {
        1.0
    } else {
        smoothstep(3.0 - x)
    };
    Vector3::from(profile.amplitude) * s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub initial_exc: Rotation,
    pub initial_ref: Rotation,
    pub perturbation: PerturbationProfile,
    pub filter_on: bool,
    pub speed_scale: f64,
    /// Filter gains; its `dt` is overridden by the simulation step.
    pub filter: FilterConfig,
}

impl SimConfig {
    pub fn new(initial: Rotation, duration: f64) -> Self {
        Self {
            dt: 0.003,
            duration,
            initial_exc: initial,
            initial_ref: initial,
            perturbation: PerturbationProfile::default(),
            filter_on: true,
            speed_scale: 1.0,
            filter: FilterConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimError::InvalidConfig(format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.speed_scale >= 0.0 && self.speed_scale.is_finite()) {
            return Err(SimError::InvalidConfig(format!("speed scale must be nonnegative, got {}", self.speed_scale)));
        }
        if !(self.perturbation.duration > 0.0) || !self.perturbation.amplitude.iter().all(|a| a.is_finite()) {
            return Err(SimError::InvalidConfig("perturbation needs a positive duration and finite amplitude".into()));
        }
        self.filter_config().validate().map_err(SimError::InvalidConfig)
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig { dt: self.dt, ..self.filter }
    }

    /// Number of records a full run produces.
    pub fn record_count(&self) -> usize {
        (self.duration / self.dt + 1e-9).floor() as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub tick: u64,
    pub t: f64,
    pub r_ref: Rotation,
    pub r_exc: Rotation,
    pub w_ref: [f64; 3],
    pub u0: [f64; 3],
    pub u_star: [f64; 3],
    pub h: [f64; 3],
    pub theta: [f64; 3],
    pub active: [bool; 3],
    pub feasible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub records: usize,
    pub nacv: f64,
    pub final_error: f64,
    pub final_ref_error: f64,
    pub converged: bool,
    pub min_h: f64,
    /// `max(0, −min h)`.
    pub max_violation: f64,
    pub infeasible_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub config: SimConfig,
    pub summary: SimSummary,
    pub records: Vec<SimRecord>,
}

/// Live simulator state, advanced one tick at a time.
#[derive(Debug, Clone)]
pub struct Simulator {
    ds: Arc<RotationDs>,
    cones: Arc<TimeVaryingCones>,
    cfg: SimConfig,
    tick: u64,
    r_ref: Rotation,
    r_exc: Rotation,
}

impl Simulator {
    pub fn new(cfg: SimConfig, ds: Arc<RotationDs>, cones: Arc<TimeVaryingCones>) -> Result<Self, SimError> {
        cfg.validate()?;
        Ok(Self {
            r_ref: cfg.initial_ref,
            r_exc: cfg.initial_exc,
            tick: 0,
            ds,
            cones,
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.cfg.dt
    }

    pub fn r_ref(&self) -> &Rotation {
        &self.r_ref
    }

    pub fn r_exc(&self) -> &Rotation {
        &self.r_exc
    }

    pub fn set_speed_scale(&mut self, s: f64) -> Result<(), SimError> {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(SimError::InvalidConfig(format!("speed scale must be nonnegative, got {s}")));
        }
        self.cfg.speed_scale = s;
        Ok(())
    }

    pub fn set_filter_on(&mut self, on: bool) {
        self.cfg.filter_on = on;
    }

    pub fn reset(&mut self) {
        self.tick = 0;
        self.r_ref = self.cfg.initial_ref;
        self.r_exc = self.cfg.initial_exc;
    }

    /// Computes the commands at the current state, records them and advances
    /// both frames by one step.
    pub fn step(&mut self, u_ext: &AngularVelocity) -> Result<SimRecord, SimError> {
        let record = self.observe(u_ext)?;
        let dt = self.cfg.dt;
        self.r_ref = &self.r_ref * &exp_map(&(Vector3::from(record.w_ref) * dt));
        self.r_exc = &self.r_exc * &exp_map(&(Vector3::from(record.u_star) * dt));
        self.tick += 1;
        Ok(record)
    }

    /// The record [`step`](Self::step) would produce, without advancing.
    pub fn observe(&self, u_ext: &AngularVelocity) -> Result<SimRecord, SimError> {
        let s = self.cfg.speed_scale;
        let w_ref = self.ds.evaluate(&self.r_ref)? * s;
        let w_exc = self.ds.evaluate(&self.r_exc)? * s;
        let u0 = w_exc + u_ext;
        let theta = self.cones.angles(&self.r_ref);
        let h = constraint_values_with(&self.r_exc, &self.r_ref, &theta);
        let (u_star, active, feasible) = if self.cfg.filter_on {
            let fcfg = self.cfg.filter_config();
            let sol = filter_step(&self.r_exc, &self.r_ref, &w_ref, &u0, &self.cones, &fcfg);
            if !sol.feasible {
                log::debug!("tick {}: safety QP infeasible, relaxation {:.3e}", self.tick, sol.relaxation);
            }
            let flags = sol.halfspace_active(3);
            (sol.u_star, [flags[0], flags[1], flags[2]], sol.feasible)
        } else {
            (u0, [false; 3], true)
        };
        Ok(SimRecord {
            tick: self.tick,
            t: self.time(),
            r_ref: self.r_ref,
            r_exc: self.r_exc,
            w_ref: w_ref.into(),
            u0: u0.into(),
            u_star: u_star.into(),
            h,
            theta,
            active,
            feasible,
        })
    }
}

/// Full rollout with the configured perturbation as the external input.
pub fn run(cfg: &SimConfig, ds: Arc<RotationDs>, cones: Arc<TimeVaryingCones>) -> Result<SimTrace, SimError> {
    let mut sim = Simulator::new(cfg.clone(), ds.clone(), cones)?;
    let n = cfg.record_count();
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let u_ext = smooth_step(sim.time(), &cfg.perturbation);
        records.push(sim.step(&u_ext)?);
    }
    let summary = summarize(&records, ds.goal())?;
    Ok(SimTrace {
        config: cfg.clone(),
        summary,
        records,
    })
}

pub fn summarize(records: &[SimRecord], goal: &Rotation) -> Result<SimSummary, SimError> {
    let last = records
        .last()
        .ok_or_else(|| SimError::Domain("empty trace".into()))?;
    let exc: Vec<Rotation> = records.iter().map(|r| r.r_exc).collect();
    let refs: Vec<Rotation> = records.iter().map(|r| r.r_ref).collect();
    let angles: Vec<[f64; 3]> = records.iter().map(|r| r.theta).collect();
    let min_h = records
        .iter()
        .flat_map(|r| r.h)
        .fold(f64::INFINITY, f64::min);
    let final_error = distance(&last.r_exc, goal);
    Ok(SimSummary {
        records: records.len(),
        nacv: nacv(&exc, &refs, &angles)?,
        final_error,
        final_ref_error: distance(&last.r_ref, goal),
        converged: final_error < CONVERGENCE_TOL,
        min_h,
        max_violation: (-min_h).max(0.0),
        infeasible_steps: records.iter().filter(|r| !r.feasible).count(),
    })
}

/// Normalized accumulated constraint violation.
///
/// `(1/3T) Σ_t Σ_i max(0, (φ_i − θ_i)/θ_i)` with `φ_i` the angle between the
/// i-th actual and reference axes.
pub fn nacv(actual: &[Rotation], reference: &[Rotation], angles: &[[f64; 3]]) -> Result<f64, SimError> {
    if actual.len() != reference.len() || actual.len() != angles.len() {
        return Err(SimError::Domain(format!(
            "{} actual, {} reference, {} angle rows",
            actual.len(),
            reference.len(),
            angles.len()
        )));
    }
    if actual.is_empty() {
        return Err(SimError::Domain("empty trace".into()));
    }
    let mut acc = 0.0;
    for ((a, r), th) in actual.iter().zip(reference).zip(angles) {
        for i in 0..3 {
            let phi = a.axis(i).dot(&r.axis(i)).clamp(-1.0, 1.0).acos();
            acc += ((phi - th[i]) / th[i]).max(0.0);
        }
    }
    Ok(acc / (3.0 * actual.len() as f64))
}

/// Angle between the i-th axes of two frames.
pub fn axis_angles(a: &Rotation, b: &Rotation) -> [f64; 3] {
    std::array::from_fn(|i| angle_between(&a.axis(i), &b.axis(i)))
}

pub const CSV_HEADER: [&str; 30] = [
    "t", "qref_w", "qref_x", "qref_y", "qref_z", "qexc_w", "qexc_x", "qexc_y", "qexc_z", "w_ref_x", "w_ref_y",
    "w_ref_z", "u0_x", "u0_y", "u0_z", "ustar_x", "ustar_y", "ustar_z", "h1", "h2", "h3", "th1", "th2", "th3",
    "active1", "active2", "active3", "feasible", "tick", "phi_max",
];

impl SimTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        let to_io = |e: csv::Error| SimError::Io(std::io::Error::other(e));
        w.write_record(CSV_HEADER).map_err(to_io)?;
        for r in &self.records {
            let mut row: Vec<String> = vec![r.t.to_string()];
            row.extend(r.r_ref.to_quaternion_wxyz().iter().map(f64::to_string));
            row.extend(r.r_exc.to_quaternion_wxyz().iter().map(f64::to_string));
            for v in [&r.w_ref, &r.u0, &r.u_star, &r.h, &r.theta] {
                row.extend(v.iter().map(f64::to_string));
            }
            row.extend(r.active.iter().map(|b| (*b as u8).to_string()));
            row.push((r.feasible as u8).to_string());
            row.push(r.tick.to_string());
            let phi = axis_angles(&r.r_exc, &r.r_ref);
            row.push(phi.iter().cloned().fold(0.0, f64::max).to_string());
            w.write_record(&row).map_err(to_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GmmModel;
    use crate::lwr::{LwrConfig, LwrModel};
    use nalgebra::Matrix3;

    fn models(angle: f64) -> (Arc<RotationDs>, Arc<TimeVaryingCones>) {
        let gmm = GmmModel::new(vec![1.0], vec![Vector3::zeros()], vec![Matrix3::identity()]).unwrap();
        let ds = RotationDs::new(gmm, vec![Matrix3::identity() * 1.5], Rotation::identity()).unwrap();
        let xs: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
        let ys = vec![[angle; 3]; xs.len()];
        let lwr = LwrModel::fit(&xs, &ys, &LwrConfig::default()).unwrap();
        let cones = TimeVaryingCones::new(lwr, 0.01, Rotation::identity()).unwrap();
        (Arc::new(ds), Arc::new(cones))
    }

    fn start() -> Rotation {
        exp_map(&Vector3::new(0.8, -0.4, 0.3))
    }

    #[test]
    fn smoothstep_shape() {
        let p = PerturbationProfile {
            onset: 1.0,
            duration: 0.5,
            amplitude: [0.0, 2.0, 0.0],
        };
        assert_eq!(smooth_step(0.5, &p), Vector3::zeros());
        assert!((smooth_step(1.25, &p).y - 1.0).abs() < 1e-15);
        assert_eq!(smooth_step(1.75, &p).y, 2.0);
        assert!((smooth_step(2.25, &p).y - 1.0).abs() < 1e-12);
        assert_eq!(smooth_step(2.6, &p), Vector3::zeros());
    }

    #[test]
    fn smoothstep_is_c1_at_seams() {
        let p = PerturbationProfile::default();
        let h = 1e-7;
        for seam in [1.5, 2.0, 2.5, 3.0] {
            let left = (smooth_step(seam, &p).y - smooth_step(seam - h, &p).y) / h;
            let right = (smooth_step(seam + h, &p).y - smooth_step(seam, &p).y) / h;
            assert!((left - right).abs() < 1e-6, "seam {seam}: {left} vs {right}");
        }
    }

    #[test]
    fn record_count_and_timestamps() {
        let (ds, cones) = models(0.2);
        let mut cfg = SimConfig::new(start(), 0.3);
        cfg.perturbation = PerturbationProfile::none();
        let trace = run(&cfg, ds, cones).unwrap();
        assert_eq!(trace.records.len(), 101);
        for (k, r) in trace.records.iter().enumerate() {
            assert_eq!(r.t, k as f64 * 0.003);
        }
    }

    #[test]
    fn nominal_rollout_is_unfiltered() {
        let (ds, cones) = models(0.2);
        let mut cfg = SimConfig::new(start(), 3.0);
        cfg.perturbation = PerturbationProfile::none();
        let trace = run(&cfg, ds, cones).unwrap();
        for r in &trace.records {
            assert_eq!(r.u0, r.u_star);
            assert!((r.r_exc.matrix() - r.r_ref.matrix()).norm() < 1e-9);
        }
        assert_eq!(trace.summary.nacv, 0.0);
    }

    #[test]
    fn zero_speed_freezes_frames() {
        let (ds, cones) = models(0.2);
        let mut cfg = SimConfig::new(start(), 0.3);
        cfg.speed_scale = 0.0;
        cfg.perturbation = PerturbationProfile::none();
        let trace = run(&cfg, ds, cones).unwrap();
        let last = trace.records.last().unwrap();
        assert_eq!(last.r_exc, start());
        assert_eq!(last.r_ref, start());
    }

    #[test]
    fn perturbation_violates_without_filter_and_not_with() {
        let (ds, cones) = models(0.1);
        let mut cfg = SimConfig::new(start(), 6.0);
        cfg.perturbation.onset = 0.3;
        cfg.filter_on = false;
        let off = run(&cfg, ds.clone(), cones.clone()).unwrap();
        assert!(off.summary.nacv > 0.0);
        assert!(off.summary.min_h < 0.0);
        cfg.filter_on = true;
        let on = run(&cfg, ds, cones).unwrap();
        assert_eq!(on.summary.nacv, 0.0);
        assert!(on.summary.min_h >= 0.0);
        assert!(on.summary.converged && off.summary.converged);
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let (ds, cones) = models(0.1);
        let mut cfg = SimConfig::new(start(), 2.0);
        cfg.perturbation.onset = 0.2;
        let a = run(&cfg, ds.clone(), cones.clone()).unwrap();
        let b = run(&cfg, ds, cones).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nacv_hand_values() {
        let id = Rotation::identity();
        assert_eq!(nacv(&[id], &[id], &[[0.1; 3]]).unwrap(), 0.0);
        let th = 0.1;
        let tilted = exp_map(&Vector3::new(2.0 * th, 0.0, 0.0));
        // axes 2 and 3 sit at 2θ from the reference, axis 1 is aligned
        let v = nacv(&[tilted], &[id], &[[th, th, 10.0]]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        // staying inside the cone contributes nothing
        let inside = exp_map(&Vector3::new(0.5 * th, 0.0, 0.0));
        assert_eq!(nacv(&[inside], &[id], &[[th; 3]]).unwrap(), 0.0);
        assert!(nacv(&[id, id], &[id], &[[th; 3]]).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (ds, cones) = models(0.1);
        let mut cfg = SimConfig::new(start(), 0.0);
        assert!(Simulator::new(cfg.clone(), ds.clone(), cones.clone()).is_err());
        cfg.duration = 1.0;
        cfg.speed_scale = -1.0;
        assert!(Simulator::new(cfg, ds, cones).is_err());
    }

    #[test]
    fn csv_has_fixed_header_and_one_row_per_record() {
        let (ds, cones) = models(0.2);
        let cfg = SimConfig::new(start(), 0.03);
        let trace = run(&cfg, ds, cones).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("t,qref_w,qref_x"));
        assert_eq!(lines.count(), trace.records.len());
        let back = SimTrace::from_json(&trace.to_json()).unwrap();
        assert_eq!(back.summary, trace.summary);
    }
}
