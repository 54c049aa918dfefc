//! Time-varying conic constraints: cone axes follow the reference frame,
//! cone half-angles come from demonstration spread via a distance-indexed
//! regression.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::ResampledSet;
use crate::lwr::{LwrConfig, LwrModel};
use crate::so3::{angle_between, distance, exp_map, log_rel, AngularVelocity, Rotation};
use crate::LearnError;

/// Default lower bound on every cone half-angle (rad).
pub const DEFAULT_ANGLE_FLOOR: f64 = 0.01;
/// Cone half-angles stay strictly below a right angle.
pub const ANGLE_CEILING: f64 = FRAC_PI_2 - 1e-6;

/// Per-row spread angles extracted from a resampled set, before regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeSamples {
    pub distances: Vec<f64>,
    pub angles: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeFitReport {
    pub rows: usize,
    /// Root-mean-square training residual over all rows and axes (rad).
    pub rmse: f64,
    pub max_abs_residual: f64,
}

/// Spread angles for one row of same-distance tangent vectors.
///
/// The tangent covariance (population normalization) is decomposed, each
/// unit eigenvector is scaled by the square root of its eigenvalue, and both
/// signed perturbations `m ± v_j` are mapped through `Exp`. For each world
/// axis the largest angle between `Exp(m) e_a` and `Exp(m ± v_j) e_a` wins.
pub fn row_cone_angles(tangents: &[Vector3<f64>]) -> Result<[f64; 3], LearnError> {
    if tangents.len() < 2 {
        return Err(LearnError::InsufficientData {
            needed: 2,
            got: tangents.len(),
        });
    }
    if tangents.iter().any(|x| !x.iter().all(|c| c.is_finite())) {
        return Err(LearnError::EigenFailure("non-finite tangent vector".into()));
    }
    let n = tangents.len() as f64;
    let mean = tangents.iter().fold(Vector3::zeros(), |acc, x| acc + x) / n;
    let mut cov = Matrix3::zeros();
    for x in tangents {
        let d = x - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let (values, vectors) = psd_eigen(cov)?;

    let r_m = exp_map(&mean);
    let mut angles = [0.0f64; 3];
    for j in 0..3 {
        let v = vectors.column(j) * values[j].sqrt();
        for p in [mean + v, mean - v] {
            let r_j = exp_map(&p);
            for (a, angle) in angles.iter_mut().enumerate() {
                let t = angle_between(&r_m.axis(a), &r_j.axis(a));
                if t > *angle {
                    *angle = t;
                }
            }
        }
    }
    Ok(angles)
}

fn psd_eigen(cov: Matrix3<f64>) -> Result<(Vector3<f64>, Matrix3<f64>), LearnError> {
    let sym = (cov + cov.transpose()) * 0.5;
    let tol = 1e-10 * sym.trace().abs().max(1e-300);
    let mut eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.min() < -tol {
        eig = SymmetricEigen::new(sym + Matrix3::identity() * 1e-12);
        if eig.eigenvalues.min() < -tol {
            return Err(LearnError::EigenFailure(format!(
                "covariance has eigenvalue {:.3e}",
                eig.eigenvalues.min()
            )));
        }
    }
    if !eig.eigenvalues.iter().all(|v| v.is_finite()) {
        return Err(LearnError::EigenFailure("non-finite eigenvalues".into()));
    }
    Ok((eig.eigenvalues.map(|v| v.max(0.0)), eig.eigenvectors))
}

/// Spread angles for every grid row of a resampled set.
pub fn cone_angle_samples(resampled: &ResampledSet) -> Result<ConeSamples, LearnError> {
    if resampled.demo_count() < 2 {
        return Err(LearnError::InsufficientData {
            needed: 2,
            got: resampled.demo_count(),
        });
    }
    let goal = resampled.goal();
    let mut angles = Vec::with_capacity(resampled.grid().len());
    for row in resampled.frames() {
        let tangents = row
            .iter()
            .map(|r| log_rel(r, goal))
            .collect::<Result<Vec<_>, _>>()?;
        angles.push(row_cone_angles(&tangents)?);
    }
    Ok(ConeSamples {
        distances: resampled.grid().to_vec(),
        angles,
    })
}

/// Runs the spread extraction and fits the distance-to-angle regression.
pub fn learn_cone_angles(
    resampled: &ResampledSet,
    cfg: &LwrConfig,
) -> Result<(LwrModel, ConeSamples, ConeFitReport), LearnError> {
    let samples = cone_angle_samples(resampled)?;
    let model = LwrModel::fit(&samples.distances, &samples.angles, cfg)?;
    let mut sq = 0.0;
    let mut worst = 0.0f64;
    for (d, target) in samples.distances.iter().zip(&samples.angles) {
        let p = model.predict(*d);
        for a in 0..3 {
            let r = p[a] - target[a];
            sq += r * r;
            worst = worst.max(r.abs());
        }
    }
    let report = ConeFitReport {
        rows: samples.distances.len(),
        rmse: (sq / (3 * samples.distances.len()) as f64).sqrt(),
        max_abs_residual: worst,
    };
    Ok((model, samples, report))
}

/// Cones about the axes of a reference frame with distance-dependent angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeVaryingCones {
    pub angle_model: LwrModel,
    pub angle_floor: f64,
    pub goal: Rotation,
}

impl TimeVaryingCones {
    pub fn new(angle_model: LwrModel, angle_floor: f64, goal: Rotation) -> Result<Self, LearnError> {
        if !(angle_floor > 0.0 && angle_floor < ANGLE_CEILING) {
            return Err(LearnError::InvalidModel(format!("angle floor {angle_floor} outside (0, pi/2)")));
        }
        Ok(Self {
            angle_model,
            angle_floor,
            goal,
        })
    }

    /// Cone axes `R_ref e_i`, i.e. the columns of the reference frame.
    pub fn axes(&self, r_ref: &Rotation) -> [Vector3<f64>; 3] {
        [r_ref.axis(0), r_ref.axis(1), r_ref.axis(2)]
    }

    fn raw_angles_at(&self, d: f64) -> [f64; 3] {
        self.angle_model.predict(d)
    }

    fn clamp(&self, raw: f64) -> f64 {
        raw.clamp(self.angle_floor, ANGLE_CEILING)
    }

    pub fn angles(&self, r_ref: &Rotation) -> [f64; 3] {
        let raw = self.raw_angles_at(distance(r_ref, &self.goal));
        raw.map(|a| self.clamp(a))
    }

    /// Time derivative of [`Self::angles`] along `Ṙ_ref = R_ref [w_ref]×`.
    ///
    /// The distance rate is a central difference over one step `dt` of the
    /// reference flow; the regression slope is analytic. Axes whose angle is
    /// clamped report zero.
    pub fn angle_rates(&self, r_ref: &Rotation, w_ref: &AngularVelocity, dt: f64) -> [f64; 3] {
        if w_ref.iter().all(|c| *c == 0.0) {
            return [0.0; 3];
        }
        let d = distance(r_ref, &self.goal);
        let ahead = distance(&(r_ref * &exp_map(&(w_ref * dt))), &self.goal);
        let behind = distance(&(r_ref * &exp_map(&(w_ref * -dt))), &self.goal);
        let d_rate = (ahead - behind) / (2.0 * dt);
        let raw = self.raw_angles_at(d);
        let slope = self.angle_model.derivative(d);
        let mut out = [0.0; 3];
        for i in 0..3 {
            if raw[i] > self.angle_floor && raw[i] < ANGLE_CEILING {
                out[i] = slope[i] * d_rate;
            }
        }
        out
    }

    /// `h_i = (R_exc e_i)·(R_ref e_i) − cos θ_i`.
    pub fn constraint_values(&self, r_exc: &Rotation, r_ref: &Rotation) -> [f64; 3] {
        let theta = self.angles(r_ref);
        constraint_values_with(r_exc, r_ref, &theta)
    }
}

pub(crate) fn constraint_values_with(r_exc: &Rotation, r_ref: &Rotation, theta: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| r_exc.axis(i).dot(&r_ref.axis(i)) - theta[i].cos())
}
