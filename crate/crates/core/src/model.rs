//! End-to-end learning and the serialized model bundle.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::cones::{learn_cone_angles, ConeFitReport, TimeVaryingCones, DEFAULT_ANGLE_FLOOR};
use crate::dataset::{resample_by_distance, DemonstrationSet};
use crate::ds::{fit_system_matrices, MatrixFitReport, RotationDs};
use crate::gmm::{fit_gmm, GmmModel, GmmParams};
use crate::lwr::{LwrConfig, LwrModel};
use crate::so3::{log_rel, Rotation};
use crate::{Error, LearnError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub components: usize,
    /// Rows of the distance grid minus one.
    pub grid_intervals: usize,
    pub lwr: LwrConfig,
    pub angle_floor: f64,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            components: 8,
            grid_intervals: 100,
            lwr: LwrConfig::default(),
            angle_floor: DEFAULT_ANGLE_FLOOR,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    pub requested_components: usize,
    pub components: usize,
    pub gmm_iterations: usize,
    pub gmm_converged: bool,
    pub matrices: MatrixFitReport,
    pub cones: ConeFitReport,
    pub max_distance: f64,
}

/// On-disk model: the DS, the cone-angle regression and the start frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub goal: Rotation,
    pub start: Rotation,
    pub gmm: GmmParams,
    #[serde(rename = "A")]
    pub a: Vec<[[f64; 3]; 3]>,
    pub cone_angles: LwrModel,
    pub angle_floor: f64,
    pub report: Option<LearnReport>,
}

/// A loaded model ready for simulation.
#[derive(Debug, Clone)]
pub struct Model {
    pub ds: Arc<RotationDs>,
    pub cones: Arc<TimeVaryingCones>,
    /// Tangent-space mean of the demonstrations' first frames.
    pub start: Rotation,
    pub report: Option<LearnReport>,
}

impl Model {
    pub fn goal(&self) -> &Rotation {
        self.ds.goal()
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            version: FORMAT_VERSION,
            goal: *self.ds.goal(),
            start: self.start,
            gmm: self.ds.gmm().to_params(),
            a: self
                .ds
                .matrices()
                .iter()
                .map(|m| std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])))
                .collect(),
            cone_angles: self.cones.angle_model.clone(),
            angle_floor: self.cones.angle_floor,
            report: self.report,
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self, LearnError> {
        if file.version != FORMAT_VERSION {
            return Err(LearnError::InvalidModel(format!("unsupported model version {}", file.version)));
        }
        let gmm = GmmModel::from_params(&file.gmm)?;
        let matrices = file
            .a
            .iter()
            .map(|rows| Matrix3::from_fn(|r, c| rows[r][c]))
            .collect();
        let ds = RotationDs::new(gmm, matrices, file.goal)?;
        let cones = TimeVaryingCones::new(file.cone_angles, file.angle_floor, file.goal)?;
        Ok(Self {
            ds: Arc::new(ds),
            cones: Arc::new(cones),
            start: file.start,
            report: file.report,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("model: {e}")))?;
        Ok(Self::from_file(file)?)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Fits the rotational DS and the cone-angle model to a demonstration set.
pub fn learn(set: &DemonstrationSet, cfg: &LearnConfig) -> Result<Model, LearnError> {
    if cfg.components == 0 {
        return Err(LearnError::InvalidModel("component count must be positive".into()));
    }
    let set = set.with_velocities()?;
    let goal = *set.goal();
    let mut tangents: Vec<Vector3<f64>> = Vec::new();
    for demo in set.demos() {
        for s in demo.samples() {
            tangents.push(log_rel(&s.rotation, &goal)?);
        }
    }
    let gmm = fit_gmm(&tangents, cfg.components, cfg.seed)?;
    if gmm.pruned > 0 {
        log::info!("pruned {} degenerate mixture components", gmm.pruned);
    }
    let (ds, matrices) = fit_system_matrices(&set, &gmm.model)?;
    let resampled = resample_by_distance(&set, cfg.grid_intervals)?;
    let (angle_model, _, cone_report) = learn_cone_angles(&resampled, &cfg.lwr)?;
    let cones = TimeVaryingCones::new(angle_model, cfg.angle_floor, goal)?;
    let report = LearnReport {
        requested_components: cfg.components,
        components: gmm.model.len(),
        gmm_iterations: gmm.iterations,
        gmm_converged: gmm.converged,
        matrices,
        cones: cone_report,
        max_distance: resampled.max_distance(),
    };
    Ok(Model {
        ds: Arc::new(ds),
        cones: Arc::new(cones),
        start: set.mean_start()?,
        report: Some(report),
    })
}
