//! Locally weighted regression of a scalar input onto three outputs.
//!
//! `J` Gaussian kernels are placed uniformly over the training range, each
//! carrying a local polynomial in the normalized offset `(d - c_j) / σ_j`.
//! Predictions blend the local polynomials with normalized kernel weights.
//! Inputs outside the training range are clamped to it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::LearnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LwrConfig {
    pub degree: usize,
    pub kernels: usize,
    /// Bandwidth as a multiple of the center spacing.
    pub overlap: f64,
}

impl Default for LwrConfig {
    fn default() -> Self {
        Self {
            degree: 5,
            kernels: 10,
            overlap: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LwrModel {
    pub degree: usize,
    pub centers: Vec<f64>,
    pub bandwidths: Vec<f64>,
    /// `coefficients[j][o]`: polynomial coefficients (ascending powers) of
    /// kernel `j` for output `o`.
    pub coefficients: Vec<[Vec<f64>; 3]>,
    /// Training input range; queries are clamped into it.
    pub domain: [f64; 2],
}

impl LwrModel {
    pub fn fit(inputs: &[f64], targets: &[[f64; 3]], cfg: &LwrConfig) -> Result<Self, LearnError> {
        if cfg.kernels == 0 || !(cfg.overlap > 0.0) {
            return Err(LearnError::InvalidModel("LWR needs at least one kernel and a positive overlap".into()));
        }
        if inputs.len() != targets.len() || inputs.len() < cfg.degree + 1 {
            return Err(LearnError::InsufficientData {
                needed: cfg.degree + 1,
                got: inputs.len().min(targets.len()),
            });
        }
        let lo = inputs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = inputs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(LearnError::InvalidModel("LWR inputs span an empty range".into()));
        }
        let j = cfg.kernels;
        let (centers, spacing) = if j == 1 {
            (vec![0.5 * (lo + hi)], hi - lo)
        } else {
            let step = (hi - lo) / (j - 1) as f64;
            ((0..j).map(|i| lo + step * i as f64).collect(), step)
        };
        let sigma = spacing * cfg.overlap;
        let bandwidths = vec![sigma; j];

        let p = cfg.degree + 1;
        let mut coefficients = Vec::with_capacity(j);
        for &c in &centers {
            // weighted least squares via SVD of √W Z
            let mut z = DMatrix::zeros(inputs.len(), p);
            let mut rhs = DMatrix::zeros(inputs.len(), 3);
            for (row, (&x, y)) in inputs.iter().zip(targets).enumerate() {
                let u = (x - c) / sigma;
                let sw = (-0.25 * u * u).exp();
                let mut pow = sw;
                for col in 0..p {
                    z[(row, col)] = pow;
                    pow *= u;
                }
                for o in 0..3 {
                    rhs[(row, o)] = sw * y[o];
                }
            }
            let svd = z.svd(true, true);
            let sol = svd
                .solve(&rhs, 1e-12)
                .map_err(|e| LearnError::InvalidModel(format!("LWR solve failed: {e}")))?;
            coefficients.push(std::array::from_fn(|o| sol.column(o).iter().cloned().collect()));
        }
        Ok(Self {
            degree: cfg.degree,
            centers,
            bandwidths,
            coefficients,
            domain: [lo, hi],
        })
    }

    pub fn clamp_input(&self, d: f64) -> f64 {
        d.clamp(self.domain[0], self.domain[1])
    }

    /// True when `d` lies strictly inside the training range.
    pub fn in_domain(&self, d: f64) -> bool {
        d > self.domain[0] && d < self.domain[1]
    }

    pub fn predict(&self, d: f64) -> [f64; 3] {
        self.evaluate(self.clamp_input(d)).0
    }

    /// Analytic slope of the prediction; zero outside the training range.
    pub fn derivative(&self, d: f64) -> [f64; 3] {
        if !self.in_domain(d) {
            return [0.0; 3];
        }
        self.evaluate(d).1
    }

    fn evaluate(&self, d: f64) -> ([f64; 3], [f64; 3]) {
        let mut wsum = 0.0;
        let mut dwsum = 0.0;
        let mut num = [0.0; 3];
        let mut dnum = [0.0; 3];
        for ((c, s), coef) in self.centers.iter().zip(&self.bandwidths).zip(&self.coefficients) {
            let u = (d - c) / s;
            let w = (-0.5 * u * u).exp();
            let dw = -u / s * w;
            wsum += w;
            dwsum += dw;
            for o in 0..3 {
                let (val, slope) = horner(&coef[o], u);
                num[o] += w * val;
                dnum[o] += dw * val + w * slope / s;
            }
        }
        let mut value = [0.0; 3];
        let mut slope = [0.0; 3];
        for o in 0..3 {
            value[o] = num[o] / wsum;
            slope[o] = (dnum[o] - value[o] * dwsum) / wsum;
        }
        (value, slope)
    }
}

/// Polynomial value and derivative at `u`.
fn horner(coef: &[f64], u: f64) -> (f64, f64) {
    let mut v = 0.0;
    let mut dv = 0.0;
    for &c in coef.iter().rev() {
        dv = dv * u + v;
        v = v * u + c;
    }
    (v, dv)
}
