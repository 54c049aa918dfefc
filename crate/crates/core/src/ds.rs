//! Stable rotational dynamical system `ω = Σ_k γ_k(ξ) A_k ξ`, `ξ = Log(Rᵀ R_g)`.
//!
//! Every `A_k` is symmetric with eigenvalues at least [`EIGEN_FLOOR`], so the
//! mixed matrix `Σ γ_k A_k` is positive definite everywhere and the trace
//! Lyapunov function `V(R) = tr(I - Rᵀ R_g)` strictly decreases away from the
//! goal.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::dataset::DemonstrationSet;
use crate::gmm::GmmModel;
use crate::so3::{log_rel, AngularVelocity, Rotation, So3Error, TangentVector};
use crate::LearnError;

/// Minimum eigenvalue of every system matrix, 1/s.
pub const EIGEN_FLOOR: f64 = 1e-3;

/// Relative weight of the penalty pulling each `A_k` toward the pooled
/// single-matrix fit. Components that see little data in some direction
/// inherit the pooled gain there instead of collapsing onto the floor.
pub const SHRINKAGE: f64 = 0.05;
const SYMMETRY_TOL: f64 = 1e-10;
const REL_IMPROVEMENT_TOL: f64 = 1e-10;
const MAX_ITERS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct RotationDs {
    gmm: GmmModel,
    matrices: Vec<Matrix3<f64>>,
    goal: Rotation,
}

impl RotationDs {
    pub fn new(gmm: GmmModel, matrices: Vec<Matrix3<f64>>, goal: Rotation) -> Result<Self, LearnError> {
        if matrices.len() != gmm.len() {
            return Err(LearnError::InvalidModel(format!(
                "{} system matrices for {} mixture components",
                matrices.len(),
                gmm.len()
            )));
        }
        for (k, a) in matrices.iter().enumerate() {
            if (a - a.transpose()).norm() >= SYMMETRY_TOL {
                return Err(LearnError::InvalidModel(format!("A_{k} is not symmetric")));
            }
            let min = SymmetricEigen::new(*a).eigenvalues.min();
            if min < EIGEN_FLOOR * (1.0 - 1e-9) {
                return Err(LearnError::InvalidModel(format!(
                    "A_{k} has eigenvalue {min:e} below {EIGEN_FLOOR:e}"
                )));
            }
        }
        Ok(Self { gmm, matrices, goal })
    }

    pub fn gmm(&self) -> &GmmModel {
        &self.gmm
    }

    pub fn matrices(&self) -> &[Matrix3<f64>] {
        &self.matrices
    }

    pub fn goal(&self) -> &Rotation {
        &self.goal
    }

    /// Tangent coordinates of `r` at the goal.
    pub fn tangent(&self, r: &Rotation) -> Result<TangentVector, So3Error> {
        if r == &self.goal {
            return Ok(TangentVector::zeros());
        }
        log_rel(r, &self.goal)
    }

    /// The vector field in tangent coordinates.
    pub fn evaluate_tangent(&self, xi: &TangentVector) -> AngularVelocity {
        if xi == &TangentVector::zeros() {
            return AngularVelocity::zeros();
        }
        let mut gamma = [0.0; 32];
        let k = self.matrices.len();
        let mixed = if k <= gamma.len() {
            self.gmm.posteriors_into(xi, &mut gamma[..k]);
            mix(&self.matrices, &gamma[..k])
        } else {
            mix(&self.matrices, &self.gmm.posteriors(xi))
        };
        mixed * xi
    }

    pub fn evaluate(&self, r: &Rotation) -> Result<AngularVelocity, So3Error> {
        Ok(self.evaluate_tangent(&self.tangent(r)?))
    }

    /// `V(R) = tr(I - Rᵀ R_g)`, in `[0, 4]`.
    pub fn lyapunov_value(&self, r: &Rotation) -> f64 {
        3.0 - (r.matrix().transpose() * self.goal.matrix()).trace()
    }

    /// `V̇ = -ωᵀ (E - Eᵀ)^∨` with `E = Rᵀ R_g` and `ω` the DS output.
    pub fn lyapunov_rate(&self, r: &Rotation) -> Result<f64, So3Error> {
        let omega = self.evaluate(r)?;
        let e = r.matrix().transpose() * self.goal.matrix();
        let skew = Vector3::new(e[(2, 1)] - e[(1, 2)], e[(0, 2)] - e[(2, 0)], e[(1, 0)] - e[(0, 1)]);
        Ok(-omega.dot(&skew))
    }
}

fn mix(matrices: &[Matrix3<f64>], gamma: &[f64]) -> Matrix3<f64> {
    matrices.iter().zip(gamma).fold(Matrix3::zeros(), |acc, (a, g)| acc + a * *g)
}

/// Diagnostics of the system-matrix regression.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatrixFitReport {
    pub samples: usize,
    /// Root-mean-square velocity residual of the mixture fit, rad/s.
    pub rms_residual: f64,
    /// Same for the single shared matrix (the K = 1 nested model).
    pub single_matrix_rms_residual: f64,
    pub iterations: usize,
}

/// Least-squares fit of the `A_k` subject to symmetry and the eigenvalue
/// floor, by accelerated projected gradient. The single-matrix problem is
/// solved first and used as the starting point for every component, so the
/// mixture residual never exceeds the single-matrix residual.
pub fn fit_system_matrices(set: &DemonstrationSet, gmm: &GmmModel) -> Result<(RotationDs, MatrixFitReport), LearnError> {
    let set = set.with_velocities()?;
    let goal = *set.goal();
    let mut xis = Vec::new();
    let mut omegas = Vec::new();
    for d in set.demos() {
        for s in d.samples() {
            xis.push(log_rel(&s.rotation, &goal)?);
            omegas.push(s.omega.expect("velocities filled"));
        }
    }
    let k = gmm.len();
    if xis.len() < 10 * k {
        return Err(LearnError::InsufficientData {
            needed: 10 * k,
            got: xis.len(),
        });
    }

    let ones = vec![vec![1.0]; xis.len()];
    let single = NormalEquations::build(&xis, &omegas, &ones, 1);
    let scalar = initial_scalar(&xis, &omegas);
    let (single_params, _) = single.solve(vec![Matrix3::identity() * scalar]);
    let single_obj = single.objective(&pack(&single_params));

    let gammas: Vec<Vec<f64>> = xis.iter().map(|x| gmm.posteriors(x)).collect();
    let mixture = NormalEquations::build(&xis, &omegas, &gammas, k);
    let pooled = vec![single_params[0]; k];
    let (matrices, iterations) = mixture.shrunk_toward(&pack(&pooled), SHRINKAGE).solve(pooled);
    let obj = mixture.objective(&pack(&matrices));

    let n = xis.len() as f64;
    let report = MatrixFitReport {
        samples: xis.len(),
        rms_residual: (obj.max(0.0) / n).sqrt(),
        single_matrix_rms_residual: (single_obj.max(0.0) / n).sqrt(),
        iterations,
    };
    Ok((RotationDs::new(gmm.clone(), matrices, goal)?, report))
}

/// Best scalar gain `c` for `ω ≈ c ξ`, floored.
fn initial_scalar(xis: &[Vector3<f64>], omegas: &[Vector3<f64>]) -> f64 {
    let num: f64 = xis.iter().zip(omegas).map(|(x, w)| x.dot(w)).sum();
    let den: f64 = xis.iter().map(|x| x.norm_squared()).sum();
    if den > 0.0 {
        (num / den).max(EIGEN_FLOOR)
    } else {
        EIGEN_FLOOR
    }
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Six coordinates per symmetric matrix, scaled so the Euclidean norm of the
/// vector equals the Frobenius norm of the matrix.
fn pack(ms: &[Matrix3<f64>]) -> DVector<f64> {
    let mut v = DVector::zeros(6 * ms.len());
    for (k, a) in ms.iter().enumerate() {
        let o = 6 * k;
        v[o] = a[(0, 0)];
        v[o + 1] = a[(1, 1)];
        v[o + 2] = a[(2, 2)];
        v[o + 3] = SQRT2 * a[(0, 1)];
        v[o + 4] = SQRT2 * a[(0, 2)];
        v[o + 5] = SQRT2 * a[(1, 2)];
    }
    v
}

fn unpack(v: &DVector<f64>) -> Vec<Matrix3<f64>> {
    (0..v.len() / 6)
        .map(|k| {
            let o = 6 * k;
            let (a01, a02, a12) = (v[o + 3] / SQRT2, v[o + 4] / SQRT2, v[o + 5] / SQRT2);
            Matrix3::new(v[o], a01, a02, a01, v[o + 1], a12, a02, a12, v[o + 2])
        })
        .collect()
}

/// Symmetrize and clamp eigenvalues from below.
fn project(a: &Matrix3<f64>) -> Matrix3<f64> {
    let mut eig = SymmetricEigen::new(0.5 * (a + a.transpose()));
    eig.eigenvalues.apply(|l| *l = l.max(EIGEN_FLOOR));
    let r = eig.recompose();
    0.5 * (r + r.transpose())
}

/// `f(p) = pᵀ H p - 2 gᵀ p + c`
struct NormalEquations {
    h: DMatrix<f64>,
    g: DVector<f64>,
    c: f64,
}

impl NormalEquations {
    fn build(xis: &[Vector3<f64>], omegas: &[Vector3<f64>], gammas: &[Vec<f64>], k: usize) -> Self {
        let dim = 6 * k;
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        let mut c = 0.0;
        let mut jac = DMatrix::zeros(3, dim);
        for ((x, w), gamma) in xis.iter().zip(omegas).zip(gammas) {
            jac.fill(0.0);
            for (j, &gk) in gamma.iter().enumerate() {
                let o = 6 * j;
                let s = gk / SQRT2;
                jac[(0, o)] = gk * x[0];
                jac[(1, o + 1)] = gk * x[1];
                jac[(2, o + 2)] = gk * x[2];
                // a01
                jac[(0, o + 3)] = s * x[1];
                jac[(1, o + 3)] = s * x[0];
                // a02
                jac[(0, o + 4)] = s * x[2];
                jac[(2, o + 4)] = s * x[0];
                // a12
                jac[(1, o + 5)] = s * x[2];
                jac[(2, o + 5)] = s * x[1];
            }
            h.gemm_tr(1.0, &jac, &jac, 1.0);
            g.gemv_tr(1.0, &jac, w, 1.0);
            c += w.norm_squared();
        }
        Self { h, g, c }
    }

    /// Adds `ρ ‖p − p̄‖²` with `ρ = weight · tr(H) / dim`. Since `p̄` is
    /// feasible and the penalty vanishes there, the data term of the
    /// minimizer never exceeds the data term at `p̄`.
    fn shrunk_toward(&self, target: &DVector<f64>, weight: f64) -> Self {
        let rho = weight * self.h.trace() / self.h.nrows() as f64;
        let mut h = self.h.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += rho;
        }
        Self {
            h,
            g: &self.g + target * rho,
            c: self.c + rho * target.norm_squared(),
        }
    }

    fn objective(&self, p: &DVector<f64>) -> f64 {
        p.dot(&(&self.h * p)) - 2.0 * self.g.dot(p) + self.c
    }

    fn step(&self, y: &DVector<f64>, inv_l: f64) -> DVector<f64> {
        let grad = 2.0 * (&self.h * y - &self.g);
        let ms = unpack(&(y - grad * inv_l));
        pack(&ms.iter().map(project).collect::<Vec<_>>())
    }

    /// Monotone FISTA with restarts.
    fn solve(&self, init: Vec<Matrix3<f64>>) -> (Vec<Matrix3<f64>>, usize) {
        let mut x = pack(&init.iter().map(project).collect::<Vec<_>>());
        let lip = 2.0 * SymmetricEigen::new(self.h.clone()).eigenvalues.max();
        if !(lip > 0.0) {
            return (unpack(&x), 0);
        }
        let inv_l = 1.0 / lip;
        let mut f = self.objective(&x);
        let mut y = x.clone();
        let mut t = 1.0_f64;
        let mut iters = 0;
        while iters < MAX_ITERS {
            iters += 1;
            let mut next = self.step(&y, inv_l);
            let mut f_next = self.objective(&next);
            if f_next > f {
                // momentum overshoot: restart from a plain projected step
                t = 1.0;
                next = self.step(&x, inv_l);
                f_next = self.objective(&next);
            }
            let improvement = f - f_next;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (&next - &x) * ((t - 1.0) / t_next);
            t = t_next;
            let done = improvement <= REL_IMPROVEMENT_TOL * f.abs().max(f64::MIN_POSITIVE);
            if f_next <= f {
                x = next;
                f = f_next;
            }
            if done {
                break;
            }
        }
        (unpack(&x), iters)
    }
}
