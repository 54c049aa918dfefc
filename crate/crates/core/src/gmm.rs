//! Gaussian mixture over tangent vectors, fitted by EM with k-means++ seeding.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::LearnError;

/// Minimum covariance eigenvalue.
pub const COVARIANCE_FLOOR: f64 = 1e-6;
const PRIOR_SUM_TOL: f64 = 1e-12;
const LL_TOL: f64 = 1e-8;
const LL_PATIENCE: usize = 3;
const MAX_ITERS: usize = 500;
const DEGENERATE_MASS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub priors: Vec<f64>,
    pub means: Vec<[f64; 3]>,
    pub covariances: Vec<[[f64; 3]; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
struct Component {
    prior: f64,
    mean: Vector3<f64>,
    covariance: Matrix3<f64>,
    precision: Matrix3<f64>,
    /// `ln π_k - ½ ln det(2π Σ_k)`
    log_scale: f64,
}

impl Component {
    fn new(prior: f64, mean: Vector3<f64>, covariance: Matrix3<f64>) -> Result<Self, LearnError> {
        let chol = covariance
            .cholesky()
            .ok_or_else(|| LearnError::InvalidModel("covariance is not positive definite".into()))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
        let log_scale = prior.ln() - 0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self {
            prior,
            mean,
            covariance,
            precision: chol.inverse(),
            log_scale,
        })
    }

    fn log_weighted_density(&self, x: &Vector3<f64>) -> f64 {
        let d = x - self.mean;
        self.log_scale - 0.5 * d.dot(&(self.precision * d))
    }
}

/// Mixture model; posteriors `γ_k(x)` are the mixing weights of the DS.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    components: Vec<Component>,
}

impl GmmModel {
    pub fn new(priors: Vec<f64>, means: Vec<Vector3<f64>>, covariances: Vec<Matrix3<f64>>) -> Result<Self, LearnError> {
        let k = priors.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(LearnError::InvalidModel("mixture parameter lists must be non-empty and equal length".into()));
        }
        if priors.iter().any(|p| !(*p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > PRIOR_SUM_TOL {
            return Err(LearnError::InvalidModel("priors must be nonnegative and sum to 1".into()));
        }
        let mut components = Vec::with_capacity(k);
        for ((p, m), c) in priors.into_iter().zip(means).zip(covariances) {
            if (c - c.transpose()).norm() > 1e-12 {
                return Err(LearnError::InvalidModel("covariance is not symmetric".into()));
            }
            let min_eig = SymmetricEigen::new(c).eigenvalues.min();
            if min_eig < COVARIANCE_FLOOR * (1.0 - 1e-9) {
                return Err(LearnError::InvalidModel(format!(
                    "covariance eigenvalue {min_eig:e} below floor {COVARIANCE_FLOOR:e}"
                )));
            }
            components.push(Component::new(p, m, c)?);
        }
        Ok(Self { components })
    }

    pub fn from_params(p: &GmmParams) -> Result<Self, LearnError> {
        Self::new(
            p.priors.clone(),
            p.means.iter().map(|m| Vector3::from(*m)).collect(),
            p.covariances.iter().map(|c| Matrix3::from_fn(|i, j| c[i][j])).collect(),
        )
    }

    pub fn to_params(&self) -> GmmParams {
        GmmParams {
            priors: self.components.iter().map(|c| c.prior).collect(),
            means: self.components.iter().map(|c| c.mean.into()).collect(),
            covariances: self
                .components
                .iter()
                .map(|c| std::array::from_fn(|i| std::array::from_fn(|j| c.covariance[(i, j)])))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn priors(&self) -> impl Iterator<Item = f64> + '_ {
        self.components.iter().map(|c| c.prior)
    }

    pub fn means(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.components.iter().map(|c| c.mean)
    }

    /// Posterior responsibilities `γ_k(x)`, written into `out` (length K).
    pub fn posteriors_into(&self, x: &Vector3<f64>, out: &mut [f64]) {
        let mut max = f64::NEG_INFINITY;
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.log_weighted_density(x);
            max = max.max(*o);
        }
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    pub fn posteriors(&self, x: &Vector3<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.components.len()];
        self.posteriors_into(x, &mut out);
        out
    }

    /// Mean log-likelihood per sample.
    pub fn mean_log_likelihood(&self, data: &[Vector3<f64>]) -> f64 {
        data.iter().map(|x| self.log_density(x)).sum::<f64>() / data.len() as f64
    }

    fn log_density(&self, x: &Vector3<f64>) -> f64 {
        let logs: Vec<f64> = self.components.iter().map(|c| c.log_weighted_density(x)).collect();
        log_sum_exp(&logs)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn floor_covariance(c: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = 0.5 * (c + c.transpose());
    let mut eig = SymmetricEigen::new(sym);
    eig.eigenvalues.apply(|l| *l = l.max(COVARIANCE_FLOOR));
    let r = eig.recompose();
    0.5 * (r + r.transpose())
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Components dropped for vanishing responsibility mass.
    pub pruned: usize,
    pub iterations: usize,
    pub converged: bool,
    pub mean_log_likelihood: f64,
}

/// EM fit with seeded k-means++ initialization.
pub fn fit_gmm(data: &[Vector3<f64>], k: usize, seed: u64) -> Result<GmmFit, LearnError> {
    if k == 0 {
        return Err(LearnError::InvalidModel("component count must be positive".into()));
    }
    if data.len() < 10 * k {
        return Err(LearnError::InsufficientData {
            needed: 10 * k,
            got: data.len(),
        });
    }
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp(data, k, &mut rng);

    // hard assignment to seeds gives the first M-step
    let mut resp = vec![vec![0.0; k]; n];
    for (x, r) in data.iter().zip(resp.iter_mut()) {
        let nearest = nearest_center(x, &centers);
        r[nearest] = 1.0;
    }

    let mut pruned = 0;
    let mut model = m_step(data, &resp, &mut pruned)?;
    let mut prev_ll = model.mean_log_likelihood(data);
    let mut calm = 0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERS {
        iterations += 1;
        let kk = model.len();
        for (x, r) in data.iter().zip(resp.iter_mut()) {
            r.resize(kk, 0.0);
            model.posteriors_into(x, r);
        }
        model = m_step(data, &resp, &mut pruned)?;
        let ll = model.mean_log_likelihood(data);
        if ll - prev_ll < LL_TOL {
            calm += 1;
            if calm >= LL_PATIENCE {
                converged = true;
                prev_ll = ll;
                break;
            }
        } else {
            calm = 0;
        }
        prev_ll = ll;
    }
    if pruned > 0 {
        log::warn!("GMM fit pruned {pruned} degenerate component(s); K reduced to {}", model.len());
    }
    Ok(GmmFit {
        model,
        pruned,
        iterations,
        converged,
        mean_log_likelihood: prev_ll,
    })
}

fn m_step(data: &[Vector3<f64>], resp: &[Vec<f64>], pruned: &mut usize) -> Result<GmmModel, LearnError> {
    let n = data.len() as f64;
    let k = resp[0].len();
    let mut priors = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        let mass: f64 = resp.iter().map(|r| r[j]).sum();
        if mass < DEGENERATE_MASS * n {
            *pruned += 1;
            continue;
        }
        let mean = data.iter().zip(resp).fold(Vector3::zeros(), |acc, (x, r)| acc + x * r[j]) / mass;
        let cov = data.iter().zip(resp).fold(Matrix3::zeros(), |acc, (x, r)| {
            let d = x - mean;
            acc + d * d.transpose() * r[j]
        }) / mass;
        priors.push(mass);
        means.push(mean);
        covs.push(floor_covariance(&cov));
    }
    if priors.is_empty() {
        return Err(LearnError::DegenerateComponent { remaining: 0 });
    }
    let total: f64 = priors.iter().sum();
    priors.iter_mut().for_each(|p| *p /= total);
    GmmModel::new(priors, means, covs)
}

fn nearest_center(x: &Vector3<f64>, centers: &[Vector3<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = (x - c).norm_squared();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn kmeans_pp(data: &[Vector3<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut centers = vec![data[rng.random_range(0..data.len())]];
    let mut d2: Vec<f64> = data.iter().map(|x| (x - centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..data.len())
        };
        let c = data[next];
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min((x - c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn cloud(center: Vector3<f64>, sigma: f64, n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).unwrap();
        (0..n)
            .map(|_| center + Vector3::from_fn(|_, _| normal.sample(&mut rng)))
            .collect()
    }

    #[test]
    fn single_gaussian_mean_is_sample_mean() {
        let sigma = 0.05;
        let data = cloud(Vector3::new(0.3, -0.2, 0.1), sigma, 400, 1);
        let fit = fit_gmm(&data, 1, 7).unwrap();
        let sample_mean = data.iter().sum::<Vector3<f64>>() / data.len() as f64;
        let mean = fit.model.means().next().unwrap();
        assert!((mean - sample_mean).norm() < 3.0 * sigma / (data.len() as f64).sqrt());
        assert!(fit.converged);
    }

    #[test]
    fn separated_clusters_get_hard_assignments() {
        let a = Vector3::new(1.0, 0.0, 0.0);
        let b = Vector3::new(-1.0, 0.5, 0.0);
        let mut data = cloud(a, 0.05, 200, 2);
        data.extend(cloud(b, 0.05, 200, 3));
        let fit = fit_gmm(&data, 2, 11).unwrap();
        // oracle labels: nearest true center
        for x in &data {
            let label = if (x - a).norm() < (x - b).norm() { a } else { b };
            let g = fit.model.posteriors(x);
            let means: Vec<_> = fit.model.means().collect();
            let j = nearest_center(&label, &means);
            assert!(g[j] > 0.99);
        }
    }

    #[test]
    fn insufficient_data_is_rejected() {
        let data = cloud(Vector3::zeros(), 0.1, 15, 4);
        assert!(matches!(fit_gmm(&data, 2, 0), Err(LearnError::InsufficientData { needed: 20, got: 15 })));
        assert!(fit_gmm(&data, 0, 0).is_err());
    }

    #[test]
    fn duplicate_points_respect_covariance_floor() {
        let data = vec![Vector3::new(0.1, 0.2, 0.3); 50];
        let fit = fit_gmm(&data, 2, 5).unwrap();
        for c in &fit.model.components {
            assert!(SymmetricEigen::new(c.covariance).eigenvalues.min() >= COVARIANCE_FLOOR * (1.0 - 1e-9));
        }
        let s: f64 = fit.model.priors().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_is_deterministic_given_seed() {
        let mut data = cloud(Vector3::new(0.5, 0.0, 0.0), 0.1, 100, 8);
        data.extend(cloud(Vector3::new(0.0, 0.5, 0.0), 0.1, 100, 9));
        let a = fit_gmm(&data, 3, 42).unwrap();
        let b = fit_gmm(&data, 3, 42).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn posteriors_sum_to_one() {
        let data = cloud(Vector3::zeros(), 0.3, 200, 10);
        let fit = fit_gmm(&data, 4, 1).unwrap();
        for x in [Vector3::new(5.0, -3.0, 2.0), Vector3::zeros()] {
            let g = fit.model.posteriors(&x);
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn params_round_trip() {
        let data = cloud(Vector3::zeros(), 0.3, 200, 12);
        let fit = fit_gmm(&data, 2, 1).unwrap();
        let back = GmmModel::from_params(&fit.model.to_params()).unwrap();
        assert_eq!(back, fit.model);
    }
}
