//! Conic control-barrier-function QP.
//!
//! Each cone contributes one affine condition `aᵀu + b ≥ 0` on the body
//! angular velocity `u`; together with the box `|u_k| ≤ u_max` they bound a
//! small dense QP that is solved exactly by active-set enumeration.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::cones::{constraint_values_with, TimeVaryingCones};
use crate::so3::{exp_map, hat, AngularVelocity, Rotation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Gain `γ` of the class-K function `α(h) = γ h` (1/s).
    pub alpha_gain: f64,
    /// Componentwise bound on `u` (rad/s).
    pub u_max: f64,
    /// Control period (s).
    pub dt: f64,
    /// Barrier offset `δ`: the conditions are imposed on `h_i − δ`, which
    /// absorbs the one-step discretization error of the rate condition.
    pub margin: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            alpha_gain: 10.0,
            u_max: 5.0,
            dt: 0.003,
            margin: 1e-5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha_gain > 0.0 && self.alpha_gain.is_finite()) {
            return Err(format!("alpha gain must be positive, got {}", self.alpha_gain));
        }
        if !(self.u_max > 0.0 && self.u_max.is_finite()) {
            return Err(format!("u_max must be positive, got {}", self.u_max));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(format!("margin must be non-negative, got {}", self.margin));
        }
        Ok(())
    }
}

/// `aᵀu + b ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    pub a: Vector3<f64>,
    pub b: f64,
}

impl Halfspace {
    pub fn value(&self, u: &Vector3<f64>) -> f64 {
        self.a.dot(u) + self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub u_star: AngularVelocity,
    /// Indices of active constraints: halfspaces first, then the box as
    /// `m + 2k` (upper bound on `u_k`) and `m + 2k + 1` (lower bound).
    pub active_set: Vec<usize>,
    pub feasible: bool,
    pub kkt_residual: f64,
    /// Smallest uniform relaxation of the halfspaces that admits a solution;
    /// zero when feasible.
    pub relaxation: f64,
}

impl QpSolution {
    /// Active flags of the first `m` (halfspace) constraints.
    pub fn halfspace_active(&self, m: usize) -> Vec<bool> {
        (0..m).map(|i| self.active_set.contains(&i)).collect()
    }
}

/// Barrier conditions of the three cones at the current state.
///
/// With `x = R_excᵀ e_i^ref` the coefficient of `u` is `a = e_i × x`, and the
/// drift collects the reference motion, the cone-angle rate and `γ h_i`.
pub fn build_constraints(
    r_exc: &Rotation,
    r_ref: &Rotation,
    w_ref: &AngularVelocity,
    cones: &TimeVaryingCones,
    cfg: &FilterConfig,
) -> [Halfspace; 3] {
    let theta = cones.angles(r_ref);
    let rates = cones.angle_rates(r_ref, w_ref, cfg.dt);
    let h = constraint_values_with(r_exc, r_ref, &theta);
    std::array::from_fn(|i| {
        let e = Vector3::ith(i, 1.0);
        let x = r_exc.matrix().transpose() * r_ref.axis(i);
        let a = hat(&e) * x;
        let drift = -r_exc.axis(i).dot(&(r_ref.matrix() * (hat(&e) * w_ref)));
        let b = drift + theta[i].sin() * rates[i] + cfg.alpha_gain * (h[i] - cfg.margin);
        Halfspace { a, b }
    })
}

fn all_constraints(halfspaces: &[Halfspace], u_max: f64) -> Vec<Halfspace> {
    let mut all = halfspaces.to_vec();
    for k in 0..3 {
        all.push(Halfspace {
            a: -Vector3::ith(k, 1.0),
            b: u_max,
        });
        all.push(Halfspace {
            a: Vector3::ith(k, 1.0),
            b: u_max,
        });
    }
    all
}

/// Subsets of `0..n` with at most three elements, by size then lexicographically.
fn subsets(n: usize) -> impl Iterator<Item = Vec<usize>> {
    let mut out = vec![vec![]];
    for i in 0..n {
        out.push(vec![i]);
    }
    for i in 0..n {
        for j in i + 1..n {
            out.push(vec![i, j]);
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                out.push(vec![i, j, k]);
            }
        }
    }
    out.into_iter()
}

struct Candidate {
    u: Vector3<f64>,
    lambda: Vec<f64>,
}

/// Equality-constrained projection of `u0` onto the constraints in `set`.
fn solve_equality(u0: &Vector3<f64>, all: &[Halfspace], set: &[usize]) -> Option<Candidate> {
    let m = set.len();
    if m == 0 {
        return Some(Candidate { u: *u0, lambda: vec![] });
    }
    let mut g = Matrix3::zeros();
    let mut r = Vector3::zeros();
    for (p, &i) in set.iter().enumerate() {
        for (q, &j) in set.iter().enumerate() {
            g[(p, q)] = all[i].a.dot(&all[j].a);
        }
        r[p] = -all[i].value(u0);
    }
    let g = g.view((0, 0), (m, m)).into_owned();
    let r = r.rows(0, m).into_owned();
    let scale = (0..m).map(|p| g[(p, p)]).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    let lu = g.clone().lu();
    if lu.determinant().abs() < 1e-12 * scale.powi(m as i32) {
        return None;
    }
    let lambda = lu.solve(&r)?;
    let mut u = *u0;
    for (p, &i) in set.iter().enumerate() {
        u += all[i].a * lambda[p];
    }
    Some(Candidate {
        u,
        lambda: lambda.iter().cloned().collect(),
    })
}

fn tolerance(c: &Halfspace, u: &Vector3<f64>) -> f64 {
    1e-10 * (1.0 + c.b.abs() + c.a.norm() * u.norm())
}

fn kkt_residual(u0: &Vector3<f64>, all: &[Halfspace], set: &[usize], cand: &Candidate) -> f64 {
    let mut stationarity = cand.u - u0;
    let mut worst = 0.0f64;
    for (p, &i) in set.iter().enumerate() {
        stationarity -= all[i].a * cand.lambda[p];
        worst = worst.max(-cand.lambda[p]);
        worst = worst.max((cand.lambda[p] * all[i].value(&cand.u)).abs());
    }
    for c in all {
        worst = worst.max(-c.value(&cand.u));
    }
    worst.max(stationarity.norm())
}

fn enumerate(u0: &Vector3<f64>, all: &[Halfspace]) -> Option<(Vec<usize>, Candidate)> {
    for set in subsets(all.len()) {
        let Some(cand) = solve_equality(u0, all, &set) else {
            continue;
        };
        let lam_scale = 1.0 + cand.lambda.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        if cand.lambda.iter().any(|l| *l < -1e-10 * lam_scale) {
            continue;
        }
        if all.iter().all(|c| c.value(&cand.u) >= -tolerance(c, &cand.u)) {
            return Some((set, cand));
        }
    }
    None
}

/// Rounding in the active-set solve can leave `u` a few ulps outside the box.
fn clamp_box(u: Vector3<f64>, u_max: f64) -> Vector3<f64> {
    u.map(|x| x.clamp(-u_max, u_max))
}

/// Minimizes `½‖u − u0‖²` over the halfspaces and the box `[-u_max, u_max]³`.
///
/// When the constraints are jointly infeasible the solution is the
/// projection onto the smallest uniformly relaxed feasible set and
/// `feasible` is false.
pub fn solve_qp(u0: &AngularVelocity, halfspaces: &[Halfspace], cfg: &FilterConfig) -> QpSolution {
    let all = all_constraints(halfspaces, cfg.u_max);
    if let Some((set, cand)) = enumerate(u0, &all) {
        return QpSolution {
            kkt_residual: kkt_residual(u0, &all, &set, &cand),
            u_star: clamp_box(cand.u, cfg.u_max),
            active_set: set,
            feasible: true,
            relaxation: 0.0,
        };
    }
    let (t_star, u_lp) = min_max_violation(halfspaces, cfg.u_max);
    let shift = t_star + 1e-12 * (1.0 + t_star);
    let relaxed: Vec<Halfspace> = halfspaces
        .iter()
        .map(|c| Halfspace { a: c.a, b: c.b + shift })
        .collect();
    let all = all_constraints(&relaxed, cfg.u_max);
    match enumerate(u0, &all) {
        Some((set, cand)) => QpSolution {
            kkt_residual: kkt_residual(u0, &all, &set, &cand),
            u_star: clamp_box(cand.u, cfg.u_max),
            active_set: set,
            feasible: false,
            relaxation: t_star,
        },
        None => QpSolution {
            u_star: clamp_box(u_lp, cfg.u_max),
            active_set: vec![],
            feasible: false,
            kkt_residual: f64::INFINITY,
            relaxation: t_star,
        },
    }
}

/// `min_{u ∈ box} max_i −(a_iᵀu + b_i)` by vertex enumeration of the LP in
/// `(u, t)`.
fn min_max_violation(halfspaces: &[Halfspace], u_max: f64) -> (f64, Vector3<f64>) {
    // rows: [a_i, 1]·(u,t) ≥ −b_i, box rows with zero t coefficient
    let mut rows: Vec<(Vector4<f64>, f64)> = halfspaces
        .iter()
        .map(|c| (Vector4::new(c.a.x, c.a.y, c.a.z, 1.0), -c.b))
        .collect();
    for k in 0..3 {
        let mut up = Vector4::zeros();
        up[k] = -1.0;
        rows.push((up, -u_max));
        let mut lo = Vector4::zeros();
        lo[k] = 1.0;
        rows.push((lo, -u_max));
    }
    let n = rows.len();
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    let idx = [i, j, k, l];
                    let m = Matrix4::from_fn(|r, c| rows[idx[r]].0[c]);
                    let rhs = Vector4::from_fn(|r, _| rows[idx[r]].1);
                    let Some(x) = m.lu().solve(&rhs) else { continue };
                    if !x.iter().all(|v| v.is_finite()) {
                        continue;
                    }
                    let ok = rows
                        .iter()
                        .all(|(a, b)| a.dot(&x) >= b - 1e-10 * (1.0 + b.abs()));
                    if ok && best.as_ref().is_none_or(|(t, _)| x[3] < *t) {
                        best = Some((x[3], x.fixed_rows::<3>(0).into_owned()));
                    }
                }
            }
        }
    }
    let (t, u) = best.unwrap_or((0.0, Vector3::zeros()));
    (t.max(0.0), u)
}

/// Iteration cap of the sequential QP in [`filter_step`].
pub const SQP_ITERS: usize = 30;

/// One-step barrier conditions on the exactly integrated pair.
///
/// Holding `u` for `dt`, the executor axis becomes `Exp(u dt) e_i` while the
/// reference axis, seen from the current executor frame, becomes
/// `y_i = R_excᵀ R_ref Exp(w_ref dt) e_i`. The condition
/// `h_i(k+1) ≥ (1 − γ dt)(h_i − δ) + δ`, divided by `dt`, reads
/// `c_i + g_iᵀu + dt uᵀQ_i u ≥ 0` to second order in `u dt`. Only the
/// negative semidefinite part of `Q_i` is kept, which makes every condition
/// concave and the omitted curvature conservative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledCondition {
    pub c: f64,
    pub g: Vector3<f64>,
    pub q: Matrix3<f64>,
    pub dt: f64,
}

impl SampledCondition {
    pub fn value(&self, u: &Vector3<f64>) -> f64 {
        self.c + self.g.dot(u) + self.dt * u.dot(&(self.q * u))
    }

    pub fn gradient(&self, u: &Vector3<f64>) -> Vector3<f64> {
        self.g + self.q * u * (2.0 * self.dt)
    }

    /// Tangent halfspace at `u`.
    pub fn linearized(&self, u: &Vector3<f64>) -> Halfspace {
        let a = self.gradient(u);
        Halfspace {
            a,
            b: self.value(u) - a.dot(u),
        }
    }
}

pub fn sampled_conditions(
    r_exc: &Rotation,
    r_ref: &Rotation,
    w_ref: &AngularVelocity,
    cones: &TimeVaryingCones,
    cfg: &FilterConfig,
) -> [SampledCondition; 3] {
    let dt = cfg.dt;
    let theta = cones.angles(r_ref);
    let h = constraint_values_with(r_exc, r_ref, &theta);
    let ref_next = r_ref * &exp_map(&(w_ref * dt));
    let theta_next = cones.angles(&ref_next);
    std::array::from_fn(|i| {
        let e = Vector3::ith(i, 1.0);
        let y = r_exc.matrix().transpose() * ref_next.axis(i);
        let ey = e.dot(&y);
        let sym = (e * y.transpose() + y * e.transpose()) * 0.5;
        let q = negative_part((sym - Matrix3::identity() * ey) * 0.5);
        let decay = cfg.alpha_gain * (h[i] - cfg.margin);
        SampledCondition {
            c: (ey - theta_next[i].cos() - h[i]) / dt + decay,
            g: e.cross(&y),
            q,
            dt,
        }
    })
}

fn negative_part(q: Matrix3<f64>) -> Matrix3<f64> {
    let eig = q.symmetric_eigen();
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|v| v.min(0.0)));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Minimizes `½(u − z)ᵀH(u − z)` over halfspaces by mapping to a projection
/// with `v = Lᵀu`, `H = LLᵀ`. Multipliers are unchanged by the map.
fn solve_metric(
    z: &Vector3<f64>,
    hess: &Matrix3<f64>,
    all: &[Halfspace],
) -> Option<(Vec<usize>, Candidate, f64)> {
    let l = hess.cholesky()?.l();
    let l_inv = l.try_inverse()?;
    let mapped: Vec<Halfspace> = all
        .iter()
        .map(|c| Halfspace {
            a: l_inv * c.a,
            b: c.b,
        })
        .collect();
    let v0 = l.transpose() * z;
    let (set, cand) = enumerate(&v0, &mapped)?;
    let kkt = kkt_residual(&v0, &mapped, &set, &cand);
    let u = l_inv.transpose() * cand.u;
    Some((set, Candidate { u, lambda: cand.lambda }, kkt))
}

/// Infeasible case: relaxation of the sampled conditions, re-linearized at
/// each relaxed solution until it settles.
fn least_violation(
    conds: &[SampledCondition; 3],
    u0: &AngularVelocity,
    mut u: AngularVelocity,
    cfg: &FilterConfig,
) -> QpSolution {
    let mut best: Option<(f64, QpSolution)> = None;
    for _ in 0..SQP_ITERS {
        let lin: Vec<Halfspace> = conds.iter().map(|c| c.linearized(&u)).collect();
        let sol = solve_qp(u0, &lin, cfg);
        let worst = conds.iter().map(|c| c.value(&sol.u_star)).fold(f64::INFINITY, f64::min);
        let step = (sol.u_star - u).norm();
        u = sol.u_star;
        if best.as_ref().is_none_or(|(w, _)| worst > *w) {
            best = Some((worst, sol));
        }
        if step <= 1e-13 * (1.0 + u.norm()) {
            break;
        }
    }
    let (worst, sol) = best.expect("at least one pass");
    QpSolution {
        feasible: false,
        relaxation: (-worst).max(0.0),
        ..sol
    }
}

/// One safety-filter evaluation on the sampled-data conditions of
/// [`sampled_conditions`].
///
/// The convex program is solved by sequential QP with the exact Lagrangian
/// Hessian `I − 2 dt Σ λ_i Q_i`, starting from `u0`; a feasible `u0` is
/// returned unchanged. If a subproblem is infeasible the program has no
/// solution in the box, and the least-violation point is returned with
/// `feasible = false`.
pub fn filter_step(
    r_exc: &Rotation,
    r_ref: &Rotation,
    w_ref: &AngularVelocity,
    u0: &AngularVelocity,
    cones: &TimeVaryingCones,
    cfg: &FilterConfig,
) -> QpSolution {
    let conds = sampled_conditions(r_exc, r_ref, w_ref, cones, cfg);
    let mut u = *u0;
    let mut lambda = [0.0; 3];
    let mut last = None;
    for _ in 0..SQP_ITERS {
        let mut hess = Matrix3::identity();
        for (c, l) in conds.iter().zip(&lambda) {
            hess -= c.q * (2.0 * cfg.dt * l);
        }
        let lin: Vec<Halfspace> = conds.iter().map(|c| c.linearized(&u)).collect();
        let all = all_constraints(&lin, cfg.u_max);
        let z = u - hess.lu().solve(&(u - u0)).unwrap_or_else(Vector3::zeros);
        let Some((set, cand, kkt)) = solve_metric(&z, &hess, &all) else {
            return least_violation(&conds, u0, u, cfg);
        };
        lambda = [0.0; 3];
        for (p, &i) in set.iter().enumerate() {
            if i < 3 {
                lambda[i] = cand.lambda[p];
            }
        }
        let step = (cand.u - u).norm();
        u = cand.u;
        last = Some((set, kkt));
        if step <= 1e-13 * (1.0 + u.norm()) {
            break;
        }
    }
    let (active_set, kkt_residual) = last.expect("at least one pass");
    let u = clamp_box(u, cfg.u_max);
    let feasible = conds.iter().all(|c| c.value(&u) >= -1e-9 * (1.0 + c.c.abs()));
    QpSolution {
        u_star: u,
        active_set,
        feasible,
        kkt_residual,
        relaxation: 0.0,
    }
}
