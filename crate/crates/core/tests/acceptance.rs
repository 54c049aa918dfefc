//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p safeflow --test acceptance`.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use futures::StreamExt;
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safeflow::cones::{cone_angle_samples, TimeVaryingCones};
use safeflow::dataset::{resample_by_distance, Demonstration, DemonstrationSet, Sample, ValidationConfig};
use safeflow::filter::{build_constraints, solve_qp, FilterConfig, Halfspace};
use safeflow::fixtures::{default_set, Shape};
use safeflow::model::{learn, LearnConfig, Model};
use safeflow::sim::{run, SimConfig};
use safeflow::so3::{angle_between, distance, exp_map, hat, log_map, log_rel, slerp, vee, Rotation};
use safeflow::teleop::{replay, ServiceConfig, SessionLog, SessionState, TeleopService};
use serde_json::json;
use tokio_tungstenite::tungstenite::Message;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn unit_ball(rng: &mut ChaCha8Rng, radius: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if v.norm() <= 1.0 {
            return v * radius;
        }
    }
}

fn models() -> Vec<(Shape, Model)> {
    Shape::ALL
        .iter()
        .map(|&s| (s, learn(&default_set(s), &LearnConfig::default()).expect("fixture learns")))
        .collect()
}

fn stability(models: &[(Shape, Model)]) -> Outcome {
    let started = Instant::now();
    let dt = 0.003;
    let max_steps = (60.0 / dt) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    let mut worst_time = 0.0f64;
    let mut worst_rise = f64::NEG_INFINITY;
    for (shape, model) in models {
        let goal = model.goal();
        for n in 0..100 {
            let mut r = goal * &exp_map(&unit_ball(&mut rng, 2.5));
            let mut v = model.ds.lyapunov_value(&r);
            let mut steps = 0;
            while distance(&r, goal) >= 1e-2 && steps < max_steps {
                let w = model.ds.evaluate(&r).expect("start within log domain");
                r = &r * &exp_map(&(w * dt));
                let next = model.ds.lyapunov_value(&r);
                worst_rise = worst_rise.max(next - v);
                if next > v + 1e-8 {
                    failures.push(format!("{shape}#{n}: V rose by {:.2e}", next - v));
                    break;
                }
                v = next;
                steps += 1;
            }
            if distance(&r, goal) >= 1e-2 {
                failures.push(format!("{shape}#{n}: error {:.3e} after 60 s", distance(&r, goal)));
            }
            worst_time = worst_time.max(steps as f64 * dt);
        }
    }
    let elapsed = started.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "300 rollouts, slowest {worst_time:.2} s simulated, largest V step {worst_rise:.2e}, {} failures, {:.1} s wall{}",
            failures.len(),
            elapsed.as_secs_f64(),
            failures.first().map(|f| format!(" ({f})")).unwrap_or_default()
        ),
    )
}

fn protocol(model: &Model, filter_on: bool) -> safeflow::sim::SimSummary {
    let mut cfg = SimConfig::new(model.start, 12.0);
    cfg.filter_on = filter_on;
    run(&cfg, model.ds.clone(), model.cones.clone()).expect("protocol runs").summary
}

fn constrained_nacv(models: &[(Shape, Model)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (shape, model) in models {
        let s = protocol(model, true);
        pass &= s.nacv == 0.0 && s.min_h >= -1e-4;
        parts.push(format!("{shape}: NACV {} min h {:.2e}", s.nacv, s.min_h));
    }
    outcome(pass, parts.join("; "))
}

fn unconstrained_nacv(models: &[(Shape, Model)]) -> Outcome {
    let values: Vec<f64> = models.iter().map(|(_, m)| protocol(m, false).nacv).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let parts: Vec<String> = models
        .iter()
        .zip(&values)
        .map(|((s, _), v)| format!("{s}: {v:.3}"))
        .collect();
    outcome(
        values.iter().all(|v| *v > 0.1),
        format!("NACV = {mean:.3} ± {std:.3} ({})", parts.join(", ")),
    )
}

fn objective(u: &Vector3<f64>, u0: &Vector3<f64>) -> f64 {
    0.5 * (u - u0).norm_squared()
}

/// Best point of the 201³ box grid. Along each `(u1, u2)` line the feasible
/// `u3` form an interval, so the inner minimization is exact.
fn grid_oracle(u0: &Vector3<f64>, hs: &[Halfspace], u_max: f64) -> Option<(f64, Vector3<f64>)> {
    const N: usize = 201;
    let h = 2.0 * u_max / (N - 1) as f64;
    let g = |k: usize| -u_max + k as f64 * h;
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for i in 0..N {
        for j in 0..N {
            let (u1, u2) = (g(i), g(j));
            let mut lo = 0usize;
            let mut hi = N - 1;
            let mut empty = false;
            for c in hs {
                let rest = c.a.x * u1 + c.a.y * u2 + c.b;
                if c.a.z.abs() < 1e-14 {
                    empty |= rest < 0.0;
                    continue;
                }
                let bound = (-rest / c.a.z + u_max) / h;
                if c.a.z > 0.0 {
                    lo = lo.max(bound.ceil().max(0.0) as usize);
                } else if bound < 0.0 {
                    empty = true;
                } else {
                    hi = hi.min(bound.floor().min((N - 1) as f64) as usize);
                }
            }
            if empty || lo > hi {
                continue;
            }
            let target = ((u0.z + u_max) / h).round().clamp(lo as f64, hi as f64) as usize;
            // rounding at the interval ends is settled by direct evaluation
            for k in [target.saturating_sub(1), target, (target + 1).min(N - 1)] {
                if k < lo || k > hi {
                    continue;
                }
                let u = Vector3::new(u1, u2, g(k));
                if hs.iter().any(|c| c.value(&u) < 0.0) {
                    continue;
                }
                let f = objective(&u, u0);
                if best.as_ref().is_none_or(|(b, _)| f < *b) {
                    best = Some((f, u));
                }
            }
        }
    }
    best
}

/// Stationarity, dual feasibility and primal feasibility of `u`, with
/// multipliers recovered by least squares on the constraints active at `u`.
fn kkt_check(u: &Vector3<f64>, u0: &Vector3<f64>, hs: &[Halfspace], u_max: f64) -> f64 {
    let mut all = hs.to_vec();
    for k in 0..3 {
        all.push(Halfspace { a: -Vector3::ith(k, 1.0), b: u_max });
        all.push(Halfspace { a: Vector3::ith(k, 1.0), b: u_max });
    }
    let primal = all.iter().map(|c| (-c.value(u)).max(0.0)).fold(0.0, f64::max);
    let active: Vec<&Halfspace> = all.iter().filter(|c| c.value(u).abs() <= 1e-9).collect();
    let grad = u - u0;
    if active.is_empty() {
        return primal.max(grad.norm());
    }
    let a = DMatrix::from_fn(3, active.len(), |r, c| active[c].a[r]);
    let rhs = DVector::from_column_slice(grad.as_slice());
    let lambda = a.clone().svd(true, true).solve(&rhs, 1e-12).expect("svd solve");
    let stationarity = (&a * &lambda - rhs).norm();
    let dual = lambda.iter().map(|l| (-l).max(0.0)).fold(0.0, f64::max);
    primal.max(stationarity).max(dual)
}

fn qp_oracle(model: &Model) -> Outcome {
    let started = Instant::now();
    let cfg = FilterConfig::default();
    let h = 2.0 * cfg.u_max / 200.0;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    let mut worst_gap = 0.0f64;
    let mut worst_kkt = 0.0f64;
    let mut below = 0.0f64;
    let mut failures = 0;
    let mut constrained = 0;
    let goal = *model.goal();
    while checked < 1000 {
        let r_ref = &goal * &exp_map(&unit_ball(&mut rng, 1.2));
        let r_exc = &r_ref * &exp_map(&unit_ball(&mut rng, 0.4));
        let w_ref = unit_ball(&mut rng, 1.0);
        let u0 = unit_ball(&mut rng, 7.0);
        let hs = build_constraints(&r_exc, &r_ref, &w_ref, &model.cones, &cfg);
        let sol = solve_qp(&u0, &hs, &cfg);
        if !sol.feasible {
            continue;
        }
        let Some((f_grid, _)) = grid_oracle(&u0, &hs, cfg.u_max) else {
            continue;
        };
        checked += 1;
        if sol.active_set.iter().any(|&i| i < hs.len()) {
            constrained += 1;
        }
        let f = objective(&sol.u_star, &u0);
        let kkt = kkt_check(&sol.u_star, &u0, &hs, cfg.u_max).max(sol.kkt_residual);
        // a feasible grid point lies within one cell diagonal of the optimum
        let diag = 3f64.sqrt() * h;
        let tol = diag * (sol.u_star - u0).norm() + 0.5 * diag * diag;
        below = below.max(f - f_grid);
        worst_gap = worst_gap.max((f_grid - f) / tol);
        worst_kkt = worst_kkt.max(kkt);
        if f > f_grid + 1e-9 || f_grid - f > tol || kkt >= 1e-8 {
            failures += 1;
        }
    }
    let elapsed = started.elapsed();
    outcome(
        failures == 0 && elapsed < Duration::from_secs(300),
        format!(
            "{checked} instances ({constrained} with an active cone), grid gap ≤ {worst_gap:.3} of resolution bound, QP above grid by ≤ {below:.1e}, KKT ≤ {worst_kkt:.1e}, {failures} failures, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn lie_derivative(model: &Model) -> Outcome {
    let cfg = FilterConfig::default();
    let cones: &TimeVaryingCones = &model.cones;
    let goal = *model.goal();
    let max_d = model.report.as_ref().expect("learned model").max_distance;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let step = 1e-7;
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let axis = unit_ball(&mut rng, 1.0).normalize();
        let d = rng.random_range(0.1..0.95 * max_d);
        let r_ref = &goal * &exp_map(&(axis * d));
        let r_exc = &r_ref * &exp_map(&unit_ball(&mut rng, 0.4));
        let w = unit_ball(&mut rng, 1.0);
        let u = unit_ball(&mut rng, 2.0);
        let hs = build_constraints(&r_exc, &r_ref, &w, cones, &cfg);
        let h0 = cones.constraint_values(&r_exc, &r_ref);
        let fwd = cones.constraint_values(&(&r_exc * &exp_map(&(u * step))), &(&r_ref * &exp_map(&(w * step))));
        let bwd = cones.constraint_values(&(&r_exc * &exp_map(&(u * -step))), &(&r_ref * &exp_map(&(w * -step))));
        checked += 1;
        for i in 0..3 {
            let fd = (fwd[i] - bwd[i]) / (2.0 * step);
            let an = hs[i].value(&u) - cfg.alpha_gain * (h0[i] - cfg.margin);
            let scale = hs[i].a.norm() * u.norm() + fd.abs();
            worst = worst.max((fd - an).abs() / scale.max(1e-3));
        }
    }
    outcome(worst < 1e-4, format!("{checked} configurations, max rel. err {worst:.2e}"))
}

fn two_demo_set(p1: Vector3<f64>, p2: Vector3<f64>) -> DemonstrationSet {
    let goal = exp_map(&Vector3::new(0.1, -0.3, 0.2));
    let demo = |p: Vector3<f64>| {
        let samples = (0..=300)
            .map(|k| {
                let s = 1.0 - k as f64 / 300.0;
                Sample {
                    t: k as f64 * 0.01,
                    rotation: &goal * &exp_map(&(-p * s)),
                    omega: None,
                }
            })
            .collect();
        Demonstration::new(samples).expect("ordered samples")
    };
    DemonstrationSet::new(vec![demo(p1), demo(p2)], Some(goal), &ValidationConfig::default()).expect("valid set")
}

fn algorithm_one() -> Outcome {
    let p1 = Vector3::new(1.0, 0.2, -0.1).normalize() * 1.2;
    let p2 = Vector3::new(0.6, 0.8, 0.1).normalize() * 1.2;
    let set = two_demo_set(p1, p2);
    let resampled = resample_by_distance(&set, 100).expect("resamples");
    let learned = cone_angle_samples(&resampled).expect("cone samples");
    let goal = *set.goal();
    let mut worst = 0.0f64;
    let mut worst_row = 0.0f64;
    for ((d, row), angles) in learned.distances.iter().zip(resampled.frames()).zip(&learned.angles) {
        let x: Vec<Vector3<f64>> = row.iter().map(|r| log_rel(r, &goal).unwrap()).collect();
        // with two tangents the scaled principal directions are ±(x1 − x2)/2
        let m = (x[0] + x[1]) * 0.5;
        let r_m = exp_map(&m);
        for a in 0..3 {
            let brute = x
                .iter()
                .map(|xk| angle_between(&r_m.axis(a), &exp_map(xk).axis(a)))
                .fold(0.0, f64::max);
            worst = worst.max((brute - angles[a]).abs());
        }
        // rows sit on the constructed straight lines
        let expected = [p1.normalize() * *d, p2.normalize() * *d];
        for (xk, ek) in x.iter().zip(&expected) {
            worst_row = worst_row.max((xk - ek).norm());
        }
    }
    let l_model = learn(&default_set(Shape::L), &LearnConfig::default()).expect("learns");
    let rmse = l_model.report.expect("report").cones.rmse;
    outcome(
        worst < 1e-9 && worst_row < 1e-6 && rmse < 0.05,
        format!(
            "{} rows, max |learned − brute force| {worst:.1e}, row placement {worst_row:.1e}, L-set LWR RMSE {rmse:.4} rad",
            learned.distances.len()
        ),
    )
}

fn so3_kernel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let lim = std::f64::consts::PI - 1e-3;
    let (mut rt, mut hv, mut tr, mut sl, mut ortho) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100_000 {
        let v = unit_ball(&mut rng, lim);
        let r = exp_map(&v);
        ortho = ortho.max(r.orthonormality_residual());
        let back = log_map(&r).unwrap();
        rt = rt.max((back - v).norm());
        rt = rt.max((exp_map(&back).matrix() - r.matrix()).norm());
        let s = hat(&v);
        hv = hv.max((vee(&s).unwrap() - v).norm()).max((hat(&vee(&s).unwrap()) - s).norm());
        let theta = ((r.matrix().trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        tr = tr.max((back.norm() - theta).abs());

        let a = exp_map(&unit_ball(&mut rng, lim));
        let b = &a * &exp_map(&unit_ball(&mut rng, lim));
        let frac: f64 = rng.random_range(0.0..=1.0);
        let full = log_rel(&a, &b).unwrap().norm();
        let part = log_rel(&a, &slerp(&a, &b, frac).unwrap()).unwrap().norm();
        sl = sl.max((part - frac * full).abs());
    }
    let mut r = Rotation::identity();
    let w = Vector3::new(0.7, -1.3, 2.1);
    for _ in 0..20_000 {
        r = &r * &exp_map(&(w * 0.003));
    }
    let drift = r.orthonormality_residual();
    outcome(
        rt < 1e-9 && hv == 0.0 && tr < 1e-9 && sl < 1e-9 && ortho < 1e-9 && drift < 1e-9,
        format!(
            "1e5 samples: round trip {rt:.1e}, hat/vee {hv:.1e}, ‖log‖ vs trace {tr:.1e}, slerp {sl:.1e}, orthonormality {ortho:.1e}; 20000-step drift {drift:.1e}"
        ),
    )
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn frames(ws: &mut Ws, n: u64) -> Vec<String> {
    let mut out = Vec::new();
    while (out.len() as u64) < n {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("frame within timeout")
            .expect("open stream")
            .expect("valid message");
        if let Message::Text(t) = msg {
            out.push(t.to_string());
        }
    }
    out
}

/// Scripted client: adversarial inputs pushing out of the cones, speed and
/// filter toggles, a reset and pauses; then the log is replayed offline.
async fn scripted_session(model: Model) -> Outcome {
    let svc = TeleopService::new(
        HashMap::from([("default".to_string(), model.clone())]),
        ServiceConfig { rate: 10.0, ..ServiceConfig::default() },
    )
    .expect("service config");
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
    let addr = listener.local_addr().expect("addr");
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    tokio::spawn(svc.serve(listener, async move {
        let _ = stopped.await;
    }));
    let base = format!("http://{addr}");
    let client = reqwest::Client::new();
    let sess: SessionState = client
        .post(format!("{base}/sessions"))
        .json(&json!({}))
        .send()
        .await
        .expect("create")
        .json()
        .await
        .expect("state");
    let url = format!("{base}/sessions/{}", sess.id);
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{}/stream", sess.id))
        .await
        .expect("stream");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    client.post(format!("{url}/start")).send().await.expect("start");
    for k in 0..12 {
        tokio::time::sleep(Duration::from_millis(25)).await;
        let u: Vec<f64> = (0..3).map(|_| rng.random_range(-9.0..9.0)).collect();
        let scale = [1.0, 2.5, 0.5][k % 3];
        let body = json!({"u_h": u, "speed_scale": scale});
        client.post(format!("{url}/input")).json(&body).send().await.expect("input");
        match k {
            4 => {
                client.post(format!("{url}/reset")).send().await.expect("reset");
            }
            7 => {
                client.post(format!("{url}/pause")).send().await.expect("pause");
                tokio::time::sleep(Duration::from_millis(20)).await;
                client.post(format!("{url}/start")).send().await.expect("start");
            }
            _ => {}
        }
    }
    tokio::time::sleep(Duration::from_millis(50)).await;
    client.post(format!("{url}/pause")).send().await.expect("pause");
    let log: SessionLog = client
        .get(format!("{url}/log"))
        .send()
        .await
        .expect("log")
        .json()
        .await
        .expect("log body");
    let streamed = frames(&mut ws, log.steps).await;
    let _ = stop.send(());

    let replayed = replay(&model, &log).expect("replay");
    let offline: Vec<String> = replayed.iter().map(|f| serde_json::to_string(f).unwrap()).collect();
    let min_h = replayed.iter().flat_map(|f| f.h).fold(f64::INFINITY, f64::min);
    outcome(
        streamed == offline && !streamed.is_empty() && min_h >= -1e-4,
        format!(
            "{} frames, {} events, bitwise equal: {}, min h {min_h:.2e}",
            streamed.len(),
            log.events.len(),
            streamed == offline
        ),
    )
}

fn record_replay(model: &Model) -> Outcome {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .expect("runtime")
        .block_on(scripted_session(model.clone()))
}

fn main() {
    let started = Instant::now();
    let models = models();
    let l = &models[0].1;
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("stability", Box::new(|| stability(&models))),
        ("constrained NACV = 0", Box::new(|| constrained_nacv(&models))),
        ("unconstrained NACV > 0.1", Box::new(|| unconstrained_nacv(&models))),
        ("QP vs grid oracle", Box::new(|| qp_oracle(l))),
        ("Lie derivative", Box::new(|| lie_derivative(l))),
        ("cone-angle oracle and LWR fit", Box::new(algorithm_one)),
        ("SO(3) kernel", Box::new(so3_kernel)),
        ("teleop record/replay", Box::new(|| record_replay(l))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let t = Instant::now();
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} s",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
