use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use safeflow::dataset::resample_by_distance;
use safeflow::filter::{solve_qp, FilterConfig, Halfspace};
use safeflow::fixtures::{default_set, demonstration_set, FixtureConfig, Shape};
use safeflow::model::{learn, LearnConfig, Model};
use safeflow::sim::{nacv, smooth_step, smoothstep, PerturbationProfile};
use safeflow::so3::{distance, exp_map, hat, log_map, log_rel, slerp, vee, Rotation};
use safeflow::teleop::input_weight;

const LIM: f64 = std::f64::consts::PI - 1e-3;

fn tangent(max: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, 0.0..max)
        .prop_filter("nonzero direction", |(x, y, z, _)| x * x + y * y + z * z > 1e-6)
        .prop_map(|(x, y, z, n)| Vector3::new(x, y, z).normalize() * n)
}

fn rotation() -> impl Strategy<Value = Rotation> {
    tangent(LIM).prop_map(|v| exp_map(&v))
}

fn vec3(s: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-s..s, -s..s, -s..s).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn halfspace() -> impl Strategy<Value = Halfspace> {
    (vec3(1.0), -2.0..2.0f64).prop_map(|(a, b)| Halfspace { a, b })
}

fn l_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| learn(&default_set(Shape::L), &LearnConfig::default()).unwrap())
}

proptest! {
    #[test]
    fn hat_vee_are_inverse(v in vec3(10.0)) {
        prop_assert_eq!(vee(&hat(&v)).unwrap(), v);
        let s = hat(&v);
        prop_assert_eq!(s, -s.transpose());
    }

    #[test]
    fn exp_log_round_trip(v in tangent(LIM)) {
        let r = exp_map(&v);
        prop_assert!(r.orthonormality_residual() < 1e-9);
        prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
        let back = log_map(&r).unwrap();
        prop_assert!((back - v).norm() < 1e-9);
        prop_assert!((exp_map(&back).matrix() - r.matrix()).norm() < 1e-9);
        let inv = &r * &exp_map(&-v);
        prop_assert!((inv.matrix() - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn log_norm_is_trace_angle(r in rotation()) {
        let theta = ((r.matrix().trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        prop_assert!((log_map(&r).unwrap().norm() - theta).abs() < 1e-9);
    }

    #[test]
    fn relative_log_is_left_invariant(a in rotation(), b in tangent(2.5), c in rotation()) {
        let b = &a * &exp_map(&b);
        let d = log_rel(&a, &b).unwrap().norm();
        let moved = log_rel(&(&c * &a), &(&c * &b)).unwrap().norm();
        prop_assert!((d - moved).abs() < 1e-9);
        prop_assert!(log_rel(&a, &a).unwrap().norm() < 1e-12);
    }

    #[test]
    fn slerp_is_geodesic(a in rotation(), step in tangent(LIM), s in 0.0..=1.0f64) {
        let b = &a * &exp_map(&step);
        prop_assert!((slerp(&a, &b, 0.0).unwrap().matrix() - a.matrix()).norm() < 1e-12);
        prop_assert!((slerp(&a, &b, 1.0).unwrap().matrix() - b.matrix()).norm() < 1e-9);
        let part = distance(&a, &slerp(&a, &b, s).unwrap());
        prop_assert!((part - s * distance(&a, &b)).abs() < 1e-9);
        prop_assert!(slerp(&a, &b, 1.5).is_err());
    }

    #[test]
    fn quaternion_round_trip(r in rotation()) {
        let q = r.to_quaternion_wxyz();
        let back = Rotation::from_quaternion_wxyz(q).unwrap();
        prop_assert!((back.matrix() - r.matrix()).norm() < 1e-12);
    }

    #[test]
    fn qp_solution_respects_box_and_constraints(
        u0 in vec3(8.0),
        hs in proptest::collection::vec(halfspace(), 0..4),
    ) {
        let cfg = FilterConfig::default();
        let sol = solve_qp(&u0, &hs, &cfg);
        prop_assert!(sol.u_star.iter().all(|c| c.abs() <= cfg.u_max + 1e-12));
        let slack = if sol.feasible { 0.0 } else { sol.relaxation };
        for c in &hs {
            prop_assert!(c.value(&sol.u_star) + slack >= -1e-9);
        }
        if sol.feasible {
            prop_assert!(sol.kkt_residual < 1e-8);
            // the solution is a fixed point
            let again = solve_qp(&sol.u_star, &hs, &cfg);
            prop_assert!((again.u_star - sol.u_star).norm() < 1e-9);
        }
    }

    #[test]
    fn feasible_reference_passes_unchanged(u0 in vec3(4.0), dirs in proptest::collection::vec(vec3(1.0), 1..4)) {
        let hs: Vec<Halfspace> = dirs.iter().map(|a| Halfspace { a: *a, b: 0.1 - a.dot(&u0) }).collect();
        let sol = solve_qp(&u0, &hs, &FilterConfig::default());
        prop_assert!(sol.feasible);
        prop_assert!((sol.u_star - u0).norm() < 1e-12);
    }

    #[test]
    fn smoothstep_is_monotone_on_unit_interval(a in -0.5..1.5f64, b in -0.5..1.5f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(smoothstep(lo) <= smoothstep(hi));
        prop_assert!((0.0..=1.0).contains(&smoothstep(a)));
    }

    #[test]
    fn perturbation_is_bounded_by_amplitude(t in -1.0..10.0f64) {
        let p = PerturbationProfile::default();
        let u = smooth_step(t, &p);
        prop_assert!(u.norm() <= Vector3::from(p.amplitude).norm() + 1e-15);
    }

    #[test]
    fn nacv_vanishes_on_the_reference_and_is_nonnegative(
        frames in proptest::collection::vec((rotation(), tangent(1.0), 0.05..1.5f64), 1..20),
    ) {
        let reference: Vec<Rotation> = frames.iter().map(|f| f.0).collect();
        let actual: Vec<Rotation> = frames.iter().map(|f| &f.0 * &exp_map(&f.1)).collect();
        let angles: Vec<[f64; 3]> = frames.iter().map(|f| [f.2; 3]).collect();
        prop_assert_eq!(nacv(&reference, &reference, &angles).unwrap(), 0.0);
        prop_assert!(nacv(&actual, &reference, &angles).unwrap() >= 0.0);
    }

    #[test]
    fn input_weight_decays_monotonically(age in 0u64..500, hold in 0u64..200, fade in 1u64..200) {
        let w = input_weight(age, hold, fade);
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert!(input_weight(age + 1, hold, fade) <= w);
        prop_assert_eq!(input_weight(hold + fade, hold, fade), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn learned_ds_decreases_lyapunov(v in tangent(2.5)) {
        let m = l_model();
        let r = m.goal() * &exp_map(&v);
        prop_assert!(m.ds.lyapunov_rate(&r).unwrap() <= 1e-12);
        prop_assert!(m.ds.lyapunov_value(&r) >= 0.0);
    }

    #[test]
    fn cone_angles_stay_in_range(v in tangent(2.5)) {
        let m = l_model();
        let r = m.goal() * &exp_map(&v);
        for th in m.cones.angles(&r) {
            prop_assert!(th >= m.cones.angle_floor && th < std::f64::consts::FRAC_PI_2);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn resampled_rows_sit_at_grid_distances(seed in 0u64..1000, shape in 0usize..3, m in 10usize..60) {
        let set = demonstration_set(Shape::ALL[shape], seed, Rotation::identity(), &FixtureConfig::default());
        let rs = resample_by_distance(&set, m).unwrap();
        prop_assert_eq!(rs.grid().len(), m + 1);
        for (d, row) in rs.grid().iter().zip(rs.frames()) {
            for r in row {
                prop_assert!((distance(r, rs.goal()) - d).abs() < 1e-6);
            }
        }
    }
}
