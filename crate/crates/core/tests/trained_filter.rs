use nalgebra::Vector3;
use safeflow::filter::FilterConfig;
use safeflow::fixtures::{default_set, Shape};
use safeflow::model::{learn, LearnConfig};
use safeflow::sim::{run, PerturbationProfile, SimConfig, Simulator};

#[test]
fn nominal_execution_of_trained_models_is_unfiltered() {
    for shape in Shape::ALL {
        let m = learn(&default_set(shape), &LearnConfig::default()).unwrap();
        let mut cfg = SimConfig::new(m.start, 12.0);
        cfg.perturbation = PerturbationProfile::none();
        let trace = run(&cfg, m.ds.clone(), m.cones.clone()).unwrap();
        for r in &trace.records {
            assert_eq!(r.u0, r.u_star, "{shape} filtered at t = {}", r.t);
            assert_eq!(r.r_exc, r.r_ref);
        }
        assert!(trace.summary.converged, "{shape}");
    }
}

#[test]
fn adversarial_command_is_boxed_and_safe_next_step() {
    let m = learn(&default_set(Shape::W), &LearnConfig::default()).unwrap();
    let u_max = FilterConfig::default().u_max;
    let mut sim = Simulator::new(SimConfig::new(m.start, 60.0), m.ds.clone(), m.cones.clone()).unwrap();
    let dirs = [Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.3, -1.0, 0.5), Vector3::new(-0.2, 0.4, -1.0)];
    for k in 0..3000 {
        let u = dirs[(k / 250) % 3].normalize() * 10.0 * u_max;
        let rec = sim.step(&u).unwrap();
        assert!(rec.u_star.iter().all(|c| c.abs() <= u_max + 1e-12));
        let next = sim.observe(&Vector3::zeros()).unwrap();
        assert!(next.h.iter().all(|h| *h >= -1e-6), "step {k}: h {:?}", next.h);
    }
}
