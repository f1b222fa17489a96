mod common;

use drgp::bench::{make_box3d, make_multishape};
use drgp::gp::AmbiguityKind;
use drgp::neuro::{integrate_to_equilibrium, lyapunov_energy, solve, IntegratorConfig, NeuroState};
use drgp::reformulate::{build, Coupling, SliceName};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn equilibria_satisfy_kkt() {
    let cfg = IntegratorConfig::default();
    let mut problems = Vec::new();
    for coupling in [Coupling::Independent, Coupling::Dependent] {
        problems.push(make_box3d(0.05, AmbiguityKind::TwoMoment, coupling).unwrap());
        for m in [3, 5] {
            problems.push(make_multishape(m, 0.15, AmbiguityKind::TwoMoment, coupling, 0).unwrap());
        }
    }
    for p in &problems {
        let sp = build(p).unwrap();
        let rep = solve(&sp, &cfg).unwrap();
        assert!(rep.converged(), "{}", sp.name());
        assert!(rep.kkt_residual <= 1e-5, "{}: kkt {:e}", sp.name(), rep.kkt_residual);
        assert!(rep.max_violation <= 1e-6, "{}: violation {:e}", sp.name(), rep.max_violation);
        assert!(rep.multipliers.iter().all(|&m| m >= 0.0));
    }
}

#[test]
fn random_starts_reach_the_same_objective() {
    let p = make_multishape(5, 0.15, AmbiguityKind::TwoMoment, Coupling::Independent, 0).unwrap();
    let sp = build(&p).unwrap();
    let cfg = IntegratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xr = sp.layout().slice(SliceName::X);
    let objectives: Vec<f64> = (0..10)
        .map(|_| {
            let mut z = sp.default_start();
            for (j, v) in z.iter_mut().enumerate() {
                *v = if xr.contains(&j) {
                    rng.random_range(-0.5..-0.01)
                } else {
                    rng.random_range(-2.0..2.0)
                };
            }
            let gamma: Vec<f64> = (0..sp.n_g()).map(|_| rng.random_range(0.0..1.0)).collect();
            let rep = integrate_to_equilibrium(&sp, &NeuroState::new(z, gamma), &cfg).unwrap();
            assert!(rep.converged());
            rep.objective
        })
        .collect();
    let lo = objectives.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = objectives.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    eprintln!("spread {:e} over {objectives:?}", hi - lo);
    assert!(hi - lo <= 1e-3);
}

#[test]
fn energy_decreases_along_trajectories() {
    let cfg = IntegratorConfig {
        record_trajectory: true,
        ..IntegratorConfig::default()
    };
    for p in [
        make_box3d(0.05, AmbiguityKind::TwoMoment, Coupling::Independent).unwrap(),
        make_box3d(0.15, AmbiguityKind::TwoMoment, Coupling::Dependent).unwrap(),
        make_multishape(3, 0.15, AmbiguityKind::TwoMoment, Coupling::Independent, 2).unwrap(),
    ] {
        let sp = build(&p).unwrap();
        let rep = solve(&sp, &cfg).unwrap();
        assert!(rep.converged());
        assert!(rep.trajectory.len() > 10);
        let energy = lyapunov_energy(&rep.trajectory);
        let worst = energy.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        eprintln!("{}: {} samples, worst increase {worst:e}", sp.name(), energy.len());
        assert!(worst <= 1e-8);
    }
}
