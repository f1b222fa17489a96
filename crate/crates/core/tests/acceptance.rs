//! Acceptance run: every criterion prints one PASS/FAIL line, then the test fails if
//! any criterion did.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::Instant;

use drgp::bench::{make_box3d, make_multishape, make_sinr, perturbed_box3d, SinrConfig, BOX_EPS_SWEEP};
use drgp::car::{car_solve, default_y0, gap, CarConfig};
use drgp::duplex::{
    apply_mutation, dilation, diversity, pso_step, solve_duplex, wavelet_mu, wavelet_mutate, DuplexConfig, Particle,
    PsoParams,
};
use drgp::gp::{central_difference, central_difference_jacobian, AmbiguityKind, AmbiguityParams};
use drgp::neuro::{
    integrate_to_equilibrium, lyapunov_energy, solve, solve_batch, solve_batch_cold, IntegratorConfig, NeuroState,
    SolveReport,
};
use drgp::reformulate::{build, build_two_moment_ind, builder_for, Coupling, RobustGP, SliceName, SmoothProgram};
use drgp::report::{shape_epsilon, table_scenarios};
use drgp::robustness::{count_violations, Distribution, ScenarioConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Best-so-far histories of every duplex run made here.
static HISTORIES: Mutex<Vec<Vec<f64>>> = Mutex::new(Vec::new());

fn duplex(sp: &SmoothProgram, seed: u64) -> SolveReport {
    let rep = solve_duplex(sp, &DuplexConfig { seed, ..DuplexConfig::default() }).unwrap();
    HISTORIES.lock().unwrap().push(rep.best_history.clone());
    rep
}

/// Single network for convex programs, the duplex for biconvex ones.
fn solve_any(p: &RobustGP, seed: u64) -> SolveReport {
    let sp = build(p).unwrap();
    if sp.is_biconvex() {
        duplex(&sp, seed)
    } else {
        solve(&sp, &IntegratorConfig::default()).unwrap()
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_time(start: Instant, limit_s: f64, detail: String) -> Outcome {
    let t = start.elapsed().as_secs_f64();
    check(t <= limit_s, format!("{detail}; {t:.1}s of {limit_s}s"))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    let mut points = 0;
    for (kind, coupling) in [
        (AmbiguityKind::TwoMoment, Coupling::Independent),
        (AmbiguityKind::TwoMoment, Coupling::Dependent),
        (AmbiguityKind::FirstMomentNonneg, Coupling::Independent),
        (AmbiguityKind::FirstMomentNonneg, Coupling::Dependent),
    ] {
        let build = builder_for(kind, coupling);
        for (idx, p) in common::instances(kind, coupling).iter().enumerate() {
            let sp = build(p).unwrap();
            for z in common::unguarded_points(&sp, 100, 100 + idx as u64) {
                let grad = sp.grad_f(&z).unwrap();
                let fd = central_difference(|x| sp.f(x).ok(), &z).unwrap();
                let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
                worst = worst.max(norm(&diff) / norm(&fd).max(1.0));
                let jac = sp.jac_g(&z).unwrap();
                let jfd = central_difference_jacobian(|x| sp.eval_g(x).unwrap(), &z);
                for i in 0..sp.n_g() {
                    let diff: Vec<f64> = jac.row(i).iter().zip(jfd.row(i)).map(|(a, b)| a - b).collect();
                    worst = worst.max(norm(&diff) / norm(jfd.row(i)).max(1.0));
                }
                points += 1;
            }
        }
    }
    let detail = format!("{points} points, worst relative error {worst:.2e}");
    check(worst <= 1e-6, detail.clone())?;
    within_time(start, 10.0, detail)
}

fn kkt_certification() -> Outcome {
    let start = Instant::now();
    let mut problems = Vec::new();
    for coupling in [Coupling::Independent, Coupling::Dependent] {
        problems.push(make_box3d(0.05, AmbiguityKind::TwoMoment, coupling).unwrap());
        for m in [3, 5] {
            problems.push(make_multishape(m, 0.15, AmbiguityKind::TwoMoment, coupling, 0).unwrap());
        }
    }
    let (mut kkt, mut viol) = (0.0_f64, 0.0_f64);
    for p in &problems {
        let rep = solve(&build(p).unwrap(), &IntegratorConfig::default()).unwrap();
        if !rep.converged() {
            return Err(format!("{} did not converge", rep.formulation));
        }
        kkt = kkt.max(rep.kkt_residual);
        viol = viol.max(rep.max_violation);
    }
    let detail = format!("{} solves, max kkt {kkt:.2e}, max violation {viol:.2e}", problems.len());
    check(kkt <= 1e-5 && viol <= 1e-6, detail.clone())?;
    within_time(start, 60.0, detail)
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let p = make_box3d(0.05, AmbiguityKind::TwoMoment, Coupling::Independent).unwrap();
    let sp = build(&p).unwrap();
    let net = solve(&sp, &IntegratorConfig::default()).unwrap();
    let rho = 10.0 * (1.0 + net.multipliers.iter().fold(0.0_f64, |m, v| m.max(*v)));
    let (_, val) = common::oracle::subgradient_minimize(&sp, &sp.default_start(), rho, 0.5, 20_000, 12);
    let rel = (val - net.objective).abs() / net.objective;
    let detail = format!("network {:.6}, penalty oracle {val:.6}, relative {rel:.2e}", net.objective);
    check(rel <= 1e-3, detail.clone())?;
    within_time(start, 120.0, detail)
}

fn initial_point_invariance() -> Outcome {
    let p = make_multishape(5, 0.15, AmbiguityKind::TwoMoment, Coupling::Independent, 0).unwrap();
    let sp = build(&p).unwrap();
    let cfg = IntegratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let xr = sp.layout().slice(SliceName::X);
    let mut objectives = Vec::new();
    for _ in 0..10 {
        let z: Vec<f64> = (0..sp.n())
            .map(|j| {
                if xr.contains(&j) {
                    rng.random_range(-0.5..-0.01)
                } else {
                    rng.random_range(-2.0..2.0)
                }
            })
            .collect();
        let gamma: Vec<f64> = (0..sp.n_g()).map(|_| rng.random_range(0.0..1.0)).collect();
        let rep = integrate_to_equilibrium(&sp, &NeuroState::new(z, gamma), &cfg).unwrap();
        if !rep.converged() {
            return Err("a start did not converge".into());
        }
        objectives.push(rep.objective);
    }
    let lo = objectives.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = objectives.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    check(hi - lo <= 1e-3, format!("10 starts, objective {lo:.6}, spread {:.2e}", hi - lo))
}

fn box_band() -> Outcome {
    let mut lines = Vec::new();
    let mut hit = None;
    for eps in BOX_EPS_SWEEP {
        let mut row = Vec::new();
        for coupling in [Coupling::Independent, Coupling::Dependent] {
            let p = make_box3d(eps, AmbiguityKind::TwoMoment, coupling).unwrap();
            let rep = solve_any(&p, 0);
            let vs = count_violations(&p, &rep.t_solution, &table_scenarios(0)).unwrap().results[0].violated;
            row.push((rep.objective, vs));
        }
        let (ind, dep) = (row[0], row[1]);
        lines.push(format!("eps {eps}: {:.4}/{:.4} VS {}/{}", ind.0, dep.0, ind.1, dep.1));
        let band = (ind.0 / 0.296 - 1.0).abs() <= 0.02 && (dep.0 / 0.298 - 1.0).abs() <= 0.02;
        if band && dep.0 >= ind.0 && ind.1 == 0 && dep.1 == 0 && hit.is_none() {
            hit = Some(eps);
        }
    }
    let detail = format!("{} (independent/dependent)", lines.join("; "));
    match hit {
        Some(eps) => Ok(format!("band met at eps {eps}; {detail}")),
        None => Err(detail),
    }
}

fn conservatism() -> Outcome {
    let mut cases = 0;
    let mut failures = Vec::new();
    for m in [3, 5, 10] {
        for kind in [AmbiguityKind::TwoMoment, AmbiguityKind::FirstMomentNonneg] {
            for seed in 0..10 {
                let mut out = Vec::new();
                for coupling in [Coupling::Independent, Coupling::Dependent] {
                    let p = make_multishape(m, shape_epsilon(kind), kind, coupling, seed).unwrap();
                    let rep = solve_any(&p, seed);
                    let vs = count_violations(&p, &rep.t_solution, &table_scenarios(seed)).unwrap().results[0].violated;
                    out.push((rep.objective, vs, rep.converged()));
                }
                let (ind, dep) = (out[0], out[1]);
                cases += 1;
                if !(ind.2 && dep.2 && dep.0 >= ind.0 && dep.1 <= ind.1 + 2) {
                    failures.push(format!("m {m} {kind} seed {seed}: {ind:?} vs {dep:?}"));
                }
            }
        }
    }
    check(
        failures.is_empty(),
        format!("{cases} instance pairs, {} failures {failures:?}", failures.len()),
    )
}

fn duplex_monotone() -> Outcome {
    let histories = HISTORIES.lock().unwrap();
    let bad = histories
        .iter()
        .filter(|h| h.windows(2).any(|w| w[1] > w[0]))
        .count();
    check(
        bad == 0 && !histories.is_empty(),
        format!("{} duplex runs checked, {bad} with a rising best-so-far", histories.len()),
    )
}

fn lyapunov() -> Outcome {
    let cfg = IntegratorConfig {
        record_trajectory: true,
        ..IntegratorConfig::default()
    };
    let mut worst = f64::NEG_INFINITY;
    let mut samples = 0;
    for p in [
        make_box3d(0.05, AmbiguityKind::TwoMoment, Coupling::Independent).unwrap(),
        make_box3d(0.15, AmbiguityKind::TwoMoment, Coupling::Dependent).unwrap(),
        make_multishape(5, 0.15, AmbiguityKind::TwoMoment, Coupling::Independent, 1).unwrap(),
    ] {
        let rep = solve(&build(&p).unwrap(), &cfg).unwrap();
        if !rep.converged() {
            return Err(format!("{} did not converge", rep.formulation));
        }
        let e = lyapunov_energy(&rep.trajectory);
        samples += e.len();
        worst = e.windows(2).map(|w| w[1] - w[0]).fold(worst, f64::max);
    }
    check(
        worst <= 1e-8,
        format!("3 trajectories, {samples} samples, largest step change {worst:.2e}"),
    )
}

fn duplex_vs_car() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for k in [5, 10] {
        let p = make_sinr(k, true, 0.2, AmbiguityKind::FirstMomentNonneg, 0, &SinrConfig::default()).unwrap();
        let sp = build(&p).unwrap();
        let d = duplex(&sp, 0);
        let c = car_solve(&sp, &default_y0(&sp), &CarConfig::default()).unwrap();
        let g = gap(c.objective, d.objective).unwrap();
        ok &= d.objective <= c.objective + 1e-3 && (0.0..=0.10).contains(&g);
        lines.push(format!(
            "K {k}: duplex {:.4} car {:.4} GAP {:.2}%",
            d.objective,
            c.objective,
            100.0 * g
        ));
    }
    let detail = lines.join("; ");
    check(ok, detail.clone())?;
    within_time(start, 300.0, detail)
}

fn robust_vs_stochastic() -> Outcome {
    let seed = 0;
    let scen = ScenarioConfig {
        seed,
        ..ScenarioConfig::default()
    };
    let mut robust_max = 0;
    let mut robust_logistic = 0;
    let mut ns_instance = None;
    for coupling in [Coupling::Independent, Coupling::Dependent] {
        let p = make_multishape(5, 0.2, AmbiguityKind::FirstMomentNonneg, coupling, seed).unwrap();
        let rep = solve_any(&p, seed);
        let r = count_violations(&p, &rep.t_solution, &scen).unwrap();
        robust_max = robust_max.max(r.results.iter().map(|x| x.violated).max().unwrap());
        robust_logistic = robust_logistic.max(r.vs(Distribution::Logistic).unwrap());
        ns_instance.get_or_insert(p);
    }
    let mut baseline = make_multishape(5, 0.2, AmbiguityKind::TwoMoment, Coupling::Independent, seed).unwrap();
    baseline.ambiguity = AmbiguityParams::uniform(AmbiguityKind::TwoMoment, baseline.n_blocks(), 0.0, 0.0);
    let rep = solve_any(&baseline, seed);
    let r = count_violations(ns_instance.as_ref().unwrap(), &rep.t_solution, &scen).unwrap();
    let base_logistic = r.vs(Distribution::Logistic).unwrap();
    check(
        robust_max <= 2 && base_logistic > robust_logistic,
        format!("robust VS max {robust_max}, logistic robust {robust_logistic} vs baseline {base_logistic}"),
    )
}

fn swarm_properties() -> Outcome {
    let mut failures = Vec::new();
    if wavelet_mu(0.0, 1.0) != 1.0 {
        failures.push("wavelet at origin");
    }
    if dilation(20, 20) != 10f64.exp() {
        failures.push("final dilation");
    }
    let bounds = vec![(-1.0, 2.0), (0.0, 0.5), (-5.0, -4.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for j in 0..=20 {
        for _ in 0..200 {
            let x: Vec<f64> = bounds.iter().map(|&(l, h)| rng.random_range(l..=h)).collect();
            let mut p = Particle::at(x.clone());
            wavelet_mutate(&mut p, &bounds, j, 20, &mut rng);
            let mut q = x;
            apply_mutation(&mut q, rng.random_range(-4.0..4.0), &bounds);
            if p.position.iter().chain(&q).zip(bounds.iter().chain(&bounds)).any(|(v, &(l, h))| *v < l || *v > h) {
                failures.push("mutation left the box");
            }
        }
    }
    let best = vec![0.2, 0.3];
    if diversity(&vec![Particle::at(best.clone()); 3], &best) != 0.0 {
        failures.push("diversity of identical particles");
    }
    let mut p = Particle::at(vec![1.0, 2.0]);
    p.velocity = vec![0.25, -0.5];
    pso_step(&mut p, &[9.0, 9.0], &PsoParams { w: 1.0, c1: 0.0, c2: 0.0 }, 0.4, 0.6);
    if p.position != vec![1.25, 1.5] || p.velocity != vec![0.25, -0.5] {
        failures.push("pure inertia");
    }
    failures.dedup();
    check(failures.is_empty(), format!("failures: {failures:?}"))
}

fn batch() -> Outcome {
    let cfg = IntegratorConfig::default();
    let family = perturbed_box3d(20, 0.1, Coupling::Independent, 0.05, 7).unwrap();
    let run = |warm: bool| -> Vec<SolveReport> {
        let f = if warm { solve_batch } else { solve_batch_cold };
        f(build_two_moment_ind, &family, &cfg).into_iter().map(|r| r.unwrap()).collect()
    };
    let warm = run(true);
    let cold = run(false);
    let repeat = warm == run(true);
    let twins = vec![family[3].clone(); 4];
    let twin_reports: Vec<SolveReport> = solve_batch(build_two_moment_ind, &twins, &cfg)
        .into_iter()
        .map(|r| r.unwrap())
        .collect();
    let identical = twin_reports.iter().all(|r| *r == twin_reports[0]);
    let mean = |r: &[SolveReport]| r.iter().map(|x| x.field_evals as f64).sum::<f64>() / r.len() as f64;
    let ratio = mean(&warm) / mean(&cold);
    check(
        repeat && identical && ratio <= 0.5 && warm.iter().all(SolveReport::converged),
        format!(
            "repeat identical {repeat}, twins identical {identical}, warm/cold evaluations {:.0}/{:.0} = {ratio:.3}",
            mean(&warm),
            mean(&cold)
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(usize, &str, fn() -> Outcome); 12] = [
        (1, "gradient and Jacobian correctness", gradients),
        (2, "KKT certification", kkt_certification),
        (3, "penalty oracle equivalence", oracle_equivalence),
        (4, "initial-point invariance", initial_point_invariance),
        (5, "open box band", box_band),
        (6, "conservatism ordering", conservatism),
        (9, "duplex vs alternating search", duplex_vs_car),
        (10, "robust vs stochastic stress", robust_vs_stochastic),
        (7, "duplex monotonicity", duplex_monotone),
        (8, "Lyapunov descent", lyapunov),
        (11, "mutation and swarm properties", swarm_properties),
        (12, "batch determinism and warm starts", batch),
    ];
    let mut results = Vec::new();
    for (id, name, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        eprintln!("  criterion {id} finished in {:.1}s", start.elapsed().as_secs_f64());
        results.push((id, name, outcome));
    }
    results.sort_by_key(|r| r.0);
    // Written to stderr directly so the lines show up even when output is captured.
    let mut err = std::io::stderr().lock();
    let mut failed = 0;
    for (id, name, outcome) in &results {
        let line = match outcome {
            Ok(detail) => format!("PASS {id:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                format!("FAIL {id:>2} {name}: {detail}")
            }
        };
        writeln!(err, "{line}").unwrap();
    }
    drop(err);
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
