use drgp::reformulate::{SliceName, SmoothProgram};

/// Exact-penalty value `f(z) + ρ Σ max(0, g_i(z))`.
pub fn penalty(sp: &SmoothProgram, z: &[f64], rho: f64) -> Option<f64> {
    let f = sp.f(z).ok()?;
    let g = sp.eval_g(z).ok()?;
    Some(f + rho * g.iter().map(|v| v.max(0.0)).sum::<f64>())
}

/// Keeps log-probability variables strictly negative.
fn project(sp: &SmoothProgram, z: &mut [f64]) {
    if let Some(xr) = sp.layout().get(SliceName::X) {
        for x in &mut z[xr] {
            *x = x.min(-1e-6);
        }
    }
}

/// Minimises the exact penalty with a projected, normalised subgradient method and step
/// `step0 / √k`, restarted from the best point with a halved step. Returns the best
/// point found and its penalty value.
pub fn subgradient_minimize(
    sp: &SmoothProgram,
    start: &[f64],
    rho: f64,
    step0: f64,
    iters: usize,
    restarts: usize,
) -> (Vec<f64>, f64) {
    let mut best = start.to_vec();
    let mut best_val = penalty(sp, &best, rho).expect("start must evaluate");
    let mut step = step0;
    for _ in 0..restarts {
        let mut z = best.clone();
        for k in 1..=iters {
            let ev = sp.evaluate(&z).expect("projected iterate must evaluate");
            let mut s = ev.grad_f.clone();
            for (i, &gi) in ev.g.iter().enumerate() {
                if gi > 0.0 {
                    for (sj, &jij) in s.iter_mut().zip(ev.jac.row(i)) {
                        *sj += rho * jij;
                    }
                }
            }
            let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            let a = step / (k as f64).sqrt() / norm;
            for (zj, sj) in z.iter_mut().zip(&s) {
                *zj -= a * sj;
            }
            project(sp, &mut z);
            if let Some(v) = penalty(sp, &z, rho) {
                if v < best_val {
                    best_val = v;
                    best.copy_from_slice(&z);
                }
            }
        }
        step *= 0.5;
    }
    (best, best_val)
}
