//! Alternating convex search over the `(z, y)` partition of a biconvex program.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, DrgpError, Result};
use crate::neuro::{integrate_to_equilibrium, report_at, IntegratorConfig, IterationRecord, NeuroState, SolveReport, SolveStatus};
use crate::reformulate::{Convexity, SliceName, SmoothProgram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarConfig {
    pub max_rounds: usize,
    /// Stop once a round improves `f` by less than this.
    pub round_tol: f64,
    pub inner: IntegratorConfig,
    /// Feasibility tolerance for accepting a z-step.
    pub feas_tol: f64,
}

impl Default for CarConfig {
    fn default() -> Self {
        Self {
            max_rounds: 50,
            round_tol: 1e-6,
            inner: IntegratorConfig::default(),
            feas_tol: 1e-6,
        }
    }
}

impl CarConfig {
    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        if self.max_rounds == 0 || !(self.round_tol > 0.0) || !(self.feas_tol >= 0.0) {
            return Err(DrgpError::Config("max_rounds >= 1 and round_tol > 0 required".into()));
        }
        Ok(())
    }
}

/// Default `y0 = 1 − ε/(K+1)` in every block: inside the unit box with
/// `Σ y = K − Kε/(K+1) > K − ε`.
pub fn default_y0(sp: &SmoothProgram) -> Vec<f64> {
    let p = sp.problem();
    let k = p.n_blocks() as f64;
    vec![1.0 - p.epsilon / (k + 1.0); p.n_blocks()]
}

/// The y-step: minimises `max_k (a_k y_k + b_k)` over `y ∈ [lo, hi]^K` with
/// `Σ y ≥ total`, where row `k` of the program is affine in `y_k` with slope `a_k > 0`.
/// Water-filling on the common level `τ`, located by bisection.
pub fn min_max_affine(a: &[f64], b: &[f64], lo: f64, hi: f64, total: f64) -> Option<Vec<f64>> {
    let k = a.len();
    if total > k as f64 * hi + 1e-12 || a.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return None;
    }
    let at = |tau: f64| -> Vec<f64> { (0..k).map(|i| ((tau - b[i]) / a[i]).clamp(lo, hi)).collect() };
    let sum = |y: &[f64]| y.iter().sum::<f64>();
    let mut t_lo = (0..k).map(|i| a[i] * lo + b[i]).fold(f64::INFINITY, f64::min);
    let mut t_hi = (0..k).map(|i| a[i] * hi + b[i]).fold(f64::NEG_INFINITY, f64::max);
    if sum(&at(t_lo)) >= total {
        return Some(at(t_lo));
    }
    for _ in 0..200 {
        let mid = 0.5 * (t_lo + t_hi);
        if sum(&at(mid)) >= total {
            t_hi = mid;
        } else {
            t_lo = mid;
        }
    }
    Some(at(t_hi))
}

/// Slopes and intercepts of the y-dependent dual rows `y_k e^{−λ̃_k} + M_k − 1` at `z`.
fn dual_row_affine(sp: &SmoothProgram, full: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = sp.problem().n_blocks();
    let ev = sp.evaluate(full)?;
    let yr = sp.layout().slice(SliceName::Y);
    let first = 1 + 2 * k;
    let mut a = Vec::with_capacity(k);
    let mut b = Vec::with_capacity(k);
    for i in 0..k {
        let slope = ev.jac[(first + i, yr.start + i)];
        a.push(slope);
        b.push(ev.g[first + i] - slope * full[yr.start + i]);
    }
    Ok((a, b))
}

/// Alternating convex search from `y0`.
///
/// Each round solves the convex z-problem at fixed `y` with the projection network
/// (warm-started), then re-centres `y` by minimising the worst y-dependent constraint
/// subject to the coupling row. Rounds whose z-step is infeasible keep the previous
/// iterate; the first such failure restarts from [`default_y0`].
pub fn car_solve(sp: &SmoothProgram, y0: &[f64], cfg: &CarConfig) -> Result<SolveReport> {
    cfg.validate()?;
    let zr = match sp.convexity() {
        Convexity::Biconvex { z, .. } => z.clone(),
        Convexity::Convex => return Err(DrgpError::Convexity("convex")),
    };
    let p = sp.problem();
    let k = p.n_blocks();
    check_len("y0", k, y0.len())?;
    let (y_lo, y_hi) = (1e-6, 1.0 - 1e-6);
    let total = k as f64 - p.epsilon;

    let mut y = y0.to_vec();
    let mut warm: Option<NeuroState> = None;
    // (full point, multipliers of the full program, objective)
    let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
    let mut history = Vec::new();
    let mut log = Vec::new();
    let mut field_evals = 0;
    let mut restarted = false;
    let mut rounds = 0;
    while rounds < cfg.max_rounds {
        rounds += 1;
        let sub = sp.restrict_y(&y)?;
        let s0 = match &warm {
            Some(s) => s.clone(),
            None => NeuroState::primal(sub.default_start(), sub.n_g()),
        };
        let rep = integrate_to_equilibrium(&sub, &s0, &cfg.inner)?;
        field_evals += rep.field_evals;
        if !(rep.converged() && rep.max_violation <= cfg.feas_tol) {
            if best.is_none() && !restarted {
                restarted = true;
                y = default_y0(sp);
                warm = None;
                continue;
            }
            break;
        }
        warm = Some(NeuroState::new(rep.z.clone(), rep.multipliers.clone()));
        let full = sp.join(&rep.z, &y);
        let prev = best.as_ref().map_or(f64::INFINITY, |b| b.2);
        if rep.objective < prev {
            let mut mult = vec![0.0; 1 + 2 * k];
            mult.extend_from_slice(&rep.multipliers);
            best = Some((full.clone(), mult, rep.objective));
        }
        let cur = best.as_ref().map_or(f64::INFINITY, |b| b.2);
        history.push(cur);
        log.push(IterationRecord {
            iteration: rounds,
            best_fitness: cur,
            diversity: 0.0,
            mutated: false,
        });
        if prev.is_finite() && prev - cur < cfg.round_tol {
            break;
        }
        let (a, b) = dual_row_affine(sp, &full)?;
        match min_max_affine(&a, &b, y_lo, y_hi, total) {
            Some(next) => y = next,
            None => break,
        }
    }

    let mut report = match &best {
        Some((full, mult, _)) => {
            let mut state = full.clone();
            state.extend_from_slice(mult);
            report_at(sp, &state, SolveStatus::Converged)?
        }
        None => {
            let mut state = sp.join(&sp.default_start()[zr.clone()], &y);
            state.resize(sp.n() + sp.n_g(), 0.0);
            let mut r = report_at(sp, &state, SolveStatus::NoFeasiblePoint)?;
            r.objective = f64::INFINITY;
            r
        }
    };
    report.field_evals = field_evals;
    report.iterations = rounds;
    report.best_history = history;
    report.iteration_log = log;
    Ok(report)
}

/// `GAP = (Sol_CAR − Sol_duplex) / Sol_CAR`; positive when the duplex is better.
pub fn gap(sol_car: f64, sol_duplex: f64) -> Result<f64> {
    if sol_car == 0.0 || !sol_car.is_finite() || !sol_duplex.is_finite() {
        return Err(DrgpError::Config("gap needs a finite nonzero CAR objective".into()));
    }
    Ok((sol_car - sol_duplex) / sol_car)
}
