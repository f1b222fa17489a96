//! Adaptive Dormand–Prince 5(4) integrator with first-same-as-last reuse.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{DrgpError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Rk45Config {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_step: f64,
    pub max_steps: usize,
    /// End the explicit integration once the problem is detected as stiff.
    pub stop_when_stiff: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepControl {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeOutcome {
    pub t: f64,
    pub y: Vec<f64>,
    /// Derivative at the final point.
    pub dy: Vec<f64>,
    /// Right-hand side calls; Jacobian calls are not included.
    pub n_evals: usize,
    pub n_accepted: usize,
    pub n_rejected: usize,
    /// True when the step callback requested a stop.
    pub stopped: bool,
    /// True when the explicit integrator ended on a stiffness detection.
    pub stiff_detected: bool,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// error weights: fifth-order minus embedded fourth-order solution
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `dy/dt = rhs(t, y)` from `t0` towards `t_end`.
///
/// `on_step(t, y, dy)` runs at the initial point and after every accepted step, with
/// the derivative at that point; returning [`StepControl::Stop`] ends the integration.
/// Reaching `t_end` or `max_steps` ends it with `stopped = false`.
pub fn integrate<F, C>(
    mut rhs: F,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    cfg: &Rk45Config,
    mut on_step: C,
) -> Result<OdeOutcome>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    C: FnMut(f64, &[f64], &[f64]) -> StepControl,
{
    if !(cfg.abs_tol > 0.0 && cfg.rel_tol > 0.0 && cfg.max_step > 0.0) {
        return Err(DrgpError::Config("tolerances and max step must be positive".into()));
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];

    rhs(t, &y, &mut k1)?;
    let mut n_evals = 1;
    let outcome = |t, y: Vec<f64>, dy: Vec<f64>, n_evals, n_acc, n_rej, stopped, stiff_detected| OdeOutcome {
        t,
        y,
        dy,
        n_evals,
        n_accepted: n_acc,
        n_rejected: n_rej,
        stopped,
        stiff_detected,
    };
    if on_step(t, &y, &k1) == StepControl::Stop {
        return Ok(outcome(t, y, k1, n_evals, 0, 0, true, false));
    }

    let scale = |a: f64, b: f64| cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs());
    let mut h = {
        // Hairer's starting-step heuristic
        let d0 = rms(y.iter().map(|&v| v / scale(v, v)));
        let d1 = rms(y.iter().zip(&k1).map(|(&v, &d)| d / scale(v, v)));
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        for i in 0..n {
            tmp[i] = y[i] + h0 * k1[i];
        }
        n_evals += 1;
        let d2 = match rhs(t + h0, &tmp, &mut k2) {
            Ok(()) => rms((0..n).map(|i| (k2[i] - k1[i]) / scale(y[i], y[i]))) / h0,
            Err(_) => f64::INFINITY,
        };
        let h1 = if !d2.is_finite() {
            h0
        } else if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(cfg.max_step)
    };

    let mut n_acc = 0;
    let mut n_rej = 0;
    // Consecutive accepted steps with h·|λ| beyond the stability boundary, and since not.
    let (mut stiff_run, mut calm_run) = (0, 0);
    while n_acc + n_rej < cfg.max_steps {
        let remaining = t_end - t;
        if remaining <= 0.0 {
            break;
        }
        h = h.min(cfg.max_step).min(remaining);
        if h < min_step(t) {
            return Err(DrgpError::NonFiniteState {
                time: t,
                state: y.clone(),
            });
        }

        let stages = (|| -> Result<()> {
            for i in 0..n {
                tmp[i] = y[i] + h * A21 * k1[i];
            }
            rhs(t + C2 * h, &tmp, &mut k2)?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
            }
            rhs(t + C3 * h, &tmp, &mut k3)?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            rhs(t + C4 * h, &tmp, &mut k4)?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            rhs(t + C5 * h, &tmp, &mut k5)?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            rhs(t + h, &tmp, &mut k6)?;
            for i in 0..n {
                y_new[i] = y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
            }
            rhs(t + h, &y_new, &mut k7)
        })();
        n_evals += 6;
        // A failing trial stage means the step overshot into a region where the field
        // is not finite; retry with a smaller step from the accepted state.
        if let Err(e) = stages {
            if h <= min_step(t) {
                return Err(e);
            }
            n_rej += 1;
            h *= 0.25;
            continue;
        }

        let err = rms((0..n).map(|i| {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            e / scale(y[i], y_new[i])
        }));
        if !err.is_finite() {
            n_rej += 1;
            h *= 0.2;
            continue;
        }
        if err <= 1.0 {
            n_acc += 1;
            // Hairer's test: h·‖k7 − k6‖/‖y_new − y6‖ estimates h|λ| for the dominant mode,
            // where `tmp` still holds the sixth stage point y6.
            let num: f64 = (0..n).map(|i| (k7[i] - k6[i]).powi(2)).sum();
            let den: f64 = (0..n).map(|i| (y_new[i] - tmp[i]).powi(2)).sum();
            if den > 0.0 && h * (num / den).sqrt() > 3.25 {
                calm_run = 0;
                stiff_run += 1;
            } else {
                calm_run += 1;
                if calm_run >= 6 {
                    stiff_run = 0;
                }
            }
            t += h;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= factor;
            if on_step(t, &y, &k1) == StepControl::Stop {
                return Ok(outcome(t, y, k1, n_evals, n_acc, n_rej, true, false));
            }
            if cfg.stop_when_stiff && stiff_run >= 15 {
                return Ok(outcome(t, y, k1, n_evals, n_acc, n_rej, false, true));
            }
        } else {
            n_rej += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
    }
    Ok(outcome(t, y, k1, n_evals, n_acc, n_rej, false, false))
}

/// A Jacobian `J` that can factor the shifted matrix `I − s·J`.
pub trait ShiftedSystem {
    type Factor<'a>: ShiftedSolve
    where
        Self: 'a;
    fn factor(&self, s: f64) -> Option<Self::Factor<'_>>;
}

pub trait ShiftedSolve {
    fn solve(&self, b: &[f64]) -> Option<Vec<f64>>;
}

impl ShiftedSystem for DMatrix<f64> {
    type Factor<'a> = LU<f64, Dyn, Dyn>;

    fn factor(&self, s: f64) -> Option<Self::Factor<'_>> {
        let n = self.nrows();
        let lu = (DMatrix::<f64>::identity(n, n) - self * s).lu();
        lu.is_invertible().then_some(lu)
    }
}

impl ShiftedSolve for LU<f64, Dyn, Dyn> {
    fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        LU::solve(self, &DVector::from_column_slice(b)).map(|x| x.as_slice().to_vec())
    }
}

/// Linearly implicit Rosenbrock 2(3) integrator (Shampine–Reichelt) for stiff
/// autonomous systems `dy/dt = rhs(y)`. `jac(y)` returns `∂rhs/∂y`. A Jacobian is kept
/// for up to five accepted steps and refreshed after a rejection; the error estimate uses
/// fresh right-hand side values, so a stale Jacobian costs step size, not accuracy.
/// Step control and the callback behave as in [`integrate`].
pub fn integrate_stiff<F, J, M, C>(
    mut rhs: F,
    mut jac: J,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    cfg: &Rk45Config,
    mut on_step: C,
) -> Result<OdeOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    J: FnMut(&[f64]) -> Result<M>,
    M: ShiftedSystem,
    C: FnMut(f64, &[f64], &[f64]) -> StepControl,
{
    if !(cfg.abs_tol > 0.0 && cfg.rel_tol > 0.0 && cfg.max_step > 0.0) {
        return Err(DrgpError::Config("tolerances and max step must be positive".into()));
    }
    let n = y0.len();
    let d = 1.0 / (2.0 + std::f64::consts::SQRT_2);
    let e32 = 6.0 + std::f64::consts::SQRT_2;
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut f0 = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    let mut f2 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    rhs(&y, &mut f0)?;
    let mut n_evals = 1;
    if on_step(t, &y, &f0) == StepControl::Stop {
        return Ok(OdeOutcome {
            t,
            y,
            dy: f0,
            n_evals,
            n_accepted: 0,
            n_rejected: 0,
            stopped: true,
            stiff_detected: false,
        });
    }
    let scale = |a: f64, b: f64| cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs());
    let f_norm = rms(y.iter().zip(&f0).map(|(&v, &dv)| dv / scale(v, v)));
    let mut h = if f_norm > 0.0 { (0.01 / f_norm).min(cfg.max_step) } else { cfg.max_step };
    let (mut n_acc, mut n_rej) = (0, 0);
    let mut jacobian: Option<M> = None;
    let mut jac_age = 0;
    let mut stopped = false;
    while n_acc + n_rej < cfg.max_steps && t < t_end {
        h = h.min(cfg.max_step).min(t_end - t);
        if h < min_step(t) {
            return Err(DrgpError::NonFiniteState { time: t, state: y });
        }
        if jacobian.is_none() || jac_age >= JAC_MAX_AGE {
            jacobian = Some(jac(&y)?);
            jac_age = 0;
        }
        let Some(factor) = jacobian.as_ref().unwrap().factor(h * d) else {
            n_rej += 1;
            h *= 0.25;
            jac_age = JAC_MAX_AGE;
            continue;
        };
        let solve = |rhs_vec: &[f64]| ShiftedSolve::solve(&factor, rhs_vec);
        let attempt = (|| -> Result<Option<f64>> {
            let Some(k1) = solve(&f0) else { return Ok(None) };
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k1[i];
            }
            rhs(&tmp, &mut f1)?;
            let v: Vec<f64> = (0..n).map(|i| f1[i] - k1[i]).collect();
            let Some(s2) = solve(&v) else { return Ok(None) };
            let k2: Vec<f64> = (0..n).map(|i| s2[i] + k1[i]).collect();
            for i in 0..n {
                y_new[i] = y[i] + h * k2[i];
            }
            rhs(&y_new, &mut f2)?;
            let v: Vec<f64> = (0..n)
                .map(|i| f2[i] - e32 * (k2[i] - f1[i]) - 2.0 * (k1[i] - f0[i]))
                .collect();
            let Some(k3) = solve(&v) else { return Ok(None) };
            Ok(Some(rms((0..n).map(|i| {
                let e = h / 6.0 * (k1[i] - 2.0 * k2[i] + k3[i]);
                e / scale(y[i], y_new[i])
            }))))
        })();
        n_evals += 2;
        let err = match attempt {
            Ok(Some(e)) if e.is_finite() => e,
            Ok(_) | Err(_) => {
                n_rej += 1;
                h *= 0.25;
                jac_age = JAC_MAX_AGE;
                continue;
            }
        };
        if err <= 1.0 {
            n_acc += 1;
            t += h;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut f0, &mut f2);
            jac_age += 1;
            h *= if err == 0.0 { 5.0 } else { (0.8 * err.powf(-1.0 / 3.0)).clamp(0.2, 5.0) };
            if on_step(t, &y, &f0) == StepControl::Stop {
                stopped = true;
                break;
            }
        } else {
            n_rej += 1;
            h *= (0.8 * err.powf(-1.0 / 3.0)).clamp(0.2, 1.0);
            if jac_age > 0 {
                jac_age = JAC_MAX_AGE;
            }
        }
    }
    Ok(OdeOutcome {
        t,
        y,
        dy: f0,
        n_evals,
        n_accepted: n_acc,
        n_rejected: n_rej,
        stopped,
        stiff_detected: false,
    })
}

/// Accepted steps a Jacobian is reused for before it is recomputed.
const JAC_MAX_AGE: usize = 5;

/// Smallest step that still advances `t` in floating point.
fn min_step(t: f64) -> f64 {
    (4.0 * f64::EPSILON * t.abs()).max(f64::MIN_POSITIVE)
}

fn rms(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = it.fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}
