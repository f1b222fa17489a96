//! Single-timescale projection network
//!
//! ```text
//! κ dz/dt = −(∇f(z) + J(z)ᵀ (γ + g(z))₊)
//! κ dγ/dt = −γ + (γ + g(z))₊
//! ```
//!
//! whose equilibria are exactly the KKT points of a convex `SmoothProgram`.

use std::cell::RefCell;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, DrgpError, Result};
use crate::matrix::{dot, norm_inf};
use crate::ode::{integrate, integrate_stiff, OdeOutcome, Rk45Config, ShiftedSolve, ShiftedSystem, StepControl};
use crate::reformulate::{Evaluation, InstanceParameter, RobustGP, SmoothProgram};

/// Primal variables and constraint multipliers, `ζ = (z, γ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuroState {
    pub z: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl NeuroState {
    pub fn new(z: Vec<f64>, gamma: Vec<f64>) -> Self {
        Self { z, gamma }
    }

    /// `z` with all multipliers at zero.
    pub fn primal(z: Vec<f64>, n_g: usize) -> Self {
        Self {
            z,
            gamma: vec![0.0; n_g],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.z.clone();
        v.extend_from_slice(&self.gamma);
        v
    }

    pub fn from_flat(flat: &[f64], n: usize) -> Self {
        Self {
            z: flat[..n].to_vec(),
            gamma: flat[n..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub kappa: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Stop once `‖U(ζ)‖∞` falls to this level.
    pub equilibrium_tol: f64,
    /// Integration horizon in dynamical time.
    pub max_time: f64,
    pub max_steps: usize,
    pub method: Method,
    /// The network runs on the rows `c·g`, which leaves the feasible set and the KKT
    /// points unchanged but adds `c²·JᵀDJ` damping to the field Jacobian. States and
    /// reports always carry multipliers of the original rows.
    pub constraint_scale: f64,
    /// Tolerances for the Rosenbrock phase. Being L-stable it has no noise floor at the
    /// stability limit, so these can be much looser than the explicit ones.
    pub stiff_abs_tol: f64,
    pub stiff_rel_tol: f64,
    pub record_trajectory: bool,
}

/// Time-stepping scheme for the network ODE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Dormand–Prince 5(4) throughout.
    Explicit,
    /// Rosenbrock 2(3) throughout.
    Stiff,
    /// Dormand–Prince first; hands over to Rosenbrock once stiffness is detected or after
    /// `explicit_steps` steps.
    Auto { explicit_steps: usize },
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self::with_kappa(1.0)
    }
}

impl IntegratorConfig {
    pub fn with_kappa(kappa: f64) -> Self {
        Self {
            kappa,
            abs_tol: 1e-11,
            rel_tol: 1e-9,
            equilibrium_tol: 1e-6,
            max_time: 1e6 * kappa,
            max_steps: 2_000_000,
            method: Method::Auto { explicit_steps: 2_000 },
            constraint_scale: 1.0,
            stiff_abs_tol: 1e-8,
            stiff_rel_tol: 1e-6,
            record_trajectory: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.kappa,
            self.abs_tol,
            self.rel_tol,
            self.stiff_abs_tol,
            self.stiff_rel_tol,
            self.constraint_scale,
            self.equilibrium_tol,
            self.max_time,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(DrgpError::Config("integrator parameters must be positive and finite".into()));
        }
        if self.abs_tol > self.rel_tol || self.stiff_abs_tol > self.stiff_rel_tol {
            return Err(DrgpError::Config("abs_tol must not exceed rel_tol".into()));
        }
        if self.max_steps == 0 {
            return Err(DrgpError::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn stiff(&self) -> Rk45Config {
        Rk45Config {
            abs_tol: self.stiff_abs_tol,
            rel_tol: self.stiff_rel_tol,
            max_step: self.max_time,
            max_steps: self.max_steps,
            stop_when_stiff: false,
        }
    }

    pub(crate) fn rk(&self) -> Rk45Config {
        Rk45Config {
            abs_tol: self.abs_tol,
            rel_tol: self.rel_tol,
            max_step: 0.1 * self.kappa,
            max_steps: self.max_steps,
            stop_when_stiff: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    NotConverged,
    NoFeasiblePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub f: f64,
    pub kkt_residual: f64,
    /// `‖U(ζ(t))‖²`, the unscaled field.
    pub field_norm_sq: f64,
    pub state: Vec<f64>,
}

/// One outer iteration of a population or alternating solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub best_fitness: f64,
    pub diversity: f64,
    pub mutated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub formulation: String,
    /// Full decision vector (including `y` for biconvex programs).
    pub z: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub t_solution: Vec<f64>,
    pub y: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    /// `max(0, max_i g_i)` at the solution.
    pub max_violation: f64,
    pub field_norm: f64,
    pub field_evals: usize,
    pub steps: usize,
    pub final_time: f64,
    /// True when the run finished on the stiff integrator.
    pub stiff_switch: bool,
    /// Outer iterations (duplex rounds or alternation rounds); zero for a single network.
    pub iterations: usize,
    /// Best-so-far objective after each outer iteration.
    pub best_history: Vec<f64>,
    pub iteration_log: Vec<IterationRecord>,
    pub trajectory: Vec<TrajectorySample>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Writes the trajectory as CSV: `t,f,kkt_residual,s0,s1,…`.
    pub fn write_trajectory_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let width = self.trajectory.first().map_or(0, |s| s.state.len());
        let mut header = vec!["t".to_string(), "f".into(), "kkt_residual".into()];
        header.extend((0..width).map(|i| format!("s{i}")));
        writeln!(out, "{}", header.join(","))?;
        for s in &self.trajectory {
            let mut row = vec![s.t.to_string(), s.f.to_string(), s.kkt_residual.to_string()];
            row.extend(s.state.iter().map(f64::to_string));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub fn project_plus(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// Unscaled field `U(ζ)` at the evaluation `ev` of `z`, written into `out`.
pub(crate) fn field_from_eval(ev: &Evaluation, gamma: &[f64], out: &mut [f64], p: &mut [f64]) {
    let n = ev.grad_f.len();
    for (i, pi) in p.iter_mut().enumerate() {
        *pi = (gamma[i] + ev.g[i]).max(0.0);
    }
    let (uz, ug) = out.split_at_mut(n);
    for (o, d) in uz.iter_mut().zip(&ev.grad_f) {
        *o = -d;
    }
    let mut jtp = vec![0.0; n];
    ev.jac.add_transpose_mul(p, &mut jtp);
    for (o, v) in uz.iter_mut().zip(&jtp) {
        *o -= v;
    }
    for i in 0..ug.len() {
        ug[i] = p[i] - gamma[i];
    }
}

/// `dζ/dt` at `s`. Requires a convex program.
pub fn vector_field(sp: &SmoothProgram, s: &NeuroState, cfg: &IntegratorConfig) -> Result<NeuroState> {
    if sp.is_biconvex() {
        return Err(DrgpError::Convexity("biconvex"));
    }
    check_len("multipliers", sp.n_g(), s.gamma.len())?;
    let c = cfg.constraint_scale;
    let mut ev = evaluate_state(sp, s)?;
    ev.scale_rows(c);
    let scaled: Vec<f64> = s.gamma.iter().map(|g| g / c).collect();
    let mut out = vec![0.0; sp.n() + sp.n_g()];
    let mut p = vec![0.0; sp.n_g()];
    field_from_eval(&ev, &scaled, &mut out, &mut p);
    out[sp.n()..].iter_mut().for_each(|v| *v *= c);
    out.iter_mut().for_each(|v| *v /= cfg.kappa);
    Ok(NeuroState::from_flat(&out, sp.n()))
}

fn evaluate_state(sp: &SmoothProgram, s: &NeuroState) -> Result<Evaluation> {
    sp.evaluate(&s.z).map_err(|e| match e {
        DrgpError::NonFinite { .. } => DrgpError::NonFiniteState {
            time: f64::NAN,
            state: s.flatten(),
        },
        other => other,
    })
}

/// KKT certificate from an evaluation: max of stationarity, dual sign, primal
/// feasibility and complementarity violations.
pub(crate) fn kkt_from_eval(ev: &Evaluation, gamma: &[f64]) -> f64 {
    let mut stat = ev.grad_f.clone();
    ev.jac.add_transpose_mul(gamma, &mut stat);
    let dual = gamma.iter().fold(0.0_f64, |m, &v| m.max(-v));
    let primal = ev.g.iter().fold(0.0_f64, |m, &v| m.max(v));
    let comp = dot(gamma, &ev.g).abs();
    norm_inf(&stat).max(dual).max(primal).max(comp)
}

/// Scalar KKT certificate at `s`; `+∞` when the program cannot be evaluated there.
pub fn kkt_residual(sp: &SmoothProgram, s: &NeuroState) -> f64 {
    if s.gamma.len() != sp.n_g() {
        return f64::INFINITY;
    }
    match sp.evaluate(&s.z) {
        Ok(ev) => kkt_from_eval(&ev, &s.gamma),
        Err(_) => f64::INFINITY,
    }
}

/// Keeps at most `cap` evenly spaced samples of a stream of unknown length.
pub(crate) struct Decimator<T> {
    cap: usize,
    stride: usize,
    seen: usize,
    pub samples: Vec<T>,
}

impl<T> Decimator<T> {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(2),
            stride: 1,
            seen: 0,
            samples: Vec::new(),
        }
    }

    /// Whether the next item in the stream would be kept.
    pub fn wants_next(&self) -> bool {
        self.seen % self.stride == 0
    }

    pub fn push(&mut self, item: T) {
        if self.seen % self.stride == 0 {
            self.samples.push(item);
            if self.samples.len() >= self.cap {
                let mut i = 0;
                self.samples.retain(|_| {
                    i += 1;
                    (i - 1) % 2 == 0
                });
                self.stride *= 2;
            }
        }
        self.seen += 1;
    }

    /// Skips one item without storing it.
    pub fn skip(&mut self) {
        self.seen += 1;
    }
}

pub(crate) const TRAJECTORY_CAP: usize = 999;

/// Raw outcome of integrating a projection network.
pub(crate) struct NetworkRun {
    /// Final `ζ`.
    pub state: Vec<f64>,
    /// Unscaled field `U` at the final state.
    pub field: Vec<f64>,
    pub converged: bool,
    pub n_evals: usize,
    pub steps: usize,
    pub time: f64,
    pub stiff: bool,
    /// `(t, ζ, ‖U‖²)` samples.
    pub samples: Vec<(f64, Vec<f64>, f64)>,
}

/// Pieces of the Jacobian of the unscaled field `U` at `ζ = (v, γ)`, rows scaled by `scale`.
///
/// With `p = (γ + g)₊` and `D` the indicator of `γ + g > 0`:
/// `∂U_v/∂v = −(H + JᵀDJ)`, `∂U_v/∂γ = −JᵀD`, `∂U_γ/∂v = DJ`, `∂U_γ/∂γ = D − I`,
/// where `H` is the Hessian of `∇f + Jᵀp` at fixed `p`, by central differences.
struct FieldLinearization {
    hess: DMatrix<f64>,
    jac: DMatrix<f64>,
    active: Vec<bool>,
}

/// Program evaluations per [`FieldLinearization`].
fn linearization_cost(n: usize) -> usize {
    2 * n + 1
}

fn linearize(sp: &SmoothProgram, zeta: &[f64], scale: f64) -> Result<FieldLinearization> {
    let (n, n_g) = (sp.n(), sp.n_g());
    let (v, gamma) = zeta.split_at(n);
    let mut ev = sp.evaluate(v)?;
    ev.scale_rows(scale);
    let p: Vec<f64> = (0..n_g).map(|i| (gamma[i] + ev.g[i]).max(0.0)).collect();
    let grad_l = |point: &[f64]| -> Result<Vec<f64>> {
        let mut e = sp.evaluate(point)?;
        e.scale_rows(scale);
        let mut out = e.grad_f.clone();
        e.jac.add_transpose_mul(&p, &mut out);
        Ok(out)
    };
    let mut hess = DMatrix::<f64>::zeros(n, n);
    let mut probe = v.to_vec();
    for j in 0..n {
        let h = 1e-6 * v[j].abs().max(1.0);
        probe[j] = v[j] + h;
        let plus = grad_l(&probe)?;
        probe[j] = v[j] - h;
        let minus = grad_l(&probe)?;
        probe[j] = v[j];
        for i in 0..n {
            hess[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    let jac = DMatrix::from_fn(n_g, n, |r, c| ev.jac[(r, c)]);
    Ok(FieldLinearization {
        hess,
        jac,
        active: p.iter().map(|&x| x > 0.0).collect(),
    })
}

impl FieldLinearization {
    #[cfg(test)]
    fn dense(&self) -> DMatrix<f64> {
        let (n_g, n) = self.jac.shape();
        let mut out = DMatrix::<f64>::zeros(n + n_g, n + n_g);
        let ja = self.active_rows();
        out.view_mut((0, 0), (n, n)).copy_from(&(-(&self.hess + ja.transpose() * &ja)));
        let mut k = 0;
        for r in 0..n_g {
            if self.active[r] {
                for i in 0..n {
                    out[(i, n + r)] = -ja[(k, i)];
                    out[(n + r, i)] = ja[(k, i)];
                }
                k += 1;
            } else {
                out[(n + r, n + r)] = -1.0;
            }
        }
        out
    }

    fn active_rows(&self) -> DMatrix<f64> {
        let rows: Vec<usize> = (0..self.active.len()).filter(|&r| self.active[r]).collect();
        self.jac.select_rows(rows.iter())
    }
}

/// Jacobian of `dζ/dt = rates ∘ U(ζ)` kept in block form. The multiplier block of
/// `I − s·J` is diagonal, so shifted systems reduce to the `n × n` Schur complement
/// `I + s·A + s²·Q` with `A = R_v(H + JₐᵀJₐ)` and `Q = R_v Jₐᵀ R_a Jₐ` over the active rows.
pub(crate) struct NetworkJacobian {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    /// `R_v Jₐᵀ`, `n × n_active`.
    rjt: DMatrix<f64>,
    /// `R_a Jₐ`, `n_active × n`.
    rj: DMatrix<f64>,
    active: Vec<bool>,
    rates: Vec<f64>,
}

impl NetworkJacobian {
    fn new(lin: FieldLinearization, rates: &[f64]) -> Self {
        let n = lin.hess.nrows();
        let ja = lin.active_rows();
        let active_rates: Vec<f64> = (0..lin.active.len()).filter(|&r| lin.active[r]).map(|r| rates[n + r]).collect();
        let mut a = &lin.hess + ja.transpose() * &ja;
        let mut rjt = ja.transpose();
        for i in 0..n {
            a.row_mut(i).scale_mut(rates[i]);
            rjt.row_mut(i).scale_mut(rates[i]);
        }
        let mut rj = ja;
        for (k, r) in active_rates.iter().enumerate() {
            rj.row_mut(k).scale_mut(*r);
        }
        let q = &rjt * &rj;
        Self {
            a,
            q,
            rjt,
            rj,
            active: lin.active,
            rates: rates.to_vec(),
        }
    }
}

pub(crate) struct NetworkFactor<'a> {
    jac: &'a NetworkJacobian,
    s: f64,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ShiftedSystem for NetworkJacobian {
    type Factor<'a> = NetworkFactor<'a>;

    fn factor(&self, s: f64) -> Option<NetworkFactor<'_>> {
        let n = self.a.nrows();
        let schur = DMatrix::<f64>::identity(n, n) + &self.a * s + &self.q * (s * s);
        let lu = schur.lu();
        lu.is_invertible().then_some(NetworkFactor { jac: self, s, lu })
    }
}

impl ShiftedSolve for NetworkFactor<'_> {
    fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        let j = self.jac;
        let n = j.a.nrows();
        let s = self.s;
        let b_active = DVector::from_iterator(
            j.rj.nrows(),
            (0..j.active.len()).filter(|&r| j.active[r]).map(|r| b[n + r]),
        );
        let rhs = DVector::from_column_slice(&b[..n]) - &j.rjt * &b_active * s;
        let xz = self.lu.solve(&rhs)?;
        let xa = b_active + &j.rj * &xz * s;
        let mut out = Vec::with_capacity(b.len());
        out.extend_from_slice(xz.as_slice());
        let mut k = 0;
        for r in 0..j.active.len() {
            if j.active[r] {
                out.push(xa[k]);
                k += 1;
            } else {
                out.push(b[n + r] / (1.0 + s * j.rates[n + r]));
            }
        }
        Some(out)
    }
}

/// Integrates `dζ/dt = rates ∘ U(ζ)` from `zeta0` until `‖U‖∞ ≤ equilibrium_tol` or the
/// horizon, switching to the stiff integrator per `cfg.method`.
pub(crate) fn run_network(sp: &SmoothProgram, zeta0: &[f64], rates: &[f64], cfg: &IntegratorConfig) -> Result<NetworkRun> {
    let (n, n_g) = (sp.n(), sp.n_g());
    check_len("network state", n + n_g, zeta0.len())?;
    check_len("network rates", n + n_g, rates.len())?;
    check_finite("initial state", zeta0)?;
    let c = cfg.constraint_scale;
    let mut start = zeta0.to_vec();
    start[n..].iter_mut().for_each(|g| *g /= c);
    let zeta0 = &start[..];

    let eval_buf = RefCell::new((Evaluation::zeros(n, n_g), vec![0.0; n_g]));
    let rhs = |zeta: &[f64], out: &mut [f64]| -> Result<()> {
        let mut guard = eval_buf.borrow_mut();
        let (ev, p) = &mut *guard;
        sp.evaluate_into(&zeta[..n], ev).map_err(|_| DrgpError::NonFiniteState {
            time: f64::NAN,
            state: zeta.to_vec(),
        })?;
        ev.scale_rows(c);
        field_from_eval(ev, &zeta[n..], out, p);
        for (o, r) in out.iter_mut().zip(rates) {
            *o *= r;
        }
        Ok(())
    };

    let traj = RefCell::new(Decimator::new(TRAJECTORY_CAP));
    let last = RefCell::new(None::<(f64, Vec<f64>, f64)>);
    let on_step = |t: f64, zeta: &[f64], dzeta: &[f64]| {
        let mut u_inf = 0.0_f64;
        let mut u_sq = 0.0;
        for (d, r) in dzeta.iter().zip(rates) {
            let u = d / r;
            u_inf = u_inf.max(u.abs());
            u_sq += u * u;
        }
        let done = u_inf <= cfg.equilibrium_tol;
        if cfg.record_trajectory {
            let mut tr = traj.borrow_mut();
            if tr.wants_next() || done {
                tr.push((t, zeta.to_vec(), u_sq));
            } else {
                tr.skip();
            }
            *last.borrow_mut() = Some((t, zeta.to_vec(), u_sq));
        }
        if done {
            StepControl::Stop
        } else {
            StepControl::Continue
        }
    };

    let jac_calls = std::cell::Cell::new(0usize);
    let min_rate_inv = rates.iter().fold(f64::INFINITY, |m, r| m.min(1.0 / r));
    let mut rk = cfg.rk();
    rk.max_step = 0.1 * min_rate_inv;
    let explicit_budget = match cfg.method {
        Method::Explicit => cfg.max_steps,
        Method::Stiff => 0,
        Method::Auto { explicit_steps } => explicit_steps.min(cfg.max_steps),
    };
    let mut stiff = false;
    let out = if explicit_budget > 0 {
        rk.max_steps = explicit_budget;
        rk.stop_when_stiff = explicit_budget < cfg.max_steps;
        let first = integrate(|_, z, d| rhs(z, d), 0.0, zeta0, cfg.max_time, &rk, &on_step)?;
        let budget_spent = first.n_accepted + first.n_rejected >= explicit_budget;
        if first.stopped || !(budget_spent || first.stiff_detected) || explicit_budget == cfg.max_steps {
            first
        } else {
            stiff = true;
            let mut srk = cfg.stiff();
            srk.max_steps = cfg.max_steps - explicit_budget;
            let jac = |z: &[f64]| -> Result<NetworkJacobian> {
                jac_calls.set(jac_calls.get() + 1);
                Ok(NetworkJacobian::new(linearize(sp, z, c)?, rates))
            };
            let t0 = first.t;
            let second = integrate_stiff(rhs, jac, t0, &first.y, cfg.max_time, &srk, |t, z, d| on_step(t, z, d))?;
            OdeOutcome {
                n_evals: first.n_evals + second.n_evals,
                n_accepted: first.n_accepted + second.n_accepted,
                n_rejected: first.n_rejected + second.n_rejected,
                ..second
            }
        }
    } else {
        stiff = true;
        let srk = cfg.stiff();
        let jac = |z: &[f64]| -> Result<NetworkJacobian> {
            jac_calls.set(jac_calls.get() + 1);
            Ok(NetworkJacobian::new(linearize(sp, z, c)?, rates))
        };
        integrate_stiff(rhs, jac, 0.0, zeta0, cfg.max_time, &srk, &on_step)?
    };

    let field: Vec<f64> = out.dy.iter().zip(rates).map(|(d, r)| d / r).collect();
    let mut state = out.y;
    state[n..].iter_mut().for_each(|g| *g *= c);
    let mut samples = traj.into_inner().samples;
    if let Some(l) = last.into_inner() {
        if samples.last().map(|s| s.0) != Some(l.0) {
            if samples.len() > TRAJECTORY_CAP {
                samples.pop();
            }
            samples.push(l);
        }
    }
    for sample in samples.iter_mut() {
        sample.1[n..].iter_mut().for_each(|g| *g *= c);
    }
    Ok(NetworkRun {
        state,
        field,
        converged: out.stopped,
        n_evals: out.n_evals + jac_calls.get() * linearization_cost(n),
        steps: out.n_accepted,
        time: out.t,
        stiff,
        samples,
    })
}

pub(crate) fn trajectory_from_samples(
    sp: &SmoothProgram,
    samples: Vec<(f64, Vec<f64>, f64)>,
) -> Vec<TrajectorySample> {
    let n = sp.n();
    samples
        .into_iter()
        .map(|(t, zeta, u_sq)| {
            let (f, kkt) = match sp.evaluate(&zeta[..n]) {
                Ok(e) => (e.f, kkt_from_eval(&e, &zeta[n..])),
                Err(_) => (f64::NAN, f64::INFINITY),
            };
            TrajectorySample {
                t,
                f,
                kkt_residual: kkt,
                field_norm_sq: u_sq,
                state: zeta,
            }
        })
        .collect()
}

/// Builds the report for a finished run of `sp`.
pub(crate) fn report_from_run(sp: &SmoothProgram, run: NetworkRun) -> Result<SolveReport> {
    let n = sp.n();
    let (z, gamma) = run.state.split_at(n);
    let ev = sp.evaluate(z).map_err(|_| DrgpError::NonFiniteState {
        time: run.time,
        state: run.state.clone(),
    })?;
    Ok(SolveReport {
        status: if run.converged {
            SolveStatus::Converged
        } else {
            SolveStatus::NotConverged
        },
        formulation: sp.name().to_string(),
        t_solution: sp.t_solution(z),
        y: sp.y_values(z),
        objective: ev.f,
        kkt_residual: kkt_from_eval(&ev, gamma),
        max_violation: ev.g.iter().fold(0.0_f64, |m, &v| m.max(v)),
        field_norm: norm_inf(&run.field),
        field_evals: run.n_evals,
        steps: run.steps,
        final_time: run.time,
        stiff_switch: run.stiff,
        iterations: 0,
        best_history: Vec::new(),
        iteration_log: Vec::new(),
        trajectory: trajectory_from_samples(sp, run.samples),
        z: z.to_vec(),
        multipliers: gamma.to_vec(),
    })
}

/// Report for a fixed flat state `(z, γ)` of `sp`, e.g. the best point of an outer loop.
pub(crate) fn report_at(sp: &SmoothProgram, state: &[f64], status: SolveStatus) -> Result<SolveReport> {
    let n = sp.n();
    check_len("report state", n + sp.n_g(), state.len())?;
    let ev = sp.evaluate(&state[..n])?;
    let mut field = vec![0.0; state.len()];
    let mut p = vec![0.0; sp.n_g()];
    field_from_eval(&ev, &state[n..], &mut field, &mut p);
    let run = NetworkRun {
        state: state.to_vec(),
        field,
        converged: true,
        n_evals: 0,
        steps: 0,
        time: 0.0,
        stiff: false,
        samples: Vec::new(),
    };
    let mut r = report_from_run(sp, run)?;
    r.status = status;
    Ok(r)
}

/// Integrates the network from `s0` until `‖U‖∞ ≤ equilibrium_tol` or the horizon.
pub fn integrate_to_equilibrium(sp: &SmoothProgram, s0: &NeuroState, cfg: &IntegratorConfig) -> Result<SolveReport> {
    cfg.validate()?;
    if sp.is_biconvex() {
        return Err(DrgpError::Convexity("biconvex"));
    }
    check_len("initial point", sp.n(), s0.z.len())?;
    check_len("initial multipliers", sp.n_g(), s0.gamma.len())?;
    let rates = vec![1.0 / cfg.kappa; sp.n() + sp.n_g()];
    let run = run_network(sp, &s0.flatten(), &rates, cfg)?;
    report_from_run(sp, run)
}

/// Solves from the program's default start with zero multipliers.
pub fn solve(sp: &SmoothProgram, cfg: &IntegratorConfig) -> Result<SolveReport> {
    integrate_to_equilibrium(sp, &NeuroState::primal(sp.default_start(), sp.n_g()), cfg)
}

/// Post-hoc Lyapunov energy `‖U(ζ)‖² + ½‖ζ − ζ*‖²` along a recorded trajectory,
/// with `ζ*` the final sample.
pub fn lyapunov_energy(trajectory: &[TrajectorySample]) -> Vec<f64> {
    let Some(end) = trajectory.last() else {
        return Vec::new();
    };
    trajectory
        .iter()
        .map(|s| {
            let d2: f64 = s.state.iter().zip(&end.state).map(|(a, b)| (a - b) * (a - b)).sum();
            s.field_norm_sq + 0.5 * d2
        })
        .collect()
}

pub type Builder = fn(&RobustGP) -> Result<SmoothProgram>;

/// Solves a family of same-shape instances in order. Every instance after the first
/// starts from the final state of the nearest already-solved instance (Euclidean
/// distance on `θ`, earliest wins ties); an instance whose `θ` equals a converged one
/// reuses that report. Failures are reported per instance.
pub fn solve_batch(builder: Builder, problems: &[RobustGP], cfg: &IntegratorConfig) -> Vec<Result<SolveReport>> {
    solve_batch_inner(builder, problems, cfg, true)
}

/// As [`solve_batch`] but every instance starts from its default point.
pub fn solve_batch_cold(builder: Builder, problems: &[RobustGP], cfg: &IntegratorConfig) -> Vec<Result<SolveReport>> {
    solve_batch_inner(builder, problems, cfg, false)
}

fn solve_batch_inner(
    builder: Builder,
    problems: &[RobustGP],
    cfg: &IntegratorConfig,
    warm: bool,
) -> Vec<Result<SolveReport>> {
    let thetas: Vec<InstanceParameter> = problems.iter().map(RobustGP::theta).collect();
    let mut solved: Vec<(usize, NeuroState)> = Vec::new();
    let mut reports: Vec<Result<SolveReport>> = Vec::with_capacity(problems.len());
    for (idx, p) in problems.iter().enumerate() {
        let result = (|| {
            if idx > 0 && !thetas[idx].same_shape(&thetas[0]) {
                return Err(DrgpError::InvalidModel(format!(
                    "batch instance {idx} differs in shape from instance 0"
                )));
            }
            if warm {
                let twin = solved.iter().find(|(j, _)| thetas[*j] == thetas[idx]);
                if let Some((j, _)) = twin {
                    return reports[*j].clone();
                }
            }
            let sp = builder(p)?;
            let start = if warm {
                solved
                    .iter()
                    .map(|(j, s)| (thetas[idx].distance(&thetas[*j]), s))
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, s)| s.clone())
            } else {
                None
            };
            let s0 = start.unwrap_or_else(|| NeuroState::primal(sp.default_start(), sp.n_g()));
            integrate_to_equilibrium(&sp, &s0, cfg)
        })();
        if let Ok(r) = &result {
            if r.converged() {
                solved.push((idx, NeuroState::new(r.z.clone(), r.multipliers.clone())));
            }
        }
        reports.push(result);
    }
    reports
}
