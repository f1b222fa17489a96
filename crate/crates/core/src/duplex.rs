//! Two-timescale duplex for biconvex programs: a pair of projection networks with
//! different `κ1/κ2` ratios whose initial states are steered by a two-particle swarm
//! and a wavelet mutation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, DrgpError, Result};
use crate::matrix::distance;
use crate::neuro::{
    field_from_eval, kkt_from_eval, report_at, run_network, IntegratorConfig, IterationRecord, SolveReport,
    SolveStatus,
};
use crate::reformulate::{Convexity, SliceName, SmoothProgram};

/// State of one duplex network, `Λ = (z, y, ω)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplexState {
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub omega: Vec<f64>,
}

impl DuplexState {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.z.len() + self.y.len() + self.omega.len());
        out.extend_from_slice(&self.z);
        out.extend_from_slice(&self.y);
        out.extend_from_slice(&self.omega);
        out
    }

    /// Splits a flat `Λ` for `sp`.
    pub fn from_flat(sp: &SmoothProgram, flat: &[f64]) -> Result<Self> {
        let (zr, yr) = biconvex_split(sp)?;
        check_len("duplex state", sp.n() + sp.n_g(), flat.len())?;
        Ok(Self {
            z: flat[zr].to_vec(),
            y: flat[yr].to_vec(),
            omega: flat[sp.n()..].to_vec(),
        })
    }
}

fn biconvex_split(sp: &SmoothProgram) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    match sp.convexity() {
        Convexity::Biconvex { z, y } => Ok((z.clone(), y.clone())),
        Convexity::Convex => Err(DrgpError::Convexity("convex")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsoParams {
    pub w: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for PsoParams {
    fn default() -> Self {
        Self {
            w: 0.7298,
            c1: 1.49618,
            c2: 1.49618,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplexConfig {
    /// `κ1/κ2` for each network of the swarm; the first two are the duplex pair.
    pub ratios: Vec<f64>,
    pub pso: PsoParams,
    /// Diversity and global-best displacement threshold.
    pub zeta: f64,
    /// Maximum outer iterations `T`.
    pub max_iter: usize,
    /// Per-component `(l, h)` over `Λ`; `None` picks [`default_bounds`].
    pub bounds: Option<Vec<(f64, f64)>>,
    pub seed: u64,
    pub feas_tol: f64,
    /// Local integrator; its `kappa` is `κ2`. The default scales the constraint rows by 30:
    /// the bilinear `y·e^{−λ̃}` rows make the unscaled network unstable at its KKT points.
    pub inner: IntegratorConfig,
}

impl Default for DuplexConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.1, 10.0],
            pso: PsoParams::default(),
            zeta: 1e-4,
            max_iter: 20,
            bounds: None,
            seed: 0,
            feas_tol: 1e-6,
            inner: IntegratorConfig {
                constraint_scale: 30.0,
                max_steps: 200_000,
                ..IntegratorConfig::default()
            },
        }
    }
}

impl DuplexConfig {
    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        if self.ratios.len() < 2 || self.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(DrgpError::Config("need at least two positive ratios".into()));
        }
        if self.ratios[0] == self.ratios[1] {
            return Err(DrgpError::Config("the two ratios must differ".into()));
        }
        if !(0.0..=1.0).contains(&self.pso.w) || self.pso.c1 < 0.0 || self.pso.c2 < 0.0 {
            return Err(DrgpError::Config("PSO weights out of range".into()));
        }
        if !(self.zeta > 0.0) || !(self.feas_tol >= 0.0) || self.max_iter == 0 {
            return Err(DrgpError::Config("zeta, feas_tol and max_iter must be positive".into()));
        }
        if let Some(b) = &self.bounds {
            if b.iter().any(|(l, h)| !(l.is_finite() && h.is_finite() && l <= h)) {
                return Err(DrgpError::Config("bounds must be finite with l <= h".into()));
            }
        }
        Ok(())
    }
}

/// Box over `Λ`: `r ∈ [−5, 5]`, `y ∈ [1e−6, 1 − 1e−6]`, `λ̃ ∈ [−5, 0]`, `β̃, π̃ ∈ [−5, 5]`,
/// `ω ∈ [0, 10]`. Wider boxes put starts where `e^{β̃−λ̃}` makes the transient
/// needlessly stiff.
pub fn default_bounds(sp: &SmoothProgram) -> Vec<(f64, f64)> {
    let mut out = vec![(-5.0, 5.0); sp.n() + sp.n_g()];
    for s in sp.layout().slices() {
        let b = match s.name {
            SliceName::R | SliceName::Beta | SliceName::Pi => (-5.0, 5.0),
            SliceName::Y => (1e-6, 1.0 - 1e-6),
            SliceName::Lambda => (-5.0, 0.0),
            SliceName::X => (-5.0, -1e-9),
        };
        out[s.range()].fill(b);
    }
    out[sp.n()..].fill((0.0, 10.0));
    out
}

/// Per-component rates `(1/κ1 on z, 1/κ2 on y and ω)` with `κ1 = ratio·κ2`.
fn duplex_rates(sp: &SmoothProgram, kappa1: f64, kappa2: f64) -> Result<Vec<f64>> {
    let (zr, _) = biconvex_split(sp)?;
    let mut rates = vec![1.0 / kappa2; sp.n() + sp.n_g()];
    rates[zr].fill(1.0 / kappa1);
    Ok(rates)
}

/// `dΛ/dt`: `κ1 ż = −(∇f + ∇_z gᵀ(ω+g)₊)`, `κ2 ẏ = −∇_y gᵀ(ω+g)₊`, `κ2 ω̇ = −ω + (ω+g)₊`.
pub fn duplex_field(sp: &SmoothProgram, s: &DuplexState, kappa1: f64, kappa2: f64) -> Result<DuplexState> {
    let rates = duplex_rates(sp, kappa1, kappa2)?;
    let flat = s.flatten();
    check_len("duplex state", rates.len(), flat.len())?;
    let n = sp.n();
    let ev = sp.evaluate(&flat[..n]).map_err(|_| DrgpError::NonFiniteState {
        time: f64::NAN,
        state: flat.clone(),
    })?;
    let mut out = vec![0.0; flat.len()];
    let mut p = vec![0.0; sp.n_g()];
    field_from_eval(&ev, &flat[n..], &mut out, &mut p);
    for (o, r) in out.iter_mut().zip(&rates) {
        *o *= r;
    }
    DuplexState::from_flat(sp, &out)
}

/// Duplex KKT residual at a flat `Λ`.
pub fn duplex_kkt_residual(sp: &SmoothProgram, flat: &[f64]) -> f64 {
    let n = sp.n();
    if flat.len() != n + sp.n_g() {
        return f64::INFINITY;
    }
    match sp.evaluate(&flat[..n]) {
        Ok(ev) => kkt_from_eval(&ev, &flat[n..]),
        Err(_) => f64::INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    /// Flat initial state `Λ_i` for the next local run.
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Best equilibrium this particle has produced.
    pub personal_best: Vec<f64>,
    pub personal_best_fitness: f64,
    /// Equilibrium `Λ̄_i` of the latest local run.
    pub equilibrium: Vec<f64>,
}

impl Particle {
    pub fn at(position: Vec<f64>) -> Self {
        Self {
            velocity: vec![0.0; position.len()],
            personal_best: position.clone(),
            personal_best_fitness: f64::INFINITY,
            equilibrium: position.clone(),
            position,
        }
    }
}

/// Outcome of one local run.
#[derive(Debug, Clone)]
pub struct LocalRun {
    pub equilibrium: Vec<f64>,
    pub fitness: f64,
    pub field_evals: usize,
    pub converged: bool,
    /// Integration time reached.
    pub time: f64,
    pub steps: usize,
}

/// Integrates one duplex network with `κ1 = ratio·κ2` from a flat `start`.
pub fn local_run(sp: &SmoothProgram, start: &[f64], ratio: f64, cfg: &DuplexConfig) -> LocalRun {
    let kappa2 = cfg.inner.kappa;
    let attempt = duplex_rates(sp, ratio * kappa2, kappa2).and_then(|rates| run_network(sp, start, &rates, &cfg.inner));
    match attempt {
        Ok(run) => {
            let fitness = if run.converged {
                match sp.evaluate(&run.state[..sp.n()]) {
                    Ok(ev) if ev.g.iter().all(|&g| g <= cfg.feas_tol) => ev.f,
                    _ => f64::INFINITY,
                }
            } else {
                f64::INFINITY
            };
            LocalRun {
                fitness,
                field_evals: run.n_evals,
                converged: run.converged,
                time: run.time,
                steps: run.steps,
                equilibrium: run.state,
            }
        }
        Err(_) => LocalRun {
            equilibrium: start.to_vec(),
            fitness: f64::INFINITY,
            field_evals: 0,
            converged: false,
            time: 0.0,
            steps: 0,
        },
    }
}

/// Runs every network of the swarm from its particle's position, in parallel.
/// Infeasible or unconverged equilibria get fitness `+∞`.
pub fn run_rnn_pair(sp: &SmoothProgram, particles: &[Particle], cfg: &DuplexConfig) -> Vec<LocalRun> {
    use rayon::prelude::*;
    particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| local_run(sp, &p.position, cfg.ratios[i % cfg.ratios.len()], cfg))
        .collect()
}

/// One PSO move with given `r1, r2`:
/// `v ← w v + c1 r1 (Λ̃ − Λ) + c2 r2 (Λ̂ − Λ)`, `Λ ← Λ + v`.
pub fn pso_step(particle: &mut Particle, global_best: &[f64], pso: &PsoParams, r1: f64, r2: f64) {
    for i in 0..particle.position.len() {
        let x = particle.position[i];
        let v = pso.w * particle.velocity[i]
            + pso.c1 * r1 * (particle.personal_best[i] - x)
            + pso.c2 * r2 * (global_best[i] - x);
        particle.velocity[i] = v;
        particle.position[i] = x + v;
    }
}

/// PSO move for all particles, drawing `r1, r2 ~ U[0, 1]` per particle.
pub fn pso_update<R: Rng>(particles: &mut [Particle], global_best: &[f64], pso: &PsoParams, rng: &mut R) {
    for p in particles.iter_mut() {
        let r1: f64 = rng.random();
        let r2: f64 = rng.random();
        pso_step(p, global_best, pso, r1, r2);
    }
}

/// `(1/n) Σ_i ‖Λ_i − Λ̂‖`.
pub fn diversity(particles: &[Particle], global_best: &[f64]) -> f64 {
    if particles.is_empty() {
        return 0.0;
    }
    particles.iter().map(|p| distance(&p.position, global_best)).sum::<f64>() / particles.len() as f64
}

/// Dilation `a = e^{10 j / T}`.
pub fn dilation(j: usize, max_iter: usize) -> f64 {
    (10.0 * j as f64 / max_iter as f64).exp()
}

/// `μ = a^{−1/2} e^{−φ/(2a)} cos(5φ/a)`.
pub fn wavelet_mu(phi: f64, a: f64) -> f64 {
    (-phi / (2.0 * a)).exp() * (5.0 * phi / a).cos() / a.sqrt()
}

/// Moves every component towards `h` (`μ > 0`) or `l` (`μ < 0`) by the same `μ`, then clamps.
pub fn apply_mutation(position: &mut [f64], mu: f64, bounds: &[(f64, f64)]) {
    for (x, &(l, h)) in position.iter_mut().zip(bounds) {
        if mu > 0.0 {
            *x += mu * (h - *x);
        } else if mu < 0.0 {
            *x += mu * (*x - l);
        }
        *x = x.clamp(l, h);
    }
}

/// Wavelet mutation at outer iteration `j` with `φ ~ U[−2.5a, 2.5a]`.
pub fn wavelet_mutate<R: Rng>(particle: &mut Particle, bounds: &[(f64, f64)], j: usize, max_iter: usize, rng: &mut R) {
    let a = dilation(j, max_iter);
    let phi = rng.random_range(-2.5 * a..=2.5 * a);
    apply_mutation(&mut particle.position, wavelet_mu(phi, a), bounds);
}

fn clamp_into(position: &mut [f64], bounds: &[(f64, f64)]) {
    for (x, &(l, h)) in position.iter_mut().zip(bounds) {
        *x = x.clamp(l, h);
    }
}

/// Runs the duplex outer loop on a biconvex program.
///
/// Particles start uniformly in the bounds. Each round integrates both networks,
/// updates personal and global bests by fitness, applies the PSO move (positions are
/// clamped to the box and become the next initial states) and mutates when the swarm
/// diversity falls below `ζ`. Stops when the global best moves less than `ζ` or after
/// `T` rounds.
pub fn solve_duplex(sp: &SmoothProgram, cfg: &DuplexConfig) -> Result<SolveReport> {
    cfg.validate()?;
    biconvex_split(sp)?;
    let dim = sp.n() + sp.n_g();
    let bounds = match &cfg.bounds {
        Some(b) => {
            check_len("duplex bounds", dim, b.len())?;
            b.clone()
        }
        None => default_bounds(sp),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut particles: Vec<Particle> = (0..cfg.ratios.len())
        .map(|_| Particle::at(bounds.iter().map(|&(l, h)| if l < h { rng.random_range(l..=h) } else { l }).collect()))
        .collect();

    let mut global_best: Option<(Vec<f64>, f64)> = None;
    let mut best_history = Vec::new();
    let mut log = Vec::new();
    let mut field_evals = 0;
    let mut iterations = 0;
    for j in 1..=cfg.max_iter {
        iterations = j;
        let runs = run_rnn_pair(sp, &particles, cfg);
        let previous = global_best.as_ref().map(|(x, _)| x.clone());
        for (p, run) in particles.iter_mut().zip(runs) {
            field_evals += run.field_evals;
            p.equilibrium = run.equilibrium;
            if run.fitness < p.personal_best_fitness {
                p.personal_best_fitness = run.fitness;
                p.personal_best = p.equilibrium.clone();
            }
            let improves = match &global_best {
                Some((_, f)) => run.fitness < *f,
                None => run.fitness.is_finite(),
            };
            if improves {
                global_best = Some((p.equilibrium.clone(), run.fitness));
            }
        }
        best_history.push(global_best.as_ref().map_or(f64::INFINITY, |g| g.1));

        // Without a feasible point yet, steer towards the latest equilibria.
        let target = match &global_best {
            Some((x, _)) => x.clone(),
            None => particles[0].equilibrium.clone(),
        };
        for p in particles.iter_mut() {
            if !p.personal_best_fitness.is_finite() {
                p.personal_best = p.equilibrium.clone();
            }
        }
        pso_update(&mut particles, &target, &cfg.pso, &mut rng);
        for p in particles.iter_mut() {
            clamp_into(&mut p.position, &bounds);
        }
        let d = diversity(&particles, &target);
        let mutated = d < cfg.zeta;
        if mutated {
            for p in particles.iter_mut() {
                wavelet_mutate(p, &bounds, j, cfg.max_iter, &mut rng);
            }
        }
        log.push(IterationRecord {
            iteration: j,
            best_fitness: *best_history.last().unwrap(),
            diversity: d,
            mutated,
        });
        if let (Some(prev), Some((cur, _))) = (&previous, &global_best) {
            if distance(prev, cur) < cfg.zeta {
                break;
            }
        }
    }

    let mut report = match &global_best {
        Some((state, _)) => report_at(sp, state, SolveStatus::Converged)?,
        None => {
            let mut r = report_at(sp, &particles[0].equilibrium, SolveStatus::NoFeasiblePoint)?;
            r.objective = f64::INFINITY;
            r
        }
    };
    report.field_evals = field_evals;
    report.iterations = iterations;
    report.best_history = best_history;
    report.iteration_log = log;
    Ok(report)
}

/// Writes `j,best_fitness,diversity,mutated` rows.
pub fn write_iteration_log_csv<W: Write>(log: &[IterationRecord], mut out: W) -> Result<()> {
    writeln!(out, "j,best_fitness,diversity,mutated")?;
    for r in log {
        writeln!(out, "{},{},{},{}", r.iteration, r.best_fitness, r.diversity, r.mutated)?;
    }
    Ok(())
}
