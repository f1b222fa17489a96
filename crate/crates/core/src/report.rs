//! Benchmark instance descriptions, the solve dispatcher and table drivers.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{make_box3d, make_multishape, make_sinr, SinrConfig, BOX_EPS_SWEEP};
use crate::car::{car_solve, default_y0, gap, CarConfig};
use crate::duplex::{solve_duplex, DuplexConfig};
use crate::error::{DrgpError, Result};
use crate::gp::AmbiguityKind;
use crate::io::SCHEMA_VERSION;
use crate::neuro::{self, IntegratorConfig, SolveReport, SolveStatus};
use crate::reformulate::{build, Coupling, RobustGP, SmoothProgram};
use crate::robustness::{count_violations, Distribution, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instance {
    Box3D,
    MultiShape { m: usize },
    /// `joint` selects one joint chance constraint over all users, otherwise one per user.
    Sinr { k: usize, joint: bool },
}

impl Instance {
    pub fn name(&self) -> &'static str {
        match self {
            Instance::Box3D => "box3d",
            Instance::MultiShape { .. } => "shape",
            Instance::Sinr { .. } => "sinr",
        }
    }

    pub fn size(&self) -> usize {
        match *self {
            Instance::Box3D => 3,
            Instance::MultiShape { m } => m,
            Instance::Sinr { k, .. } => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub which: Instance,
    pub epsilon: f64,
    pub kind: AmbiguityKind,
    /// Ignored for SINR, whose coupling follows `joint`.
    pub coupling: Coupling,
    pub seed: u64,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(DrgpError::InvalidModel(format!("epsilon {} outside (0, 0.5]", self.epsilon)));
        }
        match self.which {
            Instance::MultiShape { m } if m < 3 => {
                Err(DrgpError::InvalidModel(format!("shape dimension {m} < 3")))
            }
            Instance::Sinr { k, .. } if k < 2 => Err(DrgpError::InvalidModel(format!(
                "SINR needs at least 2 users, got {k}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn instance(&self) -> Result<RobustGP> {
        self.validate()?;
        match self.which {
            Instance::Box3D => make_box3d(self.epsilon, self.kind, self.coupling),
            Instance::MultiShape { m } => make_multishape(m, self.epsilon, self.kind, self.coupling, self.seed),
            Instance::Sinr { k, joint } => {
                make_sinr(k, joint, self.epsilon, self.kind, self.seed, &SinrConfig::default())
            }
        }
    }
}

/// Solver settings for [`solve_problem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub integrator: IntegratorConfig,
    pub duplex: DuplexConfig,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            integrator: IntegratorConfig::default(),
            duplex: DuplexConfig::default(),
        }
    }
}

impl SolverOptions {
    pub fn with_seed(seed: u64) -> Self {
        let mut opts = Self::default();
        opts.duplex.seed = seed;
        opts
    }
}

/// Builds the program and solves it: one network for convex programs, the duplex
/// swarm for biconvex ones.
pub fn solve_problem(p: &RobustGP, opts: &SolverOptions) -> Result<(SmoothProgram, SolveReport)> {
    let sp = build(p)?;
    let report = if sp.is_biconvex() {
        solve_duplex(&sp, &opts.duplex)?
    } else {
        neuro::solve(&sp, &opts.integrator)?
    };
    Ok((sp, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub instance: String,
    pub size: usize,
    pub epsilon: f64,
    pub ambiguity: AmbiguityKind,
    pub coupling: Coupling,
    pub seed: u64,
    pub status: SolveStatus,
    pub objective: f64,
    pub kkt_residual: f64,
    /// Violated scenarios out of `scenarios` draws, the largest count over the
    /// configured distributions.
    pub vs: usize,
    pub scenarios: usize,
    pub iterations: usize,
    pub field_evals: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "schema_version,instance,size,epsilon,ambiguity,coupling,seed,status,objective,kkt_residual,vs,scenarios,iterations,field_evals,wall_time_s"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{SCHEMA_VERSION},{},{},{},{},{},{},{:?},{},{},{},{},{},{},{:.3}",
                r.instance,
                r.size,
                r.epsilon,
                r.ambiguity,
                r.coupling,
                r.seed,
                r.status,
                r.objective,
                r.kkt_residual,
                r.vs,
                r.scenarios,
                r.iterations,
                r.field_evals,
                r.wall_time_s
            )?;
        }
        Ok(())
    }

    /// The table with wall times zeroed, for comparing runs.
    pub fn untimed(&self) -> ReportTable {
        ReportTable {
            rows: self
                .rows
                .iter()
                .map(|r| ReportRow {
                    wall_time_s: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn find(&self, size: usize, coupling: Coupling) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.size == size && r.coupling == coupling)
    }
}

/// Normal-draw scenario settings used by the table drivers.
pub fn table_scenarios(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        distributions: vec![Distribution::Normal],
        seed,
        ..ScenarioConfig::default()
    }
}

/// Solves one benchmark instance and counts its violated scenarios.
pub fn run_spec(spec: &BenchSpec, opts: &SolverOptions, scenarios: &ScenarioConfig) -> Result<ReportRow> {
    let start = Instant::now();
    let p = spec.instance()?;
    let (_, report) = solve_problem(&p, opts)?;
    let robustness = count_violations(&p, &report.t_solution, scenarios)?;
    let vs = robustness.results.iter().map(|r| r.violated).max().unwrap_or(0);
    Ok(ReportRow {
        instance: spec.which.name().to_string(),
        size: spec.which.size(),
        epsilon: spec.epsilon,
        ambiguity: spec.kind,
        coupling: p.coupling,
        seed: spec.seed,
        status: report.status,
        objective: report.objective,
        kkt_residual: report.kkt_residual,
        vs,
        scenarios: scenarios.n_scenarios,
        iterations: report.iterations,
        field_evals: report.field_evals,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Runs every spec on the current rayon pool. Row order follows `specs`.
pub fn run_specs(specs: &[BenchSpec], opts: &SolverOptions) -> Result<ReportTable> {
    let rows = specs
        .par_iter()
        .map(|s| {
            let mut o = opts.clone();
            o.duplex.seed = s.seed;
            run_spec(s, &o, &table_scenarios(s.seed))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReportTable { rows })
}

/// Open-box rows: independent and dependent two-moment solves at each risk level.
pub fn box3d_specs(eps: &[f64], seed: u64) -> Vec<BenchSpec> {
    eps.iter()
        .flat_map(|&epsilon| {
            [Coupling::Independent, Coupling::Dependent].map(|coupling| BenchSpec {
                which: Instance::Box3D,
                epsilon,
                kind: AmbiguityKind::TwoMoment,
                coupling,
                seed,
            })
        })
        .collect()
}

pub fn box3d_sweep(seed: u64) -> Result<ReportTable> {
    run_specs(&box3d_specs(&BOX_EPS_SWEEP, seed), &SolverOptions::with_seed(seed))
}

/// Risk level used for the shape problem under each ambiguity kind.
pub fn shape_epsilon(kind: AmbiguityKind) -> f64 {
    match kind {
        AmbiguityKind::TwoMoment => 0.15,
        AmbiguityKind::FirstMomentNonneg => 0.2,
    }
}

pub fn shape_specs(m: usize, kind: AmbiguityKind, seeds: &[u64]) -> Vec<BenchSpec> {
    seeds
        .iter()
        .flat_map(|&seed| {
            [Coupling::Independent, Coupling::Dependent].map(|coupling| BenchSpec {
                which: Instance::MultiShape { m },
                epsilon: shape_epsilon(kind),
                kind,
                coupling,
                seed,
            })
        })
        .collect()
}

/// SINR rows: individual then joint chance constraints on the same channel draw.
pub fn sinr_specs(k: usize, eps: f64, seed: u64) -> Vec<BenchSpec> {
    [false, true]
        .map(|joint| BenchSpec {
            which: Instance::Sinr { k, joint },
            epsilon: eps,
            kind: AmbiguityKind::FirstMomentNonneg,
            coupling: if joint {
                Coupling::Dependent
            } else {
                Coupling::Individual
            },
            seed,
        })
        .to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub duplex: SolveReport,
    pub car: SolveReport,
    /// `(Sol_CAR − Sol_duplex) / Sol_CAR`.
    pub gap: f64,
}

/// Duplex against alternating convex search on a biconvex program.
pub fn compare(p: &RobustGP, duplex: &DuplexConfig, car: &CarConfig) -> Result<Comparison> {
    let sp = build(p)?;
    if !sp.is_biconvex() {
        return Err(DrgpError::Convexity("convex"));
    }
    let d = solve_duplex(&sp, duplex)?;
    let c = car_solve(&sp, &default_y0(&sp), car)?;
    let gap = gap(c.objective, d.objective)?;
    Ok(Comparison { duplex: d, car: c, gap })
}
