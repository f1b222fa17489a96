//! `drgp`: solve, benchmark and stress-test robust geometric programs.
//!
//! Exit codes: 0 on success (including runs that stop before equilibrium, whose report
//! carries `"status": "NotConverged"`), 1 for bad input, 2 for internal failures.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use drgp::bench::{make_box3d, make_multishape, make_sinr, perturbed_box3d, SinrConfig, BOX_EPS_SWEEP};
use drgp::car::CarConfig;
use drgp::duplex::write_iteration_log_csv;
use drgp::gp::AmbiguityKind;
use drgp::io as files;
use drgp::neuro::{solve_batch, solve_batch_cold, SolveStatus};
use drgp::reformulate::{builder_for, Coupling, RobustGP};
use drgp::report::{
    box3d_specs, compare, run_specs, shape_epsilon, shape_specs, sinr_specs, solve_problem, SolverOptions,
};
use drgp::robustness::{count_violations, Distribution, ScenarioConfig};
use drgp::DrgpError;

#[derive(Parser)]
#[command(name = "drgp", version, about = "Distributionally robust geometric programs via neurodynamic flows")]
struct Cli {
    /// Worker threads for scenario sampling and table rows (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a problem file: one network for convex programs, the duplex swarm otherwise.
    Solve(SolveArgs),
    /// Run a benchmark table and write it as CSV.
    Bench {
        #[command(subcommand)]
        which: BenchCommand,
    },
    /// Count violated scenarios of a solution under moment-matched distributions.
    Robustness(RobustnessArgs),
    /// Duplex against alternating convex search on a biconvex problem.
    Compare(CompareArgs),
    /// Solve a list of same-shape convex problems with warm starts.
    Batch(BatchArgs),
    /// Write a benchmark instance as a problem file.
    Generate {
        #[command(subcommand)]
        which: GenerateCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CouplingArg {
    Independent,
    Dependent,
    Individual,
}

impl From<CouplingArg> for Coupling {
    fn from(c: CouplingArg) -> Self {
        match c {
            CouplingArg::Independent => Coupling::Independent,
            CouplingArg::Dependent => Coupling::Dependent,
            CouplingArg::Individual => Coupling::Individual,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AmbiguityArg {
    /// Mean and covariance bounded around nominal values.
    TwoMoment,
    /// Known mean, nonnegative support.
    Nonneg,
}

impl From<AmbiguityArg> for AmbiguityKind {
    fn from(a: AmbiguityArg) -> Self {
        match a {
            AmbiguityArg::TwoMoment => AmbiguityKind::TwoMoment,
            AmbiguityArg::Nonneg => AmbiguityKind::FirstMomentNonneg,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    problem: PathBuf,
    /// Override the risk level.
    #[arg(long)]
    eps: Option<f64>,
    /// Override γ1 for every block.
    #[arg(long)]
    gamma1: Option<f64>,
    /// Override γ2 for every block.
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long, value_enum)]
    coupling: Option<CouplingArg>,
    #[arg(long, value_enum)]
    ambiguity: Option<AmbiguityArg>,
    /// Swarm seed for biconvex programs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file (JSON); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trajectory CSV of a single-network solve.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Per-iteration CSV of a duplex solve.
    #[arg(long)]
    iteration_log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Open box, independent and dependent, over a sweep of risk levels.
    Box3d {
        /// Risk levels (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = BOX_EPS_SWEEP.to_vec())]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// m-dimensional shape problem, independent and dependent, over consecutive seeds.
    Shape {
        #[arg(long)]
        m: usize,
        #[arg(long, value_enum, default_value = "two-moment")]
        ambiguity: AmbiguityArg,
        /// First instance seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of instances.
        #[arg(long, default_value_t = 1)]
        instances: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Power allocation with individual and joint chance constraints.
    Sinr {
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0.2)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RobustnessArgs {
    solution: PathBuf,
    problem: PathBuf,
    /// Distributions (comma separated): normal, uniform, lognormal, logistic, gamma.
    #[arg(long, value_delimiter = ',')]
    dists: Option<Vec<String>>,
    /// Scenarios per distribution.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    problem: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Both reports and the gap as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    problems: PathBuf,
    /// Start every instance from its default point.
    #[arg(long)]
    cold: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenerateCommand {
    Box3d {
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, value_enum, default_value = "independent")]
        coupling: CouplingArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Shape {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, value_enum, default_value = "two-moment")]
        ambiguity: AmbiguityArg,
        #[arg(long, value_enum, default_value = "independent")]
        coupling: CouplingArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// A batch file of open-box instances with perturbed coefficient means.
    BoxFamily {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, value_enum, default_value = "independent")]
        coupling: CouplingArg,
        /// Relative half-width of the perturbation.
        #[arg(long, default_value_t = 0.05)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Sinr {
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0.2)]
        eps: f64,
        /// One chance constraint per user instead of a joint one.
        #[arg(long)]
        individual: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Internal(String),
}

impl From<DrgpError> for CliError {
    fn from(e: DrgpError) -> Self {
        match e {
            DrgpError::NonFinite { .. } | DrgpError::NonFiniteState { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Buffered writer on `path`, or on stdout.
fn sink(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_text(path: Option<&Path>, text: &str) -> CliResult<()> {
    let mut out = sink(path)?;
    writeln!(out, "{text}")?;
    out.flush()?;
    Ok(())
}

fn apply_overrides(p: &mut RobustGP, args: &SolveArgs) -> CliResult<()> {
    if let Some(eps) = args.eps {
        p.epsilon = eps;
    }
    if let Some(c) = args.coupling {
        p.coupling = c.into();
    }
    if let Some(a) = args.ambiguity {
        p.ambiguity.kind = a.into();
    }
    let blocks = p.n_blocks() + 1;
    if let Some(g) = args.gamma1 {
        p.ambiguity.gamma1 = vec![g; blocks];
    }
    if let Some(g) = args.gamma2 {
        p.ambiguity.gamma2 = vec![g; blocks];
    }
    p.validate()?;
    Ok(())
}

fn cmd_solve(args: &SolveArgs) -> CliResult<()> {
    let mut p = files::read_problem(&args.problem)?;
    apply_overrides(&mut p, args)?;
    let mut opts = SolverOptions::with_seed(args.seed);
    opts.integrator.record_trajectory = args.trajectory.is_some();
    let (sp, report) = solve_problem(&p, &opts)?;
    write_text(args.out.as_deref(), &files::solution_to_json(&report)?)?;
    if let Some(path) = &args.trajectory {
        if sp.is_biconvex() {
            eprintln!("note: biconvex programs have no single trajectory; see --iteration-log");
        } else {
            let mut out = sink(Some(path))?;
            report.write_trajectory_csv(&mut out)?;
            out.flush()?;
        }
    }
    if let Some(path) = &args.iteration_log {
        let mut out = sink(Some(path))?;
        write_iteration_log_csv(&report.iteration_log, &mut out)?;
        out.flush()?;
    }
    eprintln!(
        "{}: {:?}, objective {}, kkt residual {:e}",
        report.formulation, report.status, report.objective, report.kkt_residual
    );
    if report.status != SolveStatus::Converged {
        eprintln!("warning: solve did not reach equilibrium; the report is flagged {:?}", report.status);
    }
    Ok(())
}

fn cmd_bench(which: &BenchCommand) -> CliResult<()> {
    let (specs, out) = match which {
        BenchCommand::Box3d { eps, seed, out } => (box3d_specs(eps, *seed), out),
        BenchCommand::Shape {
            m,
            ambiguity,
            seed,
            instances,
            out,
        } => {
            let seeds: Vec<u64> = (*seed..seed + instances).collect();
            (shape_specs(*m, (*ambiguity).into(), &seeds), out)
        }
        BenchCommand::Sinr { k, eps, seed, out } => (sinr_specs(*k, *eps, *seed), out),
    };
    for s in &specs {
        s.validate()?;
    }
    let table = run_specs(&specs, &SolverOptions::default())?;
    let mut sink = sink(out.as_deref())?;
    table.write_csv(&mut sink)?;
    sink.flush()?;
    Ok(())
}

fn cmd_robustness(args: &RobustnessArgs) -> CliResult<()> {
    let solution = files::read_solution(&args.solution)?;
    let p = files::read_problem(&args.problem)?;
    let distributions = match &args.dists {
        Some(names) => names.iter().map(|n| n.parse()).collect::<Result<Vec<Distribution>, _>>()?,
        None => Distribution::ALL.to_vec(),
    };
    let cfg = ScenarioConfig {
        n_scenarios: args.n,
        distributions,
        seed: args.seed,
        ..ScenarioConfig::default()
    };
    let report = count_violations(&p, &solution.t_solution, &cfg)?;
    let mut out = sink(args.out.as_deref())?;
    report.write_csv(&mut out)?;
    out.flush()?;
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
        write_text(Some(path), &text)?;
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> CliResult<()> {
    let p = files::read_problem(&args.problem)?;
    let duplex = SolverOptions::with_seed(args.seed).duplex;
    let cmp = compare(&p, &duplex, &CarConfig::default())?;
    println!("solver,status,objective,iterations,field_evals");
    for (name, r) in [("duplex", &cmp.duplex), ("car", &cmp.car)] {
        println!("{name},{:?},{},{},{}", r.status, r.objective, r.iterations, r.field_evals);
    }
    println!("GAP {:.6} ({:.2}%)", cmp.gap, 100.0 * cmp.gap);
    if let Some(path) = &args.out {
        let text = serde_json::to_string_pretty(&cmp).map_err(|e| CliError::Internal(e.to_string()))?;
        write_text(Some(path), &text)?;
    }
    Ok(())
}

fn cmd_batch(args: &BatchArgs) -> CliResult<()> {
    let problems = files::read_batch(&args.problems)?;
    let (kind, coupling) = (problems[0].ambiguity.kind, problems[0].coupling);
    if let Some(i) = problems
        .iter()
        .position(|p| p.ambiguity.kind != kind || p.coupling != coupling)
    {
        return Err(CliError::Input(format!(
            "batch problem {i} uses a different formulation from problem 0"
        )));
    }
    let builder = builder_for(kind, coupling);
    let cfg = SolverOptions::default().integrator;
    let results = if args.cold {
        solve_batch_cold(builder, &problems, &cfg)
    } else {
        solve_batch(builder, &problems, &cfg)
    };
    write_text(args.out.as_deref(), &files::batch_reports_to_json(&results)?)?;
    let solved: Vec<_> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let converged = solved.iter().filter(|r| r.converged()).count();
    let mean_evals = solved.iter().map(|r| r.field_evals as f64).sum::<f64>() / solved.len().max(1) as f64;
    eprintln!(
        "{} problems, {converged} converged, {} failed, mean field evaluations {mean_evals:.0}",
        results.len(),
        results.len() - solved.len()
    );
    Ok(())
}

fn cmd_generate(which: &GenerateCommand) -> CliResult<()> {
    let (p, out) = match which {
        GenerateCommand::Box3d { eps, coupling, out } => {
            (make_box3d(*eps, AmbiguityKind::TwoMoment, (*coupling).into())?, out)
        }
        GenerateCommand::BoxFamily {
            n,
            eps,
            coupling,
            spread,
            seed,
            out,
        } => {
            let family = perturbed_box3d(*n, *eps, (*coupling).into(), *spread, *seed)?;
            return write_text(out.as_deref(), &files::batch_to_json(&family)?);
        }
        GenerateCommand::Shape {
            m,
            eps,
            ambiguity,
            coupling,
            seed,
            out,
        } => {
            let kind: AmbiguityKind = (*ambiguity).into();
            let eps = eps.unwrap_or_else(|| shape_epsilon(kind));
            (make_multishape(*m, eps, kind, (*coupling).into(), *seed)?, out)
        }
        GenerateCommand::Sinr {
            k,
            eps,
            individual,
            seed,
            out,
        } => (
            make_sinr(
                *k,
                !individual,
                *eps,
                AmbiguityKind::FirstMomentNonneg,
                *seed,
                &SinrConfig::default(),
            )?,
            out,
        ),
    };
    write_text(out.as_deref(), &files::problem_to_json(&p)?)
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Bench { which } => cmd_bench(which),
        Command::Robustness(a) => cmd_robustness(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Batch(a) => cmd_batch(a),
        Command::Generate { which } => cmd_generate(which),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}
