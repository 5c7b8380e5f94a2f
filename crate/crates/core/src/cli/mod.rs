//! `humctl`: batch runs of the solvers, control synthesis and diagnostics
//! driven by a JSON configuration.
//!
//! Exit status is 0 on success, 2 when an iterative method did not converge
//! (outputs are still written where possible) and 1 on usage or
//! configuration errors.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub use config::{
    parse_config, ConductivitySpec, ConfigError, FieldSpec, ModelKind, PhysicsConfig, RunConfig, TerminalSpec,
};

use crate::analysis::{
    carleman_certificate, energy_certificate, epsilon_sweep, estimate_observability_constant, RhoVariant, SweepConfig,
    CERTIFICATE_NOTE,
};
use crate::dynamics::{
    adjoint_solve, duality_gap, forward_bidomain, forward_monodomain, forward_relaxed_linear,
    forward_relaxed_nonlinear, ControlFunction, IonicTerm, Trajectory,
};
use crate::error::Error;
use crate::hum::{nonlinear_control_cubic, nonlinear_control_lipschitz, synthesize_control, ControlResult, HumMode};
use crate::io;
use crate::model::{ProblemSpec, Reaction};
use crate::weights::{check_weight_properties, WeightSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "humctl",
    version,
    about = "Approximate controllability experiments for the relaxed bidomain model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for `sweep` (0 picks one per core).
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Uncontrolled forward run of the configured model.
    Forward(RunArgs),
    /// Backward adjoint run from the configured terminal data.
    Adjoint(RunArgs),
    /// Control synthesis for the linearized system.
    Control(RunArgs),
    /// Fixed-point control synthesis for the nonlinear reaction.
    NonlinearControl(RunArgs),
    /// Control synthesis and diagnostics over a list of epsilon values.
    Sweep(RunArgs),
    /// Observability constant of the adjoint system.
    Observability(RunArgs),
    /// Weighted-inequality certificates and weight checks.
    CarlemanCheck(RunArgs),
}

impl Command {
    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Forward(a)
            | Command::Adjoint(a)
            | Command::Control(a)
            | Command::NonlinearControl(a)
            | Command::Sweep(a)
            | Command::Observability(a)
            | Command::CarlemanCheck(a) => a,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Forward(_) => "forward",
            Command::Adjoint(_) => "adjoint",
            Command::Control(_) => "control",
            Command::NonlinearControl(_) => "nonlinear-control",
            Command::Sweep(_) => "sweep",
            Command::Observability(_) => "observability",
            Command::CarlemanCheck(_) => "carleman-check",
        }
    }
}

/// Why a run did not succeed.
#[derive(Debug)]
pub enum Failure {
    Config(ConfigError),
    NotConverged(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::NotConverged(_) => EXIT_NOT_CONVERGED,
            _ => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "{e}"),
            Failure::NotConverged(m) => write!(f, "not converged: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_non_convergence() {
            Failure::NotConverged(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<Box<dyn std::error::Error + Send + Sync>> for Failure {
    fn from(e: Box<dyn std::error::Error + Send + Sync>) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Result of a completed subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub converged: bool,
    pub written: Vec<PathBuf>,
    pub message: String,
}

type Run = std::result::Result<Outcome, Failure>;

/// Parses `args` (program name first), runs the subcommand and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    EXIT_OK
                }
                _ => {
                    eprint!("{}", e.render());
                    EXIT_FAILURE
                }
            };
        }
    };
    match dispatch(&cli.command) {
        Ok(outcome) => {
            println!("{}: {}", cli.command.name(), outcome.message);
            for p in &outcome.written {
                println!("  wrote {}", p.display());
            }
            if outcome.converged {
                EXIT_OK
            } else {
                eprintln!("{}: did not converge", cli.command.name());
                EXIT_NOT_CONVERGED
            }
        }
        Err(f) => {
            eprintln!("{}: {f}", cli.command.name());
            f.exit_code()
        }
    }
}

/// Loads the configuration named by `args` with the command-line overrides
/// applied.
pub fn load(args: &RunArgs) -> std::result::Result<RunConfig, ConfigError> {
    let mut cfg = parse_config(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn dispatch(command: &Command) -> Run {
    let args = command.args();
    let cfg = load(args)?;
    std::fs::create_dir_all(&cfg.output.dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", cfg.output.dir.display())))?;
    let problem = cfg.problem()?;
    match command {
        Command::Forward(_) => run_forward(&cfg, &problem),
        Command::Adjoint(_) => run_adjoint(&cfg, &problem),
        Command::Control(_) => run_control(&cfg, &problem),
        Command::NonlinearControl(_) => run_nonlinear(&cfg, &problem),
        Command::Sweep(_) => run_sweep(&cfg, &problem, args.jobs.unwrap_or(1)),
        Command::Observability(_) => run_observability(&cfg, &problem),
        Command::CarlemanCheck(_) => run_carleman(&cfg, &problem),
    }
}

struct Writer<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Self {
        Writer {
            dir,
            written: Vec::new(),
        }
    }

    fn json(&mut self, name: &str, value: &impl serde::Serialize) -> std::result::Result<(), Failure> {
        let p = self.dir.join(name);
        io::write_json(&p, value)?;
        self.written.push(p);
        Ok(())
    }

    fn csv(
        &mut self,
        name: &str,
        f: impl FnOnce(std::io::BufWriter<std::fs::File>) -> io::IoResult<()>,
    ) -> std::result::Result<(), Failure> {
        let p = self.dir.join(name);
        f(io::create(&p)?)?;
        self.written.push(p);
        Ok(())
    }

    fn done(self, converged: bool, message: String) -> Run {
        Ok(Outcome {
            converged,
            written: self.written,
            message,
        })
    }
}

fn model_name(m: ModelKind) -> &'static str {
    match m {
        ModelKind::Relaxed => "relaxed",
        ModelKind::Monodomain => "monodomain",
        ModelKind::Bidomain => "bidomain",
    }
}

fn run_forward(cfg: &RunConfig, problem: &ProblemSpec) -> Run {
    let pot = cfg.potential();
    let reaction = cfg.physics.reaction;
    let zero = ControlFunction::zero(problem);
    let traj: Trajectory = match cfg.physics.model {
        ModelKind::Relaxed if reaction.is_linear_zero() => forward_relaxed_linear(problem, &pot, &zero)?,
        ModelKind::Relaxed => forward_relaxed_nonlinear(problem, &reaction, &zero)?,
        ModelKind::Monodomain if reaction.is_linear_zero() => {
            forward_monodomain(problem, IonicTerm::Linear(&pot), &zero)?
        }
        ModelKind::Monodomain => forward_monodomain(problem, IonicTerm::Nonlinear(&reaction), &zero)?,
        ModelKind::Bidomain => {
            if cfg.physics.potential != 0.0 {
                return Err(Failure::Config(ConfigError {
                    pointer: "/physics/potential".into(),
                    message: "the bidomain model takes its ionic current from `reaction`; set potential to 0".into(),
                }));
            }
            let g_support = cfg
                .domain
                .g_region
                .as_ref()
                .unwrap_or(&cfg.domain.omega)
                .mask(problem.grid())?;
            let g = ControlFunction::zero_on(g_support, problem.n_steps());
            forward_bidomain(problem, &reaction, &zero, &g)?
        }
    };
    let grid = problem.grid();
    let mut w = Writer::new(&cfg.output.dir);
    w.csv("trajectory.csv", |f| io::write_trajectory_csv(f, problem, &traj))?;
    let tv = grid.norm(traj.terminal_v());
    let tue = grid.norm(traj.terminal_ue());
    w.json(
        "forward.json",
        &json!({
            "model": model_name(cfg.physics.model),
            "epsilon": problem.epsilon(),
            "n_steps": problem.n_steps(),
            "dt": problem.dt(),
            "terminal_v_norm": tv,
            "terminal_ue_norm": tue,
            "v_l2": traj.v_l2(grid),
        }),
    )?;
    w.done(true, format!("|v(T)| = {tv:e}, |ue(T)| = {tue:e}"))
}

/// Standard normal control values on `omega`, for the duality check.
fn random_control(problem: &ProblemSpec, seed: u64) -> crate::Result<ControlFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = problem.grid().len();
    let steps = (0..problem.n_steps())
        .map(|_| {
            (0..n)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        })
        .collect();
    ControlFunction::restricted(problem, steps)
}

fn run_adjoint(cfg: &RunConfig, problem: &ProblemSpec) -> Run {
    let pot = cfg.potential();
    let terminal = cfg.terminal_data(problem.grid())?;
    let adj = adjoint_solve(problem, &pot, &terminal)?;
    let gap = duality_gap(problem, &pot, &random_control(problem, cfg.seed)?, &terminal)?;
    let grid = problem.grid();
    let mut w = Writer::new(&cfg.output.dir);
    w.csv("adjoint.csv", |f| io::write_adjoint_csv(f, problem, &adj))?;
    w.json(
        "adjoint.json",
        &json!({
            "epsilon": problem.epsilon(),
            "phi0_norm": grid.norm(&adj.phi[0]),
            "phi_e0_norm": grid.norm(&adj.phi_e[0]),
            "duality_gap": gap.gap,
            "duality_scale": gap.scale,
            "duality_relative": gap.relative(),
            "seed": cfg.seed,
        }),
    )?;
    w.done(true, format!("relative duality gap {:e}", gap.relative()))
}

fn weights_for(cfg: &RunConfig, problem: &ProblemSpec, a_norm: f64) -> crate::Result<WeightSet> {
    cfg.weights.build(problem, a_norm)
}

fn weights_json(ws: Option<&WeightSet>) -> serde_json::Value {
    match ws {
        Some(w) => json!({"lambda": w.lambda(), "s": w.s(), "m": w.m(), "psi_norm": w.psi_norm()}),
        None => serde_json::Value::Null,
    }
}

fn write_control_outputs(
    w: &mut Writer<'_>,
    problem: &ProblemSpec,
    result: &ControlResult,
    traj: &Trajectory,
    weights: Option<&WeightSet>,
) -> std::result::Result<(), Failure> {
    w.csv("control.csv", |f| io::write_control_csv(f, problem, &result.control))?;
    w.csv("trajectory.csv", |f| io::write_trajectory_csv(f, problem, traj))?;
    w.json("control_result.json", &result.summary())?;
    w.json(
        "diagnostics.json",
        &json!({
            "functional_history": result.functional_history,
            "final_residual": result.final_residual,
            "lipschitz_estimate": result.lipschitz_estimate,
            "terminal_sum": result.terminal_sum(),
            "weights": weights_json(weights),
        }),
    )
}

fn run_control(cfg: &RunConfig, problem: &ProblemSpec) -> Run {
    let pot = cfg.potential();
    let hum = cfg.hum_config();
    let weights = match hum.mode {
        HumMode::Weighted => Some(weights_for(cfg, problem, pot.inf_norm())?),
        HumMode::Plain => None,
    };
    let result = synthesize_control(problem, &pot, weights.as_ref(), &hum)?;
    let traj = forward_relaxed_linear(problem, &pot, &result.control)?;
    let mut w = Writer::new(&cfg.output.dir);
    write_control_outputs(&mut w, problem, &result, &traj, weights.as_ref())?;
    let msg = format!(
        "|f| = {:e}, |v(T)| + |ue(T)| = {:e}, {} iterations",
        result.control_norm(),
        result.terminal_sum(),
        result.iterations
    );
    w.done(result.converged, msg)
}

fn run_nonlinear(cfg: &RunConfig, problem: &ProblemSpec) -> Run {
    let hum = cfg.hum_config();
    let reaction = cfg.physics.reaction;
    let (out, weights) = match reaction {
        Reaction::Cubic { c1, .. } => {
            let ws = weights_for(cfg, problem, c1)?;
            (
                nonlinear_control_cubic(problem, &reaction, &ws, &hum, &cfg.fixed_point)?,
                Some(ws),
            )
        }
        Reaction::Lipschitz { .. } | Reaction::None => (
            nonlinear_control_lipschitz(problem, &reaction, &hum, &cfg.fixed_point)?,
            None,
        ),
    };
    let mut w = Writer::new(&cfg.output.dir);
    write_control_outputs(&mut w, problem, &out.control, &out.validation, weights.as_ref())?;
    w.json(
        "nonlinear.json",
        &json!({
            "outer_iterations": out.outer_iterations,
            "outer_converged": out.outer_converged,
            "distance_history": out.distance_history,
            "linear_terminal_v_norm": out.linear_terminal_v_norm,
            "linear_terminal_ue_norm": out.linear_terminal_ue_norm,
            "terminal_v_norm": out.control.terminal_v_norm,
            "terminal_ue_norm": out.control.terminal_ue_norm,
            "gamma": cfg.fixed_point.gamma,
        }),
    )?;
    let msg = format!(
        "{} outer iterations, nonlinear |v(T)| + |ue(T)| = {:e}",
        out.outer_iterations,
        out.control.terminal_sum()
    );
    w.done(out.control.converged, msg)
}

fn run_sweep(cfg: &RunConfig, problem: &ProblemSpec, jobs: usize) -> Run {
    let pot = cfg.potential();
    let sc = SweepConfig {
        hum: cfg.hum_config(),
        observability: cfg.observability_options(),
        weights: cfg.weights.clone(),
        seed: cfg.seed,
        jobs,
        with_observability: true,
        with_certificates: true,
    };
    let report = epsilon_sweep(problem, &pot, &sc, &cfg.sweep.epsilons)?;
    let mut w = Writer::new(&cfg.output.dir);
    w.csv("sweep.csv", |f| io::write_sweep_csv(f, &report.rows))?;
    let converged = report.all_converged();
    w.json(
        "sweep.json",
        &json!({
            "metadata": report.metadata,
            "summary": {
                "all_converged": converged,
                "bound_ratio_spread": report.bound_ratio_spread(),
                "control_norm_slope": report.control_norm_slope(),
                "c_obs_slope": report.c_obs_slope(),
                "carleman_spread_M": report.carleman_spread(RhoVariant::Total),
                "carleman_spread_Mi": report.carleman_spread(RhoVariant::Intracellular),
            },
            "note": CERTIFICATE_NOTE,
        }),
    )?;
    let failed = report.rows.iter().filter(|r| !r.converged).count();
    w.done(converged, format!("{} rows, {failed} not converged", report.rows.len()))
}

fn run_observability(cfg: &RunConfig, problem: &ProblemSpec) -> Run {
    let est = estimate_observability_constant(problem, &cfg.potential(), &cfg.observability_options())?;
    let mut w = Writer::new(&cfg.output.dir);
    w.json(
        "observability.json",
        &json!({
            "epsilon": problem.epsilon(),
            "c_obs": est.c_obs,
            "iterations": est.iterations,
            "shift": est.shift,
            "trace_estimate": est.trace_estimate,
            "seed": cfg.seed,
        }),
    )?;
    w.done(
        true,
        format!("C_obs = {:e} after {} iterations", est.c_obs, est.iterations),
    )
}

fn run_carleman(cfg: &RunConfig, problem: &ProblemSpec) -> Run {
    let pot = cfg.potential();
    let ws = weights_for(cfg, problem, pot.inf_norm())?;
    let terminal = cfg.terminal_data(problem.grid())?;
    let carleman = carleman_certificate(problem, &pot, &ws, &terminal)?;
    let energy = energy_certificate(problem, &ws, &terminal)?;
    let check = check_weight_properties(&ws, problem.n_steps())?;
    let sides =
        |s: &crate::analysis::CertificateSides| json!({"ln_lhs": s.ln_lhs, "ln_rhs": s.ln_rhs, "ratio": s.ratio()});
    let probe = match cfg.terminal {
        TerminalSpec::Random => format!("standard normal nodal terminal data, seed {}", cfg.seed),
        TerminalSpec::Values { .. } => "configured terminal data".to_string(),
    };
    let mut w = Writer::new(&cfg.output.dir);
    w.json(
        "certificates.json",
        &json!({
            "note": CERTIFICATE_NOTE,
            "epsilon": problem.epsilon(),
            "probe": probe,
            "weights": weights_json(Some(&ws)),
            "carleman": {"M": sides(&carleman.total), "Mi": sides(&carleman.intracellular)},
            "energy": {
                "M": sides(&energy.total),
                "Mi": sides(&energy.intracellular),
                "ratio_without_epsilon_M": energy.ratio_without_epsilon(RhoVariant::Total),
                "ratio_without_epsilon_Mi": energy.ratio_without_epsilon(RhoVariant::Intracellular),
            },
            "weight_check": check,
            "weight_check_passed": check.passed(),
        }),
    )?;
    let fmt = |r: Option<f64>| r.map_or("undefined".to_string(), |x| format!("{x:e}"));
    let msg = format!(
        "Carleman ratio {} (M), {} (M_i); weight checks {}",
        fmt(carleman.total.ratio()),
        fmt(carleman.intracellular.ratio()),
        if check.passed() { "passed" } else { "FAILED" }
    );
    w.done(true, msg)
}
